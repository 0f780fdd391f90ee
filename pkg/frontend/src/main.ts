// DOM wiring: one Session drives the page; render() is a pure function
// of the latest snapshot except for image src assignment, which happens
// only when the task changes so load events fire exactly once per image.

import { ApiClient } from "./api.js";
import { IMAGE_SLOTS, Session, SessionState, canSubmit } from "./state.js";

const ANNOTATOR_KEY = "study-annotator-id";
const CHOICE_LABELS = ["A", "B", "C", "D"] as const;

function byId<T extends HTMLElement>(id: string): T {
  const element = document.getElementById(id);
  if (element === null) {
    throw new Error(`missing element #${id}`);
  }
  return element as T;
}

function show(element: HTMLElement, visible: boolean): void {
  element.hidden = !visible;
}

function main(): void {
  const startPanel = byId<HTMLElement>("start-panel");
  const annotatorInput = byId<HTMLInputElement>("annotator-input");
  const startButton = byId<HTMLButtonElement>("start-button");
  const studyPanel = byId<HTMLElement>("study-panel");
  const progressLine = byId<HTMLElement>("progress-line");
  const originalImage = byId<HTMLImageElement>("original-image");
  const grid = byId<HTMLElement>("candidate-grid");
  const notice = byId<HTMLElement>("notice");
  const submitButton = byId<HTMLButtonElement>("submit-button");
  const errorPanel = byId<HTMLElement>("error-panel");
  const errorMessage = byId<HTMLElement>("error-message");
  const retryButton = byId<HTMLButtonElement>("retry-button");
  const donePanel = byId<HTMLElement>("done-panel");
  const doneMessage = byId<HTMLElement>("done-message");

  let session: Session | null = null;
  let renderedTaskId: string | null = null;

  interface Cell {
    root: HTMLElement;
    image: HTMLImageElement;
    radio: HTMLInputElement;
    retry: HTMLButtonElement;
  }

  const cells: Cell[] = [];
  for (let position = 0; position < 4; position += 1) {
    const root = document.createElement("figure");
    root.className = "candidate";
    const caption = document.createElement("figcaption");
    const radio = document.createElement("input");
    radio.type = "radio";
    radio.name = "candidate";
    radio.value = String(position);
    const label = document.createElement("label");
    label.append(radio, ` ${CHOICE_LABELS[position]}`);
    caption.append(label);
    const image = document.createElement("img");
    image.alt = `Candidate ${CHOICE_LABELS[position]}`;
    const retry = document.createElement("button");
    retry.type = "button";
    retry.className = "image-retry";
    retry.textContent = "Image failed to load. Retry";
    retry.hidden = true;
    root.append(image, retry, caption);
    grid.append(root);
    cells.push({ root, image, radio, retry });

    const slot = position + 1;
    image.addEventListener("load", () => session?.imageLoaded(slot));
    image.addEventListener("error", () => session?.imageFailed(slot));
    radio.addEventListener("change", () => session?.select(position));
    retry.addEventListener("click", () => {
      session?.retryImage(slot);
      reloadImage(image);
    });
  }

  originalImage.addEventListener("load", () => session?.imageLoaded(0));
  originalImage.addEventListener("error", () => session?.imageFailed(0));
  byId<HTMLButtonElement>("original-retry").addEventListener("click", () => {
    session?.retryImage(0);
    reloadImage(originalImage);
  });

  function reloadImage(image: HTMLImageElement): void {
    const base = image.src.split("#")[0] ?? image.src;
    image.src = `${base}#retry-${Date.now()}`;
  }

  function render(state: SessionState): void {
    show(startPanel, state.phase === "idle");
    show(studyPanel, state.phase === "annotating" || state.phase === "submitting" || state.phase === "loading");
    show(errorPanel, state.phase === "error");
    show(donePanel, state.phase === "done");

    if (state.phase === "error") {
      errorMessage.textContent = state.errorMessage ?? "something went wrong";
    }
    if (state.phase === "done") {
      doneMessage.textContent = `All done. You answered ${state.progress.answered} of ${state.progress.total} questions.`;
    }

    progressLine.textContent = `${state.progress.answered} of ${state.progress.total} answered`;
    notice.textContent = state.notice ?? "";
    show(notice, state.notice !== null);

    const task = state.task;
    if (task !== null && task.taskId !== renderedTaskId) {
      renderedTaskId = task.taskId;
      originalImage.src = task.originalImageUrl;
      task.candidateImageUrls.forEach((url, position) => {
        const cell = cells[position];
        if (cell !== undefined) {
          cell.image.src = url;
          cell.radio.checked = false;
        }
      });
    }
    if (task === null) {
      renderedTaskId = null;
    }

    byId<HTMLButtonElement>("original-retry").hidden = !state.imagesFailed[0];
    cells.forEach((cell, position) => {
      cell.retry.hidden = !state.imagesFailed[position + 1];
      cell.radio.disabled = state.phase !== "annotating";
      cell.radio.checked = state.selected === position;
    });
    submitButton.disabled = !canSubmit(state);
  }

  function startSession(annotatorId: string): void {
    localStorage.setItem(ANNOTATOR_KEY, annotatorId);
    session = new Session(new ApiClient("", fetch.bind(window)), annotatorId, render);
    void session.start();
  }

  startButton.addEventListener("click", () => {
    const annotatorId = annotatorInput.value.trim();
    if (annotatorId !== "") {
      startSession(annotatorId);
    }
  });
  annotatorInput.addEventListener("keydown", (event) => {
    if (event.key === "Enter") {
      startButton.click();
    }
    event.stopPropagation();
  });

  submitButton.addEventListener("click", () => void session?.submit());
  retryButton.addEventListener("click", () => void session?.retry());
  document.addEventListener("keydown", (event) => {
    if (event.target instanceof HTMLInputElement && event.target.type === "text") {
      return;
    }
    void session?.handleKey(event.key);
  });

  // Refresh resumes where the server says this annotator left off.
  const stored = localStorage.getItem(ANNOTATOR_KEY);
  if (stored !== null && stored !== "") {
    annotatorInput.value = stored;
    startSession(stored);
  }

  if (IMAGE_SLOTS !== 1 + cells.length) {
    throw new Error("image slot count out of sync with the grid");
  }
}

main();
