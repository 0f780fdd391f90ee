// Session state machine for one annotator. All server interaction goes
// through a StudyApi so tests can drive the flow with a scripted fake;
// the server stays authoritative for which task comes next.

import type { NextTaskPayload, Progress, SubmitResult, TaskView } from "./api.js";

export interface StudyApi {
  fetchNextTask(annotatorId: string): Promise<NextTaskPayload>;
  submit(submission: {
    task_id: string;
    annotator_id: string;
    displayed_choice: number;
  }): Promise<SubmitResult>;
}

export type Phase = "idle" | "loading" | "annotating" | "submitting" | "done" | "error";

// Slot 0 is the original image, slots 1..4 the candidates in display order.
export const IMAGE_SLOTS = 5;

export interface SessionState {
  phase: Phase;
  annotatorId: string;
  task: TaskView | null;
  progress: Progress;
  selected: number | null;
  imagesLoaded: boolean[];
  imagesFailed: boolean[];
  notice: string | null;
  errorMessage: string | null;
}

export function canSubmit(state: SessionState): boolean {
  return (
    state.phase === "annotating" &&
    state.selected !== null &&
    state.imagesLoaded.every((loaded) => loaded) &&
    !state.imagesFailed.some((failed) => failed)
  );
}

export type SessionListener = (state: SessionState) => void;

export class Session {
  private state: SessionState;

  constructor(
    private readonly api: StudyApi,
    annotatorId: string,
    private readonly listener: SessionListener = () => {},
  ) {
    this.state = {
      phase: "idle",
      annotatorId,
      task: null,
      progress: { answered: 0, total: 0 },
      selected: null,
      imagesLoaded: new Array(IMAGE_SLOTS).fill(false),
      imagesFailed: new Array(IMAGE_SLOTS).fill(false),
      notice: null,
      errorMessage: null,
    };
  }

  snapshot(): SessionState {
    return {
      ...this.state,
      progress: { ...this.state.progress },
      imagesLoaded: [...this.state.imagesLoaded],
      imagesFailed: [...this.state.imagesFailed],
    };
  }

  private update(patch: Partial<SessionState>): void {
    this.state = { ...this.state, ...patch };
    this.listener(this.snapshot());
  }

  async start(): Promise<void> {
    await this.advance();
  }

  private async advance(): Promise<void> {
    this.update({ phase: "loading", task: null, selected: null, errorMessage: null });
    let payload: NextTaskPayload;
    try {
      payload = await this.api.fetchNextTask(this.state.annotatorId);
    } catch (error) {
      this.update({ phase: "error", errorMessage: String(error) });
      return;
    }
    if (payload.task === null) {
      this.update({ phase: "done", task: null, progress: payload.progress });
      return;
    }
    this.update({
      phase: "annotating",
      task: payload.task,
      progress: payload.progress,
      selected: null,
      imagesLoaded: new Array(IMAGE_SLOTS).fill(false),
      imagesFailed: new Array(IMAGE_SLOTS).fill(false),
    });
  }

  async retry(): Promise<void> {
    if (this.state.phase !== "error") {
      return;
    }
    await this.advance();
  }

  select(displayedChoice: number): void {
    if (this.state.phase !== "annotating") {
      return;
    }
    if (!Number.isInteger(displayedChoice) || displayedChoice < 0 || displayedChoice > 3) {
      return;
    }
    this.update({ selected: displayedChoice });
  }

  imageLoaded(slot: number): void {
    if (slot < 0 || slot >= IMAGE_SLOTS) {
      return;
    }
    const imagesLoaded = [...this.state.imagesLoaded];
    const imagesFailed = [...this.state.imagesFailed];
    imagesLoaded[slot] = true;
    imagesFailed[slot] = false;
    this.update({ imagesLoaded, imagesFailed });
  }

  imageFailed(slot: number): void {
    if (slot < 0 || slot >= IMAGE_SLOTS) {
      return;
    }
    const imagesFailed = [...this.state.imagesFailed];
    imagesFailed[slot] = true;
    this.update({ imagesFailed });
  }

  retryImage(slot: number): void {
    if (slot < 0 || slot >= IMAGE_SLOTS) {
      return;
    }
    const imagesLoaded = [...this.state.imagesLoaded];
    const imagesFailed = [...this.state.imagesFailed];
    imagesLoaded[slot] = false;
    imagesFailed[slot] = false;
    this.update({ imagesLoaded, imagesFailed });
  }

  // Keyboard protocol: digits 1-4 pick grid positions 0-3, Enter submits.
  async handleKey(key: string): Promise<void> {
    if (key >= "1" && key <= "4") {
      this.select(Number(key) - 1);
      return;
    }
    if (key === "Enter") {
      await this.submit();
    }
  }

  async submit(): Promise<void> {
    if (!canSubmit(this.state) || this.state.task === null) {
      return;
    }
    const submission = {
      task_id: this.state.task.taskId,
      annotator_id: this.state.annotatorId,
      displayed_choice: this.state.selected as number,
    };
    this.update({ phase: "submitting", notice: null });
    const result = await this.api.submit(submission);
    if (result.kind === "ok") {
      this.update({ progress: result.progress, notice: null });
      await this.advance();
      return;
    }
    if (result.kind === "conflict") {
      // The server already has an answer for this pair; tell the
      // annotator without blocking and move to the next task.
      this.update({ notice: result.message });
      await this.advance();
      return;
    }
    // Network or server trouble: keep the selection so a second submit
    // attempt needs no re-entry.
    this.update({ phase: "annotating", notice: result.message });
  }
}
