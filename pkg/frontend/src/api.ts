// Client for the study server's JSON API. Payload parsing whitelists
// fields so nothing beyond the documented schema (in particular no model
// identities) can reach application state.

export interface Progress {
  answered: number;
  total: number;
}

export interface TaskView {
  taskId: string;
  originalImageUrl: string;
  candidateImageUrls: [string, string, string, string];
  progress: Progress;
}

export interface NextTaskPayload {
  task: TaskView | null;
  progress: Progress;
}

export interface ChoiceSubmission {
  task_id: string;
  annotator_id: string;
  displayed_choice: number;
}

export type SubmitResult =
  | { kind: "ok"; progress: Progress }
  | { kind: "conflict"; message: string }
  | { kind: "error"; message: string };

export class ApiError extends Error {}

function asRecord(value: unknown, what: string): Record<string, unknown> {
  if (typeof value !== "object" || value === null || Array.isArray(value)) {
    throw new ApiError(`${what} must be a JSON object`);
  }
  return value as Record<string, unknown>;
}

export function parseProgress(value: unknown): Progress {
  const doc = asRecord(value, "progress");
  const answered = doc["answered"];
  const total = doc["total"];
  if (typeof answered !== "number" || typeof total !== "number") {
    throw new ApiError("progress must have numeric answered/total");
  }
  return { answered, total };
}

export function parseTaskView(value: unknown): TaskView {
  const doc = asRecord(value, "task");
  const taskId = doc["task_id"];
  const original = doc["original_image_url"];
  const candidates = doc["candidate_image_urls"];
  if (typeof taskId !== "string" || taskId === "") {
    throw new ApiError("task_id must be a non-empty string");
  }
  if (typeof original !== "string") {
    throw new ApiError("original_image_url must be a string");
  }
  if (
    !Array.isArray(candidates) ||
    candidates.length !== 4 ||
    !candidates.every((url) => typeof url === "string")
  ) {
    throw new ApiError("candidate_image_urls must be 4 strings");
  }
  return {
    taskId,
    originalImageUrl: original,
    candidateImageUrls: [candidates[0], candidates[1], candidates[2], candidates[3]] as [
      string,
      string,
      string,
      string,
    ],
    progress: parseProgress(doc["progress"]),
  };
}

export function parseNextTaskPayload(value: unknown): NextTaskPayload {
  const doc = asRecord(value, "next-task payload");
  const task = doc["task"];
  return {
    task: task === null || task === undefined ? null : parseTaskView(task),
    progress: parseProgress(doc["progress"]),
  };
}

export class ApiClient {
  constructor(
    private readonly baseUrl: string = "",
    private readonly fetchFn: typeof fetch = fetch,
  ) {}

  async fetchNextTask(annotatorId: string): Promise<NextTaskPayload> {
    const url = `${this.baseUrl}/api/tasks/next?annotator=${encodeURIComponent(annotatorId)}`;
    const response = await this.fetchFn(url);
    if (!response.ok) {
      throw new ApiError(`next-task request failed with status ${response.status}`);
    }
    return parseNextTaskPayload(await response.json());
  }

  async submit(submission: ChoiceSubmission): Promise<SubmitResult> {
    let response: Response;
    try {
      response = await this.fetchFn(`${this.baseUrl}/api/responses`, {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(submission),
      });
    } catch (error) {
      return { kind: "error", message: `network failure: ${String(error)}` };
    }
    if (response.status === 409) {
      return { kind: "conflict", message: "already answered; moving on" };
    }
    if (!response.ok) {
      return { kind: "error", message: `submission rejected with status ${response.status}` };
    }
    try {
      const doc = asRecord(await response.json(), "submit response");
      return { kind: "ok", progress: parseProgress(doc["progress"]) };
    } catch (error) {
      return { kind: "error", message: `unreadable submit response: ${String(error)}` };
    }
  }
}
