import { describe, expect, test, vi } from "vitest";

import {
  ApiClient,
  ApiError,
  parseNextTaskPayload,
  parseTaskView,
} from "../src/api.js";

const GOOD_TASK = {
  task_id: "t0",
  original_image_url: "/images/orig0.png",
  candidate_image_urls: [
    "/images/c0.png",
    "/images/c1.png",
    "/images/c2.png",
    "/images/c3.png",
  ],
  progress: { answered: 1, total: 6 },
};

describe("parseNextTaskPayload", () => {
  test("parses a task payload", () => {
    const payload = parseNextTaskPayload({
      task: GOOD_TASK,
      progress: { answered: 1, total: 6 },
    });
    expect(payload.task?.taskId).toBe("t0");
    expect(payload.task?.originalImageUrl).toBe("/images/orig0.png");
    expect(payload.task?.candidateImageUrls).toHaveLength(4);
    expect(payload.progress).toEqual({ answered: 1, total: 6 });
  });

  test("null task means the study is finished", () => {
    const payload = parseNextTaskPayload({
      task: null,
      progress: { answered: 6, total: 6 },
    });
    expect(payload.task).toBeNull();
  });

  test.each([
    [{ task: GOOD_TASK }],
    [{ task: { ...GOOD_TASK, task_id: "" }, progress: GOOD_TASK.progress }],
    [
      {
        task: { ...GOOD_TASK, candidate_image_urls: ["/a.png"] },
        progress: GOOD_TASK.progress,
      },
    ],
    [{ task: GOOD_TASK, progress: { answered: "1", total: 6 } }],
    [[1, 2, 3]],
    ["not an object"],
  ])("rejects malformed payload %#", (payload) => {
    expect(() => parseNextTaskPayload(payload)).toThrow(ApiError);
  });

  test("undocumented fields never reach application state", () => {
    const leaky = {
      ...GOOD_TASK,
      models: ["model-alpha", "model-beta"],
      machine_choice: 2,
      display_order: [3, 0, 1, 2],
    };
    const view = parseTaskView(leaky);
    const serialized = JSON.stringify(view);
    expect(serialized).not.toContain("model");
    expect(serialized).not.toContain("machine_choice");
    expect(serialized).not.toContain("display_order");
    expect(Object.keys(view).sort()).toEqual([
      "candidateImageUrls",
      "originalImageUrl",
      "progress",
      "taskId",
    ]);
  });
});

function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

describe("ApiClient", () => {
  test("fetchNextTask hits the endpoint with the encoded annotator", async () => {
    const fetchFn = vi.fn(async () =>
      jsonResponse({ task: null, progress: { answered: 0, total: 0 } }),
    );
    const client = new ApiClient("", fetchFn as unknown as typeof fetch);
    const payload = await client.fetchNextTask("annotator one");
    expect(payload.task).toBeNull();
    expect(fetchFn).toHaveBeenCalledWith("/api/tasks/next?annotator=annotator%20one");
  });

  test("fetchNextTask throws on a non-ok status", async () => {
    const fetchFn = vi.fn(async () => jsonResponse({ error: "nope" }, 400));
    const client = new ApiClient("", fetchFn as unknown as typeof fetch);
    await expect(client.fetchNextTask("x")).rejects.toThrow(ApiError);
  });

  const SUBMISSION = { task_id: "t0", annotator_id: "a", displayed_choice: 2 };

  test("submit posts JSON and returns the new progress", async () => {
    const fetchFn = vi.fn(async () =>
      jsonResponse({ ok: true, progress: { answered: 2, total: 6 } }),
    );
    const client = new ApiClient("", fetchFn as unknown as typeof fetch);
    const result = await client.submit(SUBMISSION);
    expect(result).toEqual({ kind: "ok", progress: { answered: 2, total: 6 } });
    const [url, init] = fetchFn.mock.calls[0] as unknown as [string, RequestInit];
    expect(url).toBe("/api/responses");
    expect(init.method).toBe("POST");
    expect(JSON.parse(init.body as string)).toEqual(SUBMISSION);
  });

  test("submit maps 409 to a conflict result", async () => {
    const fetchFn = vi.fn(async () => jsonResponse({ error: "duplicate" }, 409));
    const client = new ApiClient("", fetchFn as unknown as typeof fetch);
    const result = await client.submit(SUBMISSION);
    expect(result.kind).toBe("conflict");
  });

  test("submit maps other failures to error results", async () => {
    const badStatus = new ApiClient(
      "",
      (async () => jsonResponse({ error: "boom" }, 500)) as unknown as typeof fetch,
    );
    expect((await badStatus.submit(SUBMISSION)).kind).toBe("error");

    const network = new ApiClient(
      "",
      (async () => {
        throw new Error("connection refused");
      }) as unknown as typeof fetch,
    );
    const result = await network.submit(SUBMISSION);
    expect(result.kind).toBe("error");
    expect(result.kind === "error" && result.message).toContain("connection refused");

    const unreadable = new ApiClient(
      "",
      (async () => new Response("not json", { status: 200 })) as unknown as typeof fetch,
    );
    expect((await unreadable.submit(SUBMISSION)).kind).toBe("error");
  });

  test("base url prefixes both endpoints", async () => {
    const fetchFn = vi.fn(async () =>
      jsonResponse({ task: null, progress: { answered: 0, total: 0 } }),
    );
    const client = new ApiClient("http://localhost:8765", fetchFn as unknown as typeof fetch);
    await client.fetchNextTask("a");
    expect(fetchFn.mock.calls[0]?.[0]).toBe(
      "http://localhost:8765/api/tasks/next?annotator=a",
    );
  });
});
