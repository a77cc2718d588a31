import { beforeEach, describe, expect, it, vi } from "vitest";

import { Api, ApiError } from "../src/api.js";
import { App } from "../src/app.js";

type Stub = {
  [K in keyof Api]: Api[K] extends (...a: infer A) => infer R
    ? ReturnType<typeof vi.fn<(...a: A) => R>>
    : Api[K];
};

function stubApi(): Stub {
  return {
    base: "http://stub",
    listModels: vi.fn().mockResolvedValue([]),
    createModel: vi.fn(),
    listConfigurations: vi.fn().mockResolvedValue([]),
    createConfiguration: vi.fn(),
    listDeployments: vi.fn().mockResolvedValue([]),
    createDeployment: vi.fn(),
    listResults: vi.fn().mockResolvedValue([]),
    downloadUrl: vi.fn((id: number) => `http://stub/results/${id}/download`),
    listInferences: vi.fn().mockResolvedValue([]),
    createInference: vi.fn(),
    deleteInference: vi.fn(),
    listDatastreams: vi.fn().mockResolvedValue([]),
    replayDatastream: vi.fn(),
  } as unknown as Stub;
}

function makeApp(api: Stub): App {
  const root = document.createElement("div");
  document.body.appendChild(root);
  return new App(api as unknown as Api, root);
}

function submit(form: HTMLFormElement): void {
  form.dispatchEvent(new Event("submit", { cancelable: true, bubbles: true }));
}

function setValue(root: ParentNode, selector: string, value: string): void {
  (root.querySelector(selector) as HTMLInputElement).value = value;
}

async function flush(): Promise<void> {
  await new Promise((r) => setTimeout(r, 0));
}

beforeEach(() => {
  document.body.innerHTML = "";
});

describe("polling and rendering", () => {
  it("shows empty-state rows before anything exists", async () => {
    const app = makeApp(stubApi());
    await app.poll();
    expect(app.root.querySelector("#models-table .empty")?.textContent).toContain(
      "no models yet",
    );
    expect(app.root.querySelector("#deployments .empty")?.textContent).toContain(
      "no deployments",
    );
  });

  it("renders models returned by the backend", async () => {
    const api = stubApi();
    api.listModels.mockResolvedValue([
      { id: 1, name: "classifier", description: "d", spec: "{}" },
    ]);
    const app = makeApp(api);
    await app.poll();
    const row = app.root.querySelector("[data-model='1']");
    expect(row?.textContent).toContain("classifier");
  });

  it("marks the view stale when a poll fails, and clears it on recovery", async () => {
    const api = stubApi();
    api.listModels.mockRejectedValueOnce(new TypeError("fetch failed"));
    const app = makeApp(api);
    await app.poll();
    expect((app.root.querySelector("#stale") as HTMLElement).hidden).toBe(false);
    await app.poll();
    expect((app.root.querySelector("#stale") as HTMLElement).hidden).toBe(true);
  });

  it("coalesces overlapping polls instead of stacking requests", async () => {
    const api = stubApi();
    let release!: () => void;
    api.listModels.mockImplementation(
      () => new Promise((r) => (release = () => r([]))),
    );
    const app = makeApp(api);
    const first = app.poll();
    await flush();
    await app.poll();
    await app.poll();
    expect(api.listModels).toHaveBeenCalledTimes(1);
    release();
    await first;
  });
});

describe("model form", () => {
  it("rejects an empty form client-side without calling the backend", () => {
    const api = stubApi();
    const app = makeApp(api);
    submit(app.root.querySelector("#model-form")!);
    expect(app.root.querySelector("#model-errors")?.textContent).toContain("required");
    expect(api.createModel).not.toHaveBeenCalled();
  });

  it("shows a backend rejection inline and creates nothing", async () => {
    const api = stubApi();
    api.createModel.mockRejectedValue(
      new ApiError(400, "InvalidSpec", "layers must be a non-empty list"),
    );
    const app = makeApp(api);
    setValue(app.root, "#model-form [name=name]", "bad");
    setValue(app.root, "#model-form [name=spec]", '{"layers": []}');
    submit(app.root.querySelector("#model-form")!);
    await flush();
    expect(app.root.querySelector("#model-errors")?.textContent).toContain(
      "layers must be a non-empty list",
    );
    expect(app.root.querySelector("#models-table [data-model]")).toBeNull();
  });

  it("keeps what was typed and raises the banner when the backend is down", async () => {
    const api = stubApi();
    api.createModel.mockRejectedValue(new TypeError("fetch failed"));
    const app = makeApp(api);
    setValue(app.root, "#model-form [name=name]", "keep-me");
    setValue(app.root, "#model-form [name=spec]", "{}");
    submit(app.root.querySelector("#model-form")!);
    await flush();
    expect((app.root.querySelector("#banner") as HTMLElement).hidden).toBe(false);
    expect(
      (app.root.querySelector("#model-form [name=name]") as HTMLInputElement).value,
    ).toBe("keep-me");
  });
});

describe("deployment dashboard", () => {
  const deployment = {
    id: 1,
    configuration_id: 1,
    training_config: {},
    jobs: {} as Record<string, unknown>,
  };

  it("renders a failed job in the failed state with its restart count", async () => {
    const api = stubApi();
    api.listDeployments.mockResolvedValue([
      { ...deployment, jobs: { "3": { state: "failed", restart_count: 4 } } },
    ]);
    const app = makeApp(api);
    await app.poll();
    const cell = app.root.querySelector("[data-deployment='1'] .state-failed");
    expect(cell?.textContent).toContain("failed");
    expect(cell?.textContent).toContain("4 restarts");
  });

  it("shows metrics, a download link and a deploy button once a result uploads", async () => {
    const api = stubApi();
    api.listDeployments.mockResolvedValue([
      { ...deployment, jobs: { "3": { state: "uploaded", restart_count: 0, result_id: 9 } } },
    ]);
    api.listResults.mockResolvedValue([
      {
        id: 9,
        deployment_id: 1,
        model_id: 3,
        metrics: {
          training: { loss: 0.31, accuracy: 0.91 },
          evaluation: { loss: 0.35, accuracy: 0.89 },
        },
        status: "uploaded",
      },
    ]);
    const app = makeApp(api);
    await app.poll();
    const row = app.root.querySelector("[data-deployment='1'][data-model='3']")!;
    expect(row.textContent).toContain("0.8900");
    expect(row.querySelector("a")?.getAttribute("href")).toBe(
      "http://stub/results/9/download",
    );
    expect(row.querySelector("[data-deploy-result='9']")).not.toBeNull();
  });

  it("opens the inference form pre-filled with the logged input format", async () => {
    const api = stubApi();
    api.listDeployments.mockResolvedValue([
      { ...deployment, jobs: { "3": { state: "uploaded", restart_count: 0, result_id: 9 } } },
    ]);
    api.listResults.mockResolvedValue([
      { id: 9, deployment_id: 1, model_id: 3, metrics: {}, status: "uploaded" },
    ]);
    api.listDatastreams.mockResolvedValue([
      {
        id: 2,
        deployment_id: 1,
        topics: ["t:0:0:10"],
        input_format: "RAW",
        input_config: "{}",
        validation_rate: 0.2,
        total_msg: 10,
      },
    ]);
    const app = makeApp(api);
    await app.poll();
    (app.root.querySelector("[data-deploy-result='9']") as HTMLElement).click();
    const panel = app.root.querySelector("#infer-panel") as HTMLElement;
    expect(panel.hidden).toBe(false);
    expect(panel.querySelector(".infer-format")?.textContent).toContain("RAW");
    expect(
      (panel.querySelector("[name=result_id]") as HTMLInputElement).value,
    ).toBe("9");
  });
});

describe("datastream replay", () => {
  const stream = {
    id: 5,
    deployment_id: 1,
    topics: ["kafka-ml:0:0:100"],
    input_format: "RAW",
    input_config: "{}",
    validation_rate: 0.2,
    total_msg: 100,
  };

  it("requires picking a target before calling the backend", async () => {
    const api = stubApi();
    api.listDatastreams.mockResolvedValue([stream]);
    const app = makeApp(api);
    await app.poll();
    (app.root.querySelector("[data-replay-stream='5']") as HTMLElement).click();
    expect(api.replayDatastream).not.toHaveBeenCalled();
    expect(app.root.querySelector("#toast")?.textContent).toContain("target");
  });

  it("reports an expired stream distinctly from other failures", async () => {
    const api = stubApi();
    api.listDatastreams.mockResolvedValue([stream]);
    api.listDeployments.mockResolvedValue([
      { id: 2, configuration_id: 1, training_config: {}, jobs: {} },
    ]);
    api.replayDatastream.mockRejectedValue(
      new ApiError(410, "StreamExpired", "slice kafka-ml:0:0:100 expired"),
    );
    const app = makeApp(api);
    await app.poll();
    const row = app.root.querySelector("[data-datastream='5']")!;
    (row.querySelector("select") as HTMLSelectElement).value = "2";
    (row.querySelector("[data-replay-stream='5']") as HTMLElement).click();
    await flush();
    const toast = app.root.querySelector("#toast")!;
    expect(toast.className).toContain("expired");
    expect(toast.textContent).toContain("expired");
  });

  it("confirms a successful replay", async () => {
    const api = stubApi();
    api.listDatastreams.mockResolvedValue([stream]);
    api.listDeployments.mockResolvedValue([
      { id: 2, configuration_id: 1, training_config: {}, jobs: {} },
    ]);
    api.replayDatastream.mockResolvedValue({ ok: true });
    const app = makeApp(api);
    await app.poll();
    const row = app.root.querySelector("[data-datastream='5']")!;
    (row.querySelector("select") as HTMLSelectElement).value = "2";
    (row.querySelector("[data-replay-stream='5']") as HTMLElement).click();
    await flush();
    expect(api.replayDatastream).toHaveBeenCalledWith(5, 2);
    expect(app.root.querySelector("#toast")?.textContent).toContain("replayed");
  });
});
