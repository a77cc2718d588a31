// Single-page console: entity caches refreshed by polling, forms that post
// back to the REST API, and tables rendering whatever the backend says.

import {
  Api,
  ApiError,
  Configuration,
  Datastream,
  Deployment,
  Inference,
  Model,
  TrainingResult,
} from "./api.js";

interface ViewState {
  models: Model[];
  configurations: Configuration[];
  deployments: Deployment[];
  results: TrainingResult[];
  inferences: Inference[];
  datastreams: Datastream[];
}

const EMPTY: ViewState = {
  models: [],
  configurations: [],
  deployments: [],
  results: [],
  inferences: [],
  datastreams: [],
};

function el<T extends HTMLElement>(root: ParentNode, selector: string): T {
  const node = root.querySelector(selector);
  if (!node) throw new Error(`missing element ${selector}`);
  return node as T;
}

function fmt(n: number | undefined): string {
  return n === undefined ? "—" : n.toFixed(4);
}

function escapeHtml(s: string): string {
  return s.replace(/[&<>"]/g, (c) => ({ "&": "&amp;", "<": "&lt;", ">": "&gt;", '"': "&quot;" })[c]!);
}

export class App {
  state: ViewState = { ...EMPTY };
  pollMs: number;
  private pollInFlight = false;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    public api: Api,
    public root: HTMLElement,
    pollMs = 2000,
  ) {
    this.pollMs = pollMs;
    this.root.innerHTML = LAYOUT;
    this.wireForms();
  }

  start(): void {
    void this.poll();
    this.timer = setInterval(() => void this.poll(), this.pollMs);
  }

  stop(): void {
    if (this.timer) clearInterval(this.timer);
    this.timer = null;
  }

  /** One refresh of every entity cache; overlapping calls coalesce. */
  async poll(): Promise<void> {
    if (this.pollInFlight) return;
    this.pollInFlight = true;
    try {
      const [models, configurations, deployments, results, inferences, datastreams] =
        await Promise.all([
          this.api.listModels(),
          this.api.listConfigurations(),
          this.api.listDeployments(),
          this.api.listResults(),
          this.api.listInferences(),
          this.api.listDatastreams(),
        ]);
      this.state = { models, configurations, deployments, results, inferences, datastreams };
      el(this.root, "#stale").hidden = true;
      this.render();
    } catch {
      el(this.root, "#stale").hidden = false;
    } finally {
      this.pollInFlight = false;
    }
  }

  toast(message: string, kind: "ok" | "error" | "expired" = "ok"): void {
    const box = el(this.root, "#toast");
    box.textContent = message;
    box.className = `toast ${kind}`;
    box.hidden = false;
  }

  private banner(message: string): void {
    const banner = el(this.root, "#banner");
    el(banner, ".banner-text").textContent = message;
    banner.hidden = false;
  }

  private async guarded(action: () => Promise<void>, errorBox?: HTMLElement): Promise<void> {
    if (errorBox) errorBox.textContent = "";
    el(this.root, "#banner").hidden = true;
    try {
      await action();
      void this.poll();
    } catch (err) {
      if (err instanceof ApiError) {
        if (errorBox) errorBox.textContent = `${err.code}: ${err.message}`;
        else this.toast(`${err.code}: ${err.message}`, "error");
      } else {
        // network-level failure: keep the form as typed, offer retry
        this.banner("backend unreachable — check the control plane and retry");
      }
    }
  }

  private wireForms(): void {
    el<HTMLButtonElement>(this.root, "#banner .retry").addEventListener("click", () => {
      el(this.root, "#banner").hidden = true;
      void this.poll();
    });

    const modelForm = el<HTMLFormElement>(this.root, "#model-form");
    modelForm.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const name = el<HTMLInputElement>(modelForm, "[name=name]").value.trim();
      const description = el<HTMLInputElement>(modelForm, "[name=description]").value.trim();
      const spec = el<HTMLTextAreaElement>(modelForm, "[name=spec]").value.trim();
      const errors = el(this.root, "#model-errors");
      if (!name || !spec) {
        errors.textContent = "name and spec are required";
        return;
      }
      void this.guarded(async () => {
        await this.api.createModel(name, description, spec);
        modelForm.reset();
      }, errors);
    });

    const configForm = el<HTMLFormElement>(this.root, "#config-form");
    configForm.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const name = el<HTMLInputElement>(configForm, "[name=name]").value.trim();
      const raw = el<HTMLInputElement>(configForm, "[name=model_ids]").value.trim();
      const errors = el(this.root, "#config-errors");
      const ids = raw.split(",").map((s) => parseInt(s.trim(), 10));
      if (!raw || ids.some(isNaN)) {
        errors.textContent = "model ids must be a comma-separated list of numbers";
        return;
      }
      void this.guarded(async () => {
        await this.api.createConfiguration(name, ids);
        configForm.reset();
      }, errors);
    });

    const deployForm = el<HTMLFormElement>(this.root, "#deploy-form");
    deployForm.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const cfgId = parseInt(el<HTMLInputElement>(deployForm, "[name=configuration_id]").value, 10);
      const rawTc = el<HTMLTextAreaElement>(deployForm, "[name=training_config]").value.trim() || "{}";
      const errors = el(this.root, "#deploy-errors");
      let tc: unknown;
      try {
        tc = JSON.parse(rawTc);
      } catch {
        errors.textContent = "training config must be valid JSON";
        return;
      }
      if (isNaN(cfgId)) {
        errors.textContent = "configuration id is required";
        return;
      }
      void this.guarded(async () => {
        await this.api.createDeployment(cfgId, tc);
        deployForm.reset();
      }, errors);
    });

    const inferForm = el<HTMLFormElement>(this.root, "#infer-form");
    inferForm.addEventListener("submit", (ev) => {
      ev.preventDefault();
      const resultId = parseInt(el<HTMLInputElement>(inferForm, "[name=result_id]").value, 10);
      const replicas = parseInt(el<HTMLInputElement>(inferForm, "[name=replicas]").value, 10);
      const input = el<HTMLInputElement>(inferForm, "[name=input_topic]").value.trim();
      const output = el<HTMLInputElement>(inferForm, "[name=output_topic]").value.trim();
      const errors = el(this.root, "#infer-errors");
      if (isNaN(resultId) || isNaN(replicas) || replicas < 1 || !input || !output) {
        errors.textContent = "result, replicas ≥ 1, input and output topics are required";
        return;
      }
      void this.guarded(async () => {
        await this.api.createInference(resultId, replicas, input, output);
        el(this.root, "#infer-panel").hidden = true;
      }, errors);
    });

    // delegated clicks: deploy-for-inference, download, replay, stop replicas
    this.root.addEventListener("click", (ev) => {
      const target = ev.target as HTMLElement;
      if (target.matches("[data-deploy-result]")) {
        this.openInferenceForm(parseInt(target.dataset.deployResult!, 10));
      } else if (target.matches("[data-replay-stream]")) {
        this.replay(parseInt(target.dataset.replayStream!, 10), target);
      } else if (target.matches("[data-stop-inference]")) {
        void this.guarded(() => this.api.deleteInference(parseInt(target.dataset.stopInference!, 10)));
      }
    });
  }

  /** Pre-fill the inference form; format/config are shown read-only. */
  private openInferenceForm(resultId: number): void {
    const result = this.state.results.find((r) => r.id === resultId);
    const streams = this.state.datastreams.filter(
      (d) => d.deployment_id === result?.deployment_id,
    );
    const stream = streams[streams.length - 1];
    const panel = el(this.root, "#infer-panel");
    el<HTMLInputElement>(panel, "[name=result_id]").value = String(resultId);
    el(panel, ".infer-format").textContent = stream
      ? `${stream.input_format} ${stream.input_config}`
      : "no datastream logged for this deployment";
    panel.hidden = false;
  }

  private replay(streamId: number, button: HTMLElement): void {
    const select = el<HTMLSelectElement>(
      button.closest("tr")!,
      "select[name=replay_target]",
    );
    if (!select.value) {
      this.toast("pick a target deployment before replaying", "error");
      return;
    }
    const target = parseInt(select.value, 10);
    void (async () => {
      try {
        await this.api.replayDatastream(streamId, target);
        this.toast(`replayed stream ${streamId} to deployment ${target}`, "ok");
        void this.poll();
      } catch (err) {
        if (err instanceof ApiError && err.code === "StreamExpired") {
          this.toast(`stream ${streamId} expired: aged out of retention`, "expired");
        } else if (err instanceof ApiError) {
          this.toast(`${err.code}: ${err.message}`, "error");
        } else {
          this.banner("backend unreachable — check the control plane and retry");
        }
      }
    })();
  }

  // ---------------------------------------------------------------- rendering

  render(): void {
    this.renderModels();
    this.renderConfigurations();
    this.renderDeployments();
    this.renderInferences();
    this.renderDatastreams();
  }

  private renderModels(): void {
    const rows = this.state.models
      .map(
        (m) =>
          `<tr data-model="${m.id}"><td>${m.id}</td><td>${escapeHtml(m.name)}</td>` +
          `<td>${escapeHtml(m.description)}</td><td><code>${escapeHtml(m.spec)}</code></td></tr>`,
      )
      .join("");
    el(this.root, "#models-table tbody").innerHTML =
      rows || `<tr class="empty"><td colspan="4">no models yet</td></tr>`;
  }

  private renderConfigurations(): void {
    const rows = this.state.configurations
      .map(
        (c) =>
          `<tr data-config="${c.id}"><td>${c.id}</td><td>${escapeHtml(c.name)}</td>` +
          `<td>${c.model_ids.join(", ")}</td></tr>`,
      )
      .join("");
    el(this.root, "#configs-table tbody").innerHTML =
      rows || `<tr class="empty"><td colspan="3">no configurations yet</td></tr>`;
  }

  private renderDeployments(): void {
    const box = el(this.root, "#deployments");
    if (this.state.deployments.length === 0) {
      box.innerHTML = `<p class="empty">no deployments yet — create one above</p>`;
      return;
    }
    box.innerHTML = this.state.deployments
      .map((dep) => {
        const jobs = Object.entries(dep.jobs)
          .map(([modelId, job]) => {
            const result = this.state.results.find(
              (r) => r.deployment_id === dep.id && r.model_id === Number(modelId),
            );
            const training = result?.metrics.training ?? {};
            const evaluation = result?.metrics.evaluation ?? {};
            const actions = result
              ? `<a href="${this.api.downloadUrl(result.id)}" download>Download</a> ` +
                `<button data-deploy-result="${result.id}">Deploy</button>`
              : "";
            return (
              `<tr data-deployment="${dep.id}" data-model="${modelId}" data-state="${job.state}">` +
              `<td>${modelId}</td>` +
              `<td class="state state-${job.state}">${job.state}` +
              (job.state === "failed" ? ` (${job.restart_count} restarts)` : "") +
              `</td>` +
              `<td>${fmt(training.loss)}</td><td>${fmt(training.accuracy)}</td>` +
              `<td>${fmt(evaluation.loss)}</td><td>${fmt(evaluation.accuracy)}</td>` +
              `<td>${actions}</td></tr>`
            );
          })
          .join("");
        return (
          `<div class="deployment" data-deployment="${dep.id}">` +
          `<h3>deployment ${dep.id} · configuration ${dep.configuration_id}</h3>` +
          `<table><thead><tr><th>model</th><th>state</th><th>train loss</th>` +
          `<th>train acc</th><th>eval loss</th><th>eval acc</th><th></th></tr></thead>` +
          `<tbody>${jobs}</tbody></table></div>`
        );
      })
      .join("");
  }

  private renderInferences(): void {
    const rows = this.state.inferences
      .map(
        (inf) =>
          `<tr data-inference="${inf.id}"><td>${inf.id}</td><td>${inf.result_id}</td>` +
          `<td>${inf.replicas}</td><td>${escapeHtml(inf.input_topic)} → ${escapeHtml(inf.output_topic)}</td>` +
          `<td>${inf.replica_pids.length} live</td>` +
          `<td><button data-stop-inference="${inf.id}">Stop</button></td></tr>`,
      )
      .join("");
    el(this.root, "#inferences-table tbody").innerHTML =
      rows || `<tr class="empty"><td colspan="6">no inference deployments</td></tr>`;
  }

  private renderDatastreams(): void {
    const options = this.state.deployments
      .map((d) => `<option value="${d.id}">deployment ${d.id}</option>`)
      .join("");
    const rows = this.state.datastreams
      .map(
        (s) =>
          `<tr data-datastream="${s.id}"><td>${s.id}</td><td>${s.deployment_id}</td>` +
          `<td>${s.topics.map(escapeHtml).join("<br>")}</td><td>${s.input_format}</td>` +
          `<td>${s.total_msg}</td>` +
          `<td><select name="replay_target"><option value="">target…</option>${options}</select> ` +
          `<button data-replay-stream="${s.id}">Replay</button></td></tr>`,
      )
      .join("");
    el(this.root, "#datastreams-table tbody").innerHTML =
      rows || `<tr class="empty"><td colspan="6">no datastreams registered</td></tr>`;
  }
}

const LAYOUT = `
<div id="banner" class="banner" hidden>
  <span class="banner-text"></span>
  <button class="retry">retry</button>
</div>
<span id="stale" class="stale" hidden>stale — last poll failed</span>
<div id="toast" class="toast" hidden></div>

<section id="models">
  <h2>Models</h2>
  <form id="model-form">
    <input name="name" placeholder="name">
    <input name="description" placeholder="description">
    <textarea name="spec" placeholder="model spec JSON" rows="6"></textarea>
    <button type="submit">Create model</button>
    <div id="model-errors" class="errors"></div>
  </form>
  <table id="models-table">
    <thead><tr><th>id</th><th>name</th><th>description</th><th>spec</th></tr></thead>
    <tbody></tbody>
  </table>
</section>

<section id="configurations">
  <h2>Configurations</h2>
  <form id="config-form">
    <input name="name" placeholder="name">
    <input name="model_ids" placeholder="model ids, e.g. 1,2">
    <button type="submit">Create configuration</button>
    <div id="config-errors" class="errors"></div>
  </form>
  <table id="configs-table">
    <thead><tr><th>id</th><th>name</th><th>models</th></tr></thead>
    <tbody></tbody>
  </table>
</section>

<section id="deployments-section">
  <h2>Training deployments</h2>
  <form id="deploy-form">
    <input name="configuration_id" placeholder="configuration id">
    <textarea name="training_config" placeholder='training config JSON, e.g. {"batch_size": 10, "epochs": 50}' rows="3"></textarea>
    <button type="submit">Deploy training</button>
    <div id="deploy-errors" class="errors"></div>
  </form>
  <div id="deployments"></div>
</section>

<section id="infer-panel" hidden>
  <h2>Deploy for inference</h2>
  <form id="infer-form">
    <input name="result_id" type="hidden">
    <input name="replicas" value="1" placeholder="replicas">
    <input name="input_topic" placeholder="input topic">
    <input name="output_topic" placeholder="output topic">
    <p class="infer-format">input format auto-filled from the training stream</p>
    <button type="submit">Start replicas</button>
    <div id="infer-errors" class="errors"></div>
  </form>
</section>

<section id="inferences">
  <h2>Inference deployments</h2>
  <table id="inferences-table">
    <thead><tr><th>id</th><th>result</th><th>replicas</th><th>topics</th><th>live</th><th></th></tr></thead>
    <tbody></tbody>
  </table>
</section>

<section id="datastreams">
  <h2>Data streams</h2>
  <table id="datastreams-table">
    <thead><tr><th>id</th><th>deployment</th><th>slices</th><th>format</th><th>records</th><th>replay</th></tr></thead>
    <tbody></tbody>
  </table>
</section>
`;
