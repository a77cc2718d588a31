// Typed wrapper around the control-plane REST API. Every call the UI makes
// goes through here; there is no client-only authoritative state.

export interface Model {
  id: number;
  name: string;
  description: string;
  spec: string;
}

export interface Configuration {
  id: number;
  name: string;
  model_ids: number[];
}

export interface Job {
  state: "pending" | "training" | "uploaded" | "failed";
  restart_count: number;
  result_id?: number;
}

export interface Deployment {
  id: number;
  configuration_id: number;
  training_config: Record<string, unknown>;
  jobs: Record<string, Job>;
}

export interface MetricValues {
  loss?: number;
  accuracy?: number;
}

export interface TrainingResult {
  id: number;
  deployment_id: number;
  model_id: number;
  metrics: {
    training?: MetricValues;
    evaluation?: MetricValues;
    stream_hash?: string;
  };
  status: string;
}

export interface Inference {
  id: number;
  result_id: number;
  replicas: number;
  input_topic: string;
  output_topic: string;
  input_format: string;
  input_config: string;
  replica_pids: number[];
}

export interface Datastream {
  id: number;
  deployment_id: number;
  topics: string[];
  input_format: string;
  input_config: string;
  validation_rate: number;
  total_msg: number;
}

/** Error envelope the backend returns for every non-2xx response. */
export class ApiError extends Error {
  constructor(
    public status: number,
    public code: string,
    message: string,
  ) {
    super(message);
  }
}

async function unwrap<T>(resp: Response): Promise<T> {
  if (resp.ok) {
    return resp.status === 204 ? (undefined as T) : ((await resp.json()) as T);
  }
  let code = "Error";
  let message = `HTTP ${resp.status}`;
  try {
    const doc = await resp.json();
    code = doc.error ?? code;
    message = doc.message ?? message;
  } catch {
    // non-JSON error body; keep the generic message
  }
  throw new ApiError(resp.status, code, message);
}

export class Api {
  constructor(public base: string) {}

  private url(path: string): string {
    return this.base.replace(/\/$/, "") + path;
  }

  private async get<T>(path: string): Promise<T> {
    return unwrap(await fetch(this.url(path)));
  }

  private async post<T>(path: string, body: unknown): Promise<T> {
    return unwrap(
      await fetch(this.url(path), {
        method: "POST",
        headers: { "content-type": "application/json" },
        body: JSON.stringify(body),
      }),
    );
  }

  listModels(): Promise<Model[]> {
    return this.get("/models");
  }

  createModel(name: string, description: string, spec: string): Promise<Model> {
    return this.post("/models", { name, description, spec });
  }

  listConfigurations(): Promise<Configuration[]> {
    return this.get("/configurations");
  }

  createConfiguration(name: string, modelIds: number[]): Promise<Configuration> {
    return this.post("/configurations", { name, model_ids: modelIds });
  }

  listDeployments(): Promise<Deployment[]> {
    return this.get("/deployments");
  }

  createDeployment(configurationId: number, trainingConfig: unknown): Promise<Deployment> {
    return this.post("/deployments", {
      configuration_id: configurationId,
      training_config: trainingConfig,
    });
  }

  listResults(): Promise<TrainingResult[]> {
    return this.get("/results");
  }

  downloadUrl(resultId: number): string {
    return this.url(`/results/${resultId}/download`);
  }

  listInferences(): Promise<Inference[]> {
    return this.get("/inferences");
  }

  createInference(
    resultId: number,
    replicas: number,
    inputTopic: string,
    outputTopic: string,
  ): Promise<Inference> {
    return this.post("/inferences", {
      result_id: resultId,
      replicas,
      input_topic: inputTopic,
      output_topic: outputTopic,
    });
  }

  async deleteInference(inferenceId: number): Promise<void> {
    await unwrap(await fetch(this.url(`/inferences/${inferenceId}`), { method: "DELETE" }));
  }

  listDatastreams(): Promise<Datastream[]> {
    return this.get("/datastreams");
  }

  replayDatastream(datastreamId: number, deploymentId: number): Promise<unknown> {
    return this.post(`/datastreams/${datastreamId}/replay`, {
      deployment_id: deploymentId,
    });
  }
}
