import { Api } from "./api.js";
import { App } from "./app.js";

async function boot(): Promise<void> {
  const resp = await fetch("./config.json");
  const config = (await resp.json()) as { backend_base_url: string };
  const app = new App(new Api(config.backend_base_url), document.getElementById("app")!);
  app.start();
}

void boot();
