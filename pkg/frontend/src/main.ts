import { ApiClient } from "./api.js";
import { App } from "./app.js";

const root = document.getElementById("app");
if (root === null) throw new Error("missing #app element");

// same-origin: the bundle is served by the scoring service itself
const app = new App(root, new ApiClient("", "ui"));
void app.start();

declare global {
  interface Window { scoringApp: App }
}
window.scoringApp = app;
