import { afterEach, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { App } from "../src/app.js";
import { FakeService, FEATURES, mount } from "./helpers.js";

let service: FakeService;
let uninstall: () => void;
let root: HTMLElement;
let app: App;

async function boot(opts: { open?: boolean } = {}): Promise<void> {
  service = new FakeService(["c1", "c2", "c3"]);
  if (opts.open === false) service.open = false;
  uninstall = service.install();
  root = mount();
  app = new App(root, new ApiClient("", "tester"));
  await app.start();
}

afterEach(() => {
  // apps from earlier tests keep their document keydown listener; a
  // disabled panel makes the stale listener inert
  app.panel.setEnabled(false);
  uninstall();
});

function q<T extends Element>(selector: string): T {
  return root.querySelector(selector) as T;
}

function scoreButton(value: number): HTMLButtonElement {
  return q(`.scoring button[data-score="${value}"]`);
}

function chips(): HTMLButtonElement[] {
  return Array.from(root.querySelectorAll(".queue-chip"));
}

function click(el: Element): void {
  el.dispatchEvent(new MouseEvent("click", { bubbles: true }));
}

function press(key: string): void {
  document.dispatchEvent(new KeyboardEvent("keydown", { key, bubbles: true }));
}

describe("App", () => {
  it("loads the queue and ranking and opens the next unscored case", async () => {
    await boot();
    expect(q(".case-title").textContent).toBe("c1");
    expect(q(".progress-text").textContent).toBe("0 / 3 scored");
    expect(chips()).toHaveLength(3);
    expect(chips()[0].classList.contains("active")).toBe(true);
    expect(root.querySelectorAll(".ranking-item")).toHaveLength(18);
    expect(q<HTMLButtonElement>(".close-session").disabled).toBe(true);
    expect(scoreButton(1).disabled).toBe(false);
  });

  it("scores every case, enables close, and closes the session", async () => {
    await boot();

    click(scoreButton(1));
    await app.settled();
    expect(service.scores.get("c1")).toBe(1);
    expect(q(".case-title").textContent).toBe("c2");

    press("2");
    await app.settled();
    expect(service.scores.get("c2")).toBe(2);
    expect(q(".case-title").textContent).toBe("c3");

    click(scoreButton(3));
    await app.settled();
    expect(service.scores.get("c3")).toBe(3);

    expect(q(".progress-text").textContent).toBe("3 / 3 scored");
    expect(q<HTMLElement>(".progress-fill").style.width).toBe("100%");
    expect(chips().map((c) => c.textContent))
      .toEqual(["c1 (1)", "c2 (2)", "c3 (3)"]);
    const close = q<HTMLButtonElement>(".close-session");
    expect(close.disabled).toBe(false);

    click(close);
    await app.settled();
    expect(service.open).toBe(false);
    expect(q<HTMLElement>(".closed-note").hidden).toBe(false);
    expect(q(".closed-note").textContent).toContain("3 scores flushed");
    expect(close.disabled).toBe(true);
    expect(scoreButton(1).disabled).toBe(true);

    press("1");
    await app.settled();
    expect(service.scores.get("c3")).toBe(3);

    const allowed = [
      /^\/api\/cases$/,
      /^\/api\/cases\/[^/]+\/slices$/,
      /^\/api\/cases\/[^/]+\/score$/,
      /^\/api\/ranking$/,
      /^\/api\/session\/close$/,
    ];
    for (const request of service.requests) {
      expect(allowed.some((p) => p.test(request.path)),
             `undocumented request ${request.path}`).toBe(true);
    }
  });

  it("re-edits an already scored case from the queue strip", async () => {
    await boot();
    click(scoreButton(1));
    await app.settled();

    click(chips()[0]);
    await app.settled();
    expect(q(".case-title").textContent).toBe("c1");
    expect(scoreButton(1).classList.contains("selected")).toBe(true);

    press("3");
    await app.settled();
    expect(service.scores.get("c1")).toBe(3);
    expect(chips()[0].textContent).toBe("c1 (3)");
    expect(q(".progress-text").textContent).toBe("1 / 3 scored");
  });

  it("offers a retry after a network failure and loses nothing", async () => {
    await boot();
    service.failNext = 1;

    click(scoreButton(2));
    await app.settled();
    expect(service.scores.size).toBe(0);
    expect(app.panel.retryVisible()).toBe(true);
    expect(q(".retry-text").textContent).toContain("score 2 not saved");

    click(q(".retry-button"));
    await app.settled();
    expect(service.scores.get("c1")).toBe(2);
    expect(app.panel.retryVisible()).toBe(false);
    expect(q(".case-title").textContent).toBe("c2");
  });

  it("steps slices with the arrow keys", async () => {
    await boot();
    expect(q(".viewer-counter").textContent).toBe("2 / 3");
    press("ArrowRight");
    expect(q(".viewer-counter").textContent).toBe("3 / 3");
    press("ArrowLeft");
    press("ArrowLeft");
    expect(q(".viewer-counter").textContent).toBe("1 / 3");
  });

  it("saves a ranking edit and reflects the server echo", async () => {
    await boot();
    app.ranking.moveItem(0, 5);
    click(q(".ranking-save"));
    await app.settled();
    expect(service.ranking[5]).toBe(FEATURES[0]);
    const put = service.requests.find(
      (r) => r.method === "PUT" && r.path === "/api/ranking");
    expect(put).toBeDefined();
    expect(q(".ranking-status").textContent).toBe("saved");
  });

  it("surfaces a failed case load in the title and recovers", async () => {
    await boot();
    service.failNext = 1;
    click(chips()[1]);
    await app.settled();
    expect(q(".case-title").textContent).toContain("error:");

    click(chips()[1]);
    await app.settled();
    expect(q(".case-title").textContent).toBe("c2");
  });

  it("shows a closed note when the session is already closed", async () => {
    await boot({ open: false });
    expect(q<HTMLElement>(".closed-note").hidden).toBe(false);
    expect(q(".closed-note").textContent).toContain("already closed");
    expect(q(".case-title").textContent).toContain("loading");
    expect(q<HTMLButtonElement>(".close-session").disabled).toBe(true);
  });
});
