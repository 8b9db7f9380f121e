import { beforeEach, describe, expect, it } from "vitest";

import type { Score } from "../src/schema.js";
import { SCORE_CRITERIA, ScorePanel } from "../src/scoring.js";

let root: HTMLElement;
let submitted: Score[];
let failures: number;
let panel: ScorePanel;

beforeEach(() => {
  document.body.innerHTML = '<div id="s"></div>';
  root = document.getElementById("s") as HTMLElement;
  submitted = [];
  failures = 0;
  panel = new ScorePanel(root, async (value) => {
    if (failures > 0) {
      failures -= 1;
      throw new Error("network down");
    }
    submitted.push(value);
  });
  panel.setEnabled(true);
});

function button(value: number): HTMLButtonElement {
  return root.querySelector(`button[data-score="${value}"]`) as HTMLButtonElement;
}

async function flush(): Promise<void> {
  await Promise.resolve();
  await Promise.resolve();
}

describe("ScorePanel", () => {
  it("posts the clicked value", async () => {
    button(2).dispatchEvent(new MouseEvent("click", { bubbles: true }));
    await flush();
    expect(submitted).toEqual([2]);
  });

  it("maps keys 1/2/3 to the same submissions", async () => {
    expect(panel.handleKey("3")).toBe(true);
    await flush();
    expect(panel.handleKey("x")).toBe(false);
    expect(submitted).toEqual([3]);
  });

  it("shows the criterion text as tooltips", () => {
    for (const value of [1, 2, 3] as Score[]) {
      expect(button(value).title).toBe(SCORE_CRITERIA[value]);
    }
    expect(button(1).textContent).toContain("high agreement");
    expect(button(3).textContent).toContain("low agreement");
  });

  it("ignores input while disabled", async () => {
    panel.setEnabled(false);
    button(1).dispatchEvent(new MouseEvent("click", { bubbles: true }));
    expect(panel.handleKey("1")).toBe(false);
    await flush();
    expect(submitted).toEqual([]);
  });

  it("keeps a failed score in the retry banner, never dropping it", async () => {
    failures = 1;
    button(1).dispatchEvent(new MouseEvent("click", { bubbles: true }));
    await flush();
    expect(submitted).toEqual([]);
    expect(panel.retryVisible()).toBe(true);
    expect(root.querySelector(".retry-text")!.textContent)
      .toContain("score 1 not saved");
    // further scoring is blocked until the pending score resolves
    expect(panel.handleKey("2")).toBe(false);

    const retry = root.querySelector(".retry-button") as HTMLButtonElement;
    retry.dispatchEvent(new MouseEvent("click", { bubbles: true }));
    await flush();
    expect(submitted).toEqual([1]);
    expect(panel.retryVisible()).toBe(false);
    expect(panel.handleKey("2")).toBe(true);
    await flush();
    expect(submitted).toEqual([1, 2]);
  });

  it("marks the recorded score on its button", () => {
    panel.markCurrent(2);
    expect(button(2).classList.contains("selected")).toBe(true);
    expect(button(1).classList.contains("selected")).toBe(false);
    panel.markCurrent(null);
    expect(button(2).classList.contains("selected")).toBe(false);
  });
});
