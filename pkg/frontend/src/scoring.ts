/**
 * The three agreement buttons plus their keyboard shortcuts. A failed POST
 * shows a retry banner holding the exact pending score; nothing is lost
 * silently and nothing advances until the server confirms.
 */

import type { Score } from "./schema.js";

export const SCORE_LABELS: Record<Score, string> = {
  1: "high agreement",
  2: "partial agreement",
  3: "low agreement",
};

// criterion text shown as native tooltips on the buttons
export const SCORE_CRITERIA: Record<Score, string> = {
  1: "Relevance concentrates on the regions that support the predicted "
     + "finding; you would point at the same areas.",
  2: "Some supporting regions are highlighted, but a comparable share of "
     + "relevance falls on areas without supporting signal.",
  3: "Relevance concentrates away from any region that supports the "
     + "prediction, or the map is degenerate.",
};

export class ScorePanel {
  private buttons = new Map<Score, HTMLButtonElement>();
  private banner: HTMLElement;
  private pending: Score | null = null;
  private enabled = false;

  constructor(root: HTMLElement,
              private submit: (value: Score) => Promise<void>) {
    root.innerHTML = `
      <div class="score-buttons"></div>
      <div class="retry-banner" hidden>
        <span class="retry-text"></span>
        <button type="button" class="retry-button">retry</button>
      </div>`;
    const row = root.querySelector(".score-buttons") as HTMLElement;
    for (const value of [1, 2, 3] as Score[]) {
      const button = document.createElement("button");
      button.type = "button";
      button.className = "score-button";
      button.dataset.score = String(value);
      button.title = SCORE_CRITERIA[value];
      button.innerHTML =
        `<b>${value}</b><span>${SCORE_LABELS[value]}</span>`;
      button.addEventListener("click", () => { void this.choose(value); });
      row.appendChild(button);
      this.buttons.set(value, button);
    }
    this.banner = root.querySelector(".retry-banner") as HTMLElement;
    const retry = root.querySelector(".retry-button") as HTMLButtonElement;
    retry.addEventListener("click", () => { void this.retry(); });
  }

  /** Global handler; digits score, arrows are left to the viewer. */
  handleKey(key: string): boolean {
    if (!this.enabled || this.pending !== null) return false;
    if (key === "1" || key === "2" || key === "3") {
      void this.choose(Number(key) as Score);
      return true;
    }
    return false;
  }

  setEnabled(enabled: boolean): void {
    this.enabled = enabled;
    for (const button of this.buttons.values()) {
      button.disabled = !enabled || this.pending !== null;
    }
  }

  markCurrent(value: Score | null): void {
    for (const [score, button] of this.buttons) {
      button.classList.toggle("selected", score === value);
    }
  }

  retryVisible(): boolean {
    return !this.banner.hidden;
  }

  private async choose(value: Score): Promise<void> {
    if (!this.enabled || this.pending !== null) return;
    this.pending = value;
    this.setEnabled(this.enabled);
    try {
      await this.submit(value);
      this.banner.hidden = true;
    } catch (err) {
      const text = this.banner.querySelector(".retry-text") as HTMLElement;
      text.textContent =
        `score ${value} not saved (${(err as Error).message})`;
      this.banner.hidden = false;
      this.pending = value;
      this.setEnabled(this.enabled);
      return;                       // keep pending for the retry button
    }
    this.pending = null;
    this.setEnabled(this.enabled);
  }

  private async retry(): Promise<void> {
    const value = this.pending;
    if (value === null) return;
    this.pending = null;
    await this.choose(value);
  }
}
