/**
 * Top-level wiring: queue strip, slice viewer, score panel, ranking editor
 * and session close. One case is active at a time; a confirmed score
 * advances to the server-chosen next unscored case, and already-scored
 * cases stay clickable for re-editing until the session closes.
 */

import { ApiClient } from "./api.js";
import { RankingEditor } from "./ranking.js";
import type { Score } from "./schema.js";
import { ScorePanel } from "./scoring.js";
import { SessionState } from "./state.js";
import { SliceViewer } from "./viewer.js";

export class App {
  readonly state = new SessionState();
  readonly viewer: SliceViewer;
  readonly panel: ScorePanel;
  readonly ranking: RankingEditor;
  currentCase: string | null = null;

  private queueStrip: HTMLElement;
  private progressText: HTMLElement;
  private progressFill: HTMLElement;
  private caseTitle: HTMLElement;
  private closeButton: HTMLButtonElement;
  private closedNote: HTMLElement;
  private work: Promise<void> = Promise.resolve();

  constructor(root: HTMLElement, private api: ApiClient) {
    root.innerHTML = `
      <header class="topbar">
        <h1>attention scoring</h1>
        <div class="progress">
          <span class="progress-text"></span>
          <span class="progress-track"><span class="progress-fill"></span></span>
        </div>
        <button type="button" class="close-session" disabled>close session</button>
      </header>
      <div class="closed-note" hidden></div>
      <div class="queue-strip"></div>
      <main class="case-pane">
        <h2 class="case-title">loading&hellip;</h2>
        <div class="viewer"></div>
        <div class="scoring"></div>
      </main>
      <aside class="ranking-pane">
        <h2>feature ranking</h2>
        <p class="ranking-hint">drag rows (or focus and use arrow keys),
          most informative first</p>
        <div class="ranking"></div>
      </aside>`;

    this.queueStrip = root.querySelector(".queue-strip") as HTMLElement;
    this.progressText = root.querySelector(".progress-text") as HTMLElement;
    this.progressFill = root.querySelector(".progress-fill") as HTMLElement;
    this.caseTitle = root.querySelector(".case-title") as HTMLElement;
    this.closeButton = root.querySelector(".close-session") as HTMLButtonElement;
    this.closedNote = root.querySelector(".closed-note") as HTMLElement;

    this.viewer = new SliceViewer(
      root.querySelector(".viewer") as HTMLElement,
      (path) => this.api.fileUrl(path));
    this.panel = new ScorePanel(
      root.querySelector(".scoring") as HTMLElement,
      (value) => this.tracked(this.submitScore(value)));
    this.ranking = new RankingEditor(
      root.querySelector(".ranking") as HTMLElement,
      (names) => this.tracked(this.submitRanking(names)));

    this.closeButton.addEventListener("click", () => {
      this.track(() => this.closeSession());
    });
    document.addEventListener("keydown", (ev) => this.onKey(ev as KeyboardEvent));
  }

  /** Resolves when every user action issued so far has finished. */
  settled(): Promise<void> {
    return this.work;
  }

  start(): Promise<void> {
    this.track(async () => {
      const queue = await this.api.queue();
      this.state.loadQueue(queue);
      const ranking = await this.api.ranking();
      this.ranking.load(ranking.ranking);
      this.renderProgress();
      this.renderQueue();
      if (!this.state.open) {
        this.showClosed("this session is already closed");
        return;
      }
      if (queue.next_unscored !== null) {
        await this.openCase(queue.next_unscored);
      } else if (this.state.queue.length > 0) {
        await this.openCase(this.state.queue[0]);
      }
    });
    return this.work;
  }

  async openCase(caseId: string): Promise<void> {
    const payload = await this.api.slices(caseId);
    this.currentCase = caseId;
    this.caseTitle.textContent = caseId;
    this.viewer.show(payload.slices, payload.table_relevance.names,
                     payload.table_relevance.values);
    this.panel.markCurrent(payload.alpha_image);
    this.panel.setEnabled(this.state.open);
    this.renderQueue();
  }

  private async submitScore(value: Score): Promise<void> {
    if (this.currentCase === null) throw new Error("no active case");
    const reply = await this.api.score(this.currentCase, value);
    this.state.applyScore(reply);
    this.panel.markCurrent(reply.alpha_image);
    this.renderProgress();
    this.renderQueue();
    if (reply.next_unscored !== null) {
      await this.openCase(reply.next_unscored);
    }
  }

  private async submitRanking(names: string[]): Promise<string[]> {
    const echoed = await this.api.saveRanking(names);
    return echoed.ranking;
  }

  private async closeSession(): Promise<void> {
    const reply = await this.api.closeSession();
    this.state.open = false;
    this.panel.setEnabled(false);
    this.closeButton.disabled = true;
    this.showClosed(`session closed; ${reply.n_scores} scores flushed`);
  }

  private onKey(ev: KeyboardEvent): void {
    const target = ev.target as HTMLElement | null;
    if (target && (target.tagName === "INPUT" || target.tagName === "LI")) {
      return;                        // slider and ranking rows keep their keys
    }
    if (ev.key === "ArrowLeft") {
      this.viewer.step(-1);
    } else if (ev.key === "ArrowRight") {
      this.viewer.step(1);
    } else if (this.panel.handleKey(ev.key)) {
      ev.preventDefault();
    }
  }

  private renderProgress(): void {
    const done = this.state.scoredCount();
    const total = this.state.queue.length;
    this.progressText.textContent = `${done} / ${total} scored`;
    this.progressFill.style.width = `${this.state.progressPercent()}%`;
    this.closeButton.disabled = !this.state.open || !this.state.allScored();
  }

  private renderQueue(): void {
    this.queueStrip.innerHTML = "";
    for (const caseId of this.state.queue) {
      const chip = document.createElement("button");
      chip.type = "button";
      chip.className = "queue-chip";
      const score = this.state.scoreOf(caseId);
      chip.classList.toggle("scored", score !== null);
      chip.classList.toggle("active", caseId === this.currentCase);
      chip.textContent = score === null ? caseId : `${caseId} (${score})`;
      chip.addEventListener("click", () => {
        this.track(() => this.openCase(caseId));
      });
      this.queueStrip.appendChild(chip);
    }
  }

  private showClosed(message: string): void {
    this.closedNote.textContent = message;
    this.closedNote.hidden = false;
  }

  private track(action: () => Promise<void>): void {
    this.work = this.work.then(action).catch((err) => {
      this.caseTitle.textContent = `error: ${(err as Error).message}`;
    });
  }

  // settled() must cover widget-initiated requests too; failures surface
  // in the widgets themselves, never through the chain
  private tracked<T>(promise: Promise<T>): Promise<T> {
    this.work = this.work.then(() => promise.then(() => undefined,
                                                  () => undefined));
    return promise;
  }
}
