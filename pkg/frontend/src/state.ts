/**
 * Client-side session state. The server stays the source of truth: every
 * mutation here mirrors a reply the server already confirmed.
 */

import type { QueueState, Score, ScoreReply } from "./schema.js";

export class SessionState {
  open = true;
  queue: string[] = [];
  scores = new Map<string, Score>();
  nextUnscored: string | null = null;

  loadQueue(payload: QueueState): void {
    this.open = payload.open;
    this.queue = payload.cases.map((c) => c.case_id);
    this.scores.clear();
    for (const row of payload.cases) {
      if (row.scored && row.alpha_image !== null) {
        this.scores.set(row.case_id, row.alpha_image);
      }
    }
    this.nextUnscored = payload.next_unscored;
  }

  applyScore(reply: ScoreReply): void {
    if (!this.open) throw new Error("session is closed");
    this.scores.set(reply.case_id, reply.alpha_image);
    this.nextUnscored = reply.next_unscored;
  }

  scoreOf(caseId: string): Score | null {
    return this.scores.get(caseId) ?? null;
  }

  scoredCount(): number {
    return this.scores.size;
  }

  /** True once every queued case carries a score; enables session close. */
  allScored(): boolean {
    return this.queue.length > 0 && this.scores.size === this.queue.length;
  }

  progressPercent(): number {
    if (this.queue.length === 0) return 0;
    return Math.round((100 * this.scores.size) / this.queue.length);
  }
}
