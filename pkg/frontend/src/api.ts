/**
 * Thin client over the scoring service. Only the five documented endpoints
 * are reachable from here; overlay image URLs come verbatim from the
 * server and are never constructed client-side.
 */

import {
  asCloseReply,
  asQueueState,
  asRanking,
  asScoreReply,
  asSlices,
  assertOutcomeBlind,
  type CloseReply,
  type QueueState,
  type RankingPayload,
  type Score,
  type ScoreReply,
  type SlicesPayload,
} from "./schema.js";

export class ApiError extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

async function parse(response: Response): Promise<unknown> {
  const body = await response.json().catch(() => null);
  if (!response.ok) {
    const detail = body && typeof body === "object" && "error" in body
      ? String((body as { error: unknown }).error)
      : response.statusText;
    throw new ApiError(response.status, detail);
  }
  return body;
}

export class ApiClient {
  constructor(private baseUrl: string, public rater: string) {}

  /** Absolute form of a server-provided file URL, for img.src. */
  fileUrl(path: string): string {
    return this.baseUrl + path;
  }

  async queue(): Promise<QueueState> {
    return asQueueState(await parse(await fetch(`${this.baseUrl}/api/cases`)));
  }

  async slices(caseId: string): Promise<SlicesPayload> {
    const url = `${this.baseUrl}/api/cases/${encodeURIComponent(caseId)}/slices`;
    return asSlices(await parse(await fetch(url)));
  }

  async score(caseId: string, value: Score): Promise<ScoreReply> {
    const body = { alpha_image: value, rater: this.rater };
    assertOutcomeBlind(body, "score request");
    const url = `${this.baseUrl}/api/cases/${encodeURIComponent(caseId)}/score`;
    const reply = await parse(await fetch(url, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    }));
    return asScoreReply(reply);
  }

  async ranking(): Promise<RankingPayload> {
    return asRanking(await parse(await fetch(`${this.baseUrl}/api/ranking`)));
  }

  async saveRanking(ranking: string[]): Promise<RankingPayload> {
    const body = { ranking };
    assertOutcomeBlind(body, "ranking request");
    const reply = await parse(await fetch(`${this.baseUrl}/api/ranking`, {
      method: "PUT",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(body),
    }));
    return asRanking(reply);
  }

  async closeSession(): Promise<CloseReply> {
    const reply = await parse(await fetch(`${this.baseUrl}/api/session/close`, {
      method: "POST",
    }));
    return asCloseReply(reply);
  }
}
