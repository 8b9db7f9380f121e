/**
 * In-memory stand-in for the scoring service, wired into global fetch.
 * Mirrors the documented endpoint semantics closely enough for unit tests;
 * the integration test talks to the real server instead.
 */

import type { Score } from "../src/schema.js";

export const FEATURES = Array.from({ length: 18 }, (_, i) => `feature_${i}`);

type Json = Record<string, unknown>;

export class FakeService {
  open = true;
  scores = new Map<string, Score>();
  ranking: string[] = [...FEATURES];
  requests: { method: string; path: string; body: unknown }[] = [];
  failNext = 0;

  constructor(public queue: string[]) {}

  nextUnscored(): string | null {
    return this.queue.find((id) => !this.scores.has(id)) ?? null;
  }

  handle(method: string, path: string, body: unknown): { status: number; body: Json } {
    this.requests.push({ method, path, body });
    if (this.failNext > 0) {
      this.failNext -= 1;
      throw new TypeError("fetch failed");
    }
    if (method === "GET" && path === "/api/cases") {
      return {
        status: 200,
        body: {
          open: this.open,
          progress: { scored: this.scores.size, total: this.queue.length },
          cases: this.queue.map((id) => ({
            case_id: id,
            scored: this.scores.has(id),
            alpha_image: this.scores.get(id) ?? null,
          })),
          next_unscored: this.nextUnscored(),
        },
      };
    }
    const slices = path.match(/^\/api\/cases\/([^/]+)\/slices$/);
    if (method === "GET" && slices) {
      const id = slices[1];
      if (!this.queue.includes(id)) {
        return { status: 404, body: { error: `unknown case ${id}` } };
      }
      return {
        status: 200,
        body: {
          case_id: id,
          slices: [0, 1, 2].map((z) => `/files/overlays/${id}_slice_0${z}.png`),
          table_relevance: {
            names: [...FEATURES],
            values: FEATURES.map((_, i) => (i + 1) / FEATURES.length),
          },
          degenerate_image: false,
          degenerate_table: false,
          alpha_image: this.scores.get(id) ?? null,
        },
      };
    }
    const score = path.match(/^\/api\/cases\/([^/]+)\/score$/);
    if (method === "POST" && score) {
      const id = score[1];
      if (!this.queue.includes(id)) {
        return { status: 404, body: { error: `unknown case ${id}` } };
      }
      if (!this.open) return { status: 409, body: { error: "session is closed" } };
      const payload = body as { alpha_image?: unknown; rater?: unknown };
      if (![1, 2, 3].includes(payload.alpha_image as number)
          || typeof payload.rater !== "string" || payload.rater === "") {
        return { status: 422, body: { error: "bad score body" } };
      }
      this.scores.set(id, payload.alpha_image as Score);
      return {
        status: 200,
        body: { recorded: true, case_id: id,
                alpha_image: payload.alpha_image,
                next_unscored: this.nextUnscored() },
      };
    }
    if (path === "/api/ranking" && method === "GET") {
      return { status: 200, body: { ranking: [...this.ranking] } };
    }
    if (path === "/api/ranking" && method === "PUT") {
      const payload = body as { ranking?: unknown };
      const names = payload.ranking;
      if (!Array.isArray(names)
          || [...names].sort().join("|") !== [...FEATURES].sort().join("|")) {
        return { status: 422, body: { error: "not a permutation" } };
      }
      if (!this.open) return { status: 409, body: { error: "session is closed" } };
      this.ranking = [...(names as string[])];
      return { status: 200, body: { ranking: [...this.ranking] } };
    }
    if (method === "POST" && path === "/api/session/close") {
      if (!this.open) return { status: 409, body: { error: "already closed" } };
      this.open = false;
      return { status: 200, body: { closed: true, n_scores: this.scores.size,
                                    scores_file: "/tmp/fake/scores.csv" } };
    }
    return { status: 404, body: { error: `no route ${path}` } };
  }

  /** Installs this fake as the global fetch; returns an uninstall hook. */
  install(): () => void {
    const original = globalThis.fetch;
    globalThis.fetch = (async (input: RequestInfo | URL, init?: RequestInit) => {
      const url = typeof input === "string" ? input : input.toString();
      const path = url.replace(/^https?:\/\/[^/]+/, "");
      const method = init?.method ?? "GET";
      const body = init?.body ? JSON.parse(init.body as string) : null;
      const reply = this.handle(method, path, body);
      return new Response(JSON.stringify(reply.body), {
        status: reply.status,
        headers: { "Content-Type": "application/json" },
      });
    }) as typeof fetch;
    return () => { globalThis.fetch = original; };
  }
}

export function mount(): HTMLElement {
  document.body.innerHTML = '<div id="app"></div>';
  return document.getElementById("app") as HTMLElement;
}
