/**
 * Shapes of every payload the scoring service exchanges with this app,
 * plus runtime guards. Each response is validated before use, and every
 * payload in either direction is checked against the outcome-blindness
 * rule: nothing the evaluator sees may carry ground truth.
 */

export type Score = 1 | 2 | 3;

export interface QueueCase {
  case_id: string;
  scored: boolean;
  alpha_image: Score | null;
}

export interface QueueState {
  open: boolean;
  progress: { scored: number; total: number };
  cases: QueueCase[];
  next_unscored: string | null;
}

export interface SlicesPayload {
  case_id: string;
  slices: string[];
  table_relevance: { names: string[]; values: number[] };
  degenerate_image: boolean;
  degenerate_table: boolean;
  alpha_image: Score | null;
}

export interface ScoreReply {
  recorded: boolean;
  case_id: string;
  alpha_image: Score;
  next_unscored: string | null;
}

export interface RankingPayload {
  ranking: string[];
}

export interface CloseReply {
  closed: boolean;
  n_scores: number;
  scores_file: string;
}

/** Keys that would leak the hidden outcome to the evaluator. */
const FORBIDDEN_KEYS = ["label", "correctness"];

export class SchemaError extends Error {}

/** Reject any payload carrying a forbidden key at any depth. */
export function assertOutcomeBlind(payload: unknown, where: string): void {
  if (Array.isArray(payload)) {
    for (const item of payload) assertOutcomeBlind(item, where);
    return;
  }
  if (payload !== null && typeof payload === "object") {
    for (const [key, value] of Object.entries(payload)) {
      if (FORBIDDEN_KEYS.includes(key)) {
        throw new SchemaError(`${where}: forbidden key "${key}" in payload`);
      }
      assertOutcomeBlind(value, where);
    }
  }
}

function fail(where: string, detail: string): never {
  throw new SchemaError(`${where}: ${detail}`);
}

function isRecord(value: unknown): value is Record<string, unknown> {
  return value !== null && typeof value === "object" && !Array.isArray(value);
}

function isScoreOrNull(value: unknown): value is Score | null {
  return value === null || value === 1 || value === 2 || value === 3;
}

function isStringArray(value: unknown): value is string[] {
  return Array.isArray(value) && value.every((v) => typeof v === "string");
}

export function asQueueState(raw: unknown): QueueState {
  const where = "GET /api/cases";
  assertOutcomeBlind(raw, where);
  if (!isRecord(raw)) fail(where, "not an object");
  if (typeof raw.open !== "boolean") fail(where, "open must be boolean");
  const progress = raw.progress;
  if (!isRecord(progress) || typeof progress.scored !== "number"
      || typeof progress.total !== "number") {
    fail(where, "bad progress");
  }
  if (!Array.isArray(raw.cases)) fail(where, "cases must be a list");
  for (const item of raw.cases) {
    if (!isRecord(item) || typeof item.case_id !== "string"
        || typeof item.scored !== "boolean"
        || !isScoreOrNull(item.alpha_image)) {
      fail(where, "bad case row");
    }
  }
  if (raw.next_unscored !== null && typeof raw.next_unscored !== "string") {
    fail(where, "bad next_unscored");
  }
  return raw as unknown as QueueState;
}

export function asSlices(raw: unknown): SlicesPayload {
  const where = "GET /api/cases/{id}/slices";
  assertOutcomeBlind(raw, where);
  if (!isRecord(raw)) fail(where, "not an object");
  if (typeof raw.case_id !== "string") fail(where, "bad case_id");
  if (!isStringArray(raw.slices)) fail(where, "bad slices");
  const table = raw.table_relevance;
  if (!isRecord(table) || !isStringArray(table.names)
      || !Array.isArray(table.values)
      || !table.values.every((v) => typeof v === "number")
      || table.names.length !== table.values.length) {
    fail(where, "bad table_relevance");
  }
  if (typeof raw.degenerate_image !== "boolean"
      || typeof raw.degenerate_table !== "boolean") {
    fail(where, "bad degenerate flags");
  }
  if (!isScoreOrNull(raw.alpha_image)) fail(where, "bad alpha_image");
  return raw as unknown as SlicesPayload;
}

export function asScoreReply(raw: unknown): ScoreReply {
  const where = "POST /api/cases/{id}/score";
  assertOutcomeBlind(raw, where);
  if (!isRecord(raw) || raw.recorded !== true
      || typeof raw.case_id !== "string"
      || !isScoreOrNull(raw.alpha_image) || raw.alpha_image === null) {
    fail(where, "bad score reply");
  }
  if (raw.next_unscored !== null && typeof raw.next_unscored !== "string") {
    fail(where, "bad next_unscored");
  }
  return raw as unknown as ScoreReply;
}

export function asRanking(raw: unknown): RankingPayload {
  const where = "/api/ranking";
  assertOutcomeBlind(raw, where);
  if (!isRecord(raw) || !isStringArray(raw.ranking)) {
    fail(where, "ranking must be a list of names");
  }
  return raw as unknown as RankingPayload;
}

export function asCloseReply(raw: unknown): CloseReply {
  const where = "POST /api/session/close";
  assertOutcomeBlind(raw, where);
  if (!isRecord(raw) || raw.closed !== true
      || typeof raw.n_scores !== "number"
      || typeof raw.scores_file !== "string") {
    fail(where, "bad close reply");
  }
  return raw as unknown as CloseReply;
}
