import { describe, expect, it } from "vitest";

import {
  asQueueState,
  asRanking,
  asScoreReply,
  asSlices,
  assertOutcomeBlind,
  SchemaError,
} from "../src/schema.js";

const queuePayload = {
  open: true,
  progress: { scored: 1, total: 2 },
  cases: [
    { case_id: "case_0001", scored: true, alpha_image: 2 },
    { case_id: "case_0002", scored: false, alpha_image: null },
  ],
  next_unscored: "case_0002",
};

const slicesPayload = {
  case_id: "case_0001",
  slices: ["/files/overlays/case_0001_slice_00.png"],
  table_relevance: { names: ["a", "b"], values: [1.0, 0.25] },
  degenerate_image: false,
  degenerate_table: false,
  alpha_image: null,
};

describe("payload guards", () => {
  it("accept the documented shapes", () => {
    expect(asQueueState(queuePayload).next_unscored).toBe("case_0002");
    expect(asSlices(slicesPayload).slices).toHaveLength(1);
    expect(asScoreReply({ recorded: true, case_id: "c", alpha_image: 3,
                          next_unscored: null }).alpha_image).toBe(3);
    expect(asRanking({ ranking: ["x", "y"] }).ranking).toEqual(["x", "y"]);
  });

  it("reject structural mismatches", () => {
    expect(() => asQueueState({ ...queuePayload, open: "yes" }))
      .toThrow(SchemaError);
    expect(() => asQueueState({ ...queuePayload, cases: [{}] }))
      .toThrow(SchemaError);
    expect(() => asSlices({ ...slicesPayload, slices: "x" }))
      .toThrow(SchemaError);
    expect(() => asSlices({
      ...slicesPayload,
      table_relevance: { names: ["a"], values: [1, 2] },
    })).toThrow(SchemaError);
    expect(() => asScoreReply({ recorded: true, case_id: "c",
                                alpha_image: 4, next_unscored: null }))
      .toThrow(SchemaError);
    expect(() => asRanking({ ranking: [1, 2] })).toThrow(SchemaError);
  });
});

describe("outcome blindness", () => {
  it("rejects forbidden keys at any depth", () => {
    expect(() => assertOutcomeBlind({ label: 1 }, "t")).toThrow(SchemaError);
    expect(() => assertOutcomeBlind({ a: [{ b: { correctness: 0 } }] }, "t"))
      .toThrow(SchemaError);
    expect(() => assertOutcomeBlind(
      { cases: [{ case_id: "c", label: 1 }] }, "t")).toThrow(SchemaError);
  });

  it("passes clean payloads and scalars", () => {
    assertOutcomeBlind(queuePayload, "t");
    assertOutcomeBlind(slicesPayload, "t");
    assertOutcomeBlind([1, "labelled", null], "t");
  });

  it("runs inside every response guard", () => {
    const poisoned = {
      ...queuePayload,
      cases: [{ case_id: "c", scored: false, alpha_image: null, label: 1 }],
    };
    expect(() => asQueueState(poisoned)).toThrow(/forbidden key "label"/);
    expect(() => asSlices({ ...slicesPayload, correctness: 1 }))
      .toThrow(/forbidden key "correctness"/);
  });
});
