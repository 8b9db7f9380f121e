import { beforeEach, describe, expect, it } from "vitest";

import { RankingEditor } from "../src/ranking.js";
import { FEATURES } from "./helpers.js";

let root: HTMLElement;
let saves: string[][];
let failNext: boolean;
let editor: RankingEditor;

beforeEach(() => {
  document.body.innerHTML = '<div id="r"></div>';
  root = document.getElementById("r") as HTMLElement;
  saves = [];
  failNext = false;
  editor = new RankingEditor(root, async (ranking) => {
    if (failNext) {
      failNext = false;
      throw new Error("put failed");
    }
    saves.push(ranking);
    return ranking;
  });
  editor.load(FEATURES);
});

function rows(): HTMLElement[] {
  return Array.from(root.querySelectorAll(".ranking-item"));
}

function shownNames(): string[] {
  return Array.from(root.querySelectorAll(".ranking-item .name"))
    .map((el) => el.textContent ?? "");
}

function saveButton(): HTMLButtonElement {
  return root.querySelector(".ranking-save") as HTMLButtonElement;
}

function status(): string {
  return root.querySelector(".ranking-status")!.textContent ?? "";
}

async function flush(): Promise<void> {
  await Promise.resolve();
  await Promise.resolve();
}

describe("RankingEditor", () => {
  it("renders all names in order with save disabled", () => {
    expect(shownNames()).toEqual(FEATURES);
    expect(saveButton().disabled).toBe(true);
  });

  it("moveItem reorders and arms save", () => {
    editor.moveItem(5, 0);
    expect(shownNames()[0]).toBe(FEATURES[5]);
    expect(editor.current()).toHaveLength(18);
    expect(saveButton().disabled).toBe(false);
    expect(status()).toBe("unsaved changes");
  });

  it("reorders by mouse drag", () => {
    rows()[3].dispatchEvent(new MouseEvent("mousedown", { bubbles: true }));
    // rows re-render after each hop, so re-query before the next hover
    rows()[1].dispatchEvent(new MouseEvent("mouseover", { bubbles: true }));
    rows()[0].dispatchEvent(new MouseEvent("mouseover", { bubbles: true }));
    document.dispatchEvent(new MouseEvent("mouseup", { bubbles: true }));
    expect(shownNames()[0]).toBe(FEATURES[3]);
    expect(shownNames().slice(1, 4)).toEqual([
      FEATURES[0], FEATURES[1], FEATURES[2],
    ]);
    expect(root.querySelector(".dragging")).toBeNull();
  });

  it("reorders with arrow keys", () => {
    rows()[2].dispatchEvent(new KeyboardEvent("keydown", { key: "ArrowUp" }));
    expect(shownNames()[1]).toBe(FEATURES[2]);
    rows()[0].dispatchEvent(new KeyboardEvent("keydown", { key: "ArrowDown" }));
    expect(shownNames()[1]).toBe(FEATURES[0]);
  });

  it("saves the permutation and takes the echo as truth", async () => {
    editor.moveItem(0, 17);
    saveButton().dispatchEvent(new MouseEvent("click", { bubbles: true }));
    await flush();
    expect(saves).toHaveLength(1);
    expect(saves[0][17]).toBe(FEATURES[0]);
    expect([...saves[0]].sort()).toEqual([...FEATURES].sort());
    expect(status()).toBe("saved");
    expect(saveButton().disabled).toBe(true);
  });

  it("keeps edits and re-enables save when the request fails", async () => {
    failNext = true;
    editor.moveItem(1, 0);
    saveButton().dispatchEvent(new MouseEvent("click", { bubbles: true }));
    await flush();
    expect(status()).toContain("save failed");
    expect(saveButton().disabled).toBe(false);
    expect(shownNames()[0]).toBe(FEATURES[1]);

    saveButton().dispatchEvent(new MouseEvent("click", { bubbles: true }));
    await flush();
    expect(saves).toHaveLength(1);
    expect(status()).toBe("saved");
  });

  it("blocks an incomplete list before any request is made", async () => {
    // the UI offers no remove control; corrupt the state directly to prove
    // the client-side guard still refuses to submit
    const guts = editor as unknown as {
      names: string[]; dirty: boolean;
      render: () => void; save: () => Promise<void>;
    };
    guts.names.pop();
    guts.dirty = true;
    guts.render();
    expect(editor.validate()).toBe("need 18 items, have 17");
    expect(saveButton().disabled).toBe(true);
    await guts.save();
    expect(saves).toHaveLength(0);
    expect(status()).toBe("need 18 items, have 17");
  });

  it("rejects names outside the known set", () => {
    const guts = editor as unknown as { names: string[]; render: () => void };
    guts.names[0] = "made_up";
    guts.render();
    expect(editor.validate()).toBe("items differ from the known set");
    expect(saveButton().disabled).toBe(true);
  });

  it("load restores the last-saved order and clears dirty state", () => {
    editor.moveItem(4, 0);
    editor.load(FEATURES);
    expect(shownNames()).toEqual(FEATURES);
    expect(saveButton().disabled).toBe(true);
  });
});
