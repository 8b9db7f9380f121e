/**
 * Drag-to-reorder editor for the fixed set of tabular feature names, most
 * relevant first. Reordering is the only mutation; items can never be
 * added or removed, and save stays disabled unless the list is exactly
 * the server-known permutation.
 */

export class RankingEditor {
  private names: string[] = [];
  private expected: string[] = [];
  private list: HTMLElement;
  private saveButton: HTMLButtonElement;
  private status: HTMLElement;
  private dragFrom: number | null = null;
  private dirty = false;

  constructor(root: HTMLElement,
              private submit: (ranking: string[]) => Promise<string[]>) {
    root.innerHTML = `
      <ol class="ranking-list"></ol>
      <div class="ranking-footer">
        <button type="button" class="ranking-save" disabled>save ranking</button>
        <span class="ranking-status"></span>
      </div>`;
    this.list = root.querySelector(".ranking-list") as HTMLElement;
    this.saveButton = root.querySelector(".ranking-save") as HTMLButtonElement;
    this.status = root.querySelector(".ranking-status") as HTMLElement;
    this.saveButton.addEventListener("click", () => { void this.save(); });
    document.addEventListener("mouseup", () => { this.endDrag(); });
  }

  load(names: string[]): void {
    this.names = [...names];
    this.expected = [...names].sort();
    this.dirty = false;
    this.render();
  }

  current(): string[] {
    return [...this.names];
  }

  /** Empty string when saveable, else the reason save is blocked. */
  validate(): string {
    if (this.names.length !== this.expected.length) {
      return `need ${this.expected.length} items, have ${this.names.length}`;
    }
    const sorted = [...this.names].sort();
    for (let i = 0; i < sorted.length; i++) {
      if (sorted[i] !== this.expected[i]) return "items differ from the known set";
    }
    return "";
  }

  moveItem(from: number, to: number): void {
    if (from === to || from < 0 || to < 0
        || from >= this.names.length || to >= this.names.length) return;
    const [name] = this.names.splice(from, 1);
    this.names.splice(to, 0, name);
    this.dirty = true;
    this.render();
  }

  private render(): void {
    this.list.innerHTML = "";
    this.names.forEach((name, index) => {
      const item = document.createElement("li");
      item.className = "ranking-item";
      item.tabIndex = 0;
      item.dataset.index = String(index);
      item.innerHTML =
        `<span class="grip" aria-hidden="true">&#8942;&#8942;</span>`
        + `<span class="rank">${index + 1}</span>`
        + `<span class="name"></span>`;
      (item.querySelector(".name") as HTMLElement).textContent = name;
      item.addEventListener("mousedown", (ev) => {
        ev.preventDefault();
        this.dragFrom = index;
        item.classList.add("dragging");
      });
      item.addEventListener("mouseover", () => {
        if (this.dragFrom !== null && this.dragFrom !== index) {
          const from = this.dragFrom;
          this.dragFrom = index;
          this.moveItem(from, index);
          this.markDragging(index);
        }
      });
      item.addEventListener("keydown", (ev) => {
        const key = (ev as KeyboardEvent).key;
        if (key !== "ArrowUp" && key !== "ArrowDown") return;
        ev.preventDefault();
        const to = key === "ArrowUp" ? index - 1 : index + 1;
        this.moveItem(index, to);
        this.focusItem(to);
      });
      this.list.appendChild(item);
    });
    const problem = this.validate();
    this.saveButton.disabled = problem !== "" || !this.dirty;
    this.status.textContent = problem !== "" ? problem
      : this.dirty ? "unsaved changes" : "saved";
  }

  private markDragging(index: number): void {
    this.list.querySelectorAll(".ranking-item").forEach((el, i) => {
      el.classList.toggle("dragging", i === index);
    });
  }

  private focusItem(index: number): void {
    const item = this.list.querySelectorAll(".ranking-item")[index];
    if (item) (item as HTMLElement).focus();
  }

  private endDrag(): void {
    if (this.dragFrom === null) return;
    this.dragFrom = null;
    this.list.querySelectorAll(".dragging").forEach((el) => {
      el.classList.remove("dragging");
    });
  }

  private async save(): Promise<void> {
    const problem = this.validate();
    if (problem !== "") {
      this.status.textContent = problem;
      return;
    }
    this.saveButton.disabled = true;
    try {
      const echoed = await this.submit(this.current());
      // optimistic list, server echo as truth
      this.names = [...echoed];
      this.dirty = false;
      this.render();
    } catch (err) {
      this.status.textContent = `save failed (${(err as Error).message})`;
      this.saveButton.disabled = false;
    }
  }
}
