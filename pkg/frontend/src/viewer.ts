/**
 * Axial slice viewer for one case: server-composited overlay PNGs, a slice
 * scrubber, and an overlay-intensity slider.
 *
 * The PNGs arrive pre-composited (all heatmap math lives server-side) with
 * an achromatic base image, so CSS saturation acts as the overlay opacity
 * control: 0 leaves pure anatomy, 1 shows the full heatmap.
 */

export class SliceViewer {
  private img: HTMLImageElement;
  private counter: HTMLElement;
  private slider: HTMLInputElement;
  private bars: HTMLElement;
  private urls: string[] = [];
  private index = 0;

  constructor(root: HTMLElement,
              private toAbsolute: (path: string) => string) {
    root.innerHTML = `
      <div class="viewer-frame">
        <img class="viewer-img" alt="attention overlay slice" draggable="false">
      </div>
      <div class="viewer-controls">
        <button type="button" data-step="-1" aria-label="previous slice">&#9664;</button>
        <span class="viewer-counter"></span>
        <button type="button" data-step="1" aria-label="next slice">&#9654;</button>
        <label class="viewer-opacity">overlay
          <input type="range" min="0" max="100" value="100">
        </label>
      </div>
      <div class="table-bars"></div>`;
    this.img = root.querySelector(".viewer-img") as HTMLImageElement;
    this.counter = root.querySelector(".viewer-counter") as HTMLElement;
    this.slider = root.querySelector("input[type=range]") as HTMLInputElement;
    this.bars = root.querySelector(".table-bars") as HTMLElement;

    for (const button of root.querySelectorAll("button[data-step]")) {
      button.addEventListener("click", () => {
        this.step(Number((button as HTMLElement).dataset.step));
      });
    }
    this.img.parentElement!.addEventListener("wheel", (ev) => {
      ev.preventDefault();
      this.step((ev as WheelEvent).deltaY > 0 ? 1 : -1);
    });
    this.slider.addEventListener("input", () => this.applyOpacity());
    this.applyOpacity();
  }

  show(urls: string[], tableNames: string[], tableValues: number[]): void {
    this.urls = urls;
    this.index = Math.floor(urls.length / 2);
    this.render();
    this.renderBars(tableNames, tableValues);
  }

  step(delta: number): void {
    if (this.urls.length === 0) return;
    const next = this.index + delta;
    this.index = Math.min(this.urls.length - 1, Math.max(0, next));
    this.render();
  }

  sliceIndex(): number {
    return this.index;
  }

  overlayLevel(): number {
    return Number(this.slider.value) / 100;
  }

  private render(): void {
    if (this.urls.length === 0) {
      this.img.removeAttribute("src");
      this.counter.textContent = "no slices";
      return;
    }
    this.img.src = this.toAbsolute(this.urls[this.index]);
    this.counter.textContent = `${this.index + 1} / ${this.urls.length}`;
  }

  private applyOpacity(): void {
    this.img.style.filter = `saturate(${this.overlayLevel()})`;
  }

  private renderBars(names: string[], values: number[]): void {
    this.bars.innerHTML = "";
    const order = values.map((v, i) => [v, i] as const)
      .sort((a, b) => b[0] - a[0]);
    for (const [value, i] of order) {
      const row = document.createElement("div");
      row.className = "bar-row";
      const label = document.createElement("span");
      label.className = "bar-label";
      label.textContent = names[i];
      const track = document.createElement("span");
      track.className = "bar-track";
      const fill = document.createElement("span");
      fill.className = "bar-fill";
      fill.style.width = `${Math.round(100 * value)}%`;
      track.appendChild(fill);
      row.append(label, track);
      this.bars.appendChild(row);
    }
  }
}
