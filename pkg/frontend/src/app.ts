/**
 * Studio app: upload a degraded image, compose an instruction with live
 * preview, inspect the predicted mask as an overlay, run restoration with a
 * before/after comparator, and keep prior runs for side-by-side what-ifs.
 *
 * Plain DOM, no framework. Long-running actions set `data-busy` on their
 * button and the root dispatches "studio:preview-done" / "studio:run-done" /
 * "studio:health" events so scripted sessions can await them.
 */

import { ApiClient, ApiError } from "./api.js";
import { checksum, RunHistory, SessionRun } from "./history.js";
import { composeInstruction, InstructionFields, InvalidInstruction, TaskKind } from "./instruction.js";

export interface StudioDeps {
  api: ApiClient;
  storage: Storage;
  healthIntervalMs?: number;
}

const SLIDER = { min: 0, max: 2, step: 0.05 };

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text !== undefined) node.textContent = text;
  return node;
}

function dataUrlToBase64(dataUrl: string): string {
  const comma = dataUrl.indexOf(",");
  return comma >= 0 ? dataUrl.slice(comma + 1) : dataUrl;
}

export class Studio {
  readonly root: HTMLElement;
  private api: ApiClient;
  private history: RunHistory;

  private banner!: HTMLElement;
  private fileInput!: HTMLInputElement;
  private captionInput!: HTMLInputElement;
  private taskSelect!: HTMLSelectElement;
  private s1Input!: HTMLInputElement;
  private s2Input!: HTMLInputElement;
  private s1Label!: HTMLElement;
  private s2Label!: HTMLElement;
  private seedInput!: HTMLInputElement;
  private stepsInput!: HTMLInputElement;
  private composed!: HTMLInputElement;
  private errorBox!: HTMLElement;
  private previewBtn!: HTMLButtonElement;
  private restoreBtn!: HTMLButtonElement;
  private overlayToggle!: HTMLInputElement;
  private baseImg!: HTMLImageElement;
  private maskImg!: HTMLImageElement;
  private beforeImg!: HTMLImageElement;
  private afterImg!: HTMLImageElement;
  private comparatorSlider!: HTMLInputElement;
  private historyList!: HTMLElement;

  private imageB64: string | null = null;
  private healthy = false;
  private inFlight = false;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(root: HTMLElement, deps: StudioDeps) {
    this.root = root;
    this.api = deps.api;
    this.history = new RunHistory(deps.storage);
    this.build();
    this.renderHistory(this.history.list());
    this.refreshCompose();
    void this.pollHealth();
    if (deps.healthIntervalMs) {
      this.timer = setInterval(() => void this.pollHealth(), deps.healthIntervalMs);
    }
  }

  dispose(): void {
    if (this.timer) clearInterval(this.timer);
  }

  // -- layout --------------------------------------------------------------

  private build(): void {
    this.banner = el("div", { id: "health-banner", class: "banner", role: "status" }, "checking server ...");
    this.errorBox = el("div", { id: "error-box", class: "error", hidden: "" });

    this.fileInput = el("input", { id: "file-input", type: "file", accept: "image/png" });
    this.captionInput = el("input", { id: "caption-input", type: "text", placeholder: "region caption" });
    this.taskSelect = el("select", { id: "task-select" });
    this.taskSelect.append(
      el("option", { value: "local" }, "local restore"),
      el("option", { value: "bokeh" }, "bokeh restore"),
    );
    this.s1Input = el("input", {
      id: "s1-input", type: "range",
      min: String(SLIDER.min), max: String(SLIDER.max), step: String(SLIDER.step), value: "1",
    });
    this.s2Input = el("input", {
      id: "s2-input", type: "range",
      min: String(SLIDER.min), max: String(SLIDER.max), step: String(SLIDER.step), value: "1",
    });
    this.s1Label = el("span", { id: "s1-value" }, "1.0");
    this.s2Label = el("span", { id: "s2-value" }, "1.0");
    this.seedInput = el("input", { id: "seed-input", type: "number", value: "0" });
    this.stepsInput = el("input", { id: "steps-input", type: "number", value: "50" });
    this.composed = el("input", { id: "composed-instruction", type: "text", readonly: "" });

    this.previewBtn = el("button", { id: "preview-btn" }, "preview mask");
    this.restoreBtn = el("button", { id: "restore-btn" }, "restore");
    this.overlayToggle = el("input", { id: "overlay-toggle", type: "checkbox", checked: "" });

    this.baseImg = el("img", { id: "base-image", alt: "input" });
    this.maskImg = el("img", { id: "mask-overlay", alt: "mask", class: "overlay" });
    this.beforeImg = el("img", { id: "before-image", alt: "before" });
    this.afterImg = el("img", { id: "after-image", alt: "after" });
    this.comparatorSlider = el("input", {
      id: "comparator-slider", type: "range", min: "0", max: "100", value: "50",
    });
    this.historyList = el("div", { id: "history-list" });

    const form = el("div", { class: "controls" });
    form.append(
      this.fileInput, this.captionInput, this.taskSelect,
      this.s1Input, this.s1Label, this.s2Input, this.s2Label,
      this.seedInput, this.stepsInput, this.composed,
      this.previewBtn, this.restoreBtn, this.overlayToggle,
    );
    const stage = el("div", { class: "stage" });
    stage.append(this.baseImg, this.maskImg);
    const comparator = el("div", { class: "comparator" });
    comparator.append(this.beforeImg, this.afterImg, this.comparatorSlider);
    this.root.append(this.banner, this.errorBox, form, stage, comparator, this.historyList);

    this.fileInput.addEventListener("change", () => void this.onFile());
    for (const node of [this.captionInput, this.taskSelect, this.s1Input, this.s2Input]) {
      node.addEventListener("input", () => this.refreshCompose());
      node.addEventListener("change", () => this.refreshCompose());
    }
    this.previewBtn.addEventListener("click", () => void this.onPreview());
    this.restoreBtn.addEventListener("click", () => void this.onRestore());
    this.overlayToggle.addEventListener("change", () => {
      this.maskImg.style.display = this.overlayToggle.checked ? "" : "none";
    });
    this.comparatorSlider.addEventListener("input", () => {
      this.afterImg.style.clipPath = `inset(0 ${100 - Number(this.comparatorSlider.value)}% 0 0)`;
    });
  }

  // -- state ---------------------------------------------------------------

  fields(): InstructionFields {
    return {
      task: this.taskSelect.value as TaskKind,
      caption: this.captionInput.value,
      s1: Number(this.s1Input.value),
      s2: Number(this.s2Input.value),
    };
  }

  composedInstruction(): string {
    return this.composed.value;
  }

  private refreshCompose(): void {
    this.s1Label.textContent = Number(this.s1Input.value).toFixed(2);
    this.s2Label.textContent = Number(this.s2Input.value).toFixed(2);
    let message = "";
    try {
      this.composed.value = composeInstruction(this.fields());
    } catch (err) {
      this.composed.value = "";
      message = err instanceof InvalidInstruction ? err.message : String(err);
    }
    this.showError(message);
    this.updateButtons();
  }

  private updateButtons(): void {
    const ready = this.healthy && !this.inFlight && !!this.imageB64 && !!this.composed.value;
    this.previewBtn.disabled = !ready;
    this.restoreBtn.disabled = !ready;
  }

  private showError(message: string): void {
    this.errorBox.textContent = message;
    this.errorBox.toggleAttribute("hidden", !message);
  }

  private emit(name: string, detail?: unknown): void {
    this.root.dispatchEvent(new CustomEvent(name, { detail }));
  }

  // -- actions ---------------------------------------------------------------

  async pollHealth(): Promise<void> {
    const status = await this.api.health();
    this.healthy = status.ok;
    this.banner.textContent = status.ok
      ? `server ready (checkpoint ${status.checkpointId ?? "?"})`
      : "server unavailable - controls disabled";
    this.banner.classList.toggle("banner-down", !status.ok);
    this.updateButtons();
    this.emit("studio:health", status);
  }

  private onFile(): Promise<void> {
    return new Promise((resolve) => {
      const file = this.fileInput.files?.[0];
      if (!file) return resolve();
      const reader = new FileReader();
      reader.onload = () => {
        const dataUrl = String(reader.result);
        this.imageB64 = dataUrlToBase64(dataUrl);
        this.baseImg.src = dataUrl;
        this.beforeImg.src = dataUrl;
        this.updateButtons();
        this.emit("studio:image-loaded");
        resolve();
      };
      reader.readAsDataURL(file);
    });
  }

  private requestBody() {
    return {
      image: this.imageB64 as string,
      instruction: this.composed.value,
      seed: Number(this.seedInput.value),
      steps: Number(this.stepsInput.value),
    };
  }

  private async onPreview(): Promise<void> {
    if (!this.imageB64 || this.inFlight) return;
    this.inFlight = true;
    this.previewBtn.setAttribute("data-busy", "");
    this.updateButtons();
    try {
      const res = await this.api.previewMask(this.requestBody());
      this.maskImg.src = `data:image/png;base64,${res.mask}`;
      this.maskImg.style.display = this.overlayToggle.checked ? "" : "none";
      this.showError("");
    } catch (err) {
      this.showError(err instanceof ApiError ? err.detail : String(err));
    } finally {
      this.inFlight = false;
      this.previewBtn.removeAttribute("data-busy");
      this.updateButtons();
      this.emit("studio:preview-done");
    }
  }

  private async onRestore(): Promise<void> {
    if (!this.imageB64 || this.inFlight) return;
    this.inFlight = true;
    this.restoreBtn.setAttribute("data-busy", "");
    this.updateButtons();
    try {
      const body = this.requestBody();
      const preview = await this.api.previewMask(body);
      this.maskImg.src = `data:image/png;base64,${preview.mask}`;
      const res = await this.api.restore(body);
      this.afterImg.src = `data:image/png;base64,${res.image}`;
      const run: SessionRun = {
        id: `run-${Date.now()}-${Math.floor(Math.random() * 1e6)}`,
        createdAt: new Date().toISOString(),
        request: { ...this.fields(), seed: body.seed, steps: body.steps, instruction: body.instruction },
        response: {
          image: res.image,
          mask: res.mask,
          prompts: res.prompts,
          timingsMs: res.timings_ms,
        },
        checksums: { image: checksum(res.image), mask: checksum(res.mask) },
      };
      this.renderHistory(this.history.add(run));
      this.showError("");
    } catch (err) {
      this.showError(err instanceof ApiError ? err.detail : String(err));
    } finally {
      this.inFlight = false;
      this.restoreBtn.removeAttribute("data-busy");
      this.updateButtons();
      this.emit("studio:run-done");
    }
  }

  // -- history ---------------------------------------------------------------

  private renderHistory(runs: SessionRun[]): void {
    this.historyList.replaceChildren();
    for (const run of runs) {
      const card = el("div", { class: "history-card", "data-run-id": run.id });
      card.append(
        el("img", { src: `data:image/png;base64,${run.response.image}`, alt: "output", class: "thumb" }),
        el("div", { class: "history-instruction" }, run.request.instruction),
        el(
          "div",
          { class: "history-meta" },
          `s1=${run.request.s1} s2=${run.request.s2} seed=${run.request.seed} ` +
            `img#${run.checksums.image} mask#${run.checksums.mask}`,
        ),
      );
      this.historyList.append(card);
    }
  }
}

export function createStudio(root: HTMLElement, deps: StudioDeps): Studio {
  return new Studio(root, deps);
}
