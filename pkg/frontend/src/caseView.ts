import { buildOverlay } from "./heatmap.js";
import { buildProbabilityList } from "./probabilities.js";
import { CaseView, LABELS, Label } from "./types.js";

export interface CaseScreenHandle {
  root: HTMLElement;
  selectLabel(label: Label): void;
  selectedLabel(): Label | null;
  confirmButton: HTMLButtonElement;
}

/** Render one case: the radiograph, the answer form and (phase 2 only)
 * the model panel with probability bars and the heatmap overlay toggle. */
export function renderCase(
  doc: Document,
  view: CaseView,
  onConfirm: (label: Label) => void,
): CaseScreenHandle {
  const root = doc.createElement("section");
  root.className = "case-screen";
  root.dataset.phase = String(view.phase);
  root.dataset.caseId = view.caseId;

  const header = doc.createElement("header");
  const progress = doc.createElement("span");
  progress.className = "progress";
  progress.textContent = `Case ${view.index}/${view.total}`;
  const phaseBadge = doc.createElement("span");
  phaseBadge.className = "phase-badge";
  phaseBadge.textContent = view.phase === 1 ? "Phase 1 - unassisted" : "Phase 2 - CAD assisted";
  header.append(progress, phaseBadge);
  root.appendChild(header);

  const stage = doc.createElement("div");
  stage.className = "image-stage";
  stage.setAttribute("style", "position:relative;display:inline-block");
  const img = doc.createElement("img");
  img.className = "case-image";
  img.alt = `radiograph ${view.caseId}`;
  img.src = view.imageDataUrl;
  stage.appendChild(img);
  root.appendChild(stage);

  let selected: Label | null = null;
  const buttons = new Map<Label, HTMLButtonElement>();

  const confirmButton = doc.createElement("button");
  confirmButton.className = "confirm";
  confirmButton.textContent = "Confirm answer";
  confirmButton.disabled = true; // nothing selected yet
  confirmButton.addEventListener("click", () => {
    if (selected !== null) onConfirm(selected);
  });

  const selectLabel = (label: Label) => {
    selected = label;
    for (const [name, button] of buttons) {
      button.classList.toggle("selected", name === label);
      button.setAttribute("aria-pressed", String(name === label));
    }
    confirmButton.disabled = false;
  };

  if (view.phase === 2 && view.model) {
    const panel = doc.createElement("aside");
    panel.className = "model-panel";
    panel.dataset.model = "panel";

    const verdict = doc.createElement("p");
    verdict.className = "model-argmax";
    verdict.dataset.model = "argmax";
    verdict.textContent = `Model prediction: ${view.model.argmax}`;
    panel.appendChild(verdict);
    panel.appendChild(
      buildProbabilityList(doc, view.model.labels, view.model.probabilities, view.model.argmax),
    );

    const overlay = buildOverlay(doc, view.model.heatmap);
    overlay.hidden = true; // judge the raw image first
    stage.appendChild(overlay);

    const toggle = doc.createElement("button");
    toggle.className = "overlay-toggle";
    toggle.dataset.model = "overlay-toggle";
    toggle.textContent = "Show attention map";
    toggle.addEventListener("click", () => {
      overlay.hidden = !overlay.hidden;
      toggle.textContent = overlay.hidden ? "Show attention map" : "Hide attention map";
    });
    panel.appendChild(toggle);
    root.appendChild(panel);
  }

  const form = doc.createElement("div");
  form.className = "answer-form";
  LABELS.forEach((label, i) => {
    const button = doc.createElement("button");
    button.className = "label-choice";
    button.dataset.label = label;
    button.textContent = `${i + 1}. ${label}`;
    button.addEventListener("click", () => selectLabel(label));
    buttons.set(label, button);
    form.appendChild(button);
  });
  form.appendChild(confirmButton);
  root.appendChild(form);

  return { root, selectLabel, selectedLabel: () => selected, confirmButton };
}

export function renderErrorCard(doc: Document, message: string, onRetry: () => void): HTMLElement {
  const card = doc.createElement("div");
  card.className = "error-card";
  const text = doc.createElement("p");
  text.textContent = message;
  const retry = doc.createElement("button");
  retry.className = "retry";
  retry.textContent = "Retry";
  retry.addEventListener("click", onRetry);
  card.append(text, retry);
  return card;
}
