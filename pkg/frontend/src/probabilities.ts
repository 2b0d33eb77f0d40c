/** Per-class probability readout: a bar per class, sorted descending. */

export function buildProbabilityList(
  doc: Document,
  labels: readonly string[],
  probabilities: readonly number[],
  argmax: string,
): HTMLElement {
  const list = doc.createElement("div");
  list.className = "probability-list";
  list.dataset.model = "probabilities";

  const rows = labels
    .map((label, i) => ({ label, p: probabilities[i] ?? 0 }))
    .sort((a, b) => b.p - a.p);

  for (const { label, p } of rows) {
    const row = doc.createElement("div");
    row.className = "probability-row";
    row.dataset.label = label;

    const name = doc.createElement("span");
    name.className = "probability-label";
    name.textContent = label + (label === argmax ? " (predicted)" : "");

    const track = doc.createElement("div");
    track.className = "probability-track";
    const bar = doc.createElement("div");
    bar.className = "probability-bar";
    const width = (p * 100).toFixed(1);
    bar.setAttribute("style", `width:${width}%`);
    bar.dataset.width = width;

    const value = doc.createElement("span");
    value.className = "probability-value";
    value.textContent = p.toFixed(3);

    track.appendChild(bar);
    row.append(name, track, value);
    list.appendChild(row);
  }
  return list;
}
