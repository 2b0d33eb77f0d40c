/** Attention-map overlay rendered as a CSS grid of translucent cells.
 *
 * A single-hue alpha ramp keeps the map qualitative: cell opacity scales
 * with the normalized attention mass, the hue never changes. The grid
 * stretches over the image, which is exactly a nearest-cell upsample.
 */

const HUE = "255, 80, 40"; // warm single hue; only the alpha varies
const MAX_ALPHA = 0.55;

export function normalizeGrid(grid: number[][]): number[][] {
  let peak = 0;
  for (const row of grid) for (const v of row) peak = Math.max(peak, v);
  if (peak <= 0) return grid.map((row) => row.map(() => 0));
  return grid.map((row) => row.map((v) => v / peak));
}

export function buildOverlay(doc: Document, grid: number[][]): HTMLElement {
  const normalized = normalizeGrid(grid);
  const size = normalized.length;
  const overlay = doc.createElement("div");
  overlay.className = "heatmap-overlay";
  overlay.dataset.model = "heatmap";
  overlay.setAttribute(
    "style",
    [
      "position:absolute",
      "inset:0",
      "display:grid",
      `grid-template-columns:repeat(${size},1fr)`,
      `grid-template-rows:repeat(${size},1fr)`,
      "pointer-events:none",
    ].join(";"),
  );
  for (const row of normalized) {
    for (const value of row) {
      const cell = doc.createElement("div");
      cell.className = "heatmap-cell";
      const alpha = (value * MAX_ALPHA).toFixed(4);
      cell.setAttribute("style", `background-color:rgba(${HUE},${alpha})`);
      cell.dataset.alpha = alpha;
      overlay.appendChild(cell);
    }
  }
  return overlay;
}
