import { beforeEach, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { ReaderStudyApp } from "../src/app.js";
import { renderCase } from "../src/caseView.js";
import { buildOverlay, normalizeGrid } from "../src/heatmap.js";
import { buildProbabilityList } from "../src/probabilities.js";
import { CaseView, LABELS, Phase1CaseSchema } from "../src/types.js";
import { FakeServer } from "./fakeServer.js";

function appContainer(): HTMLElement {
  document.body.innerHTML = "<main id='app'></main>";
  return document.querySelector("#app") as HTMLElement;
}

function makeApp(server: FakeServer): ReaderStudyApp {
  const api = new ApiClient("http://fake", server.fetch);
  return new ReaderStudyApp(document, appContainer(), api, window.localStorage);
}

function phase1View(overrides: Partial<CaseView> = {}): CaseView {
  return {
    caseId: "c1",
    phase: 1,
    index: 1,
    total: 10,
    imageDataUrl: "data:image/png;base64,aGVsbG8=",
    ...overrides,
  };
}

beforeEach(() => {
  window.localStorage.clear();
});

describe("case rendering", () => {
  it("phase-1 screens carry no model-derived elements", () => {
    const handle = renderCase(document, phase1View(), () => {});
    expect(handle.root.querySelectorAll("[data-model]").length).toBe(0);
    expect(handle.root.querySelector(".probability-list")).toBeNull();
    expect(handle.root.querySelector(".heatmap-overlay")).toBeNull();
    expect(handle.root.querySelector(".progress")?.textContent).toBe("Case 1/10");
  });

  it("phase-1 payload schema rejects leaked model output", () => {
    const payload = {
      done: false,
      case_id: "c1",
      phase: 1,
      index: 1,
      total: 10,
      labels: [...LABELS],
      image_png_base64: "aGVsbG8=",
    };
    expect(Phase1CaseSchema.safeParse(payload).success).toBe(true);
    expect(Phase1CaseSchema.safeParse({ ...payload, model: {} }).success).toBe(false);
  });

  it("confirm stays disabled until a label is selected", () => {
    const handle = renderCase(document, phase1View(), () => {});
    expect(handle.confirmButton.disabled).toBe(true);
    (handle.root.querySelector("[data-label='B2']") as HTMLButtonElement).click();
    expect(handle.confirmButton.disabled).toBe(false);
    expect(handle.selectedLabel()).toBe("B2");
  });

  it("exactly one label can be selected at a time", () => {
    const handle = renderCase(document, phase1View(), () => {});
    handle.selectLabel("A1");
    handle.selectLabel("B3");
    const pressed = handle.root.querySelectorAll(".label-choice.selected");
    expect(pressed.length).toBe(1);
    expect((pressed[0] as HTMLElement).dataset.label).toBe("B3");
  });
});

describe("model panel", () => {
  it("one-hot probabilities render a single full-length bar", () => {
    const list = buildProbabilityList(document, [...LABELS], [0, 0, 1, 0, 0, 0, 0], "A2");
    const widths = [...list.querySelectorAll(".probability-bar")].map(
      (bar) => (bar as HTMLElement).dataset.width,
    );
    expect(widths[0]).toBe("100.0");
    expect(widths.filter((w) => Number(w) > 0).length).toBe(1);
    const first = list.querySelector(".probability-row") as HTMLElement;
    expect(first.dataset.label).toBe("A2");
    expect(first.textContent).toContain("(predicted)");
  });

  it("an all-equal heatmap renders a uniform tint", () => {
    const grid = [
      [0.25, 0.25],
      [0.25, 0.25],
    ];
    const overlay = buildOverlay(document, grid);
    const alphas = new Set(
      [...overlay.querySelectorAll(".heatmap-cell")].map((c) => (c as HTMLElement).dataset.alpha),
    );
    expect(alphas.size).toBe(1);
    expect([...alphas][0]).toBe("0.5500"); // uniform cells normalize to peak
  });

  it("zero-mass heatmaps normalize to all-zero cells", () => {
    expect(normalizeGrid([[0, 0], [0, 0]])).toEqual([
      [0, 0],
      [0, 0],
    ]);
  });

  it("phase-2 screens include bars and an overlay that toggles", () => {
    const view = phase1View({
      phase: 2,
      model: {
        labels: [...LABELS],
        probabilities: [0.4, 0.3, 0.1, 0.1, 0.05, 0.03, 0.02],
        argmax: "Unbroken",
        heatmap: [
          [0, 1],
          [0.5, 0.2],
        ],
        grid_size: 2,
      },
    });
    const handle = renderCase(document, view, () => {});
    expect(handle.root.querySelector("[data-model='panel']")).not.toBeNull();
    const overlay = handle.root.querySelector(".heatmap-overlay") as HTMLElement;
    expect(overlay.hidden).toBe(true); // raw image judged first
    const toggle = handle.root.querySelector("[data-model='overlay-toggle']") as HTMLButtonElement;
    toggle.click();
    expect(overlay.hidden).toBe(false);
    toggle.click();
    expect(overlay.hidden).toBe(true);
  });
});

describe("study flow", () => {
  const cases = ["c1", "c2", "c3"];
  const truth = { c1: "Unbroken", c2: "A1", c3: "B1" };

  it("keyboard shortcuts 1-7 select the matching class", async () => {
    const server = new FakeServer(cases, truth);
    const app = makeApp(server);
    await app.start("resident", 3);
    document.dispatchEvent(new KeyboardEvent("keydown", { key: "3" }));
    expect(app.currentCase?.selectedLabel()).toBe("A2");
    document.dispatchEvent(new KeyboardEvent("keydown", { key: "7" }));
    expect(app.currentCase?.selectedLabel()).toBe("B3");
  });

  it("completes both phases and lands on the summary", async () => {
    const server = new FakeServer(cases, truth);
    const app = makeApp(server);
    await app.start("resident", 3);
    for (const c of cases) {
      expect(document.querySelector("[data-model]")).toBeNull();
      await app.answerCurrent(truth[c as keyof typeof truth] as never);
    }
    expect(app.state).toBe("interphase");
    await app.beginPhase2();
    for (let i = 0; i < cases.length; i += 1) {
      expect(document.querySelector("[data-model='panel']")).not.toBeNull();
      await app.answerCurrent("Unbroken");
    }
    expect(app.state).toBe("summary");
    expect(app.lastReport?.phase1_accuracy).toBe(1.0);
    expect(document.querySelector("[data-metric='phase1']")?.textContent).toBe("1.000");
  });

  it("duplicate answers show a banner and the flow advances", async () => {
    const server = new FakeServer(cases, truth);
    const app = makeApp(server);
    await app.start("resident", 3);
    // the same case answered out of band, as if another tab replied first
    server.answers.set("c1:1", "A3");
    await app.answerCurrent("Unbroken");
    const banner = document.querySelector("[data-banner]") as HTMLElement;
    expect(banner.textContent).toContain("already had an answer");
    expect(app.currentView?.caseId).toBe("c2");
  });

  it("queues answers while the server is unreachable and retries them", async () => {
    const server = new FakeServer(cases, truth);
    const app = makeApp(server);
    await app.start("resident", 3);

    server.offline = true;
    await app.answerCurrent("A1");
    expect(app.pendingAnswers()).toBe(1);
    expect((document.querySelector("[data-banner]") as HTMLElement).textContent).toContain(
      "stored locally",
    );
    expect(server.answers.size).toBe(0);

    // reload: a fresh app over the same storage must not lose the answer
    server.offline = false;
    const revived = makeApp(server);
    await revived.init();
    expect(server.answers.get("c1:1")).toBe("A1");
    expect(revived.pendingAnswers()).toBe(0);
  });

  it("refuses to submit answers for cases never served", async () => {
    const server = new FakeServer(cases, truth);
    const app = makeApp(server);
    await app.start("resident", 3);
    app.currentView = { ...(app.currentView as CaseView), caseId: "forged" };
    await app.answerCurrent("A1");
    expect(server.answers.size).toBe(0);
    expect((document.querySelector("[data-banner]") as HTMLElement).textContent).toContain(
      "never served",
    );
  });

  it("shows an error card with retry when the image is missing", async () => {
    const server = new FakeServer(cases, truth);
    const brokenFetch: typeof server.fetch = async (input, init) => {
      const response = await server.fetch(input, init);
      const body = await response.json();
      if (body && body.done === false) body.image_png_base64 = "";
      return new Response(JSON.stringify(body), { status: response.status });
    };
    const api = new ApiClient("http://fake", brokenFetch);
    const app = new ReaderStudyApp(document, appContainer(), api, window.localStorage);
    await app.start("resident", 3);
    expect(app.state).toBe("error");
    expect(document.querySelector(".error-card .retry")).not.toBeNull();
  });
});
