import { ApiClient } from "./api.js";
import { CaseScreenHandle, renderCase, renderErrorCard } from "./caseView.js";
import { Outbox } from "./outbox.js";
import { CaseView, LABELS, Label, StudyReport, toCaseView } from "./types.js";

type AppState = "start" | "case" | "interphase" | "summary" | "error";

interface StoredSession {
  sessionId: string;
  phase: 1 | 2;
  role: string;
}

const SESSION_KEY = "femurcad.session";

/** Single-session study flow: start screen, phase 1 cases, an interphase
 * gate, phase 2 cases with the model panel, then the summary report. */
export class ReaderStudyApp {
  state: AppState = "start";
  sessionId: string | null = null;
  phase: 1 | 2 = 1;
  role = "other";
  lastReport: StudyReport | null = null;
  currentCase: CaseScreenHandle | null = null;
  currentView: CaseView | null = null;

  private readonly servedCases = new Set<string>();
  private outbox: Outbox;

  constructor(
    private readonly doc: Document,
    private readonly container: HTMLElement,
    private readonly api: ApiClient,
    private readonly storage: Storage,
  ) {
    this.outbox = new Outbox("femurcad.outbox.unbound", storage);
    doc.addEventListener("keydown", (event) => this.onKeydown(event as KeyboardEvent));
  }

  /** Resume a stored session after reload, otherwise show the start screen. */
  async init(): Promise<void> {
    const raw = this.storage.getItem(SESSION_KEY);
    if (raw) {
      try {
        const stored = JSON.parse(raw) as StoredSession;
        this.sessionId = stored.sessionId;
        this.phase = stored.phase;
        this.role = stored.role;
        this.outbox = new Outbox(`femurcad.outbox.${stored.sessionId}`, this.storage);
        await this.loadNext();
        return;
      } catch {
        this.storage.removeItem(SESSION_KEY);
      }
    }
    this.renderStartScreen();
  }

  renderStartScreen(): void {
    this.state = "start";
    const screen = this.doc.createElement("section");
    screen.className = "start-screen";

    const heading = this.doc.createElement("h1");
    heading.textContent = "Femur fracture reader study";

    const roleSelect = this.doc.createElement("select");
    roleSelect.className = "role-select";
    for (const role of ["resident", "radiologist", "other"]) {
      const option = this.doc.createElement("option");
      option.value = role;
      option.textContent = role;
      roleSelect.appendChild(option);
    }

    const button = this.doc.createElement("button");
    button.className = "start-button";
    button.textContent = "Start study";
    button.addEventListener("click", () => {
      void this.start(roleSelect.value);
    });

    screen.append(heading, roleSelect, button);
    this.swap(screen);
  }

  async start(role: string, caseCount?: number): Promise<void> {
    try {
      const session = await this.api.createSession(role, caseCount);
      this.sessionId = session.session_id;
      this.role = session.role;
      this.phase = 1;
      this.outbox = new Outbox(`femurcad.outbox.${session.session_id}`, this.storage);
      this.persistSession();
      await this.loadNext();
    } catch (error) {
      this.renderError(`Could not start the study: ${String(error)}`);
    }
  }

  private persistSession(): void {
    if (this.sessionId) {
      this.storage.setItem(
        SESSION_KEY,
        JSON.stringify({ sessionId: this.sessionId, phase: this.phase, role: this.role }),
      );
    }
  }

  async loadNext(): Promise<void> {
    if (!this.sessionId) return;
    await this.flushOutbox();
    let payload;
    try {
      payload = await this.api.nextCase(this.sessionId, this.phase);
    } catch (error) {
      this.renderError(`Could not load the next case: ${String(error)}`);
      return;
    }
    if (payload.done) {
      if (this.phase === 1) {
        this.renderInterphase();
      } else {
        await this.showSummary();
      }
      return;
    }
    const view = toCaseView(payload);
    if (!view.imageDataUrl) {
      this.renderError(`Case ${view.caseId} arrived without an image.`);
      return;
    }
    this.servedCases.add(view.caseId);
    this.renderCaseScreen(view);
  }

  private renderCaseScreen(view: CaseView): void {
    this.state = "case";
    const handle = renderCase(this.doc, view, (label) => {
      void this.answerCurrent(label);
    });
    this.currentCase = handle;
    this.currentView = view;
    this.swap(handle.root);
  }

  /** Record the answer for the on-screen case and advance. The confirm
   * button routes through here, so tests can await the same path. */
  async answerCurrent(label: Label): Promise<void> {
    const view = this.currentView;
    if (!this.sessionId || !view) return;
    if (!this.servedCases.has(view.caseId)) {
      this.showBanner("That case was never served in this session.", "warning");
      return;
    }
    this.outbox.enqueue({ caseId: view.caseId, phase: view.phase, label });
    const stats = await this.flushOutbox();
    if (stats.failed > 0) {
      this.showBanner("Server unreachable; the answer is stored locally and will be retried.", "warning");
    } else if (stats.duplicates > 0) {
      this.showBanner("This case already had an answer for this phase; moving on.", "info");
    }
    await this.loadNext();
  }

  private async flushOutbox() {
    const sessionId = this.sessionId;
    if (!sessionId) return { delivered: 0, duplicates: 0, failed: 0 };
    return this.outbox.flush((record) => this.api.submitAnswer(sessionId, record));
  }

  pendingAnswers(): number {
    return this.outbox.pending().length;
  }

  private renderInterphase(): void {
    this.state = "interphase";
    const screen = this.doc.createElement("section");
    screen.className = "interphase-screen";
    const text = this.doc.createElement("p");
    text.textContent =
      "Phase 1 complete. Phase 2 repeats the cases with the model's prediction visible.";
    const button = this.doc.createElement("button");
    button.className = "begin-phase2";
    button.textContent = "Begin phase 2";
    button.addEventListener("click", () => {
      void this.beginPhase2();
    });
    screen.append(text, button);
    this.swap(screen);
  }

  async beginPhase2(): Promise<void> {
    this.phase = 2;
    this.persistSession();
    await this.loadNext();
  }

  async showSummary(): Promise<void> {
    if (!this.sessionId) return;
    let report: StudyReport;
    try {
      report = await this.api.report(this.sessionId);
    } catch (error) {
      this.renderError(`Could not fetch the study report: ${String(error)}`);
      return;
    }
    this.lastReport = report;
    this.state = "summary";
    this.storage.removeItem(SESSION_KEY);

    const screen = this.doc.createElement("section");
    screen.className = "summary-screen";
    const heading = this.doc.createElement("h2");
    heading.textContent = "Study complete";
    screen.appendChild(heading);

    const rows: Array<[string, string, number | null]> = [
      ["Unassisted accuracy", "phase1", report.phase1_accuracy],
      ["Assisted accuracy", "phase2", report.phase2_accuracy],
      ["Improvement", "improvement", report.improvement],
    ];
    const list = this.doc.createElement("dl");
    list.className = "summary-metrics";
    for (const [title, key, value] of rows) {
      const term = this.doc.createElement("dt");
      term.textContent = title;
      const detail = this.doc.createElement("dd");
      detail.dataset.metric = key;
      detail.dataset.value = value === null ? "" : String(value);
      detail.textContent = value === null ? "n/a" : value.toFixed(3);
      list.append(term, detail);
    }
    screen.appendChild(list);

    const roleTable = this.doc.createElement("table");
    roleTable.className = "role-table";
    for (const [role, entry] of Object.entries(report.by_role)) {
      const tr = this.doc.createElement("tr");
      tr.dataset.role = role;
      const cells = [
        role,
        entry.phase1_accuracy?.toFixed(3) ?? "-",
        entry.phase2_accuracy?.toFixed(3) ?? "-",
        entry.improvement?.toFixed(3) ?? "-",
      ];
      for (const text of cells) {
        const td = this.doc.createElement("td");
        td.textContent = text;
        tr.appendChild(td);
      }
      roleTable.appendChild(tr);
    }
    screen.appendChild(roleTable);
    this.swap(screen);
  }

  private renderError(message: string): void {
    this.state = "error";
    this.swap(renderErrorCard(this.doc, message, () => void this.loadNext()));
  }

  private onKeydown(event: KeyboardEvent): void {
    if (this.state !== "case" || !this.currentCase) return;
    const index = Number.parseInt(event.key, 10);
    if (index >= 1 && index <= LABELS.length) {
      this.currentCase.selectLabel(LABELS[index - 1] as Label);
    }
  }

  private showBanner(message: string, kind: "info" | "warning"): void {
    let banner = this.doc.querySelector<HTMLElement>("[data-banner]");
    if (!banner) {
      banner = this.doc.createElement("div");
      banner.setAttribute("data-banner", "");
      this.container.parentElement?.insertBefore(banner, this.container);
    }
    banner.dataset.kind = kind;
    banner.textContent = message;
  }

  private swap(node: HTMLElement): void {
    this.container.replaceChildren(node);
  }
}

export function bootstrap(doc: Document, baseUrl: string): ReaderStudyApp {
  const container = doc.querySelector<HTMLElement>("#app");
  if (!container) throw new Error("missing #app container");
  const app = new ReaderStudyApp(doc, container, new ApiClient(baseUrl), window.localStorage);
  void app.init();
  return app;
}
