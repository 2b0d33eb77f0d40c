import {
  AnswerRecord,
  CasePayload,
  Phase1CaseSchema,
  Phase2CaseSchema,
  PhaseDoneSchema,
  Session,
  SessionSchema,
  StudyReport,
  StudyReportSchema,
} from "./types.js";

export type SubmitOutcome = "recorded" | "duplicate";

export class ApiError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
  }
}

async function detailOf(response: Response): Promise<string> {
  try {
    const body = (await response.json()) as { detail?: string };
    return body.detail ?? response.statusText;
  } catch {
    return response.statusText;
  }
}

/** Thin typed client over the cad-service HTTP API. */
export class ApiClient {
  constructor(
    readonly baseUrl: string,
    private readonly fetchFn: typeof fetch = (...args) => fetch(...args),
  ) {}

  private async request(path: string, init?: RequestInit): Promise<Response> {
    return this.fetchFn(`${this.baseUrl}${path}`, init);
  }

  async createSession(role: string, caseCount?: number): Promise<Session> {
    const body: Record<string, unknown> = { role };
    if (caseCount !== undefined) body.case_count = caseCount;
    const response = await this.request("/study", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
    return SessionSchema.parse(await response.json());
  }

  async nextCase(sessionId: string, phase: 1 | 2): Promise<CasePayload> {
    const response = await this.request(`/study/${sessionId}/next?phase=${phase}`);
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
    const payload = (await response.json()) as { done: boolean };
    if (payload.done) return PhaseDoneSchema.parse(payload);
    // phase 1 must verify that no model output leaked into the payload
    return phase === 1 ? Phase1CaseSchema.parse(payload) : Phase2CaseSchema.parse(payload);
  }

  async submitAnswer(sessionId: string, answer: AnswerRecord): Promise<SubmitOutcome> {
    const response = await this.request(`/study/${sessionId}/answer`, {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({
        case_id: answer.caseId,
        phase: answer.phase,
        label: answer.label,
      }),
    });
    if (response.status === 409) {
      const detail = await detailOf(response);
      if (detail.includes("already answered")) return "duplicate";
      throw new ApiError(409, detail);
    }
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
    return "recorded";
  }

  async report(sessionId: string): Promise<StudyReport> {
    const response = await this.request(`/study/${sessionId}/report`);
    if (!response.ok) throw new ApiError(response.status, await detailOf(response));
    return StudyReportSchema.parse(await response.json());
  }
}
