import { z } from "zod";

export const LABELS = ["Unbroken", "A1", "A2", "A3", "B1", "B2", "B3"] as const;
export type Label = (typeof LABELS)[number];

export const ModelBlockSchema = z.strictObject({
  labels: z.array(z.string()),
  probabilities: z.array(z.number()).length(LABELS.length),
  argmax: z.string(),
  heatmap: z.array(z.array(z.number())),
  grid_size: z.number().int().positive(),
});
export type ModelBlock = z.infer<typeof ModelBlockSchema>;

const caseFields = {
  done: z.literal(false),
  case_id: z.string(),
  phase: z.number().int().min(1).max(2),
  index: z.number().int().positive(),
  total: z.number().int().positive(),
  labels: z.array(z.string()),
  image_png_base64: z.string(),
};

// Strict schemas: a model field leaking into a phase-1 payload (or any
// other unexpected key) is a protocol violation, not something to ignore.
export const Phase1CaseSchema = z.strictObject(caseFields);
export const Phase2CaseSchema = z.strictObject({ ...caseFields, model: ModelBlockSchema });
export const PhaseDoneSchema = z.strictObject({
  done: z.literal(true),
  phase: z.number().int(),
  total: z.number().int(),
});

export type Phase1Case = z.infer<typeof Phase1CaseSchema>;
export type Phase2Case = z.infer<typeof Phase2CaseSchema>;
export type PhaseDone = z.infer<typeof PhaseDoneSchema>;
export type CasePayload = Phase1Case | Phase2Case | PhaseDone;

export const SessionSchema = z.strictObject({
  session_id: z.string(),
  role: z.string(),
  total_cases: z.number().int().positive(),
});
export type Session = z.infer<typeof SessionSchema>;

const roleEntry = z.object({
  sessions: z.number().int(),
  phase1_accuracy: z.number().optional(),
  phase2_accuracy: z.number().optional(),
  phase1_ci: z.array(z.number()).length(2).optional(),
  phase2_ci: z.array(z.number()).length(2).optional(),
  improvement: z.number().optional(),
});

export const StudyReportSchema = z.strictObject({
  session_id: z.string(),
  role: z.string(),
  cases: z.number().int(),
  phase1_accuracy: z.number().nullable(),
  phase2_accuracy: z.number().nullable(),
  improvement: z.number().nullable(),
  by_role: z.record(z.string(), roleEntry),
});
export type StudyReport = z.infer<typeof StudyReportSchema>;

/** What the case screen renders; the model block exists iff phase is 2. */
export interface CaseView {
  caseId: string;
  phase: 1 | 2;
  index: number;
  total: number;
  imageDataUrl: string;
  model?: ModelBlock;
}

export interface AnswerRecord {
  caseId: string;
  phase: 1 | 2;
  label: Label;
}

export function toCaseView(payload: Phase1Case | Phase2Case): CaseView {
  const view: CaseView = {
    caseId: payload.case_id,
    phase: payload.phase as 1 | 2,
    index: payload.index,
    total: payload.total,
    imageDataUrl: payload.image_png_base64
      ? `data:image/png;base64,${payload.image_png_base64}`
      : "",
  };
  if ("model" in payload) {
    view.model = payload.model;
  }
  return view;
}
