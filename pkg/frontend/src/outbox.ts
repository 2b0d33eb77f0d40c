import { AnswerRecord } from "./types.js";
import { SubmitOutcome } from "./api.js";

export interface FlushStats {
  delivered: number;
  duplicates: number;
  failed: number;
}

/**
 * Persistent answer queue. Answers land here before any network call, so
 * an unreachable server (or a reload mid-flight) never loses a response.
 * Retries are idempotent: the (case, phase) key dedupes locally and the
 * server's duplicate rejection counts as delivered.
 */
export class Outbox {
  constructor(
    private readonly storageKey: string,
    private readonly storage: Storage,
  ) {}

  private read(): AnswerRecord[] {
    const raw = this.storage.getItem(this.storageKey);
    if (!raw) return [];
    try {
      return JSON.parse(raw) as AnswerRecord[];
    } catch {
      return [];
    }
  }

  private write(records: AnswerRecord[]): void {
    this.storage.setItem(this.storageKey, JSON.stringify(records));
  }

  pending(): AnswerRecord[] {
    return this.read();
  }

  enqueue(record: AnswerRecord): void {
    const records = this.read();
    const key = `${record.caseId}:${record.phase}`;
    if (records.some((r) => `${r.caseId}:${r.phase}` === key)) return;
    records.push(record);
    this.write(records);
  }

  /** Try to deliver everything; whatever fails stays queued for later. */
  async flush(post: (record: AnswerRecord) => Promise<SubmitOutcome>): Promise<FlushStats> {
    const stats: FlushStats = { delivered: 0, duplicates: 0, failed: 0 };
    const remaining: AnswerRecord[] = [];
    for (const record of this.read()) {
      try {
        const outcome = await post(record);
        if (outcome === "duplicate") stats.duplicates += 1;
        else stats.delivered += 1;
      } catch {
        stats.failed += 1;
        remaining.push(record);
      }
    }
    this.write(remaining);
    return stats;
  }
}
