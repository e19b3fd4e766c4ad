/** Session state machine: one item at a time, optimistic advance with
 * rollback, and per-assignment form persistence across page reloads.
 *
 * Scored assignments are immutable: a successful submit removes the item
 * and clears its persisted form, and the server's 409 is authoritative if
 * another tab got there first.
 */

import { ConflictError, NetworkError, ReviewApi } from "./api.js";
import {
  emptyForm,
  formComplete,
  toSubmission,
  type FormState,
  type MaskedItem,
} from "./types.js";

export type StorageLike = Pick<Storage, "getItem" | "setItem" | "removeItem">;

const FORM_KEY_PREFIX = "guidebench.form.";

export type SubmitOutcome =
  | { kind: "advanced" }
  | { kind: "conflict"; message: string }
  | { kind: "network"; message: string };

export class ReviewSession {
  private queue: MaskedItem[] = [];
  private scoredThisSession = 0;
  private serverScored = 0;

  constructor(
    private readonly api: ReviewApi,
    readonly reviewerId: string,
    private readonly storage: StorageLike,
  ) {}

  /** Load the pending queue in server-assigned order. */
  async load(): Promise<void> {
    const response = await this.api.loadQueue(this.reviewerId);
    this.queue = [...response.pending].sort((a, b) => a.position - b.position);
    const progress = await this.api.progress();
    this.serverScored = progress.scored;
  }

  current(): MaskedItem | null {
    return this.queue[0] ?? null;
  }

  pendingCount(): number {
    return this.queue.length;
  }

  scoredCount(): number {
    return this.serverScored + this.scoredThisSession;
  }

  // -- form persistence ----------------------------------------------------

  private formKey(assignmentId: string): string {
    return `${FORM_KEY_PREFIX}${assignmentId}`;
  }

  loadForm(assignmentId: string): FormState {
    const raw = this.storage.getItem(this.formKey(assignmentId));
    if (!raw) {
      return emptyForm();
    }
    try {
      const parsed = JSON.parse(raw) as FormState;
      return { scores: parsed.scores ?? {}, comment: parsed.comment ?? "" };
    } catch {
      return emptyForm();
    }
  }

  saveForm(assignmentId: string, form: FormState): void {
    this.storage.setItem(this.formKey(assignmentId), JSON.stringify(form));
  }

  clearForm(assignmentId: string): void {
    this.storage.removeItem(this.formKey(assignmentId));
  }

  // -- submission ------------------------------------------------------------

  /** Submit the current item's rubric.
   *
   * Optimistic: the item leaves the queue before the network call and is
   * reinstated if the call fails. A 409 means another session already
   * scored it, so the queue is refreshed from the server instead.
   */
  async submit(form: FormState): Promise<SubmitOutcome> {
    const item = this.current();
    if (!item) {
      throw new Error("no current assignment");
    }
    if (!formComplete(form)) {
      throw new Error("rubric form is incomplete");
    }
    const rubric = toSubmission(form);

    this.queue.shift(); // optimistic advance
    try {
      await this.api.submitScore(item.assignment_id, rubric);
    } catch (error) {
      if (error instanceof ConflictError) {
        // scored elsewhere; our copy is stale, the server wins
        this.clearForm(item.assignment_id);
        await this.load();
        return { kind: "conflict", message: "Already scored in another session; queue refreshed." };
      }
      this.queue.unshift(item); // rollback, keep the form for retry
      if (error instanceof NetworkError) {
        return { kind: "network", message: "Network problem; your scores are kept, retry when ready." };
      }
      throw error;
    }
    this.scoredThisSession += 1;
    this.clearForm(item.assignment_id);
    return { kind: "advanced" };
  }
}
