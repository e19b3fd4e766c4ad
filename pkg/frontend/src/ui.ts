/** DOM views: login, one-item review with the five-criterion rubric,
 * and completion. One item at a time by design; no list preview of
 * upcoming items, nothing source-identifying anywhere in the DOM.
 */

import { AuthError, NetworkError, ReviewApi, type FetchLike } from "./api.js";
import { ReviewSession, type StorageLike } from "./state.js";
import {
  CRITERIA,
  CRITERION_LABELS,
  formComplete,
  type Criterion,
  type FormState,
  type MaskedItem,
  type OptionKey,
} from "./types.js";

export interface AppConfig {
  root: HTMLElement;
  baseUrl: string;
  storage: StorageLike;
  fetchImpl?: FetchLike;
  documentRef?: Document;
}

export class ReviewApp {
  private session: ReviewSession | null = null;
  private form: FormState = { scores: {}, comment: "" };
  private activeCriterion: Criterion = CRITERIA[0];
  private notice = "";
  private readonly doc: Document;

  constructor(private readonly config: AppConfig) {
    this.doc = config.documentRef ?? document;
    this.doc.addEventListener("keydown", (event) => this.onKeydown(event as KeyboardEvent));
  }

  // -- entry points ----------------------------------------------------------

  renderLogin(errorMessage = ""): void {
    this.config.root.innerHTML = `
      <div class="login">
        <h1>Item review</h1>
        ${errorMessage ? `<p class="error" data-testid="auth-error">${escapeHtml(errorMessage)}</p>` : ""}
        <label>Reviewer id <input data-testid="reviewer-id" type="text" /></label>
        <label>Access token <input data-testid="token" type="password" /></label>
        <button data-testid="login">Start reviewing</button>
      </div>`;
    this.byTestId<HTMLButtonElement>("login").addEventListener("click", () => {
      const reviewerId = this.byTestId<HTMLInputElement>("reviewer-id").value.trim();
      const token = this.byTestId<HTMLInputElement>("token").value.trim();
      void this.start(reviewerId, token);
    });
  }

  async start(reviewerId: string, token: string): Promise<void> {
    const api = new ReviewApi(this.config.baseUrl, token, this.config.fetchImpl);
    const session = new ReviewSession(api, reviewerId, this.config.storage);
    try {
      await session.load();
    } catch (error) {
      if (error instanceof AuthError) {
        this.renderLogin("That token was not accepted. Check it and try again.");
        return;
      }
      if (error instanceof NetworkError) {
        this.renderLogin("Could not reach the review service.");
        return;
      }
      throw error;
    }
    this.session = session;
    this.notice = "";
    this.renderCurrent();
  }

  // -- review view -----------------------------------------------------------

  renderCurrent(): void {
    const session = this.session;
    if (!session) {
      this.renderLogin();
      return;
    }
    const item = session.current();
    if (!item) {
      this.renderComplete();
      return;
    }
    this.form = session.loadForm(item.assignment_id);
    this.activeCriterion = nextUnsetCriterion(this.form) ?? CRITERIA[0];
    this.config.root.innerHTML = this.reviewHtml(item, session);
    this.bindReviewHandlers(item);
  }

  private reviewHtml(item: MaskedItem, session: ReviewSession): string {
    const optionKeys: OptionKey[] = ["A", "B", "C", "D"];
    const options = optionKeys
      .map((key) => {
        const proposed = key === item.proposed_answer;
        return `<li data-testid="option-${key}" class="${proposed ? "proposed" : ""}">
          <strong>${key})</strong> ${escapeHtml(item.options[key])}
          ${proposed ? '<span class="badge">proposed answer</span>' : ""}
        </li>`;
      })
      .join("");
    const rubric = CRITERIA.map((criterion) => this.criterionHtml(criterion)).join("");
    return `
      <div class="review">
        <header>
          <span data-testid="progress">${session.pendingCount()} pending / ${session.scoredCount()} done</span>
          ${this.notice ? `<p class="notice" data-testid="notice">${escapeHtml(this.notice)}</p>` : ""}
        </header>
        <section class="item" data-testid="item" data-assignment="${item.assignment_id}">
          <h2 data-testid="question">${escapeHtml(item.question)}</h2>
          <ul class="options">${options}</ul>
          ${item.explanation ? `<p class="explanation">${escapeHtml(item.explanation)}</p>` : ""}
        </section>
        <section class="rubric">
          ${rubric}
          <label>Comment (optional)
            <textarea data-testid="comment">${escapeHtml(this.form.comment)}</textarea>
          </label>
          <button data-testid="submit" ${formComplete(this.form) ? "" : "disabled"}>Submit and next</button>
          <p class="hint">Keys 1-5 score the highlighted criterion.</p>
        </section>
      </div>`;
  }

  private criterionHtml(criterion: Criterion): string {
    const value = this.form.scores[criterion];
    const active = criterion === this.activeCriterion;
    const buttons = [1, 2, 3, 4, 5]
      .map(
        (n) => `<button type="button" data-criterion="${criterion}" data-value="${n}"
          data-testid="score-${criterion}-${n}"
          class="${value === n ? "selected" : ""}">${n}</button>`,
      )
      .join("");
    return `<fieldset data-testid="criterion-${criterion}" class="${active ? "active" : ""}">
        <legend>${CRITERION_LABELS[criterion]}</legend>${buttons}
      </fieldset>`;
  }

  private bindReviewHandlers(item: MaskedItem): void {
    for (const button of Array.from(
      this.config.root.querySelectorAll<HTMLButtonElement>("button[data-criterion]"),
    )) {
      button.addEventListener("click", () => {
        const criterion = button.dataset.criterion as Criterion;
        const value = Number(button.dataset.value);
        this.setScore(item, criterion, value);
      });
    }
    this.byTestId<HTMLTextAreaElement>("comment").addEventListener("input", (event) => {
      this.form.comment = (event.target as HTMLTextAreaElement).value;
      this.session?.saveForm(item.assignment_id, this.form);
    });
    this.byTestId<HTMLButtonElement>("submit").addEventListener("click", () => {
      void this.submit();
    });
  }

  private setScore(item: MaskedItem, criterion: Criterion, value: number): void {
    if (value < 1 || value > 5) {
      return;
    }
    this.form.scores[criterion] = value;
    this.session?.saveForm(item.assignment_id, this.form);
    this.activeCriterion = nextUnsetCriterion(this.form) ?? criterion;
    this.renderKeepingComment(item);
  }

  private renderKeepingComment(item: MaskedItem): void {
    const session = this.session;
    if (!session) {
      return;
    }
    this.config.root.innerHTML = this.reviewHtml(item, session);
    this.bindReviewHandlers(item);
  }

  async submit(): Promise<void> {
    const session = this.session;
    const item = session?.current();
    if (!session || !item || !formComplete(this.form)) {
      return;
    }
    const outcome = await session.submit(this.form);
    this.notice = outcome.kind === "advanced" ? "" : outcome.message;
    this.renderCurrent();
  }

  private renderComplete(): void {
    const session = this.session;
    this.config.root.innerHTML = `
      <div class="done" data-testid="complete">
        <h1>All done</h1>
        <p>No assignments pending. ${session ? session.scoredCount() : 0} scored in total.</p>
        ${this.notice ? `<p class="notice" data-testid="notice">${escapeHtml(this.notice)}</p>` : ""}
      </div>`;
  }

  // -- keyboard shortcuts ------------------------------------------------------

  private onKeydown(event: KeyboardEvent): void {
    const item = this.session?.current();
    if (!item) {
      return;
    }
    const target = event.target as HTMLElement | null;
    if (target && (target.tagName === "TEXTAREA" || target.tagName === "INPUT")) {
      return; // typing a comment, not scoring
    }
    if (event.key >= "1" && event.key <= "5") {
      this.setScore(item, this.activeCriterion, Number(event.key));
    }
  }

  private byTestId<T extends HTMLElement>(id: string): T {
    const element = this.config.root.querySelector<T>(`[data-testid="${id}"]`);
    if (!element) {
      throw new Error(`missing element ${id}`);
    }
    return element;
  }
}

function nextUnsetCriterion(form: FormState): Criterion | null {
  for (const criterion of CRITERIA) {
    if (form.scores[criterion] === undefined) {
      return criterion;
    }
  }
  return null;
}

function escapeHtml(text: string): string {
  return text
    .replaceAll("&", "&amp;")
    .replaceAll("<", "&lt;")
    .replaceAll(">", "&gt;")
    .replaceAll('"', "&quot;");
}
