/** Wire types for the review API. Deliberately mirrors the server's masked
 * payloads: there is no field here that could carry an item's source. */

export const CRITERIA = [
  "clinical_relevance",
  "guideline_alignment",
  "clarity_completeness",
  "distractor_plausibility",
  "language_cultural",
] as const;

export type Criterion = (typeof CRITERIA)[number];

export const CRITERION_LABELS: Record<Criterion, string> = {
  clinical_relevance: "Clinical relevance",
  guideline_alignment: "Guideline alignment",
  clarity_completeness: "Clarity and completeness",
  distractor_plausibility: "Distractor plausibility",
  language_cultural: "Language and cultural appropriateness",
};

export type OptionKey = "A" | "B" | "C" | "D";

export interface MaskedItem {
  assignment_id: string;
  masked_item_id: string;
  position: number;
  state: "pending" | "scored";
  question: string;
  options: Record<OptionKey, string>;
  proposed_answer: OptionKey;
  proposed_answer_text: string;
  explanation: string;
}

export interface QueueResponse {
  reviewer_id: string;
  pending: MaskedItem[];
}

export interface Progress {
  pending: number;
  scored: number;
}

export interface RubricSubmission {
  clinical_relevance: number;
  guideline_alignment: number;
  clarity_completeness: number;
  distractor_plausibility: number;
  language_cultural: number;
  comment: string;
}

/** Partially filled rubric form; submit stays disabled until complete. */
export interface FormState {
  scores: Partial<Record<Criterion, number>>;
  comment: string;
}

export function emptyForm(): FormState {
  return { scores: {}, comment: "" };
}

export function formComplete(form: FormState): boolean {
  return CRITERIA.every((c) => {
    const v = form.scores[c];
    return typeof v === "number" && v >= 1 && v <= 5;
  });
}

export function toSubmission(form: FormState): RubricSubmission {
  if (!formComplete(form)) {
    throw new Error("rubric form is incomplete");
  }
  return {
    clinical_relevance: form.scores.clinical_relevance!,
    guideline_alignment: form.scores.guideline_alignment!,
    clarity_completeness: form.scores.clarity_completeness!,
    distractor_plausibility: form.scores.distractor_plausibility!,
    language_cultural: form.scores.language_cultural!,
    comment: form.comment,
  };
}
