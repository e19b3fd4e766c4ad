"""Blinded human review workflow.

Items from the local pipeline are interleaved with operator-supplied
external distractor items; reviewers see masked payloads only, never a
source tag. Scores append to an on-disk log; decisions are recomputed on
demand from the raw score log, keeping the curation trail auditable.
"""

from __future__ import annotations

import json
import random
import threading
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigurationError, ConflictError, NotFoundError, StateError
from .generation import McqItem

CRITERIA = (
    "clinical_relevance",
    "guideline_alignment",
    "clarity_completeness",
    "distractor_plausibility",
    "language_cultural",
)

SOURCE_LOCAL = "alama"
SOURCE_EXTERNAL = "external"

# Decision thresholds; artifact configuration, not a clinical standard.
ACCEPT_ALIGNMENT_MEAN = 4.0
ACCEPT_OTHER_MEAN = 3.0
REJECT_FLOOR = 2.0
DISSENT_RANGE = 3


@dataclass
class RubricScore:
    scores: dict[str, int]
    comment: str = ""

    def validate(self) -> None:
        if set(self.scores) != set(CRITERIA):
            missing = set(CRITERIA) - set(self.scores)
            extra = set(self.scores) - set(CRITERIA)
            raise ValueError(f"rubric criteria mismatch (missing {sorted(missing)}, extra {sorted(extra)})")
        for name, value in self.scores.items():
            if not isinstance(value, int) or not 1 <= value <= 5:
                raise ValueError(f"criterion {name} must be an integer in [1,5], got {value!r}")


@dataclass
class ReviewAssignment:
    assignment_id: str
    reviewer_id: str
    masked_item_id: str
    item_id: str  # hidden: never serialized into reviewer payloads
    source: str  # hidden: alama | external
    position: int
    state: str = "pending"  # pending | scored


@dataclass
class ReviewDecision:
    item_id: str
    n_reviews: int
    means: dict[str, float]
    decision: str  # accepted | revise | rejected
    dissent_flag: bool

    def to_json(self) -> dict:
        return {
            "item_id": self.item_id,
            "n_reviews": self.n_reviews,
            "means": dict(self.means),
            "decision": self.decision,
            "dissent_flag": self.dissent_flag,
        }


def assign_blinded(
    items: list[McqItem],
    external_distractors: list[McqItem],
    reviewers: list[str],
    redundancy: int,
    seed: int,
) -> list[ReviewAssignment]:
    """Assign every item to exactly ``redundancy`` distinct reviewers.

    Local and external items are pooled and shuffled with the seed, loads
    stay balanced (greedy lowest-load), masked ids are uniform random
    tokens from the seeded generator, and each reviewer's queue order is
    itself seeded-shuffled. Same seed, same table.
    """
    if redundancy < 1:
        raise ConfigurationError("redundancy must be >= 1")
    if not reviewers:
        raise ConfigurationError("at least one reviewer required")
    if redundancy > len(reviewers):
        raise ConfigurationError(
            f"redundancy {redundancy} exceeds reviewer count {len(reviewers)}"
        )

    rng = random.Random(seed)
    pool = [(item, SOURCE_LOCAL) for item in items] + [
        (item, SOURCE_EXTERNAL) for item in external_distractors
    ]
    rng.shuffle(pool)

    loads = {reviewer: 0 for reviewer in reviewers}
    assignments: list[ReviewAssignment] = []
    for item, source in pool:
        chosen = sorted(reviewers, key=lambda rv: (loads[rv], rv))[:redundancy]
        for reviewer in chosen:
            loads[reviewer] += 1
            assignments.append(
                ReviewAssignment(
                    assignment_id=f"asg-{rng.getrandbits(64):016x}",
                    reviewer_id=reviewer,
                    masked_item_id=f"m-{rng.getrandbits(64):016x}",
                    item_id=item.item_id,
                    source=source,
                    position=0,
                )
            )

    for reviewer in reviewers:
        queue = [a for a in assignments if a.reviewer_id == reviewer]
        rng.shuffle(queue)
        for position, assignment in enumerate(queue):
            assignment.position = position
    assignments.sort(key=lambda a: (a.reviewer_id, a.position))
    return assignments


def aggregate(item_id: str, rubrics: list[RubricScore], redundancy: int) -> ReviewDecision:
    """Fold per-item rubric scores into an accept/revise/reject decision."""
    if len(rubrics) < redundancy:
        raise StateError(
            f"item {item_id} has {len(rubrics)} reviews, needs {redundancy}"
        )
    means = {
        criterion: sum(r.scores[criterion] for r in rubrics) / len(rubrics)
        for criterion in CRITERIA
    }
    if any(mean < REJECT_FLOOR for mean in means.values()):
        decision = "rejected"
    elif means["guideline_alignment"] >= ACCEPT_ALIGNMENT_MEAN and all(
        means[c] >= ACCEPT_OTHER_MEAN for c in CRITERIA if c != "guideline_alignment"
    ):
        decision = "accepted"
    else:
        decision = "revise"
    dissent = any(
        max(r.scores[c] for r in rubrics) - min(r.scores[c] for r in rubrics) >= DISSENT_RANGE
        for c in CRITERIA
    )
    return ReviewDecision(
        item_id=item_id,
        n_reviews=len(rubrics),
        means=means,
        decision=decision,
        dissent_flag=dissent,
    )


class ReviewStore:
    """Review state: assignments, masked payloads, and the score log.

    record_score is atomic per assignment (a lock serializes writers);
    decisions are always recomputed from raw scores, never cached.
    """

    def __init__(
        self,
        assignments: list[ReviewAssignment],
        items_by_id: dict[str, McqItem],
        redundancy: int,
        store_dir: str | Path | None = None,
    ):
        self._lock = threading.Lock()
        self.assignments = {a.assignment_id: a for a in assignments}
        self.items_by_id = items_by_id
        self.redundancy = redundancy
        self.scores: dict[str, RubricScore] = {}
        self.store_dir = Path(store_dir) if store_dir else None
        if self.store_dir:
            self.store_dir.mkdir(parents=True, exist_ok=True)
            self._persist_assignments()
            self._replay_scores()

    # -- persistence ------------------------------------------------------

    def _persist_assignments(self) -> None:
        path = self.store_dir / "assignments.jsonl"
        if path.exists():
            return
        with open(path, "w", encoding="utf-8") as fh:
            for a in self.assignments.values():
                fh.write(json.dumps(a.__dict__) + "\n")

    def _replay_scores(self) -> None:
        path = self.store_dir / "scores.jsonl"
        if not path.exists():
            return
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                record = json.loads(line)
                rubric = RubricScore(scores=record["scores"], comment=record.get("comment", ""))
                assignment = self.assignments.get(record["assignment_id"])
                if assignment is not None:
                    assignment.state = "scored"
                    self.scores[record["assignment_id"]] = rubric

    def _append_score(self, assignment_id: str, rubric: RubricScore) -> None:
        if not self.store_dir:
            return
        with open(self.store_dir / "scores.jsonl", "a", encoding="utf-8") as fh:
            fh.write(
                json.dumps(
                    {
                        "assignment_id": assignment_id,
                        "scores": rubric.scores,
                        "comment": rubric.comment,
                    }
                )
                + "\n"
            )

    # -- reviewer-facing --------------------------------------------------

    def masked_payload(self, assignment: ReviewAssignment) -> dict:
        """What a reviewer may see. No source-correlated field, ever."""
        item = self.items_by_id[assignment.item_id]
        return {
            "assignment_id": assignment.assignment_id,
            "masked_item_id": assignment.masked_item_id,
            "position": assignment.position,
            "state": assignment.state,
            "question": item.question,
            "options": dict(item.options),
            "proposed_answer": item.correct,
            "proposed_answer_text": item.options[item.correct],
            "explanation": item.explanation,
        }

    def queue_for(self, reviewer_id: str) -> list[dict]:
        pending = [
            a
            for a in self.assignments.values()
            if a.reviewer_id == reviewer_id and a.state == "pending"
        ]
        pending.sort(key=lambda a: a.position)
        return [self.masked_payload(a) for a in pending]

    def get_assignment(self, assignment_id: str) -> ReviewAssignment:
        assignment = self.assignments.get(assignment_id)
        if assignment is None:
            raise NotFoundError(f"assignment {assignment_id} not found")
        return assignment

    def record_score(self, assignment_id: str, rubric: RubricScore) -> ReviewAssignment:
        rubric.validate()
        with self._lock:
            assignment = self.get_assignment(assignment_id)
            if assignment.state == "scored":
                raise ConflictError(f"assignment {assignment_id} already scored")
            assignment.state = "scored"
            self.scores[assignment_id] = rubric
            self._append_score(assignment_id, rubric)
            return assignment

    # -- aggregation ------------------------------------------------------

    def rubrics_for_item(self, item_id: str) -> list[RubricScore]:
        ordered = sorted(
            (a for a in self.assignments.values() if a.item_id == item_id),
            key=lambda a: a.assignment_id,
        )
        return [self.scores[a.assignment_id] for a in ordered if a.assignment_id in self.scores]

    def decision_for(self, item_id: str) -> ReviewDecision:
        known = {a.item_id for a in self.assignments.values()}
        if item_id not in known:
            raise NotFoundError(f"item {item_id} has no assignments")
        return aggregate(item_id, self.rubrics_for_item(item_id), self.redundancy)

    def all_decisions(self) -> list[ReviewDecision]:
        decisions = []
        for item_id in sorted({a.item_id for a in self.assignments.values()}):
            try:
                decisions.append(self.decision_for(item_id))
            except StateError:
                continue
        return decisions

    def progress(self) -> dict:
        pending = sum(1 for a in self.assignments.values() if a.state == "pending")
        scored = sum(1 for a in self.assignments.values() if a.state == "scored")
        return {"pending": pending, "scored": scored}
