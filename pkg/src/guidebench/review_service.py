"""HTTP JSON API for the blinded review workflow.

Authentication is bearer-token per reviewer, with tokens supplied through
the environment (no self-registration):

    GUIDEBENCH_REVIEWER_TOKENS  JSON map {reviewer_id: token}
    GUIDEBENCH_ADMIN_TOKEN      token for decision/export endpoints
"""

from __future__ import annotations

import json
import os

from fastapi import Depends, FastAPI, HTTPException, Request, Response
from pydantic import BaseModel, Field

from .errors import ConflictError, NotFoundError, StateError
from .review import CRITERIA, ReviewStore, RubricScore

REVIEWER_TOKENS_ENV = "GUIDEBENCH_REVIEWER_TOKENS"
ADMIN_TOKEN_ENV = "GUIDEBENCH_ADMIN_TOKEN"


class RubricBody(BaseModel):
    clinical_relevance: int = Field(ge=1, le=5)
    guideline_alignment: int = Field(ge=1, le=5)
    clarity_completeness: int = Field(ge=1, le=5)
    distractor_plausibility: int = Field(ge=1, le=5)
    language_cultural: int = Field(ge=1, le=5)
    comment: str = ""

    def to_rubric(self) -> RubricScore:
        return RubricScore(
            scores={name: getattr(self, name) for name in CRITERIA},
            comment=self.comment,
        )


def tokens_from_env() -> tuple[dict[str, str], str | None]:
    raw = os.environ.get(REVIEWER_TOKENS_ENV, "{}")
    return json.loads(raw), os.environ.get(ADMIN_TOKEN_ENV)


def create_app(
    store: ReviewStore,
    reviewer_tokens: dict[str, str],
    admin_token: str | None = None,
) -> FastAPI:
    app = FastAPI(title="guidebench review service")
    token_to_reviewer = {token: reviewer for reviewer, token in reviewer_tokens.items()}

    def bearer(request: Request) -> str:
        header = request.headers.get("Authorization", "")
        if not header.startswith("Bearer "):
            raise HTTPException(status_code=401, detail="missing bearer token")
        return header[len("Bearer "):]

    def require_reviewer(request: Request) -> str:
        token = bearer(request)
        reviewer = token_to_reviewer.get(token)
        if reviewer is None:
            raise HTTPException(status_code=401, detail="unknown token")
        return reviewer

    def require_admin(request: Request) -> None:
        token = bearer(request)
        if admin_token is None or token != admin_token:
            raise HTTPException(status_code=401, detail="admin token required")

    @app.get("/healthz")
    def healthz():
        return {"status": "ready"}

    @app.get("/api/reviewers/{reviewer_id}/queue")
    def queue(reviewer_id: str, caller: str = Depends(require_reviewer)):
        if caller != reviewer_id:
            raise HTTPException(status_code=403, detail="token does not match reviewer")
        return {"reviewer_id": reviewer_id, "pending": store.queue_for(reviewer_id)}

    @app.get("/api/assignments/{assignment_id}")
    def assignment(assignment_id: str, caller: str = Depends(require_reviewer)):
        try:
            record = store.get_assignment(assignment_id)
        except NotFoundError:
            raise HTTPException(status_code=404, detail="assignment not found")
        if record.reviewer_id != caller:
            raise HTTPException(status_code=403, detail="not your assignment")
        return store.masked_payload(record)

    @app.post("/api/assignments/{assignment_id}/score")
    def score(assignment_id: str, body: RubricBody, caller: str = Depends(require_reviewer)):
        try:
            record = store.get_assignment(assignment_id)
        except NotFoundError:
            raise HTTPException(status_code=404, detail="assignment not found")
        if record.reviewer_id != caller:
            raise HTTPException(status_code=403, detail="not your assignment")
        try:
            updated = store.record_score(assignment_id, body.to_rubric())
        except ConflictError:
            raise HTTPException(status_code=409, detail="assignment already scored")
        except ValueError as exc:
            raise HTTPException(status_code=422, detail=str(exc))
        return {"assignment_id": updated.assignment_id, "state": updated.state}

    @app.get("/api/items/{item_id}/decision")
    def decision(item_id: str, _: None = Depends(require_admin)):
        try:
            return store.decision_for(item_id).to_json()
        except NotFoundError:
            raise HTTPException(status_code=404, detail="item not found")
        except StateError as exc:
            raise HTTPException(status_code=425, detail=str(exc))

    @app.get("/api/decisions/export")
    def export(_: None = Depends(require_admin)):
        lines = "".join(json.dumps(d.to_json()) + "\n" for d in store.all_decisions())
        return Response(content=lines, media_type="application/x-ndjson")

    @app.get("/api/progress")
    def progress():
        return store.progress()

    return app
