"""Request and response bodies of the screening API."""

from __future__ import annotations

from pydantic import BaseModel, Field, field_validator

MAX_PAGE = 200

_LABELS = {"relevant": 1, "irrelevant": 0, "1": 1, "0": 0, "include": 1, "exclude": 0}


class FeedbackParamsBody(BaseModel):
    k: int = Field(10, ge=1)
    s_init: int = Field(1, ge=1)
    t_init: int = Field(200, ge=1)
    s_final: int = Field(50, ge=1)
    t_final: int | None = Field(1000, ge=1)


class CreateSessionRequest(BaseModel):
    topic_id: str
    params: FeedbackParamsBody | None = None
    seed: int | None = None


class SessionCreated(BaseModel):
    session_id: str
    topic_id: str
    phase: str
    n_candidates: int
    params: FeedbackParamsBody


class NextDocument(BaseModel):
    session_id: str
    doc_id: str
    title: str
    abstract: str
    position: int
    phase: str
    round: int


class JudgmentRequest(BaseModel):
    doc_id: str
    label: int

    @field_validator("label", mode="before")
    @classmethod
    def _label(cls, v):
        if isinstance(v, bool):
            return int(v)
        if isinstance(v, int) and v in (0, 1):
            return v
        if isinstance(v, str) and v.strip().lower() in _LABELS:
            return _LABELS[v.strip().lower()]
        raise ValueError("label must be 0/1, true/false or 'relevant'/'irrelevant'")


class JudgmentResponse(BaseModel):
    doc_id: str
    label: int
    judged: int
    relevant_found: int
    phase: str
    retrained: bool
    step: int
    step_changed: bool
    next_doc_id: str | None


class RankingItem(BaseModel):
    rank: int
    doc_id: str


class RankingPage(BaseModel):
    offset: int
    limit: int
    total: int
    items: list[RankingItem]


class SessionStats(BaseModel):
    session_id: str
    topic_id: str
    judged: int
    relevant_found: int
    pending: int
    n_candidates: int
    phase: str
    round: int
    retrain_count: int
    one_class: bool
    params: FeedbackParamsBody
    recall_if_oracle: float | None = None


class TraceEntry(BaseModel):
    step: int
    doc_id: str
    label: int
    judged: int
    round: int
    batch_size: int


class FinalRanking(BaseModel):
    session_id: str
    topic_id: str
    finished: bool
    doc_ids: list[str]


class TopicInfo(BaseModel):
    topic_id: str
    review_type: str
    title: str
    n_candidates: int
