"""FastAPI application exposing screening sessions."""

from __future__ import annotations

import logging
from pathlib import Path

from fastapi import FastAPI, Header, Query, Request
from fastapi.responses import JSONResponse

from ..feedback import Phase
from .schemas import (
    MAX_PAGE,
    CreateSessionRequest,
    FeedbackParamsBody,
    FinalRanking,
    JudgmentRequest,
    JudgmentResponse,
    NextDocument,
    RankingItem,
    RankingPage,
    SessionCreated,
    SessionStats,
    TopicInfo,
    TraceEntry,
)
from .store import Artifacts, Gone, LiveSession, SessionStore, StoreError

logger = logging.getLogger(__name__)


def create_app(artifacts_dir: str | Path, data_dir: str | Path | None = None, with_qrels: bool = True) -> FastAPI:
    """Build the app over a pipeline output directory.

    Session journals live under ``data_dir`` (default: ``<artifacts_dir>/service``).
    """
    artifacts = Artifacts(artifacts_dir, with_qrels=with_qrels)
    store = SessionStore(artifacts, data_dir or Path(artifacts_dir) / "service")
    app = FastAPI(title="tarscreen screening service")
    app.state.store = store

    @app.exception_handler(StoreError)
    async def _store_error(request: Request, exc: StoreError):
        body = {"detail": str(exc)}
        if isinstance(exc, Gone) and exc.final:
            body["final_ranking"] = exc.final
        return JSONResponse(status_code=exc.status, content=body)

    def _params(live: LiveSession) -> FeedbackParamsBody:
        return FeedbackParamsBody(**live.engine.requested_params.to_dict())

    @app.get("/health")
    def health() -> dict:
        return {"status": "ok", "sessions": len(store.sessions)}

    @app.get("/topics", response_model=list[TopicInfo])
    def topics():
        return [
            TopicInfo(topic_id=t.topic_id, review_type=t.review_type, title=t.title, n_candidates=len(t.candidates))
            for t in sorted(artifacts.topics.values(), key=lambda x: x.topic_id)
        ]

    @app.post("/sessions", status_code=201, response_model=SessionCreated)
    def create_session(body: CreateSessionRequest, idempotency_key: str | None = Header(None)):
        params = body.params.model_dump() if body.params else None
        live, _ = store.create(body.topic_id, params, body.seed, idempotency_key)
        with live.state:
            return SessionCreated(
                session_id=live.session_id, topic_id=live.topic_id, phase=live.engine.phase.value,
                n_candidates=live.engine.n, params=_params(live),
            )

    @app.get("/sessions/{session_id}/next", response_model=NextDocument)
    def next_document(session_id: str):
        live = store.get(session_id)
        with live.state:
            doc_id = live.engine.current_doc()
            if doc_id is None:
                raise Gone("session is finished", final=f"/sessions/{session_id}/final")
            doc = artifacts.index.document(doc_id)
            return NextDocument(
                session_id=session_id, doc_id=doc_id, title=doc.title, abstract=doc.abstract,
                position=live.engine.judged_count + 1, phase=live.engine.phase.value, round=live.engine.round,
            )

    @app.post("/sessions/{session_id}/judgments", response_model=JudgmentResponse)
    def post_judgment(session_id: str, body: JudgmentRequest, idempotency_key: str | None = Header(None)):
        return store.judge(session_id, body.doc_id, body.label, idempotency_key)

    @app.get("/sessions/{session_id}/ranking", response_model=RankingPage)
    def ranking(session_id: str, offset: int = Query(0, ge=0), limit: int = Query(50, ge=1)):
        live = store.get(session_id)
        limit = min(limit, MAX_PAGE)
        with live.state:
            pending = live.engine.pending_ids
        page = pending[offset: offset + limit]
        items = [RankingItem(rank=offset + i + 1, doc_id=d) for i, d in enumerate(page)]
        return RankingPage(offset=offset, limit=limit, total=len(pending), items=items)

    @app.get("/sessions/{session_id}/stats", response_model=SessionStats)
    def stats(session_id: str):
        live = store.get(session_id)
        with live.state:
            e = live.engine
            return SessionStats(
                session_id=session_id, topic_id=live.topic_id, judged=e.judged_count, relevant_found=e.relevant_found,
                pending=len(e.pending), n_candidates=e.n, phase=e.phase.value, round=e.round,
                retrain_count=e.retrain_count, one_class=e.one_class, params=_params(live),
                recall_if_oracle=store.recall_if_oracle(live),
            )

    @app.get("/sessions/{session_id}/trace", response_model=list[TraceEntry])
    def trace(session_id: str):
        live = store.get(session_id)
        with live.state:
            rows = list(live.engine.trace)
        return [TraceEntry(step=r.step, doc_id=r.doc_id, label=r.label, judged=r.judged, round=r.round,
                           batch_size=r.batch_size) for r in rows]

    @app.get("/sessions/{session_id}/final", response_model=FinalRanking)
    def final(session_id: str):
        live = store.get(session_id)
        with live.state:
            e = live.engine
            return FinalRanking(session_id=session_id, topic_id=live.topic_id, finished=e.phase is Phase.FINISHED,
                                doc_ids=e.final_list().doc_ids)

    return app
