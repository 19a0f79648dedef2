"""Thin HTTP client for the screening service."""

from __future__ import annotations

import uuid
from collections.abc import Iterable

import httpx


class ServiceError(RuntimeError):
    def __init__(self, status: int, detail: str):
        super().__init__(f"HTTP {status}: {detail}")
        self.status = status
        self.detail = detail


class ScreeningClient:
    """Wraps the REST endpoints. Pass ``client`` to reuse an existing ``httpx.Client``."""

    def __init__(self, base_url: str = "http://127.0.0.1:8000", client: httpx.Client | None = None, timeout: float = 60.0):
        self._own = client is None
        self.http = client or httpx.Client(base_url=base_url, timeout=timeout)

    def __enter__(self) -> ScreeningClient:
        return self

    def __exit__(self, *exc) -> None:
        self.close()

    def close(self) -> None:
        if self._own:
            self.http.close()

    def _call(self, method: str, url: str, **kw):
        resp = self.http.request(method, url, **kw)
        if resp.status_code >= 400:
            try:
                detail = resp.json().get("detail")
            except ValueError:
                detail = resp.text
            raise ServiceError(resp.status_code, str(detail))
        return resp.json()

    def topics(self) -> list[dict]:
        return self._call("GET", "/topics")

    def create_session(self, topic_id: str, params: dict | None = None, seed: int | None = None,
                       idempotency_key: str | None = None) -> dict:
        headers = {"Idempotency-Key": idempotency_key or uuid.uuid4().hex}
        return self._call("POST", "/sessions", json={"topic_id": topic_id, "params": params, "seed": seed}, headers=headers)

    def next(self, session_id: str) -> dict | None:
        """Next document to judge, or None once the session is finished."""
        try:
            return self._call("GET", f"/sessions/{session_id}/next")
        except ServiceError as exc:
            if exc.status == 410:
                return None
            raise

    def judge(self, session_id: str, doc_id: str, label: int, idempotency_key: str | None = None) -> dict:
        headers = {"Idempotency-Key": idempotency_key or uuid.uuid4().hex}
        return self._call("POST", f"/sessions/{session_id}/judgments", json={"doc_id": doc_id, "label": label}, headers=headers)

    def stats(self, session_id: str) -> dict:
        return self._call("GET", f"/sessions/{session_id}/stats")

    def ranking(self, session_id: str, offset: int = 0, limit: int = 50) -> dict:
        return self._call("GET", f"/sessions/{session_id}/ranking", params={"offset": offset, "limit": limit})

    def trace(self, session_id: str) -> list[dict]:
        return self._call("GET", f"/sessions/{session_id}/trace")

    def final(self, session_id: str) -> dict:
        return self._call("GET", f"/sessions/{session_id}/final")


def drive_with_oracle(
    client: ScreeningClient,
    topic_id: str,
    relevant: Iterable[str],
    params: dict | None = None,
    seed: int | None = None,
    max_judgments: int | None = None,
    session_id: str | None = None,
) -> tuple[str, list[str]]:
    """Judge served documents from ``relevant`` until the session ends."""
    relevant = set(relevant)
    if session_id is None:
        session_id = client.create_session(topic_id, params, seed)["session_id"]
    judged: list[str] = []
    while max_judgments is None or len(judged) < max_judgments:
        doc = client.next(session_id)
        if doc is None:
            break
        client.judge(session_id, doc["doc_id"], int(doc["doc_id"] in relevant))
        judged.append(doc["doc_id"])
    return session_id, judged
