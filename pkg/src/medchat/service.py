"""Local HTTP service over the consultation engine, store, and avatar models.

The only mutable state is the session table. Each session's engine is
serialized by its own lock; the store serializes its writes internally, so
concurrent sessions never observe each other's turns.
"""

from __future__ import annotations

import hashlib
import io
import json
import queue
import threading
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse, Response, StreamingResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from .dialogue import (
    BackendInterface,
    GuidelineConfig,
    Phase,
    SessionState,
    TemplateBackend,
    new_session,
    step_session,
    transcript_to_json,
    turn_to_dict,
)
from .errors import (
    BackendProtocolError,
    MedchatError,
    NotFoundError,
    NotReadyError,
    ParseError,
    SessionFinishedError,
    SummarySchemaError,
    TooShortError,
)
from .guard import classify, default_ruleset
from .store import ConsultStore, parse_summary


@dataclass
class ApiSession:
    """One live consultation: engine state plus its delivery bookkeeping."""

    session_id: str
    patient_id: str
    state: SessionState
    backend: BackendInterface
    lock: threading.Lock = field(default_factory=threading.Lock)
    subscribers: list[queue.SimpleQueue] = field(default_factory=list)
    persisted_turns: int = 0


@dataclass
class AvatarAssets:
    """Everything the frame endpoint needs; absent means the endpoint is off."""

    models: object  # AvatarModels
    mel: object  # MelSpectrogram of the driving audio
    ref_image: object  # image tensor in [-1, 1]
    t_start: int = 100
    fps: float = 30.0
    stochastic: bool = True


class PatientBody(BaseModel):
    display_ref: str
    history: list[str] = []


class SessionBody(BaseModel):
    patient_id: str


class MessageBody(BaseModel):
    text: str


def _error(status: int, code: str, message: str) -> JSONResponse:
    return JSONResponse(status_code=status, content={"error": {"code": code, "message": message}})


def _frame_png(frame) -> bytes:
    from PIL import Image

    arr = ((frame.clamp(-1, 1) + 1) * 127.5).round().byte().permute(1, 2, 0).numpy()
    img = Image.fromarray(np.ascontiguousarray(arr), mode="RGB")
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def default_guard():
    rules = default_ruleset()
    return lambda text: classify(text, rules)


def create_app(
    store: ConsultStore | None = None,
    backend_factory=None,
    guard_fn=None,
    guideline: GuidelineConfig | None = None,
    avatar: AvatarAssets | None = None,
    frontend_dir: str | None = None,
) -> FastAPI:
    store = store or ConsultStore()
    backend_factory = backend_factory or TemplateBackend
    guard_fn = guard_fn or default_guard()
    cfg = guideline or GuidelineConfig()

    app = FastAPI(title="medchat", docs_url=None, redoc_url=None)
    sessions: dict[str, ApiSession] = {}
    table_lock = threading.Lock()
    frame_cache: dict[tuple[str, int], bytes] = {}
    app.state.store = store
    app.state.sessions = sessions

    @app.exception_handler(RequestValidationError)
    async def _on_bad_body(request: Request, exc: RequestValidationError):
        return _error(400, "bad-request", str(exc.errors()[:1]))

    @app.exception_handler(MedchatError)
    async def _on_domain_error(request: Request, exc: MedchatError):
        if isinstance(exc, NotFoundError):
            return _error(404, "not-found", str(exc))
        if isinstance(exc, (NotReadyError, SessionFinishedError)):
            return _error(409, "not-ready", str(exc))
        if isinstance(exc, (BackendProtocolError, ParseError, SummarySchemaError)):
            return _error(502, "backend-invalid", str(exc))
        return _error(500, "internal", str(exc))

    def _session_or_none(session_id: str) -> ApiSession | None:
        with table_lock:
            return sessions.get(session_id)

    def _broadcast(session: ApiSession, event: str, payload: dict) -> None:
        for q in list(session.subscribers):
            q.put((event, payload))

    def _persist_new_turns(session: ApiSession) -> list[dict]:
        fresh = []
        for turn in session.state.transcript[session.persisted_turns :]:
            verdict = turn.guard_verdict
            store.record_turn(
                session.session_id,
                turn.index,
                turn.role,
                turn.text,
                guard_category=verdict.category if verdict else None,
                guard_rule_id=verdict.rule_id if verdict else None,
            )
            fresh.append(turn_to_dict(turn))
        session.persisted_turns = len(session.state.transcript)
        return fresh

    def _state_payload(state: SessionState) -> dict:
        return transcript_to_json("", state)["state"]

    def _finish_session(session: ApiSession) -> None:
        """Run the summarize step, validate, and persist atomically."""
        raw = step_session(session.state, None, session.backend, guard_fn, cfg)[1]
        doc = parse_summary(raw)
        store.set_session_phase(session.session_id, "SUMMARIZING")
        store.persist_summary(session.session_id, doc)
        _broadcast(session, "done", {"session_id": session.session_id})

    # -- patients --

    @app.post("/api/patients")
    def create_patient(body: PatientBody):
        patient_id = store.register_patient(body.display_ref)
        for text in body.history:
            store.add_history(patient_id, text)
        return {"patient_id": patient_id}

    # -- sessions --

    @app.post("/api/sessions")
    def create_session(body: SessionBody):
        context = store.build_context(body.patient_id)  # 404 via handler if unknown
        session_id = store.create_session(body.patient_id)
        state = new_session(context=context)
        session = ApiSession(
            session_id=session_id,
            patient_id=body.patient_id,
            state=state,
            backend=backend_factory(),
        )
        with session.lock:
            greeting = step_session(state, None, session.backend, guard_fn, cfg)[1]
            _persist_new_turns(session)
            store.set_session_phase(session_id, state.phase.name)
        with table_lock:
            sessions[session_id] = session
        return {"session_id": session_id, "greeting": greeting}

    @app.post("/api/sessions/{session_id}/message")
    def post_message(session_id: str, body: MessageBody):
        session = _session_or_none(session_id)
        if session is None:
            return _error(404, "not-found", f"unknown session {session_id!r}")
        with session.lock:
            if session.state.phase >= Phase.SUMMARIZING:
                return _error(409, "session-finished", "the consultation already ended")
            text = step_session(session.state, body.text, session.backend, guard_fn, cfg)[1]
            store.set_session_phase(session_id, session.state.phase.name)
            fresh = _persist_new_turns(session)
            for turn in fresh:
                _broadcast(session, "turn", turn)
            if session.state.phase == Phase.SUMMARIZING:
                _finish_session(session)
            patient_turn = session.state.transcript[-2]
            rejected = (
                patient_turn.guard_verdict is not None
                and not patient_turn.guard_verdict.is_benign
            )
            payload = {"rejected": rejected, "state": _state_payload(session.state)}
            if rejected:
                payload["notice"] = text
            else:
                payload["bot_text"] = text
            return payload

    @app.get("/api/sessions/{session_id}")
    def get_session(session_id: str):
        session = _session_or_none(session_id)
        if session is None:
            # fall back to the store for sessions from earlier service runs
            record = store.get_session(session_id)
            return {
                "session_id": session_id,
                "patient_id": record["patient_id"],
                "turns": store.get_transcript(session_id),
                "state": {"phase": record["phase"]},
            }
        with session.lock:
            doc = transcript_to_json(session_id, session.state)
        doc["patient_id"] = session.patient_id
        return doc

    @app.get("/api/sessions/{session_id}/summary")
    def get_summary(session_id: str):
        record = store.get_session(session_id)  # 404 via handler if unknown
        if record["phase"] != "DONE":
            return _error(409, "not-ready", "summary is available once the session is done")
        return store.fetch_summary(session_id).as_dict()

    @app.get("/api/sessions/{session_id}/report")
    def get_report(session_id: str):
        return PlainTextResponse(store.generate_report(session_id))

    @app.get("/api/sessions/{session_id}/events")
    def get_events(session_id: str):
        session = _session_or_none(session_id)
        if session is None:
            return _error(404, "not-found", f"unknown session {session_id!r}")
        q: queue.SimpleQueue = queue.SimpleQueue()
        with session.lock:
            session.subscribers.append(q)
            snapshot = _state_payload(session.state)

        def stream():
            yield f"event: state\ndata: {json.dumps(snapshot)}\n\n"
            try:
                while True:
                    try:
                        event, payload = q.get(timeout=15.0)
                    except queue.Empty:
                        yield ": keep-alive\n\n"
                        continue
                    yield f"event: {event}\ndata: {json.dumps(payload)}\n\n"
                    if event == "done":
                        return
            finally:
                with session.lock:
                    if q in session.subscribers:
                        session.subscribers.remove(q)

        return StreamingResponse(stream(), media_type="text/event-stream")

    # -- avatar --

    @app.get("/api/avatar/frame")
    def avatar_frame(session: str, i: int):
        if avatar is None:
            return _error(503, "avatar-disabled", "no avatar checkpoints were loaded")
        if _session_or_none(session) is None:
            return _error(404, "not-found", f"unknown session {session!r}")
        if i < 0:
            return _error(400, "bad-request", "frame index must be non-negative")
        key = (session, i)
        if key not in frame_cache:
            from .diffusion import GenerationConfig, generate_block

            seed = int(hashlib.sha256(session.encode()).hexdigest()[:8], 16)
            gen_cfg = GenerationConfig(
                t_start=avatar.t_start,
                block_size=1,
                fps=avatar.fps,
                stochastic=avatar.stochastic,
                seed=seed,
            )
            try:
                frame = generate_block(
                    avatar.ref_image, avatar.mel, gen_cfg, avatar.models, start_frame=i
                )[0]
            except TooShortError as exc:
                return _error(400, "frame-out-of-range", str(exc))
            frame_cache[key] = _frame_png(frame)
        return Response(content=frame_cache[key], media_type="image/png")

    # -- meta --

    @app.get("/api/health")
    def health():
        return {"ok": True}

    if frontend_dir is not None:
        app.mount("/", StaticFiles(directory=frontend_dir, html=True), name="frontend")

    return app
