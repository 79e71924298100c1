"""FastAPI app exposing trained action maps to live clients.

REST endpoints cover model metadata, bound queries, and scripted stepping;
the WebSocket endpoint carries the interactive protocol:

  client -> server: {"type": "action", "a": [...]},
                    {"type": "reset"},
                    {"type": "select_model", "name": "..."}
  server -> client: {"type": "hello", ...} once at session start,
                    {"type": "state", "x": [...], "ee": [x, y],
                     "links": [[x, y], ...], "dist_origin": d, "step": k},
                    {"type": "model", "name": "..."} after a model switch,
                    {"type": "error", "message": "..."}

Numbers are serialized with Python's repr, the shortest round-trip decimal
for 64-bit floats.  A malformed frame yields an error frame and the session
survives; the server applies at most one Euler step per action frame.
"""

from __future__ import annotations

import json

from fastapi import FastAPI, HTTPException, Query, WebSocket, WebSocketDisconnect

from .. import __version__
from ..errors import InputError, RevmapError, ShapeError
from ..reversibility import bound_corollary, bound_theorem2
from .schemas import (
    ArmInfo,
    BoundsResponse,
    HealthResponse,
    LogResponse,
    ModelInfo,
    SessionCreateRequest,
    SessionInfo,
    SpaceInfo,
    StateFrame,
    StepRequest,
)
from .sessions import LoadedModel, Session, SessionManager


def _model_info(loaded: LoadedModel, nu: float) -> ModelInfo:
    model = loaded.model
    strict = getattr(model.decoder, "strict_odd", None)
    return ModelInfo(
        name=loaded.name,
        family=model.family,
        state_dim=model.state_dim,
        action_dim=model.space.n,
        strict_odd=strict,
        nu=nu,
        has_estimates=loaded.estimates is not None,
    )


def _session_info(session: Session) -> SessionInfo:
    space = session.loaded.model.space
    arm = session.loaded.arm
    return SessionInfo(
        session_id=session.id,
        model=session.loaded.name,
        nu=session.nu,
        space=SpaceInfo(n=space.n, c=space.c, max_norm=space.max_norm),
        arm=ArmInfo(
            link_lengths=list(arm.link_lengths),
            joint_lo=[float(v) for v in arm.joint_lo],
            joint_hi=[float(v) for v in arm.joint_hi],
        ),
        x0=[float(v) for v in session.x0],
    )


def create_app(manager: SessionManager) -> FastAPI:
    app = FastAPI(title="revmap session service", version=__version__)

    @app.get("/health", response_model=HealthResponse)
    def health():
        return HealthResponse(
            status="ok", models=sorted(manager.models), version=__version__
        )

    @app.get("/models", response_model=list[ModelInfo])
    def models():
        return [
            _model_info(loaded, manager.default_nu)
            for _, loaded in sorted(manager.models.items())
        ]

    @app.get("/models/{name}/bounds", response_model=BoundsResponse)
    def bounds(name: str, T: int = Query(..., ge=0), nu: float = Query(None, gt=0)):
        try:
            loaded = manager.get_model(name)
        except InputError as exc:
            raise HTTPException(status_code=404, detail=str(exc))
        if loaded.estimates is None:
            raise HTTPException(
                status_code=409,
                detail=f"no bound estimates stored for model {name!r}",
            )
        est = loaded.estimates
        nu = nu or manager.default_nu
        tight, expo = bound_theorem2(nu, est.M, est.L, T)
        coro = bound_corollary(nu, est.M, est.L, est.E, T) if est.L > 0 else None
        return BoundsResponse(
            model=name, T=T, nu=nu, M=est.M, L=est.L, E=est.E,
            tight=tight, exponential=expo, corollary=coro,
        )

    @app.post("/sessions", response_model=SessionInfo)
    def create_session(req: SessionCreateRequest):
        try:
            session = manager.create(req.model, req.x0, req.nu)
        except RevmapError as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return _session_info(session)

    @app.get("/sessions/{sid}", response_model=StateFrame)
    def session_state(sid: str):
        session = _get_session(sid)
        with session.lock:
            return StateFrame(**session.frame())

    @app.post("/sessions/{sid}/step", response_model=StateFrame)
    def step(sid: str, req: StepRequest):
        session = _get_session(sid)
        with session.lock:
            try:
                return StateFrame(**session.step(req.a))
            except (InputError, ShapeError) as exc:
                raise HTTPException(status_code=400, detail=str(exc))

    @app.post("/sessions/{sid}/reset", response_model=StateFrame)
    def reset(sid: str):
        session = _get_session(sid)
        with session.lock:
            return StateFrame(**session.reset())

    @app.get("/sessions/{sid}/log", response_model=LogResponse)
    def session_log(sid: str):
        session = _get_session(sid)
        with session.lock:
            return LogResponse(
                session_id=session.id,
                model=session.loaded.name,
                nu=session.nu,
                x0=[float(v) for v in session.x0],
                entries=list(session.log),
            )

    @app.delete("/sessions/{sid}")
    def drop(sid: str):
        manager.drop(sid)
        return {"ok": True}

    def _get_session(sid: str) -> Session:
        try:
            return manager.get(sid)
        except InputError as exc:
            raise HTTPException(status_code=404, detail=str(exc))

    @app.websocket("/ws")
    async def ws_session(websocket: WebSocket):
        params = websocket.query_params
        await websocket.accept()
        try:
            session = manager.create(
                params.get("model", next(iter(sorted(manager.models)))),
                nu=float(params["nu"]) if "nu" in params else None,
            )
        except (RevmapError, ValueError) as exc:
            await websocket.send_text(json.dumps({"type": "error", "message": str(exc)}))
            await websocket.close()
            return
        hello = {
            "type": "hello",
            **_session_info(session).model_dump(),
        }
        await websocket.send_text(json.dumps(hello))
        await websocket.send_text(json.dumps(session.frame()))
        try:
            while True:
                raw = await websocket.receive_text()
                reply = _handle_frame(session, raw)
                await websocket.send_text(json.dumps(reply))
        except WebSocketDisconnect:
            pass
        finally:
            manager.drop(session.id)

    def _handle_frame(session: Session, raw: str) -> dict:
        try:
            frame = json.loads(raw)
        except json.JSONDecodeError as exc:
            return {"type": "error", "message": f"malformed frame: {exc}"}
        if not isinstance(frame, dict) or "type" not in frame:
            return {"type": "error", "message": "frame must be an object with a 'type'"}
        kind = frame["type"]
        with session.lock:
            try:
                if kind == "action":
                    return session.step(frame.get("a", []))
                if kind == "reset":
                    return session.reset()
                if kind == "select_model":
                    loaded = manager.get_model(str(frame.get("name", "")))
                    session.select_model(loaded)
                    return {"type": "model", "name": loaded.name}
                return {"type": "error", "message": f"unknown frame type {kind!r}"}
            except RevmapError as exc:
                return {"type": "error", "message": str(exc)}
            except (TypeError, ValueError) as exc:
                return {"type": "error", "message": f"bad frame payload: {exc}"}

    return app
