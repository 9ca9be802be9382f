"""Session-based HTTP facade over the canvas engine.

One generator and one editor are loaded at startup and shared by all
sessions. Mutating operations on a session are mutually exclusive (busy
sessions answer 409 rather than queue); each operation works on a copy of
the canvas and publishes it atomically, so concurrent reads always see a
consistent snapshot. Sessions persist to disk after every completed
operation and are re-listed after a restart.
"""

from __future__ import annotations

import copy
import io
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Query, Response
from fastapi.responses import JSONResponse
from PIL import Image
from pydantic import BaseModel, Field

from . import canvas as canvas_mod
from .canvas import CanvasModels, CanvasState
from .checkpoints import MissingCheckpointError
from .diffusion import GuidanceConfig, load_pipeline


@dataclass
class ServiceConfig:
    vae_dir: str = "runs/desk/vae"
    textenc_dir: str = "runs/desk/textenc"
    generator_dir: str = "runs/desk/generator"
    editor_dir: str = "runs/desk/editor"
    persist_dir: str = "runs/desk/sessions"
    host: str = "127.0.0.1"
    port: int = 8765
    default_omega: float = 3.0
    step_delay_s: float = 0.0  # per-denoise-step sleep, for demos/UI tests
    static_dir: str | None = None


ENV_PREFIX = "TOYEARTH_"


def load_service_config(
    config_file: str | Path | None = None,
    env: dict[str, str] | None = None,
    overrides: dict | None = None,
) -> ServiceConfig:
    """Layered config: file < environment (TOYEARTH_*) < explicit overrides."""
    values: dict = {}
    if config_file:
        values.update(json.loads(Path(config_file).read_text()))
    env = os.environ if env is None else env
    for name in ServiceConfig.__dataclass_fields__:
        key = ENV_PREFIX + name.upper()
        if key in env:
            values[name] = env[key]
    for name, value in (overrides or {}).items():
        if value is not None:
            values[name] = value
    numeric = {"port": int, "default_omega": float, "step_delay_s": float}
    typed = {}
    for name, value in values.items():
        if name not in ServiceConfig.__dataclass_fields__:
            raise ValueError(f"unknown service config key {name!r}")
        if value is not None and name in numeric:
            value = numeric[name](value)
        typed[name] = value
    return ServiceConfig(**typed)


class CreateSessionBody(BaseModel):
    prompt: str
    resolution_m_per_px: float = Field(gt=0)
    omega: float | None = Field(default=None, ge=0)
    seed: int | None = None


class ExtendBody(BaseModel):
    direction: str | None = None
    rect: list[int] | None = Field(default=None, min_length=4, max_length=4)
    prompt: str = ""
    omega: float | None = Field(default=None, ge=0)
    seed: int | None = None


class EditBody(BaseModel):
    rect: list[int] = Field(min_length=4, max_length=4)
    prompt: str = ""
    omega: float | None = Field(default=None, ge=0)
    seed: int | None = None


@dataclass
class SessionHandle:
    id: str
    canvas: CanvasState
    lock: threading.Lock = field(default_factory=threading.Lock)
    status: str = "idle"
    op_kind: str | None = None
    progress: tuple[int, int] | None = None  # (current t, total steps)
    created_at: float = field(default_factory=time.time)
    updated_at: float = field(default_factory=time.time)


class Studio:
    """Application state: models, sessions, persistence."""

    def __init__(self, config: ServiceConfig):
        self.config = config
        self.sessions: dict[str, SessionHandle] = {}
        self.sessions_lock = threading.Lock()
        self.models: CanvasModels | None = None
        self.load_error: str | None = None
        try:
            self.models = CanvasModels(
                generator=load_pipeline(config.vae_dir, config.textenc_dir,
                                        config.generator_dir),
                editor=load_pipeline(config.vae_dir, config.textenc_dir,
                                     config.editor_dir),
            )
        except (MissingCheckpointError, FileNotFoundError) as exc:
            self.load_error = str(exc)
        self._restore_sessions()

    def _restore_sessions(self) -> None:
        root = Path(self.config.persist_dir)
        if not root.exists():
            return
        for session_dir in sorted(root.iterdir()):
            if (session_dir / canvas_mod.META_FILE).exists():
                state = canvas_mod.load_session(session_dir)
                self.sessions[session_dir.name] = SessionHandle(session_dir.name, state)

    def persist(self, handle: SessionHandle) -> None:
        target = Path(self.config.persist_dir) / handle.id
        hashes = self.models.checkpoint_hashes() if self.models else {}
        canvas_mod.save_session(handle.canvas, target, hashes)

    def progress_callback(self, handle: SessionHandle, total: int):
        delay = self.config.step_delay_s

        def cb(step_index: int, t: int) -> None:
            handle.progress = (t, total)
            if delay:
                time.sleep(delay)

        return cb

    def bounds_of(self, handle: SessionHandle) -> list[int]:
        return list(handle.canvas.bounds())


def _summary(handle: SessionHandle) -> dict:
    return {
        "session_id": handle.id,
        "bounds": list(handle.canvas.bounds()),
        "resolution_m_per_px": handle.canvas.resolution_m_per_px,
        "history_length": len(handle.canvas.history),
        "status": handle.status,
        "created_at": handle.created_at,
        "updated_at": handle.updated_at,
    }


def create_app(config: ServiceConfig) -> FastAPI:
    app = FastAPI(title="toyearth studio service")
    studio = Studio(config)
    app.state.studio = studio

    def _get(session_id: str) -> SessionHandle | None:
        return studio.sessions.get(session_id)

    def _mutate(handle: SessionHandle, kind: str, fn) -> Response | dict:
        """Run a canvas mutation under the per-session mutex (409 if busy)."""
        if not handle.lock.acquire(blocking=False):
            return JSONResponse({"detail": "operation already running"}, status_code=409)
        try:
            handle.status = "running"
            handle.op_kind = kind
            working = copy.deepcopy(handle.canvas)
            result = fn(working)
            handle.canvas = working
            handle.updated_at = time.time()
            studio.persist(handle)
            return result
        except ValueError as exc:
            return JSONResponse({"detail": str(exc)}, status_code=422)
        finally:
            handle.status = "idle"
            handle.op_kind = None
            handle.progress = None
            handle.lock.release()

    @app.post("/sessions", status_code=201)
    def create_session(body: CreateSessionBody):
        if studio.models is None:
            return JSONResponse(
                {"detail": f"checkpoints not loaded: {studio.load_error}"}, status_code=503
            )
        session_id = uuid.uuid4().hex[:12]
        guidance = GuidanceConfig(
            omega=body.omega if body.omega is not None else config.default_omega,
            seed=body.seed if body.seed is not None else 0,
        )
        handle = SessionHandle(session_id, CanvasState(body.resolution_m_per_px, 1))
        handle.status = "running"
        handle.op_kind = "seed"
        with studio.sessions_lock:
            studio.sessions[session_id] = handle
        with handle.lock:
            try:
                total = studio.models.generator.schedule.T
                state = canvas_mod.new_canvas(
                    body.prompt, body.resolution_m_per_px, guidance, studio.models,
                    progress=studio.progress_callback(handle, total),
                )
            except ValueError as exc:
                with studio.sessions_lock:
                    del studio.sessions[session_id]
                return JSONResponse({"detail": str(exc)}, status_code=422)
            finally:
                handle.status = "idle"
                handle.op_kind = None
                handle.progress = None
            handle.canvas = state
            studio.persist(handle)
        return {"session_id": session_id, "bounds": studio.bounds_of(handle)}

    @app.post("/sessions/{session_id}/extend")
    def extend_session(session_id: str, body: ExtendBody):
        handle = _get(session_id)
        if handle is None:
            return JSONResponse({"detail": "unknown session"}, status_code=404)
        if body.direction is None and body.rect is None:
            return JSONResponse({"detail": "direction or rect required"}, status_code=422)
        guidance = GuidanceConfig(
            omega=body.omega if body.omega is not None else config.default_omega,
            seed=body.seed if body.seed is not None else len(handle.canvas.history),
        )
        total = studio.models.editor.schedule.T

        def run(working: CanvasState):
            target = body.direction if body.direction is not None else tuple(body.rect)
            canvas_mod.extend(
                working, target, body.prompt, guidance, studio.models,
                progress=studio.progress_callback(handle, total),
            )
            return {
                "bounds": list(working.bounds()),
                "seam_score": canvas_mod.seam_score(working),
            }

        return _mutate(handle, "extend", run)

    @app.post("/sessions/{session_id}/edit")
    def edit_session(session_id: str, body: EditBody):
        handle = _get(session_id)
        if handle is None:
            return JSONResponse({"detail": "unknown session"}, status_code=404)
        guidance = GuidanceConfig(
            omega=body.omega if body.omega is not None else config.default_omega,
            seed=body.seed if body.seed is not None else len(handle.canvas.history),
        )
        total = studio.models.editor.schedule.T

        def run(working: CanvasState):
            canvas_mod.edit_region(
                working, tuple(body.rect), body.prompt, guidance, studio.models,
                progress=studio.progress_callback(handle, total),
            )
            return {"bounds": list(working.bounds())}

        return _mutate(handle, "edit", run)

    @app.get("/sessions/{session_id}/render")
    def get_render(
        session_id: str,
        x0: int | None = Query(default=None),
        y0: int | None = Query(default=None),
        x1: int | None = Query(default=None),
        y1: int | None = Query(default=None),
        scale: int = Query(default=1, ge=1, le=16),
    ):
        handle = _get(session_id)
        if handle is None:
            return JSONResponse({"detail": "unknown session"}, status_code=404)
        canvas = handle.canvas
        bounds = canvas.bounds()
        rect = (
            bounds[0] if x0 is None else x0,
            bounds[1] if y0 is None else y0,
            bounds[2] if x1 is None else x1,
            bounds[3] if y1 is None else y1,
        )
        if rect[2] <= rect[0] or rect[3] <= rect[1]:
            return JSONResponse({"detail": f"empty rect {rect}"}, status_code=422)
        image = canvas_mod.render_region(canvas, rect)
        if scale > 1:
            image = np.repeat(np.repeat(image, scale, axis=0), scale, axis=1)
        arr = np.round(image * 255).astype(np.uint8)
        buf = io.BytesIO()
        Image.fromarray(arr, "RGB").save(buf, format="PNG")
        etag = f'"{session_id}-{len(canvas.history)}-{rect}-{scale}"'
        return Response(
            content=buf.getvalue(), media_type="image/png",
            headers={"ETag": etag, "Cache-Control": "private, must-revalidate"},
        )

    @app.get("/sessions/{session_id}/progress")
    def get_progress(session_id: str):
        handle = _get(session_id)
        if handle is None:
            return JSONResponse({"detail": "unknown session"}, status_code=404)
        if handle.status != "running" or handle.progress is None:
            return {"status": "idle", "session_id": session_id}
        t, total = handle.progress
        return {
            "status": "running",
            "session_id": session_id,
            "op_kind": handle.op_kind,
            "current_denoise_step": t,
            "total_steps": total,
        }

    @app.post("/sessions/{session_id}/undo")
    def undo(session_id: str):
        handle = _get(session_id)
        if handle is None:
            return JSONResponse({"detail": "unknown session"}, status_code=404)

        def run(working: CanvasState):
            if len(working.history) < 2:
                raise ValueError("nothing to undo: history has only the seed op")
            rebuilt = canvas_mod.replay(working.history[:-1], studio.models)
            working.tiles = rebuilt.tiles
            working.alpha = rebuilt.alpha
            working.owner = rebuilt.owner
            working.history = rebuilt.history
            return {"bounds": list(working.bounds())}

        return _mutate(handle, "undo", run)

    @app.get("/sessions")
    def list_sessions():
        with studio.sessions_lock:
            return [_summary(h) for h in studio.sessions.values()]

    static_dir = config.static_dir
    if static_dir and Path(static_dir).is_dir():
        from fastapi.staticfiles import StaticFiles

        app.mount("/studio", StaticFiles(directory=static_dir, html=True), name="studio")

    return app


def run_service(config: ServiceConfig) -> None:
    import uvicorn

    uvicorn.run(create_app(config), host=config.host, port=config.port)
