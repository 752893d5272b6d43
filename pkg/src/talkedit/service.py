"""Session-oriented HTTP facade over the dialog controller.

Sessions persist as append-only JSON-lines event logs (one file per session,
fsync'd before the response goes out), so a crash never loses an acknowledged
round. Images are served by content hash so clients can cache them forever.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
import time
import uuid
from pathlib import Path

import numpy as np
from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse, Response

from .dialog import DialogError, DialogModels, DialogState, dialog_round, new_session


class ServiceError(Exception):
    def __init__(self, status: int, code: str, message: str):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message


class ImageStore:
    """Content-addressed PNG store over the rendered [0,1] pixel grid."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    @staticmethod
    def quantize(image: np.ndarray) -> np.ndarray:
        return np.round(np.asarray(image) * 255).astype(np.uint8)

    def put(self, image: np.ndarray) -> str:
        from PIL import Image

        q = self.quantize(image)
        digest = hashlib.sha256(q.tobytes()).hexdigest()[:16]
        path = self.root / f"{digest}.png"
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            Image.fromarray(q, mode="L").save(tmp, format="PNG")
            os.replace(tmp, path)
        return digest

    def path(self, digest: str) -> Path:
        return self.root / f"{digest}.png"


class SessionStore:
    """Append-only event log per session, replayed on open."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def _path(self, session_id: str) -> Path:
        return self.root / f"{session_id}.jsonl"

    def append(self, session_id: str, event: dict) -> None:
        line = json.dumps(event, separators=(",", ":"))
        with open(self._path(session_id), "a") as f:
            f.write(line + "\n")
            f.flush()
            os.fsync(f.fileno())

    def events(self, session_id: str) -> list:
        path = self._path(session_id)
        if not path.exists():
            raise ServiceError(404, "not_found", f"unknown session {session_id}")
        with open(path) as f:
            return [json.loads(line) for line in f if line.strip()]

    def exists(self, session_id: str) -> bool:
        return self._path(session_id).exists()

    def session_ids(self) -> list:
        return sorted(p.stem for p in self.root.glob("*.jsonl"))


class SessionManager:
    """In-memory session states backed by the event log; per-session locks
    serialize rounds while separate sessions proceed concurrently."""

    def __init__(self, models: DialogModels, data_dir):
        data_dir = Path(data_dir)
        self.models = models
        self.store = SessionStore(data_dir / "sessions")
        self.images = ImageStore(data_dir / "images")
        self._states: dict = {}
        self._locks: dict = {}
        self._registry_lock = threading.Lock()

    def _lock_for(self, session_id: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(session_id, threading.Lock())

    def _load_state(self, session_id: str) -> DialogState:
        if session_id in self._states:
            return self._states[session_id]
        events = self.store.events(session_id)
        state = DialogState.from_dict(events[-1]["state"])
        self._states[session_id] = state
        return state

    def create_session(self, seed=None) -> dict:
        state = new_session(self.models, seed=seed)
        session_id = uuid.uuid4().hex[:12]
        image = self.models.backend.generate(state.latent)
        image_hash = self.images.put(image)
        event = {
            "type": "created",
            "ts": time.time(),
            "seed": state.seed,
            "requested_seed": seed,
            "image": image_hash,
            "degrees": state.degrees.tolist(),
            "state": state.to_dict(),
        }
        self.store.append(session_id, event)
        self._states[session_id] = state
        return {
            "session_id": session_id,
            "image": image_hash,
            "degrees": state.degrees.tolist(),
            "fsm": state.fsm,
        }

    def post_message(self, session_id: str, text: str) -> dict:
        if not isinstance(text, str) or not text.strip():
            raise ServiceError(400, "validation", "message text must be a nonempty string")
        lock = self._lock_for(session_id)
        if not lock.acquire(blocking=False):
            raise ServiceError(409, "busy", "another message for this session is in flight")
        try:
            if not self.store.exists(session_id):
                raise ServiceError(404, "not_found", f"unknown session {session_id}")
            state = self._load_state(session_id)
            if state.fsm == "end":
                raise ServiceError(409, "session_ended", "session already ended")
            try:
                result = dialog_round(state, text, self.models)
            except DialogError as exc:
                raise ServiceError(409, "dialog_error", str(exc))
            image = self.models.backend.generate(state.latent)
            image_hash = self.images.put(image)
            record = {
                "type": "round",
                "ts": time.time(),
                "round_index": state.round_index,
                "user_text": text,
                "encoding": result.encoding.to_dict(),
                "edit": result.edit.to_dict() if result.edit else None,
                "feedback": {
                    "text": result.feedback.text,
                    "category": result.feedback.category,
                    "template_id": result.feedback.template_id,
                },
                "degrees": state.degrees.tolist(),
                "fsm": state.fsm,
                "image": image_hash,
                "outcome": result.trajectory.outcome if result.trajectory else None,
                "state": state.to_dict(),
            }
            self.store.append(session_id, record)
            return {
                "session_id": session_id,
                "feedback": record["feedback"],
                "image": image_hash,
                "degrees": record["degrees"],
                "fsm": record["fsm"],
                "round_index": record["round_index"],
            }
        finally:
            lock.release()

    def history(self, session_id: str) -> dict:
        events = self.store.events(session_id)
        rounds = [
            {k: e[k] for k in ("round_index", "user_text", "encoding", "edit", "feedback", "degrees", "fsm", "image")}
            for e in events
            if e["type"] == "round"
        ]
        created = events[0]
        return {
            "session_id": session_id,
            "seed": created["seed"],
            "initial_image": created["image"],
            "initial_degrees": created["degrees"],
            "rounds": rounds,
        }


def create_app(models: DialogModels, data_dir) -> FastAPI:
    app = FastAPI(title="talkedit", version="1")
    manager = SessionManager(models, data_dir)
    app.state.manager = manager

    @app.exception_handler(ServiceError)
    async def service_error_handler(_req: Request, exc: ServiceError):
        return JSONResponse(status_code=exc.status, content={"code": exc.code, "message": exc.message})

    @app.post("/v1/sessions")
    async def create_session(request: Request):
        body = {}
        if await request.body():
            try:
                body = await request.json()
            except json.JSONDecodeError:
                raise ServiceError(400, "validation", "body must be JSON")
        seed = body.get("seed")
        if seed is not None and not isinstance(seed, int):
            raise ServiceError(400, "validation", "seed must be an integer")
        return manager.create_session(seed=seed)

    @app.post("/v1/sessions/{session_id}/messages")
    async def post_message(session_id: str, request: Request):
        try:
            body = await request.json()
        except json.JSONDecodeError:
            raise ServiceError(400, "validation", "body must be JSON")
        return manager.post_message(session_id, body.get("text"))

    @app.get("/v1/sessions/{session_id}/history")
    async def get_history(session_id: str):
        return manager.history(session_id)

    @app.get("/v1/images/{digest}.png")
    async def get_image(digest: str):
        path = manager.images.path(digest)
        if not path.exists():
            raise ServiceError(404, "not_found", f"unknown image {digest}")
        return Response(content=path.read_bytes(), media_type="image/png")

    return app
