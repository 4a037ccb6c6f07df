"""HTTP session service: JSON request/response plus a server-sent event stream.

Endpoints:
  POST /api/sessions                  create a session from a checkpoint
  GET  /api/sessions/{id}/frame       serve the next frame + its prediction
  POST /api/sessions/{id}/label       submit the weak label, run the step
  GET  /api/sessions/{id}/metrics     scalar history snapshot
  GET  /api/sessions/{id}/events      SSE stream of event records
  GET  /api/health                    liveness probe
"""
from __future__ import annotations

import base64
import io
import json
import threading

import numpy as np
from fastapi import FastAPI, HTTPException, Query
from fastapi.responses import StreamingResponse
from pydantic import BaseModel, Field

from .adaptation import AdaptationConfig
from .detector import load_checkpoint
from .session import (EndOfStream, ProtocolError, SessionConfig, StreamSession,
                      UnknownCategoryError, UnknownFrameError)

DEFAULT_BUDGET = 100


class SessionRequest(BaseModel):
    checkpoint: str
    method: str = "wstta"
    omega: float = 0.94
    delta: float = 0.005
    lambda_: float = Field(default=0.1, alias="lambda")
    alpha: float = 0.1
    tau: float = 0.8
    budget: int = DEFAULT_BUDGET
    data_seed: int = 0
    seed: int = 0
    order_seed: int | None = None
    eval_every: int = 10
    eval_count: int | None = None
    noise_rho: float = 0.0
    auto_oracle: bool = False

    model_config = {"populate_by_name": True}


class LabelRequest(BaseModel):
    frame_id: int
    categories: list[str] | None = None


def _png_base64(image: np.ndarray) -> str:
    from PIL import Image

    arr = np.clip(np.round(image.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, "RGB").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode()


def _detections_payload(prediction) -> list:
    return [{"box": [d.box.x1, d.box.y1, d.box.x2, d.box.y2],
             "category": d.category, "score": d.score} for d in prediction]


def create_app(out_dir: str | None = None) -> FastAPI:
    app = FastAPI(title="streaming weak-label adaptation service")
    sessions: dict[str, StreamSession] = {}
    locks: dict[str, threading.Lock] = {}
    registry_lock = threading.Lock()

    def get_session(session_id: str) -> tuple[StreamSession, threading.Lock]:
        with registry_lock:
            session = sessions.get(session_id)
            if session is None:
                raise HTTPException(404, detail={"error": f"unknown session {session_id!r}"})
            return session, locks[session_id]

    @app.get("/api/health")
    def health():
        return {"status": "ok"}

    @app.post("/api/sessions", status_code=201)
    def create_session(req: SessionRequest):
        try:
            adaptation = AdaptationConfig(method=req.method, omega=req.omega,
                                          delta=req.delta, lambda_=req.lambda_,
                                          alpha=req.alpha, tau=req.tau)
            config = SessionConfig(adaptation=adaptation, data_seed=req.data_seed,
                                   seed=req.seed, budget=req.budget,
                                   order_seed=req.order_seed, eval_every=req.eval_every,
                                   eval_count=req.eval_count, noise_rho=req.noise_rho,
                                   auto_oracle=req.auto_oracle)
        except ValueError as exc:
            raise HTTPException(400, detail={"error": str(exc)})
        try:
            model = load_checkpoint(req.checkpoint)
        except (OSError, ValueError) as exc:
            raise HTTPException(400, detail={"error": f"bad checkpoint: {exc}"})
        session = StreamSession(model, config, out_dir=out_dir)
        with registry_lock:
            sessions[session.session_id] = session
            locks[session.session_id] = threading.Lock()
        return {"session_id": session.session_id,
                "categories": session.model.categories,
                "config": config.echo()}

    @app.get("/api/sessions/{session_id}/frame")
    def next_frame(session_id: str):
        session, lock = get_session(session_id)
        with lock:
            try:
                payload = session.next_frame()
            except EndOfStream:
                session.finish()
                return {"end_of_stream": True}
            except ProtocolError as exc:
                raise HTTPException(409, detail={"error": str(exc)})
        return {
            "end_of_stream": False,
            "frame_id": payload.frame_id,
            "image_png_base64": _png_base64(payload.image),
            "prediction": _detections_payload(payload.prediction),
            "categories": payload.categories,
        }

    @app.post("/api/sessions/{session_id}/label")
    def submit_label(session_id: str, req: LabelRequest):
        session, lock = get_session(session_id)
        with lock:
            try:
                report = session.submit_label(req.frame_id, req.categories)
            except UnknownFrameError as exc:
                raise HTTPException(404, detail={"error": str(exc)})
            except UnknownCategoryError as exc:
                raise HTTPException(422, detail={"error": str(exc)})
            except ProtocolError as exc:
                raise HTTPException(409, detail={"error": str(exc)})
            evals = [e.payload for e in session.events if e.kind == "eval_completed"]
        return {"report": report.scalar_payload(),
                "latest_eval": evals[-1] if evals else None}

    @app.get("/api/sessions/{session_id}/metrics")
    def metrics(session_id: str):
        session, _ = get_session(session_id)
        return session.metrics()

    @app.get("/api/sessions/{session_id}/events")
    def events(session_id: str, since: int = Query(default=0, ge=0),
               limit: int | None = Query(default=None, ge=1)):
        session, _ = get_session(session_id)

        def stream():
            for index, record in session.subscribe(since=since, limit=limit):
                data = json.dumps({"timestamp": record.timestamp,
                                   "session_id": record.session_id,
                                   "kind": record.kind,
                                   "payload": record.payload}, sort_keys=True)
                yield f"id: {index}\nevent: {record.kind}\ndata: {data}\n\n"

        return StreamingResponse(stream(), media_type="text/event-stream")

    return app
