"""Observe-once streaming sessions shared by the CLI and the HTTP server.

A session serves each target frame exactly once, accepts one weak label per
frame, runs the adaptation step, and keeps a scalar-only event history.
Pixels are dropped as soon as a frame is stepped and never persisted.
"""
from __future__ import annotations

import csv
import io
import json
import os
import threading
import time
import uuid
from dataclasses import dataclass, field, asdict

import numpy as np

from .adaptation import (AdaptationConfig, AdaptationState, StepReport, adapt_step,
                         multi_hot)
from .detector import (DetectorModel, forward_full, postprocess, save_checkpoint,
                       DEFAULT_SCORE_THRESHOLD, DEFAULT_NMS_IOU)
from .evaluation import evaluate_model
from .rng import make_rng
from .scenes import (inject_label_noise, load_split, render_frame, split_config,
                     weak_label_oracle)


class ProtocolError(RuntimeError):
    """Fetch/label calls out of order, or a finished stream."""


class UnknownFrameError(KeyError):
    """Label submitted for a frame that is not the one awaiting a label."""


class UnknownCategoryError(ValueError):
    """Label names a category outside the session's category list."""


class EndOfStream(StopIteration):
    """The frame budget is exhausted."""


@dataclass
class SessionConfig:
    adaptation: AdaptationConfig = field(default_factory=AdaptationConfig)
    data_seed: int = 0
    seed: int = 0
    budget: int = 100
    order_seed: int | None = None
    eval_every: int = 10
    eval_count: int | None = None
    noise_rho: float = 0.0
    auto_oracle: bool = False
    score_threshold: float = DEFAULT_SCORE_THRESHOLD
    nms_iou: float = DEFAULT_NMS_IOU
    checkpoint_every: int = 50

    def __post_init__(self):
        if self.budget < 0:
            raise ValueError("budget must be non-negative")
        if not 0.0 <= self.noise_rho <= 1.0:
            raise ValueError("noise_rho must lie in [0, 1]")

    def echo(self) -> dict:
        out = asdict(self)
        out["adaptation"] = self.adaptation.as_dict()
        return out


@dataclass
class EventRecord:
    timestamp: float
    session_id: str
    kind: str       # session_created | frame_served | label_received |
                    # step_completed | eval_completed | error
    payload: dict   # scalars only, never pixels

    def as_json(self) -> str:
        return json.dumps({"timestamp": self.timestamp, "session_id": self.session_id,
                           "kind": self.kind, "payload": self.payload}, sort_keys=True)


@dataclass
class FramePayload:
    frame_id: int
    image: np.ndarray
    prediction: list
    categories: list


class StreamSession:
    """One adaptation stream: strict fetch -> label alternation, burn after read."""

    def __init__(self, model: DetectorModel, config: SessionConfig,
                 session_id: str | None = None, out_dir: str | None = None):
        self.model = model
        self.config = config
        self.session_id = session_id or uuid.uuid4().hex[:12]
        self.out_dir = out_dir
        self.state = AdaptationState(config=config.adaptation, seed=config.seed)
        self.events: list[EventRecord] = []
        self._events_cv = threading.Condition()
        self.cursor = 0
        self.phase = "awaiting_fetch"
        self.finished = False
        self._current: FramePayload | None = None
        self._current_frame = None
        self._started = time.time()

        stream_cfg, offset, split_count = split_config(config.data_seed, "target-stream")
        self._stream_cfg = stream_cfg
        order = np.arange(split_count)
        if config.order_seed is not None:
            order = make_rng("order", config.order_seed).permutation(split_count)
        self._order = offset + order
        if config.budget > split_count:
            raise ValueError(f"budget {config.budget} exceeds stream split of {split_count}")

        self._log("session_created", {"config": config.echo(),
                                      "categories": list(model.categories)})

    # -- event plumbing ----------------------------------------------------

    def _log(self, kind: str, payload: dict) -> None:
        record = EventRecord(time.time(), self.session_id, kind, payload)
        with self._events_cv:
            self.events.append(record)
            self._events_cv.notify_all()
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            path = os.path.join(self.out_dir, f"events-{self.session_id}.jsonl")
            with open(path, "a") as fh:
                fh.write(record.as_json() + "\n")

    def subscribe(self, since: int = 0, limit: int | None = None, poll: float = 0.05):
        """Yield each event exactly once, in order, starting at ``since``."""
        sent = since
        while True:
            with self._events_cv:
                while sent >= len(self.events) and not self.finished:
                    self._events_cv.wait(timeout=poll)
                if sent >= len(self.events):
                    return
                record = self.events[sent]
            sent += 1
            yield sent - 1, record
            if limit is not None and sent - since >= limit:
                return

    # -- protocol ----------------------------------------------------------

    def next_frame(self) -> FramePayload:
        if self.phase == "awaiting_label":
            raise ProtocolError("previous frame is still awaiting its label")
        if self.cursor >= self.config.budget:
            raise EndOfStream("frame budget exhausted")

        frame = render_frame(self._stream_cfg, int(self._order[self.cursor]))
        raw = forward_full(self.model, frame.image.reshape(1, *frame.image.shape), "eval")
        prediction = postprocess(raw, self.config.score_threshold, self.config.nms_iou)
        payload = FramePayload(frame.frame_id, frame.image, prediction,
                               list(self.model.categories))
        self._current = payload
        self._current_frame = frame
        self.phase = "awaiting_label"
        self._log("frame_served", {"frame_id": frame.frame_id,
                                   "num_detections": len(prediction)})
        return payload

    def _resolve_weak(self, categories) -> set:
        cats = list(self.model.categories)
        if categories is None:
            if not self.config.auto_oracle:
                raise UnknownCategoryError("label required: session is not in auto-oracle mode")
            truth = weak_label_oracle(self._current_frame)
            vec = multi_hot(truth, len(cats))
            if self.config.noise_rho > 0.0:
                rng = make_rng("noise", self.config.seed, self.state.t)
                vec = inject_label_noise(vec, self.config.noise_rho, rng)
            return {int(i) for i in np.nonzero(vec)[0]}
        out = set()
        for name in categories:
            if name not in cats:
                raise UnknownCategoryError(f"unknown category {name!r}")
            out.add(cats.index(name))
        return out

    def submit_label(self, frame_id: int, categories: list | None) -> StepReport:
        if self.phase != "awaiting_label":
            raise ProtocolError("no frame is awaiting a label")
        assert self._current is not None
        if frame_id != self._current.frame_id:
            raise UnknownFrameError(f"frame {frame_id} is not awaiting a label")

        weak = self._resolve_weak(categories)
        self._log("label_received", {
            "frame_id": frame_id,
            "categories": sorted(self.model.categories[i] for i in weak),
            "auto": categories is None,
        })

        frame = self._current_frame
        image = frame.image.reshape(1, *frame.image.shape)
        try:
            _, report = adapt_step(self.model, self.state, image, weak,
                                   prediction=self._current.prediction,
                                   score_threshold=self.config.score_threshold,
                                   nms_iou=self.config.nms_iou)
        except Exception as exc:
            self._log("error", {"frame_id": frame_id, "message": str(exc)})
            raise
        finally:
            # Burn after read: the frame is spent whether or not the step applied.
            self._current = None
            self._current_frame = None
            self.phase = "awaiting_fetch"
            self.cursor += 1

        self._log("step_completed", report.scalar_payload())

        if self.config.eval_every and self.cursor % self.config.eval_every == 0:
            self._run_eval()
        if (self.out_dir and self.config.checkpoint_every
                and self.cursor % self.config.checkpoint_every == 0):
            self._save_checkpoint()
        if self.cursor >= self.config.budget:
            self.finish()
        return report

    def _run_eval(self) -> None:
        frames = load_split(self.config.data_seed, "target-test", self.config.eval_count)
        result = evaluate_model(self.model, frames, self.config.score_threshold,
                                self.config.nms_iou)
        self._log("eval_completed", {"step": self.state.t, **result.as_payload()})

    def _save_checkpoint(self) -> None:
        os.makedirs(self.out_dir, exist_ok=True)
        save_checkpoint(self.model, os.path.join(
            self.out_dir, f"ckpt-{self.session_id}-{self.cursor:05d}.bin"))

    def finish(self) -> None:
        """Final evaluation and checkpoint; idempotent."""
        if self.finished:
            return
        last_eval = next((e for e in reversed(self.events) if e.kind == "eval_completed"),
                         None)
        if last_eval is None or last_eval.payload.get("step") != self.state.t:
            self._run_eval()
        if self.out_dir:
            self._save_checkpoint()
        self.finished = True
        with self._events_cv:
            self._events_cv.notify_all()

    # -- read-only views ----------------------------------------------------

    def metrics(self) -> dict:
        steps = [e.payload for e in self.events if e.kind == "step_completed"]
        evals = [e.payload for e in self.events if e.kind == "eval_completed"]
        return {
            "session_id": self.session_id,
            "config": self.config.echo(),
            "steps": steps,
            "evals": evals,
            "finished": self.finished,
        }

    def run_report(self) -> "RunReport":
        return report_from_events(self.config.echo(), self.config.seed,
                                  self.events, time.time() - self._started)


# --------------------------------------------------------------------------
# Run reports
# --------------------------------------------------------------------------

@dataclass
class RunReport:
    config: dict
    seed: int
    steps: list
    evals: list
    wall_clock: float = 0.0

    @property
    def final_map50(self) -> float | None:
        return self.evals[-1]["map50"] if self.evals else None

    def core(self) -> dict:
        """The deterministic content: everything except wall-clock."""
        return {"config": self.config, "seed": self.seed,
                "steps": self.steps, "evals": self.evals}

    def to_ndjson(self) -> str:
        lines = [json.dumps({"kind": "config", "config": self.config, "seed": self.seed},
                            sort_keys=True)]
        lines += [json.dumps({"kind": "step", **s}, sort_keys=True) for s in self.steps]
        lines += [json.dumps({"kind": "eval", **e}, sort_keys=True) for e in self.evals]
        lines.append(json.dumps({"kind": "summary", "wall_clock": self.wall_clock,
                                 "final_map50": self.final_map50}, sort_keys=True))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_ndjson(cls, text: str) -> "RunReport":
        config: dict = {}
        seed = 0
        steps, evals = [], []
        wall = 0.0
        for line in text.splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            kind = rec.pop("kind")
            if kind == "config":
                config = rec["config"]
                seed = rec["seed"]
            elif kind == "step":
                steps.append(rec)
            elif kind == "eval":
                evals.append(rec)
            elif kind == "summary":
                wall = rec["wall_clock"]
        return cls(config=config, seed=seed, steps=steps, evals=evals, wall_clock=wall)

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(["step", "loss_total", "loss_instance", "loss_image",
                         "momentum", "pseudo_count", "map50"])
        evals_by_step = {e.get("step"): e for e in self.evals}
        for s in self.steps:
            ev = evals_by_step.get(s["step"] + 1, {})
            writer.writerow([s["step"], s.get("loss_total"), s.get("loss_instance"),
                             s.get("loss_image"), s.get("momentum"),
                             s.get("pseudo_count"), ev.get("map50")])
        for e in self.evals:
            if e.get("step") == 0:
                writer.writerow([-1, None, None, None, None, None, e.get("map50")])
        return buf.getvalue()


def report_from_events(config_echo: dict, seed: int, events: list,
                       wall_clock: float = 0.0) -> RunReport:
    """Rebuild the run report from scalar event records."""
    steps = [dict(e.payload) for e in events if e.kind == "step_completed"]
    evals = [dict(e.payload) for e in events if e.kind == "eval_completed"]
    return RunReport(config=config_echo, seed=seed, steps=steps, evals=evals,
                     wall_clock=wall_clock)


def run_streaming(model: DetectorModel, config: SessionConfig,
                  out_dir: str | None = None) -> RunReport:
    """Drive a full auto-oracle session; the headless twin of the server path."""
    config.auto_oracle = True
    session = StreamSession(model, config, out_dir=out_dir)
    while True:
        try:
            payload = session.next_frame()
        except EndOfStream:
            break
        session.submit_label(payload.frame_id, None)
    session.finish()
    return session.run_report()
