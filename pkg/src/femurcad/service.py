"""HTTP service: model inference plus the two-phase reader study.

Phase 1 serves each case image with no model output at all; phase 2
unlocks only after phase 1 for that case and adds the prediction block
(per-class probabilities, argmax, rollout heatmap). Sessions persist as
append-only JSON Lines event logs and replay losslessly on restart.
"""

from __future__ import annotations

import base64
import io
import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from fastapi import FastAPI, File, HTTPException, Query, UploadFile
from PIL import Image

from . import metrics as M
from . import tensor as T
from . import vit
from .data import LABEL_NAMES, ArrayDataset

ROLES = ("resident", "radiologist", "other")


@dataclass
class ServiceConfig:
    case_count: int = 150
    washout_seconds: float = 0.0  # minimum wait between a case's two phases
    seed: int = 0


@dataclass
class StudySession:
    id: str
    role: str
    cases: list
    answers: dict = field(default_factory=dict)  # (case_id, phase) -> event
    created_at: float = 0.0

    def answered(self, phase: int) -> int:
        return sum(1 for (_, p) in self.answers if p == phase)

    def next_case(self, phase: int) -> Optional[str]:
        for case_id in self.cases:
            if (case_id, phase) not in self.answers:
                return case_id
        return None


class SessionStore:
    """One append-only JSONL event log per session, replayed on demand."""

    def __init__(self, directory):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()
        self._cache: dict[str, StudySession] = {}

    def _path(self, session_id: str) -> Path:
        return self.directory / f"{session_id}.jsonl"

    def _append(self, session_id: str, event: dict) -> None:
        with open(self._path(session_id), "a") as fh:
            fh.write(json.dumps(event) + "\n")

    def create(self, role: str, cases: list) -> StudySession:
        with self._lock:
            session = StudySession(id=uuid.uuid4().hex[:12], role=role,
                                   cases=list(cases), created_at=time.time())
            self._cache[session.id] = session
            self._append(session.id, {"type": "created", "session_id": session.id,
                                      "role": role, "cases": session.cases,
                                      "timestamp": session.created_at})
            return session

    def load(self, session_id: str) -> Optional[StudySession]:
        with self._lock:
            if session_id in self._cache:
                return self._cache[session_id]
            path = self._path(session_id)
            if not path.exists():
                return None
            session = self._replay(path)
            self._cache[session_id] = session
            return session

    @staticmethod
    def _replay(path: Path) -> StudySession:
        session = None
        for line in path.read_text().splitlines():
            event = json.loads(line)
            if event["type"] == "created":
                session = StudySession(id=event["session_id"], role=event["role"],
                                       cases=list(event["cases"]),
                                       created_at=event["timestamp"])
            elif event["type"] == "answer" and session is not None:
                key = (event["case_id"], event["phase"])
                session.answers[key] = event
        if session is None:
            raise ValueError(f"{path}: no creation event in session log")
        return session

    def record_answer(self, session: StudySession, case_id: str, phase: int,
                      label: str) -> dict:
        with self._lock:
            event = {"type": "answer", "case_id": case_id, "phase": phase,
                     "label": label, "timestamp": time.time()}
            session.answers[(case_id, phase)] = event
            self._append(session.id, event)
            return event

    def all_sessions(self) -> list:
        out = []
        for path in sorted(self.directory.glob("*.jsonl")):
            out.append(self.load(path.stem))
        return [s for s in out if s is not None]


def _png_base64(image: np.ndarray) -> str:
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    buf = io.BytesIO()
    Image.fromarray(arr, mode="L").save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


def predict_payload(model: vit.ViTModel, image: np.ndarray) -> dict:
    """Probabilities, argmax label and the rollout heatmap for one image."""
    logits, trace = vit.forward(model, image, mode="infer")
    probs = T.softmax(logits).data.astype(float)
    heatmap = vit.attention_rollout(trace)
    return {
        "labels": LABEL_NAMES,
        "probabilities": [float(p) for p in probs],
        "argmax": LABEL_NAMES[int(probs.argmax())],
        "heatmap": [[float(v) for v in row] for row in heatmap],
        "grid_size": int(heatmap.shape[0]),
    }


def session_accuracy(session: StudySession, truth: dict, phase: int) -> Optional[float]:
    answers = [(case, event) for (case, p), event in session.answers.items() if p == phase]
    if not answers:
        return None
    correct = sum(1 for case, event in answers if event["label"] == truth.get(case))
    return correct / len(answers)


def build_report(session: StudySession, truth: dict, store: SessionStore) -> dict:
    acc1 = session_accuracy(session, truth, 1)
    acc2 = session_accuracy(session, truth, 2)
    improvement = (acc2 - acc1) if acc1 is not None and acc2 is not None else None

    by_role: dict = {}
    for other in store.all_sessions():
        role = other.role
        bucket = by_role.setdefault(role, {"sessions": 0, "phase1": [], "phase2": []})
        bucket["sessions"] += 1
        for phase in (1, 2):
            for (case, p), event in other.answers.items():
                if p == phase and case in truth:
                    bucket[f"phase{phase}"].append(1 if event["label"] == truth[case] else 0)

    role_aggregates = {}
    for role, bucket in by_role.items():
        entry: dict = {"sessions": bucket["sessions"]}
        for phase in (1, 2):
            hits = np.asarray(bucket[f"phase{phase}"], dtype=np.int64)
            if hits.size == 0:
                continue
            entry[f"phase{phase}_accuracy"] = float(hits.mean())
            if hits.size >= 10:
                ones = np.ones_like(hits)
                entry[f"phase{phase}_ci"] = list(M.bootstrap_ci(
                    hits, ones, lambda t, p: float((t == p).mean()), seed=0))
        if "phase1_accuracy" in entry and "phase2_accuracy" in entry:
            entry["improvement"] = entry["phase2_accuracy"] - entry["phase1_accuracy"]
        role_aggregates[role] = entry

    return {
        "session_id": session.id,
        "role": session.role,
        "cases": len(session.cases),
        "phase1_accuracy": acc1,
        "phase2_accuracy": acc2,
        "improvement": improvement,
        "by_role": role_aggregates,
    }


def create_app(model: Optional[vit.ViTModel] = None,
               dataset: Optional[ArrayDataset] = None,
               truth: Optional[dict] = None,
               case_pool: Optional[list] = None,
               store_dir="study-sessions",
               config: ServiceConfig = ServiceConfig()) -> FastAPI:
    """Wire the inference and study endpoints around a model + dataset."""
    app = FastAPI(title="femurcad")
    store = SessionStore(store_dir)
    truth = truth or {}
    pool = list(case_pool or [])
    rng = np.random.default_rng(config.seed)

    def require_session(session_id: str) -> StudySession:
        session = store.load(session_id)
        if session is None:
            raise HTTPException(status_code=404, detail=f"unknown session {session_id}")
        return session

    def case_image(case_id: str) -> np.ndarray:
        if dataset is None or case_id not in dataset.index:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id}")
        return dataset.image_for(case_id)

    @app.get("/health")
    def health():
        return {"status": "ok", "model_loaded": model is not None,
                "cases_available": len(pool)}

    @app.post("/predict")
    def predict(file: UploadFile = File(...)):
        if model is None:
            raise HTTPException(status_code=503, detail="no model checkpoint loaded")
        blob = file.file.read()
        try:
            with Image.open(io.BytesIO(blob)) as img:
                gray = img.convert("L")
                size = model.config.image_size
                if gray.size != (size, size):
                    gray = gray.resize((size, size), Image.BILINEAR)
                array = np.asarray(gray, dtype=np.float32) / 255.0
        except Exception:
            raise HTTPException(status_code=400, detail="malformed image upload") from None
        return predict_payload(model, array[None])

    @app.post("/study")
    def create_study(body: dict):
        role = body.get("role", "other")
        if role not in ROLES:
            raise HTTPException(status_code=422, detail=f"role must be one of {ROLES}")
        count = int(body.get("case_count", config.case_count))
        if not pool:
            raise HTTPException(status_code=503, detail="no held-out cases available")
        count = min(count, len(pool))
        order = rng.permutation(len(pool))[:count]
        cases = [pool[i] for i in order]
        session = store.create(role, cases)
        return {"session_id": session.id, "role": role, "total_cases": len(cases)}

    @app.get("/study/{session_id}/next")
    def next_case(session_id: str, phase: int = Query(..., ge=1, le=2)):
        session = require_session(session_id)
        case_id = session.next_case(phase)
        if case_id is None:
            return {"done": True, "phase": phase, "total": len(session.cases)}
        if phase == 2:
            first = session.answers.get((case_id, 1))
            if first is None:
                raise HTTPException(status_code=409,
                                    detail="phase 1 must be completed first for this case")
            elapsed = time.time() - first["timestamp"]
            if elapsed < config.washout_seconds:
                raise HTTPException(status_code=409,
                                    detail="washout period between phases not yet elapsed")
        payload = {
            "done": False,
            "case_id": case_id,
            "phase": phase,
            "index": session.answered(phase) + 1,
            "total": len(session.cases),
            "labels": LABEL_NAMES,
            "image_png_base64": _png_base64(case_image(case_id)[0]),
        }
        if phase == 2:
            if model is None:
                raise HTTPException(status_code=503, detail="no model checkpoint loaded")
            payload["model"] = predict_payload(model, case_image(case_id))
        return payload

    @app.post("/study/{session_id}/answer")
    def submit_answer(session_id: str, body: dict):
        session = require_session(session_id)
        case_id = body.get("case_id")
        phase = int(body.get("phase", 0))
        label = body.get("label")
        if phase not in (1, 2):
            raise HTTPException(status_code=422, detail="phase must be 1 or 2")
        if label not in LABEL_NAMES:
            raise HTTPException(status_code=422, detail=f"label must be one of {LABEL_NAMES}")
        if case_id not in session.cases:
            raise HTTPException(status_code=404, detail=f"unknown case {case_id}")
        if (case_id, phase) in session.answers:
            raise HTTPException(status_code=409,
                                detail=f"case {case_id} already answered in phase {phase}")
        if phase == 2 and (case_id, 1) not in session.answers:
            raise HTTPException(status_code=409,
                                detail="phase 1 answer required before phase 2")
        store.record_answer(session, case_id, phase, label)
        remaining = len(session.cases) - session.answered(phase)
        return {"recorded": True, "phase": phase, "remaining": remaining}

    @app.get("/study/{session_id}/report")
    def report(session_id: str):
        session = require_session(session_id)
        return build_report(session, truth, store)

    return app
