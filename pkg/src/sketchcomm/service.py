"""HTTP service pairing a trained sender with a human receiver.

Sessions are created by an admin with a checkpoint reference and a seed; all
rounds (sketches included) are pre-rendered deterministically at creation.
Guesses are appended to a JSON-lines event log before the response is sent,
and the log is replayed at startup, so a restart never loses an answer.
"""

from __future__ import annotations

import hmac
import io
import json
import os
import secrets
import time
from dataclasses import asdict, dataclass, field

import numpy as np
from fastapi import FastAPI, HTTPException, Request
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import Response

from .data import gen_synthetic, load_image_dir, SyntheticSpec
from .game import make_rng, sample_round
from .rasterizer import raster_to_bytes
from .trainer import load as load_checkpoint
from .trainer import Model
from .autodiff import Tensor
from .data import normalize_images


@dataclass
class SessionSpec:
    checkpoint: str
    rounds: int = 30
    feedback: bool = False
    seed: int = 0
    setting: str = "default"     # label used to group sessions in /admin/stats
    dataset: dict | None = None  # {"kind": "synthetic", ...} | {"kind": "dir", "path": ...}

    def __post_init__(self):
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")


@dataclass
class PreparedRound:
    sketch_png: bytes
    candidate_pngs: list            # in displayed order
    displayed_target: int           # target position in displayed order
    candidate_labels: list          # class labels in displayed order (or Nones)


@dataclass
class Session:
    token: str
    spec: SessionSpec
    rounds: list
    records: list = field(default_factory=list)  # one dict per answered round

    @property
    def next_index(self):
        return len(self.records)

    @property
    def complete(self):
        return len(self.records) >= len(self.rounds)


def _png_bytes(arr):
    from PIL import Image

    buf = io.BytesIO()
    mode = "L" if arr.ndim == 2 else "RGB"
    Image.fromarray(arr, mode=mode).save(buf, format="PNG")
    return buf.getvalue()


def _build_dataset(spec: SessionSpec, resolution):
    d = spec.dataset or {"kind": "synthetic"}
    kind = d.get("kind", "synthetic")
    if kind == "synthetic":
        extra = {}
        if d.get("classes"):
            extra["classes"] = tuple(d["classes"])
        syn = SyntheticSpec(
            resolution=resolution,
            train_per_class=int(d.get("train_per_class", 20)),
            test_per_class=int(d.get("test_per_class", 10)),
            seed=int(d.get("seed", 0)), **extra)
        _, test = gen_synthetic(syn)
        return test
    if kind == "dir":
        return load_image_dir(d["path"], resolution=resolution, split="eval")
    raise ValueError(f"unknown dataset kind {kind!r}")


def plan_rounds(game_cfg, dataset, seed, n_rounds):
    """Deterministic (game round, candidate shuffle, displayed target) list.

    The shuffle is drawn independently of the target index, so the target's
    displayed position is uniform over the pool.
    """
    rng = make_rng(seed, stream=9)
    plan = []
    for _ in range(n_rounds):
        rnd = sample_round(game_cfg, dataset, rng)
        shuffle = rng.permutation(game_cfg.pool_size)
        displayed_target = int(np.where(shuffle == rnd.target_index)[0][0])
        plan.append((rnd, shuffle, displayed_target))
    return plan


def _prepare_rounds(model: Model, dataset, spec: SessionSpec):
    """Round plan plus pre-rendered sketch and candidate PNGs."""
    rounds = []
    for rnd, shuffle, displayed_target in plan_rounds(
            model.cfg.game, dataset, spec.seed, spec.rounds):
        imgs = normalize_images(dataset.images[np.asarray([rnd.sender_target])],
                                model.stats)
        _, raster, _, _ = model.sketch_batch(Tensor(imgs))
        sketch_png = _png_bytes(raster_to_bytes(Tensor(raster.data[0])))
        candidates = [
            _png_bytes(dataset.images[rnd.pool[j]]) for j in shuffle]
        labels = [rnd.labels[j] for j in shuffle]
        rounds.append(PreparedRound(sketch_png=sketch_png,
                                    candidate_pngs=candidates,
                                    displayed_target=displayed_target,
                                    candidate_labels=labels))
    return rounds


class SessionStore:
    """In-memory sessions backed by an append-only JSONL event log."""

    def __init__(self, path=None):
        self.path = path
        self.sessions = {}
        self._models = {}

    def _model(self, checkpoint_path):
        if checkpoint_path not in self._models:
            model, _, _, _ = load_checkpoint(checkpoint_path)
            self._models[checkpoint_path] = model
        return self._models[checkpoint_path]

    def _append(self, event):
        if self.path is None:
            return
        with open(self.path, "a") as f:
            f.write(json.dumps(event) + "\n")
            f.flush()
            os.fsync(f.fileno())

    def replay(self):
        if self.path is None or not os.path.exists(self.path):
            return
        with open(self.path) as f:
            for line in f:
                line = line.strip()
                if not line:
                    continue
                event = json.loads(line)
                if event["event"] == "session_created":
                    spec = SessionSpec(**event["spec"])
                    self._materialize(event["token"], spec)
                elif event["event"] == "guess":
                    sess = self.sessions[event["token"]]
                    sess.records.append(event["record"])

    def _materialize(self, token, spec):
        model = self._model(spec.checkpoint)
        dataset = _build_dataset(spec, model.cfg.backbone.resolution)
        rounds = _prepare_rounds(model, dataset, spec)
        sess = Session(token=token, spec=spec, rounds=rounds)
        self.sessions[token] = sess
        return sess

    def create(self, spec: SessionSpec):
        token = secrets.token_urlsafe(32)  # 256 random bits
        sess = self._materialize(token, spec)
        self._append({"event": "session_created", "token": token,
                      "spec": asdict(spec)})
        return sess

    def record_guess(self, sess: Session, record):
        self._append({"event": "guess", "token": sess.token,
                      "record": record})
        sess.records.append(record)


def _percentile(values, q):
    return float(np.percentile(values, q)) if values else None


def compute_stats(sessions):
    """Aggregates per session and per game-setting, from stored records only."""
    per_session = []
    by_setting = {}
    for sess in sessions:
        recs = sess.records
        n = len(recs)
        correct = sum(r["correct"] for r in recs)
        class_correct = sum(r["class_correct"] for r in recs)
        times = [r["elapsed_ms"] for r in recs]
        entry = {
            "token": sess.token,
            "setting": sess.spec.setting,
            "feedback": sess.spec.feedback,
            "answered": n,
            "total_rounds": len(sess.rounds),
            "complete": sess.complete,
            "comm_rate": correct / n if n else None,
            "class_comm_rate": class_correct / n if n else None,
            "mean_elapsed_ms": float(np.mean(times)) if times else None,
            "p50_elapsed_ms": _percentile(times, 50),
            "p90_elapsed_ms": _percentile(times, 90),
        }
        per_session.append(entry)
        by_setting.setdefault(sess.spec.setting, []).append((recs, sess))
    settings = {}
    for setting, group in by_setting.items():
        recs = [r for rs, _ in group for r in rs]
        times = [r["elapsed_ms"] for r in recs]
        n = len(recs)
        settings[setting] = {
            "sessions": len(group),
            "completed_sessions": sum(s.complete for _, s in group),
            "answered": n,
            "comm_rate": sum(r["correct"] for r in recs) / n if n else None,
            "class_comm_rate": (sum(r["class_correct"] for r in recs) / n
                                if n else None),
            "mean_elapsed_ms": float(np.mean(times)) if times else None,
            "p50_elapsed_ms": _percentile(times, 50),
            "p90_elapsed_ms": _percentile(times, 90),
        }
    return {"sessions": per_session, "settings": settings,
            "session_count": len(per_session)}


def create_app(store_path=None, admin_token=None):
    store_path = store_path if store_path is not None else \
        os.environ.get("SKETCHCOMM_STORE_PATH")
    admin_token = admin_token if admin_token is not None else \
        os.environ.get("SKETCHCOMM_ADMIN_TOKEN")
    if not admin_token:
        raise RuntimeError("SKETCHCOMM_ADMIN_TOKEN must be set")
    store = SessionStore(store_path)
    store.replay()
    app = FastAPI(title="sketchcomm eval service")
    # the browser frontend may be served from a different origin
    app.add_middleware(CORSMiddleware, allow_origins=["*"],
                       allow_methods=["*"], allow_headers=["*"])
    app.state.store = store

    def require_admin(request: Request):
        supplied = request.headers.get("x-admin-token", "")
        if not hmac.compare_digest(supplied.encode(), admin_token.encode()):
            raise HTTPException(status_code=403, detail="forbidden")

    def get_session(token):
        sess = store.sessions.get(token)
        if sess is None:
            raise HTTPException(status_code=404, detail="unknown session")
        return sess

    @app.post("/admin/sessions")
    async def create_session(request: Request):
        require_admin(request)
        body = await request.json()
        try:
            spec = SessionSpec(**body)
            sess = store.create(spec)
        except (TypeError, ValueError, FileNotFoundError) as exc:
            raise HTTPException(status_code=400, detail=str(exc))
        return {"token": sess.token}

    @app.get("/session/{token}/round/{i}")
    def get_round(token: str, i: int):
        sess = get_session(token)
        if i != sess.next_index:
            raise HTTPException(
                status_code=409,
                detail=f"round {sess.next_index} is next; cannot fetch {i}")
        if sess.complete:
            raise HTTPException(status_code=409, detail="session complete")
        rnd = sess.rounds[i]
        base = f"/session/{token}/images"
        return {
            "sketch_url": f"{base}/r{i}_sketch.png",
            "candidates": [f"{base}/r{i}_c{j}.png"
                           for j in range(len(rnd.candidate_pngs))],
            "index": i,
            "total": len(sess.rounds),
            "feedback_mode": sess.spec.feedback,
        }

    @app.get("/session/{token}/images/{image_id}.png")
    def get_image(token: str, image_id: str):
        sess = get_session(token)
        try:
            rpart, cpart = image_id.split("_", 1)
            i = int(rpart[1:])
            rnd = sess.rounds[i]
            if cpart == "sketch":
                data = rnd.sketch_png
            else:
                data = rnd.candidate_pngs[int(cpart[1:])]
        except (ValueError, IndexError):
            raise HTTPException(status_code=404, detail="unknown image")
        return Response(content=data, media_type="image/png")

    @app.post("/session/{token}/guess")
    async def submit_guess(token: str, request: Request):
        sess = get_session(token)
        body = await request.json()
        try:
            index = int(body["index"])
            guess = int(body["guess"])
            elapsed_ms = float(body["elapsed_ms"])
        except (KeyError, TypeError, ValueError):
            raise HTTPException(status_code=400, detail="bad guess payload")
        if index < sess.next_index:
            raise HTTPException(status_code=409,
                                detail="round already answered")
        if index != sess.next_index or index >= len(sess.rounds):
            raise HTTPException(status_code=409, detail="out-of-order round")
        rnd = sess.rounds[index]
        if not (0 <= guess < len(rnd.candidate_pngs)):
            raise HTTPException(status_code=400, detail="guess out of range")
        correct = guess == rnd.displayed_target
        tgt_label = rnd.candidate_labels[rnd.displayed_target]
        class_correct = (rnd.candidate_labels[guess] == tgt_label
                         if tgt_label is not None else correct)
        record = {
            "index": index,
            "guess": guess,
            "elapsed_ms": elapsed_ms,
            "correct": bool(correct),
            "class_correct": bool(class_correct),
            "received_at": time.time(),
        }
        store.record_guess(sess, record)
        feedback = None
        if sess.spec.feedback:
            feedback = {"correct": bool(correct),
                        "target": rnd.displayed_target}
        return {"accepted": True, "feedback": feedback}

    @app.get("/admin/stats")
    def stats(request: Request):
        require_admin(request)
        return compute_stats(store.sessions.values())

    return app


def serve(bind=None, store_path=None, admin_token=None):
    import uvicorn

    bind = bind or os.environ.get("SKETCHCOMM_BIND", "127.0.0.1:8000")
    host, _, port = bind.rpartition(":")
    app = create_app(store_path=store_path, admin_token=admin_token)
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port))
