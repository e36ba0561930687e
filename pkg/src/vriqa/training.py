"""Adversarial training of the predictor against the guider, plus data plumbing.

Per batch the guider takes ``d_steps_per_p_step`` Adam steps on

    L_D = J(D(mos), 1) + J(D(predicted), 0)

and the predictor then takes one step on

    L_P = (predicted - mos)^2 + lambda * J(D(predicted), 1)

with ``J`` the binary cross-entropy.  Both are batch means.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .image import ImageBuffer, load_image, patch_array, patch_positions
from .model import (
    GuiderModel,
    ModelConfig,
    PredictorModel,
    disc_backward,
    discriminate_batch,
    guider_features,
    predictor_backward,
    predictor_forward,
)

log = logging.getLogger(__name__)

PROB_CLAMP = 1e-7
MANIFEST_FIELDS = ["ref_path", "dist_path", "mos", "scene_id", "codec", "strength"]


class TrainingDiverged(FloatingPointError):
    pass


class ManifestError(ValueError):
    pass


@dataclass(eq=False)
class TrainSample:
    dist_image: ImageBuffer
    ref_image: ImageBuffer
    mos: float
    scene_id: str
    tags: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.dist_image.shape != self.ref_image.shape:
            raise ValueError(f"reference {self.ref_image.shape} and distorted {self.dist_image.shape} differ")
        if not 0.0 <= self.mos <= 100.0:
            raise ValueError(f"MOS {self.mos} outside [0, 100]")


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 6
    lr: float = 2e-4
    lam: float = 100.0
    epochs: int = 30
    seed: int = 0
    d_steps_per_p_step: int = 1
    adversarial: bool = True
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.d_steps_per_p_step < 1:
            raise ValueError("batch_size, epochs and d_steps_per_p_step must be positive")
        if self.lr <= 0 or self.lam < 0:
            raise ValueError("lr must be positive and lambda non-negative")

    @property
    def effective_lam(self) -> float:
        return self.lam if self.adversarial else 0.0

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d


# ----------------------------------------------------------------------- batches


@dataclass
class Batch:
    patches_dist: np.ndarray  # (B, N, P, P, C)
    patches_ref: np.ndarray
    mos: np.ndarray  # (B,) float64
    positions: np.ndarray  # (N, 2) normalised

    def __len__(self):
        return len(self.mos)


class PatchBank:
    """Patch stacks for a sample list, with references stored once per distinct image."""

    def __init__(self, samples: list[TrainSample], patch_size: int, dtype=np.float32):
        if not samples:
            raise ValueError("empty dataset")
        shape = samples[0].dist_image.shape
        for s in samples:
            if s.dist_image.shape != shape:
                raise ValueError(f"inconsistent image dimensions: {s.dist_image.shape} vs {shape}")
        _, h, w = shape
        self.width, self.height = w, h
        self.patch_size = patch_size
        ref_index: dict[int, int] = {}
        refs = []
        self.ref_of = np.empty(len(samples), dtype=np.int64)
        self.dist = np.empty((len(samples), (w // patch_size) * (h // patch_size), patch_size, patch_size, shape[0]),
                             dtype=dtype)
        for i, s in enumerate(samples):
            self.dist[i] = patch_array(s.dist_image.data, patch_size)
            key = id(s.ref_image)
            if key not in ref_index:
                ref_index[key] = len(refs)
                refs.append(patch_array(s.ref_image.data, patch_size).astype(dtype))
            self.ref_of[i] = ref_index[key]
        self.ref = np.stack(refs)
        self.mos = np.array([s.mos for s in samples], dtype=np.float64)
        self.scene_ids = [s.scene_id for s in samples]
        self.raw_positions = patch_positions(w, h, patch_size)

    def __len__(self):
        return len(self.mos)

    def batch(self, idx, positions) -> Batch:
        idx = np.asarray(idx)
        return Batch(self.dist[idx], self.ref[self.ref_of[idx]], self.mos[idx], positions)


def make_batch(samples: list[TrainSample], patch_size: int, position_scale=None, dtype=np.float32) -> Batch:
    if not samples:
        raise ValueError("empty batch")
    bank = PatchBank(samples, patch_size, dtype)
    sx, sy = position_scale or (bank.width / 2.0, bank.height / 2.0)
    return bank.batch(np.arange(len(samples)), bank.raw_positions / np.array([sx, sy]))


# ------------------------------------------------------------------------ losses


def bce(p, target):
    """J(p, target) with p clamped to [1e-7, 1 - 1e-7]; returns (value, dJ/dp), zero slope where clamped."""
    p = np.asarray(p, dtype=np.float64)
    pc = np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)
    value = -target * np.log(pc) - (1.0 - target) * np.log1p(-pc)
    slope = -target / pc + (1.0 - target) / (1.0 - pc)
    slope = np.where((p > PROB_CLAMP) & (p < 1.0 - PROB_CLAMP), slope, 0.0)
    return value, slope


@dataclass
class LossResult:
    value: float
    grads_predictor: list[np.ndarray]
    grads_guider: list[np.ndarray]
    scores: np.ndarray
    mse: float = 0.0
    adversarial: float = 0.0
    accuracy: float = math.nan


def _zeros_like(params):
    return [np.zeros_like(p) for p in params]


def _predictor_objective(p: PredictorModel, d: GuiderModel | None, batch: Batch, lam: float, fwd=None):
    fwd = fwd or predictor_forward(p, batch.patches_dist, batch.positions)
    b = len(batch)
    err = fwd.scores - batch.mos
    mse = float(np.mean(err * err))
    dscore = 2.0 * err / b
    adv = 0.0
    if lam != 0.0 and d is not None:
        feats = guider_features(d, batch.patches_dist, batch.patches_ref)
        dpass = discriminate_batch(d, feats, fwd.scores)
        j, slope = bce(dpass.probs, 1.0)
        adv = float(np.mean(j))
        _, ds = disc_backward(d, feats, dpass, lam * slope / b, need_encoder=False)
        dscore = dscore + ds[0]
    grads, _ = predictor_backward(p, fwd, dscore, input_grad=False)
    return mse + lam * adv, grads, fwd.scores, mse, adv


def predictor_loss(p: PredictorModel, d: GuiderModel | None, batch: Batch, lam: float) -> LossResult:
    """Batch mean of the predictor objective; the guider is held fixed (its gradients are zero)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    value, grads, scores, mse, adv = _predictor_objective(p, d, batch, lam)
    return LossResult(value, grads, _zeros_like(d.params()) if d is not None else [], scores, mse, adv)


def _guider_objective(d: GuiderModel, batch: Batch, predicted: np.ndarray):
    b = len(batch)
    feats = guider_features(d, batch.patches_dist, batch.patches_ref)
    dpass = discriminate_batch(d, feats, np.stack([batch.mos, predicted]))
    probs = dpass.probs.reshape(2, b)
    j_h, s_h = bce(probs[0], 1.0)
    j_p, s_p = bce(probs[1], 0.0)
    value = float(np.mean(j_h + j_p))
    grads, _ = disc_backward(d, feats, dpass, np.concatenate([s_h, s_p]) / b)
    accuracy = float((np.sum(probs[0] > 0.5) + np.sum(probs[1] < 0.5)) / (2 * b))
    return value, grads, accuracy


def guider_loss(p: PredictorModel, d: GuiderModel, batch: Batch) -> LossResult:
    """Batch mean of the guider objective; predicted scores come from the current, fixed predictor."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    scores = predictor_forward(p, batch.patches_dist, batch.positions).scores
    value, grads, acc = _guider_objective(d, batch, scores)
    return LossResult(value, _zeros_like(p.params()), grads, scores, accuracy=acc)


# ------------------------------------------------------------------------- train


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)

    def append(self, record: dict) -> None:
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.records)

    def write(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_jsonl())


def _check_finite(value: float, what: str, epoch: int, step: int) -> None:
    if not math.isfinite(value):
        raise TrainingDiverged(f"non-finite {what} ({value}) at epoch {epoch}, step {step}")


def init_models(cfg: TrainConfig, bank: PatchBank, train_idx=None):
    """Seeded predictor / guider initialisation on independent streams."""
    p_seq, d_seq, _ = np.random.SeedSequence(cfg.seed).spawn(3)
    scale = (bank.width / 2.0, bank.height / 2.0)
    p = PredictorModel.create(cfg.model, np.random.default_rng(p_seq), position_scale=scale)
    mos = bank.mos if train_idx is None else bank.mos[train_idx]
    # start the quality head at the mean training score
    p.quality_head.layers[-1].params[1][:] = np.float32(np.mean(mos) / cfg.model.score_scale)
    d = GuiderModel.create(cfg.model, np.random.default_rng(d_seq))
    return p, d


def predict_bank(p: PredictorModel, bank: PatchBank, idx=None, chunk: int = 16) -> np.ndarray:
    idx = np.arange(len(bank)) if idx is None else np.asarray(idx)
    pos = p.normalized_positions(bank.raw_positions, bank.width, bank.height)
    out = [predictor_forward(p, bank.dist[idx[i:i + chunk]], pos).scores for i in range(0, len(idx), chunk)]
    return np.concatenate(out) if out else np.zeros(0)


def train_on_bank(bank: PatchBank, cfg: TrainConfig, train_idx=None, val_idx=None, progress=None):
    from .stats import correlation_measures

    train_idx = np.arange(len(bank)) if train_idx is None else np.asarray(train_idx)
    if len(train_idx) == 0:
        raise ValueError("empty training set")
    p, d = init_models(cfg, bank, train_idx)
    _, _, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(3)
    shuffle_rng = np.random.default_rng(shuffle_seq)
    pos = p.normalized_positions(bank.raw_positions, bank.width, bank.height)
    adam_p = nn.AdamState.for_params(p.params())
    adam_d = nn.AdamState.for_params(d.params()) if cfg.adversarial else None
    lam = cfg.effective_lam
    history = TrainHistory()
    for epoch in range(1, cfg.epochs + 1):
        order = train_idx[shuffle_rng.permutation(len(train_idx))]
        sums = {"loss_p": 0.0, "mse": 0.0, "adv": 0.0, "loss_d": 0.0, "d_accuracy": 0.0}
        steps = 0
        for step, start in enumerate(range(0, len(order), cfg.batch_size)):
            batch = bank.batch(order[start:start + cfg.batch_size], pos)
            fwd = predictor_forward(p, batch.patches_dist, batch.positions)
            if cfg.adversarial:
                for _ in range(cfg.d_steps_per_p_step):
                    loss_d, g_d, acc = _guider_objective(d, batch, fwd.scores)
                    _check_finite(loss_d, "guider loss", epoch, step)
                    nn.adam_step(d.params(), g_d, adam_d, cfg.lr)
                sums["loss_d"] += loss_d
                sums["d_accuracy"] += acc
            loss_p, g_p, _, mse, adv = _predictor_objective(p, d if cfg.adversarial else None, batch, lam, fwd)
            _check_finite(loss_p, "predictor loss", epoch, step)
            nn.adam_step(p.params(), g_p, adam_p, cfg.lr)
            sums["loss_p"] += loss_p
            sums["mse"] += mse
            sums["adv"] += adv
            steps += 1
        record = {"epoch": epoch, "loss_p": sums["loss_p"] / steps, "mse": sums["mse"] / steps}
        if cfg.adversarial:
            record.update(loss_d=sums["loss_d"] / steps, d_accuracy=sums["d_accuracy"] / steps,
                          adv=sums["adv"] / steps)
        if val_idx is not None and len(val_idx) > 1:
            pred = predict_bank(p, bank, val_idx)
            record.update({f"val_{k}": v for k, v in correlation_measures(pred, bank.mos[val_idx]).items()})
        history.append(record)
        log.info("epoch %d %s", epoch, {k: round(v, 4) for k, v in record.items() if isinstance(v, float)})
        if progress:
            progress(record)
    return p, (d if cfg.adversarial else None), history


def train(dataset: list[TrainSample], cfg: TrainConfig, val_samples: list[TrainSample] | None = None,
          progress=None):
    """Train from scratch; returns (predictor, guider or None, history)."""
    samples = list(dataset) + list(val_samples or [])
    bank = PatchBank(samples, cfg.model.patch_size)
    train_idx = np.arange(len(dataset))
    val_idx = np.arange(len(dataset), len(samples)) if val_samples else None
    return train_on_bank(bank, cfg, train_idx, val_idx, progress)


# ------------------------------------------------------------------------- folds


def kfold_split(samples: list[TrainSample] | list[str], k: int, seed: int = 0):
    """Scene-grouped folds: returns k (train_indices, test_indices) pairs.

    ``samples`` may be TrainSamples or bare scene ids.
    """
    scene_of = [s if isinstance(s, str) else s.scene_id for s in samples]
    if k < 2:
        raise ValueError("k must be >= 2")
    scenes = sorted(set(scene_of))
    if len(scenes) < k:
        raise ValueError(f"{len(scenes)} scenes cannot fill {k} folds")
    rng = np.random.default_rng(seed)
    shuffled = [scenes[i] for i in rng.permutation(len(scenes))]
    groups = [set(shuffled[f::k]) for f in range(k)]
    folds = []
    for g in groups:
        test = np.array([i for i, s in enumerate(scene_of) if s in g], dtype=np.int64)
        train_ = np.array([i for i, s in enumerate(scene_of) if s not in g], dtype=np.int64)
        folds.append((train_, test))
    return folds


# ---------------------------------------------------------------------- manifest


def read_manifest(path) -> list[dict]:
    path = os.fspath(path)
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or list(reader.fieldnames) != MANIFEST_FIELDS:
                raise ManifestError(f"{path}: header must be {','.join(MANIFEST_FIELDS)}")
            rows = list(reader)
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    base = os.path.dirname(os.path.abspath(path))
    for i, row in enumerate(rows):
        try:
            row["mos"] = float(row["mos"])
            row["strength"] = float(row["strength"])
        except (TypeError, ValueError):
            raise ManifestError(f"{path}: row {i + 2} has a non-numeric mos/strength") from None
        for key in ("ref_path", "dist_path"):
            row[key] = os.path.normpath(os.path.join(base, row[key]))
    return rows


def write_manifest(path, rows: list[dict]) -> None:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for r in rows:
            writer.writerow([
                os.path.relpath(r["ref_path"], base).replace(os.sep, "/"),
                os.path.relpath(r["dist_path"], base).replace(os.sep, "/"),
                f"{r['mos']:.6f}", r["scene_id"], r["codec"], f"{r['strength']:g}",
            ])


def load_manifest(path, dtype=np.float32) -> list[TrainSample]:
    """Load every manifest row; references shared between rows are loaded once."""
    refs: dict[str, ImageBuffer] = {}
    samples = []
    for row in read_manifest(path):
        ref = refs.get(row["ref_path"])
        if ref is None:
            ref = refs[row["ref_path"]] = load_image(row["ref_path"], dtype)
        dist = load_image(row["dist_path"], dtype)
        samples.append(TrainSample(dist, ref, row["mos"], row["scene_id"],
                                   {"codec": row["codec"], "strength": row["strength"], "dist_path": row["dist_path"]}))
    return samples
