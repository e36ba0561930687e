"""Patch-based quality score predictor, the human-perception guider and saliency maps.

The predictor scores a distorted equirectangular image alone: every patch of the
grid is encoded to a feature vector, a weight head looks at the feature plus the
patch's position relative to the image centre, a quality head looks at the
feature only, and the image score is the weight-normalised mean of patch
qualities.  The guider is a conditional discriminator over
``(features(dist), features(ref), difference, score)``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import nn
from .image import ImageBuffer, Patch, assemble_patch_array, patch_array, patch_positions

WEIGHT_FLOOR = 1e-6
MODEL_KIND = "vriqa-model"


def head_widths(feature_dim: int) -> tuple[int, int, int]:
    """Hidden widths of the 4-layer heads; (512, 64, 8) at the full 2048-d feature size."""
    if feature_dim >= 2048:
        return (512, 64, 8)
    w1 = max(feature_dim // 2, 2)
    w2 = max(feature_dim // 4, 2)
    return (w1, w2, min(8, w2))


@dataclass(frozen=True)
class EncoderConfig:
    feature_dim: int = 64
    channels: tuple[int, ...] = (8, 16, 32)
    kernel: int = 3
    stride: int = 2

    def __post_init__(self):
        if self.feature_dim < 1:
            raise ValueError("feature_dim must be >= 1")
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))

    def spec(self, in_channels: int) -> list:
        layers = []
        c = in_channels
        for out in self.channels:
            layers += [("conv2d", {"in": c, "out": out, "kernel": self.kernel, "stride": self.stride}), ("relu", {})]
            c = out
        layers += [("global_avg_pool", {}), ("dense", {"in": c, "out": self.feature_dim})]
        return layers

    def check_patch(self, patch_size: int) -> None:
        n = patch_size
        for _ in self.channels:
            if n < self.kernel:
                break
            n = (n - self.kernel) // self.stride + 1
        else:
            if n >= 1:
                return
        raise ValueError(f"patch size {patch_size} too small for {len(self.channels)} conv layers")


def head_spec(n_in: int, widths, final: str | None) -> list:
    layers = []
    for w in widths:
        layers += [("dense", {"in": n_in, "out": w}), ("relu", {})]
        n_in = w
    layers.append(("dense", {"in": n_in, "out": 1}))
    if final:
        layers.append((final, {}))
    return layers


@dataclass(frozen=True)
class ModelConfig:
    patch_size: int = 64
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    in_channels: int = 3
    head_widths: tuple[int, int, int] | None = None
    score_scale: float = 100.0

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    @property
    def widths(self) -> tuple[int, int, int]:
        return tuple(self.head_widths) if self.head_widths else head_widths(self.feature_dim)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder"]["channels"] = list(self.encoder.channels)
        d["head_widths"] = list(self.widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        enc = EncoderConfig(**d["encoder"])
        return cls(d["patch_size"], enc, d["in_channels"], tuple(d["head_widths"]), d["score_scale"])


# ---------------------------------------------------------------------- predictor


@dataclass
class PredictorModel:
    encoder: nn.Network
    weight_head: nn.Network
    quality_head: nn.Network
    config: ModelConfig
    position_scale: tuple[float, float] | None = None

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float32,
               position_scale=None) -> "PredictorModel":
        config.encoder.check_patch(config.patch_size)
        d = config.feature_dim
        enc = nn.build_network(config.encoder.spec(config.in_channels), dtype)
        wh = nn.build_network(head_spec(d + 2, config.widths, "softplus"), dtype)
        qh = nn.build_network(head_spec(d, config.widths, None), dtype)
        if rng is not None:
            for net in (enc, wh, qh):
                net.initialize(rng, dtype)
        return cls(enc, wh, qh, config, position_scale)

    @property
    def patch_size(self) -> int:
        return self.config.patch_size

    @property
    def dtype(self):
        return self.encoder.dtype

    def networks(self) -> dict[str, nn.Network]:
        return {"encoder": self.encoder, "weight_head": self.weight_head, "quality_head": self.quality_head}

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.weight_head.params() + self.quality_head.params()

    def astype(self, dtype) -> "PredictorModel":
        return PredictorModel(self.encoder.astype(dtype), self.weight_head.astype(dtype),
                              self.quality_head.astype(dtype), self.config, self.position_scale)

    def copy(self) -> "PredictorModel":
        return self.astype(self.dtype)

    def normalized_positions(self, positions: np.ndarray, width: int, height: int) -> np.ndarray:
        sx, sy = self.position_scale or (width / 2.0, height / 2.0)
        return positions / np.array([sx, sy])


@dataclass
class PredictorPass:
    enc: nn.Trace
    wh: nn.Trace
    qh: nn.Trace
    weights: np.ndarray  # (B, N) float64
    qualities: np.ndarray  # (B, N) float64
    scores: np.ndarray  # (B,) float64
    input_shape: tuple


def prepare_input(patches: np.ndarray, dtype) -> np.ndarray:
    """Flatten (B, N, P, P, C) patches to the encoder batch and centre pixel values around zero."""
    b, n = patches.shape[:2]
    return (patches.reshape((b * n,) + patches.shape[2:]) - 0.5).astype(dtype, copy=False)


def predictor_forward(model: PredictorModel, patches: np.ndarray, positions: np.ndarray) -> PredictorPass:
    """Score a batch of patch grids; ``positions`` are normalised (N, 2) offsets."""
    b, n = patches.shape[:2]
    dtype = model.dtype
    enc = nn.forward(model.encoder, prepare_input(patches, dtype))
    sf = enc.output
    pf = np.broadcast_to(np.asarray(positions, dtype=dtype), (b, n, 2)).reshape(b * n, 2)
    wh = nn.forward(model.weight_head, np.concatenate([sf, pf], axis=1))
    qh = nn.forward(model.quality_head, sf)
    w = wh.output.reshape(b, n).astype(np.float64) + WEIGHT_FLOOR
    q = qh.output.reshape(b, n).astype(np.float64) * model.config.score_scale
    scores = pool_scores(w, q)
    return PredictorPass(enc, wh, qh, w, q, scores, patches.shape)


def pool_scores(w: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Weighted mean of patch qualities along the last axis."""
    s = np.sum(w * q, axis=-1) / np.sum(w, axis=-1)
    # the exact mean lies in [min q, max q]; clamping removes ulp-level rounding overshoot
    return np.clip(s, q.min(axis=-1), q.max(axis=-1))


def predictor_backward(model: PredictorModel, fwd: PredictorPass, dscores, guided: bool = False,
                       input_grad: bool = True):
    """Gradients of ``sum(dscores * scores)``: (parameter grads aligned with ``model.params()``, patch grads).

    Guided mode returns (None, guided patch gradient).  ``input_grad=False`` skips the patch gradient.
    """
    dscores = np.asarray(dscores, dtype=np.float64).reshape(-1, 1)
    w, q, s = fwd.weights, fwd.qualities, fwd.scores[:, None]
    wsum = w.sum(axis=1, keepdims=True)
    dw = dscores * (q - s) / wsum
    dq = dscores * w / wsum
    dtype = model.dtype

    def run(net, trace, grad):
        grad = grad.reshape(-1, 1).astype(dtype)
        if guided:
            return None, nn.guided_backward(net, trace, grad)
        return nn.backward(net, trace, grad)

    g_wh, d_cf = run(model.weight_head, fwd.wh, dw)
    g_qh, d_sf_q = run(model.quality_head, fwd.qh, dq * model.config.score_scale)
    d = model.config.feature_dim
    d_sf = d_cf[:, :d] + d_sf_q
    if guided:
        return None, nn.guided_backward(model.encoder, fwd.enc, d_sf).reshape(fwd.input_shape)
    g_enc, d_x = nn.backward(model.encoder, fwd.enc, d_sf, input_grad=input_grad)
    return g_enc + g_wh + g_qh, (d_x.reshape(fwd.input_shape) if input_grad else None)


# ------------------------------------------------------------------------- guider


@dataclass
class GuiderModel:
    encoder: nn.Network
    disc_head: nn.Network
    config: ModelConfig

    @classmethod
    def create(cls, config: ModelConfig, rng: np.random.Generator | None = None, dtype=np.float32) -> "GuiderModel":
        config.encoder.check_patch(config.patch_size)
        d = config.feature_dim
        enc = nn.build_network(config.encoder.spec(config.in_channels), dtype)
        head = nn.build_network(head_spec(3 * d + 1, config.widths, "sigmoid"), dtype)
        if rng is not None:
            enc.initialize(rng, dtype)
            head.initialize(rng, dtype)
        return cls(enc, head, config)

    @property
    def dtype(self):
        return self.encoder.dtype

    def networks(self) -> dict[str, nn.Network]:
        return {"encoder": self.encoder, "disc_head": self.disc_head}

    def params(self) -> list[np.ndarray]:
        return self.encoder.params() + self.disc_head.params()

    def astype(self, dtype) -> "GuiderModel":
        return GuiderModel(self.encoder.astype(dtype), self.disc_head.astype(dtype), self.config)

    def copy(self) -> "GuiderModel":
        return self.astype(self.dtype)


@dataclass
class GuiderFeatures:
    enc: nn.Trace
    sf_dist: np.ndarray  # (B, D)
    sf_ref: np.ndarray  # (B, D)
    input_shape: tuple


def guider_features(guider: GuiderModel, patches_dist: np.ndarray, patches_ref: np.ndarray) -> GuiderFeatures:
    """Image features as the mean of per-patch encoder features."""
    b, n = patches_dist.shape[:2]
    x = np.concatenate([prepare_input(patches_dist, guider.dtype), prepare_input(patches_ref, guider.dtype)])
    enc = nn.forward(guider.encoder, x)
    f = enc.output.reshape(2, b, n, -1).mean(axis=2)
    return GuiderFeatures(enc, f[0], f[1], x.shape)


@dataclass
class DiscPass:
    trace: nn.Trace
    probs: np.ndarray  # (M,) float64
    reps: int


def disc_input(guider: GuiderModel, feats: GuiderFeatures, scores: np.ndarray) -> np.ndarray:
    """Stack discriminator inputs for ``scores`` of shape (B,) or (K, B); rows are score-set major."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    k = scores.shape[0]
    block = np.concatenate([feats.sf_dist, feats.sf_ref, feats.sf_dist - feats.sf_ref], axis=1)
    block = np.tile(block, (k, 1))
    s = (scores.reshape(-1, 1) / guider.config.score_scale).astype(guider.dtype)
    return np.concatenate([block, s], axis=1)


def discriminate_batch(guider: GuiderModel, feats: GuiderFeatures, scores) -> DiscPass:
    x = disc_input(guider, feats, scores)
    trace = nn.forward(guider.disc_head, x)
    reps = x.shape[0] // feats.sf_dist.shape[0]
    return DiscPass(trace, trace.output[:, 0].astype(np.float64), reps)


def disc_backward(guider: GuiderModel, feats: GuiderFeatures, dpass: DiscPass, dprobs, need_encoder: bool = True):
    """Backprop ``sum(dprobs * probs)``.

    Returns (guider parameter grads or None, gradient wrt the score inputs with shape (K, B)).
    """
    d = guider.config.feature_dim
    dprobs = np.asarray(dprobs, dtype=np.float64).reshape(-1, 1).astype(guider.dtype)
    g_head, dx = nn.backward(guider.disc_head, dpass.trace, dprobs)
    b = feats.sf_dist.shape[0]
    dscore = dx[:, 3 * d].astype(np.float64).reshape(dpass.reps, b) / guider.config.score_scale
    if not need_encoder:
        return None, dscore
    dx = dx.reshape(dpass.reps, b, -1).sum(axis=0)
    d_dist = dx[:, :d] + dx[:, 2 * d:3 * d]
    d_ref = dx[:, d:2 * d] - dx[:, 2 * d:3 * d]
    n = feats.enc.output.shape[0] // (2 * b)
    d_feat = np.stack([d_dist, d_ref])[:, :, None, :] / n
    d_feat = np.broadcast_to(d_feat, (2, b, n, d)).reshape(2 * b * n, d).astype(guider.dtype)
    g_enc, _ = nn.backward(guider.encoder, feats.enc, d_feat, input_grad=False)
    return g_enc + g_head, dscore


# ------------------------------------------------------------- image-level API


@dataclass
class ScoreBreakdown:
    weights: np.ndarray
    qualities: np.ndarray
    score: float


def image_patches(img: ImageBuffer, patch_size: int, dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """(1, N, P, P, C) patch stack and raw (N, 2) pixel offsets."""
    return patch_array(img.data, patch_size)[None].astype(dtype), patch_positions(img.width, img.height, patch_size)


def encode_patch(encoder: nn.Network, patch: Patch) -> np.ndarray:
    x = np.moveaxis(patch.pixels.data, 0, -1)[None]
    return nn.forward(encoder, (x - 0.5).astype(encoder.dtype)).output[0]


def predict_score(model: PredictorModel, img: ImageBuffer) -> ScoreBreakdown:
    patches, pos = image_patches(img, model.patch_size, model.dtype)
    fwd = predictor_forward(model, patches, model.normalized_positions(pos, img.width, img.height))
    return ScoreBreakdown(fwd.weights[0], fwd.qualities[0], float(fwd.scores[0]))


def discriminate(guider: GuiderModel, s: float, img_d: ImageBuffer, img_r: ImageBuffer) -> float:
    if img_d.shape != img_r.shape:
        raise ValueError(f"dimension mismatch: {img_d.shape} vs {img_r.shape}")
    if not np.isfinite(s):
        raise ValueError("score must be finite")
    p = guider.config.patch_size
    pd, _ = image_patches(img_d, p, guider.dtype)
    pr, _ = image_patches(img_r, p, guider.dtype)
    feats = guider_features(guider, pd, pr)
    return float(discriminate_batch(guider, feats, [s]).probs[0])


def saliency_map(model: PredictorModel, img: ImageBuffer) -> ImageBuffer:
    """Guided-backprop |d score / d pixel|, max over channels, scaled so the peak is 1."""
    patches, pos = image_patches(img, model.patch_size, model.dtype)
    fwd = predictor_forward(model, patches, model.normalized_positions(pos, img.width, img.height))
    _, grad = predictor_backward(model, fwd, [1.0], guided=True)
    mag = np.abs(grad[0].astype(np.float64)).max(axis=-1, keepdims=True)
    full = assemble_patch_array(mag, img.width, img.height)
    peak = full.max()
    if peak > 0:
        full = full / peak
    return ImageBuffer(np.clip(full, 0.0, 1.0))


# ---------------------------------------------------------------- persistence


def save_model(path, predictor: PredictorModel, guider: GuiderModel | None = None, extra: dict | None = None) -> None:
    networks = {f"predictor.{k}": v for k, v in predictor.networks().items()}
    if guider is not None:
        networks.update({f"guider.{k}": v for k, v in guider.networks().items()})
    meta = {
        "kind": MODEL_KIND,
        "config": predictor.config.to_dict(),
        "patch_size": predictor.patch_size,
        "feature_dim": predictor.config.feature_dim,
        "position_scale": list(predictor.position_scale) if predictor.position_scale else None,
        "has_guider": guider is not None,
    }
    if extra:
        meta["extra"] = extra
    nn.save_networks(path, networks, meta)


def load_model(path, dtype=np.float32) -> tuple[PredictorModel, GuiderModel | None, dict]:
    networks, meta = nn.load_networks(path, dtype)
    if meta.get("kind") != MODEL_KIND:
        raise ValueError(f"{path}: not a quality model")
    cfg = ModelConfig.from_dict(meta["config"])
    scale = tuple(meta["position_scale"]) if meta.get("position_scale") else None
    predictor = PredictorModel(networks["predictor.encoder"], networks["predictor.weight_head"],
                               networks["predictor.quality_head"], cfg, scale)
    guider = None
    if meta.get("has_guider"):
        guider = GuiderModel(networks["guider.encoder"], networks["guider.disc_head"], cfg)
    return predictor, guider, meta
