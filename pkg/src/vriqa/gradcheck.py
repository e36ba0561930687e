"""Gradient-check suite: every layer kind and both training objectives against central differences.

Everything runs in float64 on deliberately tiny networks so that a full
coordinate sweep stays within a few seconds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn
from .model import (
    EncoderConfig,
    GuiderModel,
    ModelConfig,
    PredictorModel,
    discriminate_batch,
    guider_features,
    predictor_forward,
)
from .training import Batch, TrainConfig, _guider_objective, _predictor_objective

# D=4 features, 8x8 patches, two patches per image; heads wide enough that few ReLUs are dead
TINY_CONFIG = ModelConfig(patch_size=8, encoder=EncoderConfig(feature_dim=4, channels=(3, 4)), head_widths=(8, 6, 4))
TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_error: float
    checked: int
    skipped_kinks: int
    active: int  # coordinates whose analytic gradient is above the comparison floor

    def passed(self, tol: float = TOLERANCE) -> bool:
        return self.active > 0 and self.max_rel_error <= tol

    def to_dict(self) -> dict:
        return {"name": self.name, "max_rel_error": self.max_rel_error, "checked": self.checked,
                "skipped_kinks": self.skipped_kinks, "active": self.active}


def _active(grads, floor: float) -> int:
    return int(sum(np.count_nonzero(np.abs(g) > floor) for g in grads))


LAYER_CASES = {
    "dense": ([("dense", {"in": 5, "out": 3})], (4, 5)),
    "conv2d": ([("conv2d", {"in": 2, "out": 3})], (2, 7, 7, 2)),
    "relu": ([("dense", {"in": 5, "out": 6}), ("relu", {}), ("dense", {"in": 6, "out": 2})], (4, 5)),
    "sigmoid": ([("dense", {"in": 5, "out": 3}), ("sigmoid", {})], (4, 5)),
    "softplus": ([("dense", {"in": 5, "out": 3}), ("softplus", {})], (4, 5)),
    "global_avg_pool": ([("conv2d", {"in": 2, "out": 3}), ("relu", {}), ("global_avg_pool", {}),
                         ("dense", {"in": 3, "out": 2})], (3, 9, 9, 2)),
}


def _quadratic_loss(target):
    def loss(out):
        diff = out - target
        return 0.5 * float(np.sum(diff * diff)), diff
    return loss


def layer_checks(seed: int = 0, h: float = 1e-4) -> list[CheckResult]:
    """Parameter and input gradients of each layer kind under a quadratic loss."""
    rng = np.random.default_rng(seed)
    out = []
    for name, (spec, shape) in LAYER_CASES.items():
        net = nn.build_network(spec, np.float64).initialize(rng, np.float64)
        x = rng.normal(size=shape)
        target = rng.normal(size=nn.forward(net, x).output.shape)
        rep = nn.grad_check(net, _quadratic_loss(target), x, h)
        out.append(CheckResult(name, rep.max_rel_error, rep.checked, rep.skipped_kinks, rep.checked))
    return out


def tiny_problem(seed: int = 0, batch: int = 3, config: ModelConfig = TINY_CONFIG):
    """Random float64 predictor, guider and batch of two-patch images for loss-level checks."""
    rng = np.random.default_rng(seed)
    p = PredictorModel.create(config, rng, np.float64)
    d = GuiderModel.create(config, rng, np.float64)
    p.quality_head.layers[-1].params[1][:] = 0.5
    ps, c = config.patch_size, config.in_channels
    dist = rng.uniform(0, 1, size=(batch, 2, ps, ps, c))
    ref = np.clip(dist + rng.normal(0, 0.1, size=dist.shape), 0, 1)
    positions = np.array([[-0.5, 0.0], [0.5, 0.0]])
    mos = rng.uniform(20, 90, size=batch)
    return p, d, Batch(dist, ref, mos, positions)


def _patterns(p, d, batch, scores):
    fwd = predictor_forward(p, batch.patches_dist, batch.positions)
    feats = guider_features(d, batch.patches_dist, batch.patches_ref)
    dpass = discriminate_batch(d, feats, np.stack([batch.mos, fwd.scores if scores is None else scores]))
    clamp = (dpass.probs <= 1e-7) | (dpass.probs >= 1 - 1e-7)
    return np.concatenate([nn.relu_pattern(fwd.enc, fwd.wh, fwd.qh, feats.enc, dpass.trace), clamp])


def resolution_floor(value: float, h: float, tol: float = TOLERANCE) -> float:
    """Gradient magnitude below which a central difference of ``value`` is dominated by rounding.

    A 16-ulp error in each loss evaluation moves the difference quotient by
    about ``16 eps |f| / h``; below ``that / tol`` a relative comparison at
    ``tol`` would only measure rounding, so such coordinates are compared
    against the floor instead.
    """
    return max(1e-8, 16.0 * np.finfo(np.float64).eps * max(abs(value), 1.0) / h / tol)


def loss_checks(seed: int = 0, lam: float = TrainConfig.lam, h: float = 1e-4) -> list[CheckResult]:
    """L_P against every predictor parameter and L_D against every guider parameter."""
    p, d, batch = tiny_problem(seed)

    def lp():
        return _predictor_objective(p, d, batch, lam)[0]

    fp, gp, *_ = _predictor_objective(p, d, batch, lam)
    floor_p = resolution_floor(fp, h)
    rp = nn.finite_difference_check(p.params(), gp, lp, lambda: _patterns(p, d, batch, None), h, floor_p)

    fixed = predictor_forward(p, batch.patches_dist, batch.positions).scores

    def ld():
        return _guider_objective(d, batch, fixed)[0]

    fd, gd, _ = _guider_objective(d, batch, fixed)
    floor_d = resolution_floor(fd, h)
    rd = nn.finite_difference_check(d.params(), gd, ld, lambda: _patterns(p, d, batch, fixed), h, floor_d)
    return [CheckResult("loss_predictor", rp.max_rel_error, rp.checked, rp.skipped_kinks, _active(gp, floor_p)),
            CheckResult("loss_guider", rd.max_rel_error, rd.checked, rd.skipped_kinks, _active(gd, floor_d))]


def run_suite(seed: int = 0) -> list[CheckResult]:
    return layer_checks(seed) + loss_checks(seed)
