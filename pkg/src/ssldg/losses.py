"""Training objectives.

The consistency terms are written for a per-pixel foreground probability.  For
a softmax head with C channels they are applied to every foreground channel
(1..C-1) and averaged, which reduces to the plain binary formulas when C = 2.
Branch 1 never enters the consistency terms; they range over branches 2..k.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import ContractError, DimensionError, Tensor

PROB_EPS = 1e-7
DICE_EPS = 1e-5
_LOGIT_FLOOR = 1e-12


@dataclass
class LossWeights:
    T: float = 0.1
    alpha: float = 0.5
    gamma: float = 0.5
    mu: float = 0.5

    def __post_init__(self):
        if self.T <= 0:
            raise ContractError("sharpening temperature must be positive")
        for name in ("alpha", "gamma", "mu"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1]")


@dataclass
class UncertaintyMaps:
    maps: list[Tensor]      # U_m^i for m = 2..k
    scalars: list[Tensor]   # U_m, pixel means of the maps


def sharpen(p, T: float) -> Tensor:
    """p^(1/T) / (p^(1/T) + (1-p)^(1/T)), evaluated as sigmoid(logit(p) / T)."""
    if T <= 0:
        raise ContractError("sharpening temperature must be positive")
    p = gc.as_tensor(p)
    logit = gc.log(gc.clip(p, _LOGIT_FLOOR, 1.0)) - gc.log(gc.clip(1.0 - p, _LOGIT_FLOOR, 1.0))
    return gc.sigmoid(logit * (1.0 / T))


def avg_probability(sharpened: Sequence[Tensor]) -> Tensor:
    if len(sharpened) == 0:
        raise ContractError("average over an empty branch set")
    total = sharpened[0]
    for s in sharpened[1:]:
        total = total + s
    return total * (1.0 / len(sharpened))


def pixel_uncertainty(sharpened: Sequence[Tensor], p_avg: Tensor) -> UncertaintyMaps:
    """U_m^i = p'_m log(p'_m / p_avg) per branch; U_m is its pixel mean."""
    pa = gc.clip(p_avg, PROB_EPS, 1.0 - PROB_EPS)
    log_pa = gc.log(pa)
    maps, scalars = [], []
    for s in sharpened:
        ps = gc.clip(s, PROB_EPS, 1.0 - PROB_EPS)
        u = ps * (gc.log(ps) - log_pa)
        maps.append(u)
        scalars.append(u.mean())
    return UncertaintyMaps(maps, scalars)


def loss_une(U: UncertaintyMaps) -> Tensor:
    total = U.scalars[0]
    for s in U.scalars[1:]:
        total = total + s
    return total * (1.0 / len(U.scalars))


def _weighted_mean(values: Tensor, weights: np.ndarray) -> Tensor:
    # per-channel weighted mean for [N, C, H, W] maps, then mean over channels
    if values.ndim == 4:
        num = (values * weights).sum(axis=(0, 2, 3))
        den = weights.sum(axis=(0, 2, 3))
        return (num / den).mean()
    return (values * weights).sum() * (1.0 / weights.sum())


def rectifying_weights(U: UncertaintyMaps) -> list[np.ndarray]:
    return [np.exp(-u.data) for u in U.maps]


def loss_unr(sharpened: Sequence[Tensor], p_avg: Tensor, U: UncertaintyMaps, squared: bool = False,
             weights: Sequence[np.ndarray] | None = None) -> Tensor:
    """Discrepancy to the branch mean, weighted by exp(-U) (weights not differentiated).

    ``weights`` replaces exp(-U) with fixed arrays, e.g. to hold them constant
    under finite differencing.
    """
    weights = rectifying_weights(U) if weights is None else weights
    terms = []
    for s, wgt in zip(sharpened, weights):
        diff = s - p_avg
        d = diff * diff if squared else gc.absolute(diff)
        terms.append(_weighted_mean(d, wgt))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total * (1.0 / len(terms))


def loss_uec(l_une, l_unr, alpha: float):
    return alpha * l_une + (1.0 - alpha) * l_unr


def loss_wsm(outputs: Sequence[Tensor], j: int) -> Tensor:
    """Mean squared difference between reference branch j and every other branch in 2..k.

    ``outputs`` holds all k branch maps (branch 1 first).
    """
    k = len(outputs)
    if k <= 2:
        raise ContractError("deep mutual learning needs k >= 3 (normalizer k - 2)")
    if not 2 <= j <= k:
        raise ContractError(f"reference branch {j} outside 2..{k}")
    ref = gc.as_tensor(outputs[j - 1])
    total = None
    for m in range(2, k + 1):
        if m == j:
            continue
        d = ref - outputs[m - 1]
        term = (d * d).mean()
        total = term if total is None else total + term
    return total * (1.0 / (k - 2))


def one_hot(mask, classes: int) -> np.ndarray:
    mask = np.asarray(mask)
    if mask.min(initial=0) < 0 or mask.max(initial=0) >= classes:
        raise DimensionError(f"mask labels outside 0..{classes - 1}")
    oh = (mask[:, None, :, :] == np.arange(classes)[None, :, None, None])
    return oh.astype(np.float64)


def dice_loss(prob: Tensor, mask, per_sample: bool = False, eps: float = DICE_EPS) -> Tensor:
    """1 - mean_c (2 sum p y + eps) / (sum p + sum y + eps).

    ``prob`` is [N, C, H, W], ``mask`` is [N, H, W].  With ``per_sample`` the
    soft Dice is taken per image and the per-image losses are summed, so the
    gradient for one image never depends on the others.
    """
    prob = gc.as_tensor(prob)
    mask = np.asarray(mask)
    if mask.ndim == 2:
        mask = mask[None]
    if prob.ndim != 4 or mask.shape != (prob.shape[0],) + prob.shape[2:]:
        raise DimensionError(f"prob {prob.shape} and mask {mask.shape} are incompatible")
    y = one_hot(mask, prob.shape[1])
    axes = (2, 3) if per_sample else (0, 2, 3)
    inter = (prob * y).sum(axis=axes)
    denom = prob.sum(axis=axes) + y.sum(axis=axes)
    dice = (inter * 2.0 + eps) / (denom + eps)
    if per_sample:
        return (1.0 - dice.mean(axis=1)).sum()
    return 1.0 - dice.mean()


def loss_total(l_sup, l_uec, l_wsm, w: LossWeights):
    return w.mu * l_sup + (1.0 - w.mu) * (w.gamma * l_uec + (1.0 - w.gamma) * l_wsm)


def foreground(prob: Tensor) -> Tensor:
    """Foreground channels 1..C-1 of a [N, C, H, W] probability map."""
    return prob[:, 1:]


def consistency_terms(probs: Sequence[Tensor], w: LossWeights, j: int, squared: bool = False,
                      weights: Sequence[np.ndarray] | None = None) -> dict[str, Tensor]:
    """L_une, L_unr, L_uec and L_wsm from all k branch outputs."""
    fg = [foreground(p) for p in probs]
    sharp = [sharpen(p, w.T) for p in fg[1:]]
    pavg = avg_probability(sharp)
    U = pixel_uncertainty(sharp, pavg)
    une = loss_une(U)
    unr = loss_unr(sharp, pavg, U, squared=squared, weights=weights)
    return {"une": une, "unr": unr, "uec": loss_uec(une, unr, w.alpha), "wsm": loss_wsm(fg, j)}
