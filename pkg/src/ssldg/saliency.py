"""Augmentation scale balancing.

The input gradient of the Dice loss on the GA view is turned into a smooth
saliency map S in [0, 1] (absolute value, global l2 normalization, g x g
average pooling, quadratic B-spline interpolation back to full size, min-max
rescaling).  The balanced view is S * GA + (1 - S) * FA.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import gradcore as gc
from .augment import (FaParams, GaParams, IntensityMap, WeakAugConfig, focal_augment,
                      global_augment, sample_weak)
from .gradcore import ContractError, DimensionError, Tensor
from .losses import dice_loss
from .rng import STAGE_FA, STAGE_GA, STAGE_WEAK, KeyedRNG
from .segnet import SegModel, forward_branch, predict

GRID_PRESETS = {"abdominal": 3, "cardiac": 18}


@dataclass
class SaliencyConfig:
    grid_g: int = 3
    # "gradient": S from input gradients; "fa": S = 0 (plain FA view); "ga": S = 1
    mode: str = "gradient"
    branch: int = 1

    def __post_init__(self):
        if self.grid_g < 1:
            raise ContractError("grid size must be >= 1")
        if self.mode not in ("gradient", "fa", "ga"):
            raise ContractError(f"unknown saliency mode {self.mode!r}")


def input_gradient(model: SegModel, img, mask, branch: int = 1) -> np.ndarray:
    """d(Dice loss)/d(pixel) through one branch; parameters are read-only.

    ``img`` is [H, W] or [N, H, W]; each image's loss is computed separately.
    """
    if mask is None:
        raise ContractError("input gradient needs a mask")
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask)
    if img.shape != mask.shape:
        raise DimensionError(f"image {img.shape} and mask {mask.shape} differ")
    batch = img.reshape((-1, 1) + img.shape[-2:])
    x = Tensor(batch.copy(), requires_grad=True)
    probs = forward_branch(model.frozen(), x, branch)
    loss = dice_loss(probs, mask.reshape((-1,) + mask.shape[-2:]), per_sample=True)
    loss.backward()
    return x.grad.reshape(img.shape)


def _bspline2(t: np.ndarray) -> np.ndarray:
    a = np.abs(t)
    return np.where(a <= 0.5, 0.75 - a * a, np.where(a <= 1.5, 0.5 * (1.5 - a) ** 2, 0.0))


@lru_cache(maxsize=64)
def _pool_matrix(n: int, g: int) -> np.ndarray:
    edges = np.round(np.arange(g + 1) * n / g).astype(int)
    P = np.zeros((g, n))
    for j in range(g):
        P[j, edges[j]:edges[j + 1]] = 1.0 / (edges[j + 1] - edges[j])
    return P


@lru_cache(maxsize=64)
def _upsample_matrix(n: int, g: int) -> np.ndarray:
    """[n, g] matrix: quadratic B-spline interpolation of g knot values at n pixel centers.

    Knots sit at coarse-cell centers; out-of-range knot indices are clamped to
    the boundary.  Coefficients are prefiltered so the spline passes through
    the knot values.
    """
    A = np.zeros((g, g))
    for r in range(g):
        for d, wgt in ((-1, 0.125), (0, 0.75), (1, 0.125)):
            A[r, min(max(r + d, 0), g - 1)] += wgt
    u = (np.arange(n) + 0.5) * g / n - 0.5
    E = np.zeros((n, g))
    base = np.floor(u).astype(int)
    for off in (-1, 0, 1, 2):
        j = base + off
        w = _bspline2(u - j)
        np.add.at(E, (np.arange(n), np.clip(j, 0, g - 1)), w)
    return E @ np.linalg.inv(A)


def smooth_saliency(grad, cfg: SaliencyConfig) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.ndim != 2:
        raise DimensionError("smooth_saliency expects a 2-D gradient map")
    H, W = grad.shape
    g = cfg.grid_g
    if not 1 <= g <= min(H, W):
        raise ContractError(f"grid size {g} outside 1..{min(H, W)}")
    if not np.all(np.isfinite(grad)):
        raise ContractError("gradient map contains non-finite values")
    a = np.abs(grad)
    norm = np.sqrt(np.sum(a * a))
    if norm == 0.0:
        return np.zeros_like(a)
    a = a / norm
    coarse = _pool_matrix(H, g) @ a @ _pool_matrix(W, g).T
    fine = _upsample_matrix(H, g) @ coarse @ _upsample_matrix(W, g).T
    lo, hi = fine.min(), fine.max()
    # a (numerically) flat map carries no spatial preference
    if hi - lo <= 1e-9 * max(abs(hi), abs(lo)):
        return np.ones_like(fine)
    return (fine - lo) / (hi - lo)


def blend_sba(ga_img, fa_img, s) -> np.ndarray:
    ga_img, fa_img, s = (np.asarray(v, dtype=np.float64) for v in (ga_img, fa_img, s))
    if not ga_img.shape == fa_img.shape == s.shape:
        raise DimensionError(f"blend shapes differ: {ga_img.shape}, {fa_img.shape}, {s.shape}")
    return s * ga_img + (1.0 - s) * fa_img


@dataclass
class DiffusionResult:
    weak: np.ndarray        # weakly augmented original
    ga: np.ndarray          # weakly augmented GA view
    fa: np.ndarray          # weakly augmented FA view
    saliency: np.ndarray
    sba: np.ndarray
    mask: np.ndarray        # weakly augmented mask (pseudo-mask for unlabeled samples)
    labeled: bool


def domain_diffusion_batch(imgs: Sequence[np.ndarray], masks: Sequence[np.ndarray | None], model: SegModel,
                           ga: GaParams, fa: FaParams, cfg: SaliencyConfig, rngs: Sequence[KeyedRNG],
                           weak: WeakAugConfig | None = None, ga_map: IntensityMap | None = None,
                           fa_maps=None) -> list[DiffusionResult]:
    """GA/FA views, one shared weak transform per sample, saliency and blend.

    Samples whose mask is None are unlabeled: FA uses the branch prediction on
    the original image as its mask, and the saliency loss uses the argmax
    prediction on the GA view.
    """
    weak = weak if weak is not None else WeakAugConfig()
    imgs = [np.asarray(im, dtype=np.float64) for im in imgs]
    unl = [i for i, m in enumerate(masks) if m is None]
    fa_masks = list(masks)
    if unl:
        preds = predict(model, np.stack([imgs[i] for i in unl]), cfg.branch)
        for i, p in zip(unl, preds):
            fa_masks[i] = p

    rows = []
    for img, m, r in zip(imgs, fa_masks, rngs):
        o_ga = global_augment(img, ga, r.child(STAGE_GA).generator(), intensity_map=ga_map)
        o_fa = focal_augment(img, m, fa, r.child(STAGE_FA), maps=fa_maps)
        t = sample_weak(weak, img.shape, r.child(STAGE_WEAK).generator())
        rows.append((t.apply_image(img), t.apply_image(o_ga), t.apply_image(o_fa), t.warp_mask(m)))

    ga_bar = np.stack([r[1] for r in rows])
    m_bar = np.stack([r[3] for r in rows]).astype(np.int64)
    if cfg.mode == "gradient":
        if unl:
            pseudo = predict(model, ga_bar[unl], cfg.branch)
            m_bar[unl] = pseudo
        G = input_gradient(model, ga_bar, m_bar, cfg.branch)
        S = [smooth_saliency(G[i], cfg) for i in range(len(rows))]
    else:
        const = 1.0 if cfg.mode == "ga" else 0.0
        S = [np.full(img.shape, const) for img in imgs]

    out = []
    for i, (w_img, g_img, f_img, _) in enumerate(rows):
        out.append(DiffusionResult(w_img, g_img, f_img, S[i], blend_sba(g_img, f_img, S[i]), m_bar[i],
                                   masks[i] is not None))
    return out


def domain_diffusion(img, mask, model: SegModel, ga: GaParams, fa: FaParams, cfg: SaliencyConfig,
                     rng: KeyedRNG, weak: WeakAugConfig | None = None, **kw) -> DiffusionResult:
    return domain_diffusion_batch([img], [mask], model, ga, fa, cfg, [rng], weak, **kw)[0]
