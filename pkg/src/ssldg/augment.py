"""Intensity and geometric augmentation operators.

Global augmentation (GA) remaps the whole image through either a random
monotone cubic Bezier curve or a grayscale inversion, followed by a random
scale and shift.  Focal-region augmentation (FA) does the same per mask class
with independent random parameters and free (non-monotone) curves.  The weak
stage ``H`` applies one shared geometric warp plus mild photometric jitter.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb
from typing import Mapping

import numpy as np
from scipy import ndimage

from .gradcore import ContractError, DimensionError
from .rng import KeyedRNG, truncated_normal

LUT_RESOLUTION = 1024
MAX_MONOTONE_ATTEMPTS = 16

_BERNSTEIN = np.array([comb(3, i) for i in range(4)], dtype=np.float64)


def bezier_eval(points, k):
    """Evaluate the cubic Bezier curve with control points ``points[4, 2]`` at ``k``.

    ``k`` may be a scalar or an array; returns ``(x, y)`` of matching shape.
    """
    P = np.asarray(points, dtype=np.float64).reshape(4, 2)
    k = np.asarray(k, dtype=np.float64)
    if np.any(k < 0) or np.any(k > 1):
        raise ContractError("Bezier parameter k must lie in [0, 1]")
    i = np.arange(4)
    kk = k[..., None]
    basis = _BERNSTEIN * (1.0 - kk) ** (3 - i) * kk ** i
    x = basis @ P[:, 0]
    y = basis @ P[:, 1]
    if x.ndim == 0:
        return float(x), float(y)
    return x, y


@dataclass
class IntensityMap:
    control_points: np.ndarray
    monotone: bool
    lut_x: np.ndarray
    lut_y: np.ndarray
    decreasing: bool = False

    @classmethod
    def from_points(cls, middle, monotone: bool = False, resolution: int = LUT_RESOLUTION,
                    decreasing: bool = False) -> "IntensityMap":
        """Build a lookup table from the two free control points ``middle[2, 2]``.

        ``decreasing`` selects the backward mapping x -> 1 - B(x).
        """
        mid = np.asarray(middle, dtype=np.float64).reshape(2, 2)
        pts = np.vstack([[0.0, 0.0], mid, [1.0, 1.0]])
        ks = np.linspace(0.0, 1.0, resolution)
        xs, ys = bezier_eval(pts, ks)
        order = np.argsort(xs, kind="stable")
        grid = np.linspace(0.0, 1.0, resolution)
        lut_y = np.clip(np.interp(grid, xs[order], ys[order]), 0.0, 1.0)
        if decreasing:
            lut_y = 1.0 - lut_y
        return cls(pts, monotone, grid, lut_y, decreasing)

    @classmethod
    def identity(cls) -> "IntensityMap":
        grid = np.linspace(0.0, 1.0, LUT_RESOLUTION)
        pts = np.array([[0, 0], [1 / 3, 1 / 3], [2 / 3, 2 / 3], [1, 1]], dtype=np.float64)
        return cls(pts, True, grid, grid.copy())

    def __call__(self, x):
        return np.interp(x, self.lut_x, self.lut_y)


def build_intensity_map(rng: np.random.Generator, monotone: bool) -> IntensityMap:
    """Random Bezier intensity map with endpoints pinned at (0,0) and (1,1).

    Monotone maps (forward mapping only) sort the middle x-coordinates and
    reject curves whose sampled y decreases; after 16 rejections the identity
    map is returned.  Unconstrained maps run forward or backward with equal
    probability, the backward map being x -> 1 - B(x).
    """
    if not monotone:
        mid = rng.uniform(0.0, 1.0, size=(2, 2))
        return IntensityMap.from_points(mid, monotone=False, decreasing=bool(rng.random() < 0.5))
    for _ in range(MAX_MONOTONE_ATTEMPTS):
        mid = rng.uniform(0.0, 1.0, size=(2, 2))
        mid[:, 0] = np.sort(mid[:, 0])
        _, ys = bezier_eval(np.vstack([[0, 0], mid, [1, 1]]), np.linspace(0, 1, LUT_RESOLUTION))
        if np.all(np.diff(ys) >= 0):
            return IntensityMap.from_points(mid, monotone=True)
    return IntensityMap.identity()


def _check_unit(img: np.ndarray) -> None:
    if img.size and (np.min(img) < -1e-12 or np.max(img) > 1 + 1e-12 or not np.all(np.isfinite(img))):
        raise ContractError("image must be normalized to [0, 1]")


def apply_intensity_map(img, imap: IntensityMap) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    _check_unit(img)
    return np.clip(imap(img), 0.0, 1.0)


def grayscale_invert(img) -> np.ndarray:
    return 1.0 - np.asarray(img, dtype=np.float64)


@dataclass
class GaParams:
    sigma1: float = 0.3
    sigma2: float = 0.1
    invert_prob: float = 0.1

    def __post_init__(self):
        if self.sigma1 < 0 or self.sigma2 < 0 or not 0 <= self.invert_prob <= 1:
            raise ContractError(f"invalid GA parameters {self}")


@dataclass
class FaParams:
    sigma1: float = 0.3
    sigma2: float = 0.1
    psi_background: float = 1.0
    psi_class: float = 0.5

    def __post_init__(self):
        if self.sigma1 < 0 or self.sigma2 < 0:
            raise ContractError(f"invalid FA parameters {self}")


def global_augment(img, params: GaParams, rng: np.random.Generator,
                   intensity_map: IntensityMap | None = None) -> np.ndarray:
    """O = eta * base(x) + mu, base = inversion w.p. invert_prob else monotone Bezier."""
    img = np.asarray(img, dtype=np.float64)
    _check_unit(img)
    if rng.random() < params.invert_prob:
        base = grayscale_invert(img)
    else:
        imap = intensity_map if intensity_map is not None else build_intensity_map(rng, monotone=True)
        base = imap(img)
    eta = truncated_normal(rng, 1.0, params.sigma1)
    mu = truncated_normal(rng, 0.0, params.sigma2)
    return np.clip(eta * base + mu, 0.0, 1.0)


def focal_augment(img, mask, params: FaParams, rng: KeyedRNG,
                  maps: IntensityMap | Mapping[int, IntensityMap] | None = None) -> np.ndarray:
    """Class-wise augmentation: each label gets its own curve, scale and shift.

    Class ``n`` draws from the stream ``rng.child(n)``, so classes never share
    randomness.  Air pixels (label 0 with intensity exactly 0) are untouched.
    """
    img = np.asarray(img, dtype=np.float64)
    mask = np.asarray(mask)
    if img.shape != mask.shape:
        raise DimensionError(f"image {img.shape} and mask {mask.shape} differ in shape")
    _check_unit(img)
    out = img.copy()
    for n in np.unique(mask):
        n = int(n)
        region = mask == n
        if n == 0:
            region &= img > 0
        if not region.any():
            continue
        g = rng.child(n).generator()
        if maps is None:
            imap = build_intensity_map(g, monotone=False)
        elif isinstance(maps, IntensityMap):
            imap = maps
        else:
            imap = maps[n]
        eta = truncated_normal(g, 1.0, params.sigma1)
        mu = truncated_normal(g, 0.0, params.sigma2)
        psi = params.psi_background if n == 0 else params.psi_class
        out[region] = eta * psi * imap(img[region]) + mu
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# weak augmentation H


@dataclass
class WeakAugConfig:
    p: float = 0.5
    affine: bool = True
    rotation: tuple[float, float] = (-15.0, 15.0)
    scale: tuple[float, float] = (0.9, 1.1)
    translate: float = 0.05
    elastic: bool = True
    elastic_grid: int = 4
    elastic_std: float = 2.0
    brightness: bool = True
    brightness_range: float = 0.1
    contrast: bool = True
    contrast_range: tuple[float, float] = (0.9, 1.1)
    gamma: bool = True
    gamma_range: tuple[float, float] = (0.8, 1.2)
    noise: bool = True
    noise_std: float = 0.02

    @classmethod
    def all_off(cls) -> "WeakAugConfig":
        return cls(affine=False, elastic=False, brightness=False, contrast=False, gamma=False, noise=False)


@dataclass
class WeakTransform:
    """One sampled instance of H; reusable across several images of one sample."""

    shape: tuple[int, int]
    coords: np.ndarray | None = None
    brightness: float | None = None
    contrast: float | None = None
    gamma: float | None = None
    noise: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def warp_image(self, img) -> np.ndarray:
        img = np.asarray(img, dtype=np.float64)
        if self.coords is None:
            return img.copy()
        return ndimage.map_coordinates(img, self.coords, order=1, mode="nearest")

    def warp_mask(self, mask) -> np.ndarray:
        mask = np.asarray(mask)
        if self.coords is None:
            return mask.copy()
        return ndimage.map_coordinates(mask, self.coords, order=0, mode="nearest").astype(mask.dtype)

    def photometric(self, img) -> np.ndarray:
        x = np.asarray(img, dtype=np.float64)
        if self.brightness is not None:
            x = x + self.brightness
        if self.contrast is not None:
            m = x.mean()
            x = (x - m) * self.contrast + m
        if self.gamma is not None:
            x = np.clip(x, 0.0, 1.0) ** self.gamma
        if self.noise is not None:
            x = x + self.noise
        return np.clip(x, 0.0, 1.0)

    def apply_image(self, img) -> np.ndarray:
        return self.photometric(self.warp_image(img))


def _sample_coords(cfg: WeakAugConfig, shape, rng: np.random.Generator, use_affine: bool, use_elastic: bool):
    H, W = shape
    ii, jj = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    ci, cj = (H - 1) / 2.0, (W - 1) / 2.0
    src_i, src_j = ii, jj
    if use_affine:
        theta = np.deg2rad(rng.uniform(*cfg.rotation))
        s = rng.uniform(*cfg.scale)
        ti = rng.uniform(-cfg.translate, cfg.translate) * H
        tj = rng.uniform(-cfg.translate, cfg.translate) * W
        di, dj = ii - ci - ti, jj - cj - tj
        c, sn = np.cos(theta), np.sin(theta)
        # inverse of dst = s R (src - c) + c + t
        src_i = (c * di + sn * dj) / s + ci
        src_j = (-sn * di + c * dj) / s + cj
    if use_elastic:
        g = cfg.elastic_grid
        disp = rng.normal(0.0, cfg.elastic_std, size=(2, g, g))
        ui = (np.arange(H) + 0.5) * g / H - 0.5
        uj = (np.arange(W) + 0.5) * g / W - 0.5
        UI, UJ = np.meshgrid(ui, uj, indexing="ij")
        for axis, base in ((0, "i"), (1, "j")):
            field_ = ndimage.map_coordinates(disp[axis], [UI, UJ], order=1, mode="nearest")
            if base == "i":
                src_i = src_i + field_
            else:
                src_j = src_j + field_
    return np.stack([src_i, src_j])


def sample_weak(cfg: WeakAugConfig, shape, rng: np.random.Generator) -> WeakTransform:
    """Draw one H instance.  Every toggle is gated independently with probability ``cfg.p``."""
    shape = tuple(shape)
    # fixed draw order keeps the stream layout stable when toggles change
    gates = rng.random(6) < cfg.p
    use_affine = cfg.affine and gates[0]
    use_elastic = cfg.elastic and gates[1]
    t = WeakTransform(shape)
    if use_affine or use_elastic:
        t.coords = _sample_coords(cfg, shape, rng, use_affine, use_elastic)
    if cfg.brightness and gates[2]:
        t.brightness = rng.uniform(-cfg.brightness_range, cfg.brightness_range)
    if cfg.contrast and gates[3]:
        t.contrast = rng.uniform(*cfg.contrast_range)
    if cfg.gamma and gates[4]:
        t.gamma = rng.uniform(*cfg.gamma_range)
    if cfg.noise and gates[5]:
        t.noise = rng.normal(0.0, cfg.noise_std, size=shape)
    return t


def weak_augment(img, mask, cfg: WeakAugConfig, rng: np.random.Generator):
    """Apply one H draw to an (image, mask) pair.  The mask may be None."""
    img = np.asarray(img, dtype=np.float64)
    t = sample_weak(cfg, img.shape, rng)
    return t.apply_image(img), (None if mask is None else t.warp_mask(mask))
