"""Synthetic two-domain phantoms, dataset layout, PGM and tensor IO, Dice score."""

from __future__ import annotations

import csv
import os
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .gradcore import FormatError, read_tensor, write_tensor  # noqa: F401  (re-exported)
from .rng import STAGE_BATCH, STAGE_PHANTOM_GEOM, STAGE_PHANTOM_INTENSITY, STAGE_SPLIT, KeyedRNG

LABELED_PRESETS = (0.1, 0.2, 0.5, 1.0)
DOMAINS = ("A", "B")

# (background body, class 1, class 2, class 3) intensities and a gamma curve per domain
PALETTES = {
    "A": ((0.30, 0.55, 0.75, 0.95), 1.0),
    "B": ((0.70, 0.20, 0.45, 0.95), 1.2),
}


@dataclass
class PhantomConfig:
    image_size: int = 64
    classes: int = 3
    domain: str = "A"
    noise_std: float = 0.03
    # per class: (min count, max count, semi-axis range major, semi-axis range minor)
    organs: dict = field(default_factory=lambda: {
        1: (1, 1, (12.0, 16.0), (8.0, 11.0)),
        2: (1, 2, (6.0, 8.0), (4.0, 5.5)),
        3: (1, 3, (3.5, 5.0), (3.5, 5.0)),
    })
    palettes: dict = field(default_factory=lambda: dict(PALETTES))

    def __post_init__(self):
        if self.domain not in self.palettes:
            raise ValueError(f"unknown domain {self.domain!r}")
        for dom, (pal, _) in self.palettes.items():
            vals = pal[: self.classes + 1]
            gaps = [abs(a - b) for i, a in enumerate(vals) for b in vals[i + 1:]]
            if min(gaps) < 0.1 - 1e-12:
                raise ValueError(f"domain {dom} palette intensities closer than 0.1")


def _ellipse(H, W, ci, cj, ra, rb, theta):
    ii, jj = np.mgrid[0:H, 0:W].astype(np.float64)
    di, dj = ii - ci, jj - cj
    c, s = np.cos(theta), np.sin(theta)
    u = (c * di + s * dj) / ra
    v = (-s * di + c * dj) / rb
    return u * u + v * v <= 1.0


def phantom_mask(cfg: PhantomConfig, sample_id: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Domain-independent geometry: (body region, label map)."""
    H = W = cfg.image_size
    rng = KeyedRNG(seed, STAGE_PHANTOM_GEOM, sample_id).generator()
    c0 = (H - 1) / 2.0
    rb_i = rng.uniform(0.36, 0.45) * H
    rb_j = rng.uniform(0.40, 0.46) * W
    body = _ellipse(H, W, c0 + rng.uniform(-2, 2), c0 + rng.uniform(-2, 2), rb_i, rb_j, 0.0)
    mask = np.zeros((H, W), dtype=np.int64)
    for n in range(1, cfg.classes + 1):
        lo, hi, major, minor = cfg.organs[n]
        for _ in range(int(rng.integers(lo, hi + 1))):
            ra = rng.uniform(*major)
            rb = rng.uniform(*minor)
            rad = rng.uniform(0.0, 0.6)
            ang = rng.uniform(0, 2 * np.pi)
            ci = c0 + rad * (rb_i - ra) * np.sin(ang)
            cj = c0 + rad * (rb_j - ra) * np.cos(ang)
            region = _ellipse(H, W, ci, cj, ra, rb, rng.uniform(0, np.pi)) & body
            mask[region] = n
    return body, mask


def gen_phantom(cfg: PhantomConfig, sample_id: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Render one (image, mask) pair; the mask depends only on (sample_id, seed)."""
    body, mask = phantom_mask(cfg, sample_id, seed)
    pal, gamma = cfg.palettes[cfg.domain]
    dom_code = sorted(cfg.palettes).index(cfg.domain)
    rng = KeyedRNG(seed, STAGE_PHANTOM_INTENSITY, sample_id, dom_code).generator()
    img = np.where(body, pal[0], 0.0)
    for n in range(1, cfg.classes + 1):
        img[mask == n] = pal[n]
    noise = rng.normal(0.0, cfg.noise_std, size=img.shape)
    img = np.where(body, np.clip(img + noise, 1e-3, 1.0) ** gamma, 0.0)
    return img, mask


def dice_score(pred, truth, class_id: int) -> float:
    a = np.asarray(pred) == class_id
    b = np.asarray(truth) == class_id
    denom = a.sum() + b.sum()
    if denom == 0:
        return 1.0
    return float(2.0 * np.logical_and(a, b).sum() / denom)


# ---------------------------------------------------------------------------
# PGM (P5)

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def write_pgm(path, arr, maxval: int) -> None:
    a = np.asarray(arr)
    if a.ndim != 2:
        raise ValueError("PGM holds 2-D arrays only")
    if not 1 <= maxval <= 65535:
        raise ValueError("PGM maxval must lie in 1..65535")
    if a.min(initial=0) < 0 or a.max(initial=0) > maxval:
        raise ValueError("values outside 0..maxval")
    dtype = ">u2" if maxval > 255 else "u1"
    header = f"P5\n{a.shape[1]} {a.shape[0]}\n{maxval}\n".encode()
    with open(path, "wb") as f:
        f.write(header + a.astype(dtype).tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Return (integer array, maxval)."""
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:2] != b"P5":
        raise FormatError("not a binary PGM (missing P5 magic)", 0)
    pos = 2
    fields = []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise FormatError("truncated PGM header", pos)
        try:
            fields.append(int(m.group(1)))
        except ValueError:
            raise FormatError(f"non-integer header field {m.group(1)!r}", m.start(1)) from None
        pos = m.end()
    width, height, maxval = fields
    if not 1 <= maxval <= 65535 or width <= 0 or height <= 0:
        raise FormatError("invalid PGM dimensions or maxval", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PGM header", pos)
    pos += 1
    bpp = 2 if maxval > 255 else 1
    need = width * height * bpp
    if len(buf) - pos < need:
        raise FormatError(f"truncated PGM raster: need {need} bytes, have {len(buf) - pos}", len(buf))
    a = np.frombuffer(buf, dtype=">u2" if bpp == 2 else "u1", count=width * height, offset=pos)
    return a.reshape(height, width).astype(np.int64), maxval


def write_image(path, img) -> None:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    write_pgm(path, np.round(img * 65535.0).astype(np.int64), 65535)


def read_image(path) -> np.ndarray:
    a, maxval = read_pgm(path)
    return a.astype(np.float64) / maxval


def write_mask(path, mask, classes: int) -> None:
    write_pgm(path, np.asarray(mask, dtype=np.int64), max(int(classes), 1))


def read_mask(path) -> np.ndarray:
    return read_pgm(path)[0]


# ---------------------------------------------------------------------------
# dataset layout


@dataclass
class Sample:
    id: int
    domain: str
    image: np.ndarray
    mask: np.ndarray
    labeled: bool


@dataclass
class Dataset:
    samples: list[Sample]
    classes: int = 3

    def domain(self, dom: str) -> "Dataset":
        return Dataset([s for s in self.samples if s.domain == dom], self.classes)

    def labeled_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.samples) if s.labeled]

    def unlabeled_indices(self) -> list[int]:
        return [i for i, s in enumerate(self.samples) if not s.labeled]

    @property
    def labeled_fraction(self) -> float:
        return len(self.labeled_indices()) / max(len(self.samples), 1)

    def __len__(self) -> int:
        return len(self.samples)


def make_split(n: int, fraction: float, seed: int) -> np.ndarray:
    """Boolean labeled-flag per sample; deterministic in (seed, fraction)."""
    if not any(abs(fraction - p) < 1e-9 for p in LABELED_PRESETS):
        raise ValueError(f"labeled fraction must be one of {LABELED_PRESETS}")
    n_lab = int(round(fraction * n))
    order = KeyedRNG(seed, STAGE_SPLIT, int(round(fraction * 1000))).generator().permutation(n)
    flags = np.zeros(n, dtype=bool)
    flags[order[:n_lab]] = True
    return flags


def synth_dataset(n: int, domains: Sequence[str] = DOMAINS, seed: int = 0, labeled_fraction: float = 0.2,
                  cfg: PhantomConfig | None = None, id_offset: int = 0) -> Dataset:
    """n samples per domain; domain number d uses ids offset + d*n .. offset + d*n + n-1."""
    base = cfg or PhantomConfig()
    samples = []
    for d, dom in enumerate(domains):
        dcfg = PhantomConfig(base.image_size, base.classes, dom, base.noise_std, base.organs, base.palettes)
        flags = make_split(n, labeled_fraction, seed + d)
        for j in range(n):
            sid = id_offset + d * n + j
            img, mask = gen_phantom(dcfg, sid, seed)
            samples.append(Sample(sid, dom, img, mask, bool(flags[j])))
    return Dataset(samples, base.classes)


def save_dataset(ds: Dataset, root) -> None:
    root = Path(root)
    lines = []
    for s in ds.samples:
        (root / "images" / s.domain).mkdir(parents=True, exist_ok=True)
        (root / "masks" / s.domain).mkdir(parents=True, exist_ok=True)
        write_image(root / "images" / s.domain / f"{s.id:05d}.pgm", s.image)
        write_mask(root / "masks" / s.domain / f"{s.id:05d}.pgm", s.mask, ds.classes)
        lines.append(f"{s.id:05d} {s.domain} {'labeled' if s.labeled else 'unlabeled'}\n")
    with open(root / "split.txt", "w") as f:
        f.writelines(lines)


def load_dataset(root, classes: int = 3) -> Dataset:
    root = Path(root)
    samples = []
    with open(root / "split.txt") as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            parts = line.split()
            if len(parts) != 3 or parts[2] not in ("labeled", "unlabeled"):
                raise ValueError(f"split.txt line {lineno}: expected '<id> <domain> labeled|unlabeled'")
            sid, dom, flag = parts
            img = read_image(root / "images" / dom / f"{sid}.pgm")
            mask = read_mask(root / "masks" / dom / f"{sid}.pgm")
            samples.append(Sample(int(sid), dom, img, mask, flag == "labeled"))
    return Dataset(samples, classes)


def sample_batch(ds: Dataset, batch_size: int, step: int, seed: int) -> list[int]:
    """Indices for one batch: half labeled, half unlabeled, keyed by (seed, step).

    Falls back to all-labeled when the dataset has no unlabeled samples.
    """
    lab, unl = ds.labeled_indices(), ds.unlabeled_indices()
    rng = KeyedRNG(seed, STAGE_BATCH, step).generator()
    if not unl:
        return [lab[i] for i in rng.choice(len(lab), size=batch_size, replace=len(lab) < batch_size)]
    if batch_size % 2:
        raise ValueError("batch size must be even for a 50/50 labeled/unlabeled split")
    half = batch_size // 2
    li = rng.choice(len(lab), size=half, replace=len(lab) < half)
    ui = rng.choice(len(unl), size=half, replace=len(unl) < half)
    return [lab[i] for i in li] + [unl[i] for i in ui]


def write_metrics_csv(path, per_class: dict[int, float], average: float) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["class", "dice"])
        for c, d in sorted(per_class.items()):
            w.writerow([c, f"{d:.6f}"])
        w.writerow(["average", f"{average:.6f}"])


def dataset_exists(root) -> bool:
    return os.path.isdir(root) and any(os.scandir(root))
