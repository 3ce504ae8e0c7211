"""Semi-supervised domain-generalization training loop, evaluation and checkpoints."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from .augment import FaParams, GaParams, WeakAugConfig, sample_weak
from .config import apply_kv, dump_kv, parse_kv
from .dataio import Dataset, Sample, dice_score, sample_batch, write_metrics_csv
from .gradcore import AdamState, ContractError, FormatError, Tensor
from .losses import LossWeights, consistency_terms, dice_loss, loss_total
from .rng import STAGE_WEAK, KeyedRNG
from .saliency import SaliencyConfig, domain_diffusion_batch
from .segnet import SegModel, build_model, forward_all, predict

LOSS_COLUMNS = ("step", "L_sup", "L_une", "L_unr", "L_uec", "L_wsm", "L_total")
CKPT_VERSION = 1
CKPT_MAGIC = "SSLDG-CHECKPOINT"


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    steps: int = 300
    batch_size: int = 4
    labeled_fraction: float = 0.2
    lr: float = 5e-3
    weight_decay: float = 3e-5
    lr_schedule: str = "constant"
    grid_g: int = 3
    T: float = 0.1
    alpha: float = 0.5
    gamma: float = 0.5
    mu: float = 0.5
    seed: int = 0
    eval_every: int = 0
    k: int = 3
    channels: int = 8
    classes: int = 4
    # "ssldg": domain-diffusion views; "weak": every branch sees the weak view only
    augmentation: str = "ssldg"
    sba_mode: str = "gradient"
    unlabeled_sba: bool = True
    wsm_j: int = 0
    unr_squared: bool = False
    # ablation switch: drop L_une from L_uec, leaving the L_unr weight (1 - alpha) as is
    use_une: bool = True
    rampup: bool = False
    eval_branch: str = "1"
    sigma1: float = 0.3
    sigma2: float = 0.1
    invert_prob: float = 0.1
    weak_p: float = 0.5
    train_domain: str = "A"
    eval_domain: str = "B"
    tie_decoders: bool = False

    def __post_init__(self):
        if self.steps < 0 or self.batch_size <= 0 or self.lr <= 0 or self.weight_decay < 0:
            raise ContractError("steps, batch size and learning rate must be positive")
        if not 0 < self.labeled_fraction <= 1:
            raise ContractError("labeled fraction must lie in (0, 1]")
        if self.augmentation not in ("ssldg", "weak"):
            raise ContractError(f"unknown augmentation mode {self.augmentation!r}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ContractError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.k < 2:
            raise ContractError("k must be >= 2")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.T, self.alpha, self.gamma, self.mu)

    @classmethod
    def from_kv(cls, kv: dict[str, str]) -> "TrainConfig":
        return apply_kv(cls(), kv)


@dataclass
class TrainState:
    model: SegModel
    adam: AdamState
    step: int = 0
    seed: int = 0
    history: list[dict] = field(default_factory=list)


def init_state(cfg: TrainConfig) -> TrainState:
    model = build_model(cfg.k, cfg.channels, cfg.classes, cfg.seed, tie_decoders=cfg.tie_decoders)
    return TrainState(model, AdamState.zeros_like([p.data for p in model.parameters()]), 0, cfg.seed)


def learning_rate(cfg: TrainConfig, step: int) -> float:
    if cfg.lr_schedule == "cosine" and cfg.steps > 0:
        return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(step, cfg.steps) / cfg.steps))
    return cfg.lr


def _rampup(cfg: TrainConfig, step: int) -> float:
    if not cfg.rampup or cfg.steps == 0:
        return 1.0
    ramp = max(1, int(0.1 * cfg.steps))
    return min(1.0, (step + 1) / ramp)


def build_views(state: TrainState, batch: Sequence[Sample], cfg: TrainConfig):
    """Per-branch input stacks, the transformed masks and the labeled flags.

    Branch 1 gets the weakly augmented original, branch 2 the GA view and
    branches 3..k the scale-balanced view; all views of one sample share a
    single weak transform so they stay pixel-aligned.
    """
    root = KeyedRNG(cfg.seed, state.step)
    rngs = [root.child(i, s.id) for i, s in enumerate(batch)]
    labeled = np.array([s.labeled for s in batch])
    if cfg.augmentation == "weak":
        weak_imgs, masks = [], []
        wcfg = WeakAugConfig(p=cfg.weak_p)
        for s, r in zip(batch, rngs):
            t = sample_weak(wcfg, s.image.shape, r.child(STAGE_WEAK).generator())
            weak_imgs.append(t.apply_image(s.image))
            masks.append(t.warp_mask(s.mask) if s.labeled else np.zeros_like(s.mask))
        x = np.stack(weak_imgs)
        return [x] * cfg.k, np.stack(masks), labeled
    res = domain_diffusion_batch(
        [s.image for s in batch], [s.mask if s.labeled else None for s in batch], state.model,
        GaParams(cfg.sigma1, cfg.sigma2, cfg.invert_prob), FaParams(cfg.sigma1, cfg.sigma2),
        SaliencyConfig(cfg.grid_g, cfg.sba_mode),
        rngs, WeakAugConfig(p=cfg.weak_p))
    if not cfg.unlabeled_sba:
        for r, s in zip(res, batch):
            if not s.labeled:
                r.sba = r.fa
    weak = np.stack([r.weak for r in res])
    ga = np.stack([r.ga for r in res])
    sba = np.stack([r.sba for r in res])
    views = [weak, ga] + [sba] * (cfg.k - 2)
    return views, np.stack([r.mask for r in res]), labeled


def compute_losses(probs: Sequence[Tensor], masks: np.ndarray, labeled: np.ndarray, cfg: TrainConfig,
                   step: int) -> dict[str, Tensor | None]:
    w = cfg.weights
    lab = np.flatnonzero(labeled)
    out: dict[str, Tensor | None] = {"sup": None, "une": None, "unr": None, "uec": None, "wsm": None}
    if len(lab):
        sel = lab if len(lab) < len(labeled) else slice(None)
        sup = None
        for p in probs:
            d = dice_loss(p[sel], masks[sel])
            sup = d if sup is None else sup + d
        out["sup"] = sup * (1.0 / len(probs))
    if w.mu < 1.0:
        j = cfg.wsm_j if cfg.wsm_j else 2 + step % (cfg.k - 1)
        out.update(consistency_terms(probs, w, j, squared=cfg.unr_squared))
        if not cfg.use_une:
            out["uec"] = (1.0 - w.alpha) * out["unr"]
        ramp = _rampup(cfg, step)
        sup = out["sup"] if out["sup"] is not None else 0.0
        out["total"] = w.mu * sup + (1.0 - w.mu) * ramp * (w.gamma * out["uec"] + (1.0 - w.gamma) * out["wsm"])
    else:
        if out["sup"] is None:
            raise ContractError("supervised-only step without labeled samples")
        out["total"] = loss_total(out["sup"], 0.0, 0.0, w)
    return out


def train_step(state: TrainState, batch: Sequence[Sample], cfg: TrainConfig) -> tuple[TrainState, dict]:
    """One optimization step on ``batch``; updates ``state`` in place and returns it."""
    if len(batch) == 0:
        raise ContractError("empty batch")
    if cfg.mu >= 1.0:
        # unlabeled samples carry zero weight; skip their forward passes
        batch = [s for s in batch if s.labeled]
    views, masks, labeled = build_views(state, batch, cfg)
    model = state.model
    model.zero_grad()
    probs = forward_all(model, views)
    L = compute_losses(probs, masks, labeled, cfg, state.step)
    total = L["total"]
    if not np.isfinite(total.item()):
        raise FloatingPointError(f"non-finite loss at step {state.step}")
    total.backward()
    params = model.parameters()
    new, state.adam = gc.adam_step([p.data for p in params], [p.grad for p in params], state.adam,
                                   lr=learning_rate(cfg, state.step), weight_decay=cfg.weight_decay)
    for p, d in zip(params, new):
        p.data = d
    model.zero_grad()
    rec = {"step": state.step}
    for col, key in zip(LOSS_COLUMNS[1:], ("sup", "une", "unr", "uec", "wsm", "total")):
        v = L[key]
        rec[col] = None if v is None else float(v.item() if isinstance(v, Tensor) else v)
    state.history.append(rec)
    state.step += 1
    return state, rec


# ---------------------------------------------------------------------------
# evaluation


def evaluate(model: SegModel | Callable, ds: Dataset, domain: str | None = None, branch: str | int = 1,
             classes: int | None = None, chunk: int = 16) -> tuple[dict[int, float], float]:
    """Per-class Dice (mean over images) and the foreground average.

    ``model`` may also be any callable mapping an [N, H, W] image stack to
    label maps.  No randomness is consumed.
    """
    if domain is not None:
        ds = ds.domain(domain)
    if classes is None:
        classes = model.classes if isinstance(model, SegModel) else ds.classes + 1
    scores = {c: [] for c in range(1, classes)}
    for start in range(0, len(ds), chunk):
        part = ds.samples[start:start + chunk]
        imgs = np.stack([s.image for s in part])
        if isinstance(model, SegModel):
            b = branch if branch == "mean" else int(branch)
            preds = predict(model, imgs, b)
        else:
            preds = np.asarray(model(imgs))
        for s, p in zip(part, preds):
            for c in scores:
                scores[c].append(dice_score(p, s.mask, c))
    per_class = {c: float(np.mean(v)) if v else float("nan") for c, v in scores.items()}
    return per_class, float(np.mean(list(per_class.values())))


# ---------------------------------------------------------------------------
# checkpoints


def _fmt(v) -> str:
    return "" if v is None else repr(float(v))


def write_losses_csv(path, history: Sequence[dict]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(LOSS_COLUMNS)
        for r in history:
            w.writerow([r["step"]] + [_fmt(r[c]) for c in LOSS_COLUMNS[1:]])


def read_losses_csv(path) -> list[dict]:
    rows = []
    with open(path, newline="") as f:
        for r in csv.DictReader(f):
            rows.append({"step": int(r["step"]),
                         **{c: (None if r[c] == "" else float(r[c])) for c in LOSS_COLUMNS[1:]}})
    return rows


def checkpoint_save(path, state: TrainState, cfg: TrainConfig | None = None) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    m = state.model
    records = [(n, p.data) for n, p in m.named_parameters()]
    names = [n for n, _ in records]
    records += [(f"adam.m.{n}", a) for n, a in zip(names, state.adam.m)]
    records += [(f"adam.v.{n}", a) for n, a in zip(names, state.adam.v)]
    blob = bytearray()
    lines = [f"{CKPT_MAGIC} {CKPT_VERSION}",
             f"step {state.step}", f"seed {state.seed}", f"adam_t {state.adam.t}",
             f"k {m.k}", f"channels {m.channels}", f"classes {m.classes}"]
    for name, arr in records:
        shape = ",".join(str(d) for d in arr.shape) or "-"
        lines.append(f"tensor {name} {shape} {len(blob)}")
        blob += gc.encode_tensor(arr)
    (path / "tensors.bin").write_bytes(bytes(blob))
    (path / "manifest.txt").write_text("\n".join(lines) + "\n")
    write_losses_csv(path / "losses.csv", state.history)
    if cfg is not None:
        (path / "config.txt").write_text(dump_kv(cfg))


def checkpoint_load(path) -> tuple[TrainState, TrainConfig | None]:
    path = Path(path)
    try:
        lines = (path / "manifest.txt").read_text().splitlines()
        blob = (path / "tensors.bin").read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint at {path}: {e}") from e
    if not lines or lines[0].split()[:1] != [CKPT_MAGIC]:
        raise CheckpointError("manifest does not start with the checkpoint magic line")
    head = lines[0].split()
    if len(head) != 2 or head[1] != str(CKPT_VERSION):
        raise CheckpointError(f"unsupported checkpoint version {head[1:]!r}")
    meta: dict[str, int] = {}
    tensors: dict[str, np.ndarray] = {}
    try:
        for ln in lines[1:]:
            parts = ln.split()
            if not parts:
                continue
            if parts[0] == "tensor":
                _, name, shape, off = parts
                arr, _ = gc.decode_tensor(blob, int(off))
                want = () if shape == "-" else tuple(int(d) for d in shape.split(","))
                if arr.shape != want:
                    raise CheckpointError(f"tensor {name}: manifest shape {want} != stored {arr.shape}")
                tensors[name] = arr
            else:
                meta[parts[0]] = int(parts[1])
        model = SegModel(meta["k"], meta["channels"], meta["classes"])
    except (ValueError, KeyError, IndexError, FormatError) as e:
        raise CheckpointError(f"corrupted checkpoint manifest: {e}") from e
    names = [n for n in tensors if not n.startswith("adam.")]
    model.params = {n: Tensor(tensors[n].copy(), requires_grad=True) for n in names}
    try:
        adam = AdamState([tensors[f"adam.m.{n}"] for n in names], [tensors[f"adam.v.{n}"] for n in names],
                         meta["adam_t"])
    except KeyError as e:
        raise CheckpointError(f"missing optimizer tensor {e}") from e
    history = read_losses_csv(path / "losses.csv") if (path / "losses.csv").exists() else []
    cfg = None
    if (path / "config.txt").exists():
        cfg = TrainConfig.from_kv(parse_kv((path / "config.txt").read_text()))
    return TrainState(model, adam, meta["step"], meta["seed"], history), cfg


# ---------------------------------------------------------------------------
# driver


def train(cfg: TrainConfig, ds: Dataset, out_dir=None, state: TrainState | None = None,
          until: int | None = None, log: Callable[[str], None] | None = None) -> TrainState:
    """Run steps ``state.step .. until`` (default ``cfg.steps``) on the training domain."""
    train_ds = ds.domain(cfg.train_domain)
    if not train_ds.labeled_indices():
        raise ContractError("training domain has no labeled samples")
    state = state or init_state(cfg)
    until = cfg.steps if until is None else until
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    while state.step < until:
        idx = sample_batch(train_ds, cfg.batch_size, state.step, cfg.seed)
        _, rec = train_step(state, [train_ds.samples[i] for i in idx], cfg)
        if log and (state.step % 25 == 0 or state.step == until):
            log(f"step {rec['step']:5d}  L_total {rec['L_total']:.4f}  L_sup {_fmt(rec['L_sup'])[:7]}")
        if cfg.eval_every and state.step % cfg.eval_every == 0 and out is not None:
            checkpoint_save(out / f"ckpt_{state.step:06d}", state, cfg)
            per_class, avg = evaluate(state.model, ds, cfg.eval_domain, cfg.eval_branch)
            with open(out / "eval_log.csv", "a") as f:
                f.write(f"{state.step},{avg:.6f}\n")
    if out is not None:
        write_losses_csv(out / "losses.csv", state.history)
        per_class, avg = evaluate(state.model, ds, cfg.eval_domain, cfg.eval_branch)
        write_metrics_csv(out / "metrics.csv", per_class, avg)
        checkpoint_save(out / "final", state, cfg)
    return state
