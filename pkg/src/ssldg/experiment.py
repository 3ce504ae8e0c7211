"""Desk-scale domain-generalization experiment: train on domain A, test on domain B."""

from __future__ import annotations

import time
from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from .dataio import Dataset, synth_dataset
from .trainer import TrainConfig, evaluate, train

# named training variants; every variant shares the step budget and seed
VARIANTS: dict[str, dict] = {
    "baseline": {"mu": 1.0, "augmentation": "weak"},
    "ssldg": {},
    "no_sba": {"sba_mode": "fa"},
    "no_une": {"use_une": False},
}

TEST_ID_OFFSET = 100_000


@dataclass
class DeskResult:
    variant: str
    seed: int
    dice: float
    per_class: dict
    seconds: float


def desk_dataset(seed: int, n_train: int = 200, n_test: int = 50, labeled_fraction: float = 0.2) -> Dataset:
    """n_train domain-A samples (partly labeled) and n_test domain-B test samples with disjoint ids."""
    train_ds = synth_dataset(n_train, ["A"], seed=seed, labeled_fraction=labeled_fraction)
    test_ds = synth_dataset(n_test, ["B"], seed=seed, labeled_fraction=labeled_fraction, id_offset=TEST_ID_OFFSET)
    return Dataset(train_ds.samples + test_ds.samples, train_ds.classes)


def run_variant(variant: str, seed: int, steps: int = 300, ds: Dataset | None = None,
                base: TrainConfig | None = None, out_dir=None) -> DeskResult:
    cfg = replace(base or TrainConfig(), steps=steps, seed=seed, **VARIANTS[variant])
    ds = ds if ds is not None else desk_dataset(seed)
    t0 = time.perf_counter()
    state = train(cfg, ds, out_dir)
    per_class, avg = evaluate(state.model, ds, "B", cfg.eval_branch)
    return DeskResult(variant, seed, avg, per_class, time.perf_counter() - t0)


def desk_experiment(seeds: Sequence[int] = (0, 1, 2), variants: Sequence[str] = ("baseline", "ssldg"),
                    steps: int = 300, log: Callable[[str], None] | None = None) -> list[DeskResult]:
    results = []
    for seed in seeds:
        ds = desk_dataset(seed)
        for v in variants:
            r = run_variant(v, seed, steps, ds)
            if log:
                log(f"seed {seed}  {v:<9} target Dice {r.dice:.4f}  ({r.seconds:.0f}s)")
            results.append(r)
    return results


def mean_dice(results: Sequence[DeskResult], variant: str) -> float:
    return float(np.mean([r.dice for r in results if r.variant == variant]))


def by_seed(results: Sequence[DeskResult], variant: str) -> dict[int, float]:
    return {r.seed: r.dice for r in results if r.variant == variant}
