"""Central finite-difference verification of every backward rule and loss."""

from __future__ import annotations

import contextlib
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import gradcore as gc
from . import losses as L
from .gradcore import Tensor
from .saliency import input_gradient
from .segnet import build_model, forward_all, forward_branch

STEP = 1e-5
TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    passed: bool


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max entrywise |a - n| / max(|a|, |n|, floor), floor = 1e-3 * max|n| (and >= 1e-10)."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    floor = max(1e-3 * np.max(np.abs(n), initial=0.0), 1e-10)
    return float(np.max(np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor), initial=0.0))


def numeric_grad(f: Callable[[], float], arr: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. ``arr`` (perturbed in place, then restored)."""
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gflat[i] = (fp - fm) / (2 * h)
    return g


def check_fn(name: str, fn: Callable[..., Tensor], *arrays: np.ndarray, tol: float = TOL) -> CheckResult:
    """Compare backward() against central differences for every input array of ``fn``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    out = fn(*ts)
    out.backward()
    worst = 0.0
    for t, a in zip(ts, arrays):
        num = numeric_grad(lambda: fn(*[Tensor(x) for x in arrays]).item(), a)
        ana = t.grad if t.grad is not None else np.zeros_like(a)
        worst = max(worst, rel_error(ana, num))
    return CheckResult(name, worst, worst <= tol)


def frozen_weights(probs, w: L.LossWeights) -> list[np.ndarray]:
    """exp(-U) at the given outputs; the rectifying weights are constants for differentiation."""
    sharp = [L.sharpen(L.foreground(p), w.T) for p in probs[1:]]
    return L.rectifying_weights(L.pixel_uncertainty(sharp, L.avg_probability(sharp)))


def _op_checks(rng: np.random.Generator) -> list[CheckResult]:
    r = lambda *s: rng.normal(size=s)  # noqa: E731
    pos = lambda *s: rng.uniform(0.2, 2.0, size=s)  # noqa: E731
    prob = lambda *s: rng.uniform(0.05, 0.95, size=s)  # noqa: E731
    # fixed random projections turn tensor outputs into scalars
    wsum = r(3, 4)
    w_pool, w_up, w_soft = r(2, 2, 2, 3), r(1, 2, 6, 4), r(2, 3, 2, 2)

    def proj(t):
        return (t * wsum[: t.shape[0], : t.shape[1]] if t.ndim == 2 else t * np.ones(t.shape)).sum()

    res = [
        check_fn("add", lambda a, b: proj(a + b), r(3, 4), r(1, 4)),
        check_fn("sub", lambda a, b: proj(a - b), r(3, 4), r(3, 1)),
        check_fn("mul", lambda a, b: proj(a * b), r(3, 4), r(3, 4)),
        check_fn("div", lambda a, b: proj(a / b), r(3, 4), pos(3, 4)),
        check_fn("neg", lambda a: proj(-a), r(3, 4)),
        check_fn("pow", lambda a: proj(a ** 2.5), pos(3, 4)),
        check_fn("exp", lambda a: proj(gc.exp(a)), r(3, 4)),
        check_fn("log", lambda a: proj(gc.log(a)), pos(3, 4)),
        check_fn("abs", lambda a: proj(gc.absolute(a)), r(3, 4)),
        check_fn("relu", lambda a: proj(gc.relu(a)), r(3, 4)),
        check_fn("sigmoid", lambda a: proj(gc.sigmoid(a)), 3 * r(3, 4)),
        check_fn("clip", lambda a: proj(gc.clip(a, -0.5, 0.5)), r(3, 4)),
        check_fn("sum_axis", lambda a: (a.sum(axis=1) * np.arange(1.0, 4.0)).sum(), r(3, 4)),
        check_fn("mean", lambda a: (a * a).mean(), r(3, 4)),
        check_fn("reshape", lambda a: proj(a.reshape(3, 4) * a.reshape(3, 4)), r(2, 6)),
        check_fn("index", lambda a: (a[:, 1:3] * a[:, 1:3]).sum() + (a[[0, 0, 2]] ** 2).sum(), r(3, 4)),
        check_fn("concat", lambda a, b: (gc.concat([a, b], axis=1) ** 2 * np.arange(7.0)).sum(), r(3, 4), r(3, 3)),
        check_fn("conv2d", lambda x, w, b: (gc.conv2d(x, w, b) ** 2).sum(), r(2, 3, 5, 5), r(4, 3, 3, 3), r(4)),
        check_fn("conv2d_1x1", lambda x, w: (gc.conv2d(x, w) ** 2).sum(), r(1, 3, 4, 4), r(2, 3, 1, 1)),
        check_fn("avgpool2", lambda x: (gc.avgpool2(x) ** 2 * w_pool).sum(), r(2, 2, 4, 6)),
        check_fn("upsample2", lambda x: (gc.upsample_nearest2(x) ** 2 * w_up).sum(), r(1, 2, 3, 2)),
        check_fn("instance_norm", lambda x: (gc.instance_norm(x) * w_soft).sum(), r(2, 3, 2, 2)),
        check_fn("softmax", lambda x: (gc.softmax_channels(x) * w_soft).sum(), r(2, 3, 2, 2)),
        # shared subexpression: gradients from both uses must accumulate
        check_fn("fanout", lambda a: proj(gc.exp(a) * gc.exp(a) + gc.exp(a)), r(3, 4)),
    ]
    return res


def _loss_checks(rng: np.random.Generator) -> list[CheckResult]:
    w = L.LossWeights()
    prob = lambda *s: rng.uniform(0.05, 0.95, size=s)  # noqa: E731
    shape = (2, 1, 3, 3)
    mask = rng.integers(0, 3, size=(2, 4, 4))
    pa, pb = prob(*shape), prob(*shape)
    unr_w = L.rectifying_weights(L.pixel_uncertainty([Tensor(pa), Tensor(pb)],
                                                     L.avg_probability([Tensor(pa), Tensor(pb)])))
    logits = [0.5 * rng.normal(size=(2, 3, 4, 4)) for _ in range(3)]
    cons_w = frozen_weights([gc.softmax_channels(z) for z in logits], w)
    res = [
        check_fn("sharpen", lambda p: (L.sharpen(p, 0.5) * np.arange(1.0, 10.0).reshape(3, 3)).sum(), prob(3, 3)),
        check_fn("sharpen_T0.1", lambda p: L.sharpen(p, 0.1).sum(), rng.uniform(0.35, 0.65, size=(3, 3))),
        check_fn("avg_probability", lambda a, b: (L.avg_probability([a, b]) ** 2).sum(), prob(*shape), prob(*shape)),
        check_fn("loss_une", lambda a, b: L.loss_une(L.pixel_uncertainty([a, b], L.avg_probability([a, b]))),
                 prob(*shape), prob(*shape)),
        check_fn("loss_unr", lambda a, b: L.loss_unr([a, b], L.avg_probability([a, b]), None,
                                                     weights=unr_w), pa, pb),
        check_fn("loss_unr_sq", lambda a, b: L.loss_unr([a, b], L.avg_probability([a, b]), None,
                                                        squared=True, weights=unr_w), pa, pb),
        check_fn("loss_uec", lambda a, b: L.loss_uec((a * a).sum(), (b * b).sum(), 0.3), prob(3), prob(3)),
        check_fn("loss_wsm", lambda a, b, c: L.loss_wsm([a, b, c], 2), prob(*shape), prob(*shape), prob(*shape)),
        check_fn("dice_loss", lambda z: L.dice_loss(gc.softmax_channels(z), mask), rng.normal(size=(2, 3, 4, 4))),
        check_fn("dice_loss_per_sample", lambda z: L.dice_loss(gc.softmax_channels(z), mask, per_sample=True),
                 rng.normal(size=(2, 3, 4, 4))),
        check_fn("loss_total", lambda a, b, c: L.loss_total((a * a).sum(), (b * b).sum(), (c * c).sum(), w),
                 prob(2), prob(2), prob(2)),
        # every consistency term through softmax logits of three branches
        check_fn("consistency_terms",
                 lambda z1, z2, z3: (lambda t: L.loss_total(L.dice_loss(gc.softmax_channels(z1), mask),
                                                            t["uec"], t["wsm"], w))(
                     L.consistency_terms([gc.softmax_channels(z) for z in (z1, z2, z3)], w, 2,
                                         weights=cons_w)),
                 *logits),
    ]
    return res


def _network_checks(seed: int) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    model = build_model(k=3, channels=2, classes=3, seed=seed)
    imgs = [rng.uniform(0, 1, size=(1, 8, 8)) for _ in range(3)]
    mask = rng.integers(0, 3, size=(1, 8, 8))
    w = L.LossWeights()

    frozen = frozen_weights(forward_all(model.frozen(), imgs), w)

    def objective():
        probs = forward_all(model, imgs)
        sup = L.dice_loss(probs[0], mask)
        t = L.consistency_terms(probs, w, 2, weights=frozen)
        return L.loss_total(sup, t["uec"], t["wsm"], w)

    model.zero_grad()
    objective().backward()
    worst = 0.0
    for name, p in model.named_parameters():
        num = numeric_grad(lambda: objective().item(), p.data)
        worst = max(worst, rel_error(p.grad, num))
    out = [CheckResult("network_params", worst, worst <= TOL)]

    img = rng.uniform(0, 1, size=(8, 8))
    g = input_gradient(model, img, mask[0])
    def f():
        return L.dice_loss(forward_branch(model.frozen(), img, 1), mask[0], per_sample=True).item()

    num = numeric_grad(f, img)
    err = rel_error(g, num)
    out.append(CheckResult("input_gradient", err, err <= TOL))
    return out


def run_gradcheck(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    return _op_checks(rng) + _loss_checks(rng) + _network_checks(seed)


@contextlib.contextmanager
def corrupted_rule(op: str, factor: float = 1.5):
    """Temporarily scale the gradient produced by one backward rule (fault injection)."""
    orig = gc.BACKWARD_RULES[op]

    def bad(node, g):
        return tuple(None if x is None else factor * x for x in orig(node, g))

    gc.BACKWARD_RULES[op] = bad
    try:
        yield
    finally:
        gc.BACKWARD_RULES[op] = orig


def format_report(results: list[CheckResult], elapsed: float | None = None) -> str:
    lines = [f"{'check':<24} {'max_rel_err':>12}  status"]
    for r in results:
        lines.append(f"{r.name:<24} {r.max_rel_err:12.3e}  {'PASS' if r.passed else 'FAIL'}")
    n_fail = sum(not r.passed for r in results)
    tail = f"{len(results) - n_fail}/{len(results)} passed (tolerance {TOL:g})"
    if elapsed is not None:
        tail += f" in {elapsed:.1f}s"
    lines.append(tail)
    return "\n".join(lines)


def main_report(seed: int = 0, fault: str | None = None) -> tuple[bool, str]:
    t0 = time.perf_counter()
    if fault:
        with corrupted_rule(fault):
            res = run_gradcheck(seed)
    else:
        res = run_gradcheck(seed)
    return all(r.passed for r in res), format_report(res, time.perf_counter() - t0)
