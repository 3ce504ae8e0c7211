"""Shared-encoder, multi-decoder U-Net.

Three resolution levels (two poolings); every hidden 3x3 conv is followed by
instance normalization and ReLU.  The encoder is one parameter set;
each of the ``k`` decoders owns its parameters and produces per-pixel class
probabilities through a channel softmax.  Branch indices are 1-based.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import gradcore as gc
from .gradcore import ContractError, Tensor
from .rng import STAGE_INIT, KeyedRNG


@dataclass
class SegModel:
    k: int
    channels: int
    classes: int
    params: dict[str, Tensor] = field(default_factory=dict)

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def group(self, prefix: str) -> dict[str, Tensor]:
        return {n: p for n, p in self.params.items() if n.startswith(prefix + ".")}

    def decoder(self, m: int) -> dict[str, Tensor]:
        return self.group(f"dec{m}")

    def frozen(self) -> "SegModel":
        """View sharing the parameter arrays but excluded from differentiation."""
        return SegModel(self.k, self.channels, self.classes, {n: Tensor(p.data) for n, p in self.params.items()})

    def copy(self) -> "SegModel":
        return SegModel(self.k, self.channels, self.classes,
                        {n: Tensor(p.data.copy(), requires_grad=p.requires_grad) for n, p in self.params.items()})

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


def _layer_specs(channels: int, classes: int):
    c = channels
    enc = [("enc.e1a", 1, c, 3), ("enc.e1b", c, c, 3),
           ("enc.e2a", c, 2 * c, 3), ("enc.e2b", 2 * c, 2 * c, 3),
           ("enc.e3a", 2 * c, 4 * c, 3), ("enc.e3b", 4 * c, 4 * c, 3)]
    dec = [("d2", 6 * c, 2 * c, 3), ("d1", 3 * c, c, 3), ("out", c, classes, 1)]
    return enc, dec


def build_model(k: int = 3, channels: int = 8, classes: int = 4, seed: int = 0,
                tie_decoders: bool = False) -> SegModel:
    """He-initialized model.  ``classes`` counts background.

    With ``tie_decoders`` every decoder starts as a copy of decoder 1.
    """
    if k < 2:
        raise ContractError("the consistency objective needs at least 2 branches")
    enc, dec = _layer_specs(channels, classes)
    rng = KeyedRNG(seed, STAGE_INIT).generator()
    params: dict[str, Tensor] = {}

    def conv(name, cin, cout, ks, out_layer=False):
        fan_in = cin * ks * ks
        std = np.sqrt(1.0 / fan_in) * 0.1 if out_layer else np.sqrt(2.0 / fan_in)
        params[name + ".w"] = Tensor(rng.normal(0.0, std, size=(cout, cin, ks, ks)), requires_grad=True)
        if out_layer:
            # hidden convs feed instance norm, which would cancel a bias
            params[name + ".b"] = Tensor(np.zeros(cout), requires_grad=True)

    for spec in enc:
        conv(*spec)
    for m in range(1, k + 1):
        for name, cin, cout, ks in dec:
            if tie_decoders and m > 1:
                for suffix in (".w", ".b") if name == "out" else (".w",):
                    src = params[f"dec1.{name}{suffix}"]
                    params[f"dec{m}.{name}{suffix}"] = Tensor(src.data.copy(), requires_grad=True)
            else:
                conv(f"dec{m}.{name}", cin, cout, ks, out_layer=(name == "out"))
    return SegModel(k, channels, classes, params)


def _as_batch(img) -> Tensor:
    if isinstance(img, Tensor):
        x = img
    else:
        x = Tensor(np.asarray(img, dtype=np.float64))
    if x.ndim == 2:
        x = x.reshape(1, 1, *x.shape)
    elif x.ndim == 3:
        x = x.reshape(x.shape[0], 1, x.shape[1], x.shape[2])
    if x.ndim != 4 or x.shape[1] != 1:
        raise gc.DimensionError(f"expected single-channel images, got shape {x.shape}")
    return x


def _conv(p, name, x, relu=True):
    if not relu:
        return gc.conv2d(x, p[name + ".w"], p[name + ".b"])
    return gc.relu(gc.instance_norm(gc.conv2d(x, p[name + ".w"])))


def encode(model: SegModel, x) -> tuple[Tensor, Tensor, Tensor]:
    p = model.params
    x = _as_batch(x)
    e1 = _conv(p, "enc.e1b", _conv(p, "enc.e1a", x))
    e2 = _conv(p, "enc.e2b", _conv(p, "enc.e2a", gc.avgpool2(e1)))
    e3 = _conv(p, "enc.e3b", _conv(p, "enc.e3a", gc.avgpool2(e2)))
    return e1, e2, e3


def decode(model: SegModel, feats, m: int) -> Tensor:
    """Logits of decoder ``m``."""
    p = model.params
    e1, e2, e3 = feats
    pre = f"dec{m}."
    d2 = _conv(p, pre + "d2", gc.concat([gc.upsample_nearest2(e3), e2], axis=1))
    d1 = _conv(p, pre + "d1", gc.concat([gc.upsample_nearest2(d2), e1], axis=1))
    return _conv(p, pre + "out", d1, relu=False)


def _check_branch(model: SegModel, m: int) -> None:
    if not 1 <= m <= model.k:
        raise ContractError(f"branch index {m} outside 1..{model.k}")


def forward_branch(model: SegModel, img, m: int) -> Tensor:
    """Class probabilities [N, C, H, W] of branch ``m`` for image(s) ``img``."""
    _check_branch(model, m)
    return gc.softmax_channels(decode(model, encode(model, img), m))


def forward_all(model: SegModel, imgs) -> list[Tensor]:
    """Branch m applied to ``imgs[m-1]``; returns k probability maps.

    All views go through the shared encoder in a single batched pass.
    """
    if len(imgs) != model.k:
        raise ContractError(f"expected {model.k} views, got {len(imgs)}")
    xs = [_as_batch(v) for v in imgs]
    n = xs[0].shape[0]
    if all(v is imgs[0] for v in imgs):
        # one shared view: encode once, every decoder reads the same features
        feats = encode(model, xs[0])
        return [gc.softmax_channels(decode(model, feats, m + 1)) for m in range(model.k)]
    if any(x.shape != xs[0].shape for x in xs):
        return [forward_branch(model, x, m + 1) for m, x in enumerate(xs)]
    feats = encode(model, gc.concat(xs, axis=0))
    out = []
    for m in range(model.k):
        sl = slice(m * n, (m + 1) * n)
        view_feats = tuple(f[sl] for f in feats)
        out.append(gc.softmax_channels(decode(model, view_feats, m + 1)))
    return out


def predict(model: SegModel, img, m: int | str = 1) -> np.ndarray:
    """Argmax label map(s) without recording a tape.  ``m='mean'`` ensembles all branches."""
    frozen = model.frozen()
    if m == "mean":
        feats = encode(frozen, img)
        probs = sum(gc.softmax_channels(decode(frozen, feats, b)).data for b in range(1, model.k + 1))
    else:
        probs = forward_branch(frozen, img, int(m)).data
    return probs.argmax(axis=1)
