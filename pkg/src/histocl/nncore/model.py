"""Small convolutional classifier with explicit forward/backward passes.

The network is conv(3x3, stride 1, pad 1) -> ReLU -> optional 2x2 max pool
per block, global average pooling into the feature vector, then one linear
head per declared head id. Parameters live in a single flat float32 array
with a layout table, which keeps SGD, EWC anchors, Fisher diagonals and
checkpointing trivial.

Scalar reductions (means, bias sums) accumulate in float64 regardless of the
compute dtype; matrix products run in the compute dtype.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from ..errors import ShapeMismatchError


@dataclass(frozen=True)
class ConvBlock:
    out_channels: int
    kernel: int = 3
    pool: bool = True

    def __post_init__(self) -> None:
        if self.out_channels < 1:
            raise ValueError("out_channels must be >= 1")
        if self.kernel % 2 != 1 or self.kernel < 1:
            raise ValueError("kernel must be odd")


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor; ``feature_dim`` is fixed by the last block."""

    input_side: int
    conv_blocks: tuple[ConvBlock, ...]
    heads: tuple[tuple[int, int], ...]  # (head_id, n_outputs)
    init_seed: int = 0

    def __post_init__(self) -> None:
        if self.input_side < 1:
            raise ValueError("input_side must be >= 1")
        if not self.conv_blocks:
            raise ValueError("at least one conv block required")
        if not self.heads:
            raise ValueError("at least one head required")
        if len({h for h, _ in self.heads}) != len(self.heads):
            raise ValueError("head ids must be unique")
        if any(n < 1 for _, n in self.heads):
            raise ValueError("head n_outputs must be >= 1")
        side = self.input_side
        for b in self.conv_blocks:
            if b.pool:
                if side % 2 != 0:
                    raise ValueError(f"cannot 2x2-pool odd side {side}")
                side //= 2
        if side < 1:
            raise ValueError("spatial size collapsed below 1")

    @property
    def feature_dim(self) -> int:
        return self.conv_blocks[-1].out_channels

    def head_outputs(self, head_id: int) -> int:
        for h, n in self.heads:
            if h == head_id:
                return n
        raise ShapeMismatchError(f"no head with id {head_id}")

    def to_dict(self) -> dict:
        return {
            "input_side": self.input_side,
            "conv_blocks": [[b.out_channels, b.kernel, b.pool] for b in self.conv_blocks],
            "heads": [list(h) for h in self.heads],
            "init_seed": self.init_seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(
            input_side=int(d["input_side"]),
            conv_blocks=tuple(ConvBlock(int(c), int(k), bool(p)) for c, k, p in d["conv_blocks"]),
            heads=tuple((int(h), int(n)) for h, n in d["heads"]),
            init_seed=int(d["init_seed"]),
        )


DEFAULT_CONV_BLOCKS = (
    ConvBlock(16, 3, True),
    ConvBlock(32, 3, True),
    ConvBlock(64, 3, False),
)


@dataclass(frozen=True)
class LayoutEntry:
    name: str
    offset: int
    shape: tuple[int, ...]

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def build_layout(spec: ModelSpec) -> tuple[LayoutEntry, ...]:
    entries: list[LayoutEntry] = []
    offset = 0

    def add(name: str, shape: tuple[int, ...]) -> None:
        nonlocal offset
        entries.append(LayoutEntry(name, offset, shape))
        offset += int(np.prod(shape))

    c_in = 3
    for i, b in enumerate(spec.conv_blocks):
        add(f"block{i}.weight", (b.kernel, b.kernel, c_in, b.out_channels))
        add(f"block{i}.bias", (b.out_channels,))
        c_in = b.out_channels
    for head_id, n_out in spec.heads:
        add(f"head{head_id}.weight", (spec.feature_dim, n_out))
        add(f"head{head_id}.bias", (n_out,))
    return tuple(entries)


@dataclass
class ParamVector:
    """Flat float32 parameter storage plus the named layout table."""

    values: np.ndarray
    layout: tuple[LayoutEntry, ...]

    def __post_init__(self) -> None:
        if self.values.dtype != np.float32 or self.values.ndim != 1:
            raise ValueError("values must be a flat float32 array")
        total = sum(e.size for e in self.layout)
        if total != self.values.size:
            raise ValueError(f"layout covers {total} values, array has {self.values.size}")
        offsets = sorted((e.offset, e.size) for e in self.layout)
        pos = 0
        for off, size in offsets:
            if off != pos:
                raise ValueError("layout offsets must be contiguous and non-overlapping")
            pos += size

    def view(self, name: str) -> np.ndarray:
        for e in self.layout:
            if e.name == name:
                return self.values[e.offset : e.offset + e.size].reshape(e.shape)
        raise KeyError(name)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)


def init_model(spec: ModelSpec) -> ParamVector:
    """He-normal conv/linear weights (std = sqrt(2 / fan_in)), zero biases."""
    layout = build_layout(spec)
    rng = np.random.default_rng(spec.init_seed)
    values = np.empty(sum(e.size for e in layout), dtype=np.float32)
    for e in layout:
        if e.name.endswith(".bias"):
            values[e.offset : e.offset + e.size] = 0.0
        else:
            fan_in = int(np.prod(e.shape[:-1]))
            std = np.sqrt(2.0 / fan_in)
            w = rng.normal(0.0, std, size=e.size)
            values[e.offset : e.offset + e.size] = w.astype(np.float32)
    return ParamVector(values, layout)


@dataclass
class BatchOutput:
    """Forward results: embedding, selected-head logits, opaque backprop cache."""

    features: np.ndarray
    logits: np.ndarray
    loss: float | None = None
    cache: dict = field(default_factory=dict, repr=False)


def _conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    bsz, h, wd, _ = x.shape
    k = w.shape[0]
    pad = k // 2
    xp = np.zeros((bsz, h + 2 * pad, wd + 2 * pad, x.shape[3]), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + wd, :] = x
    out = np.zeros((bsz, h, wd, w.shape[3]), dtype=x.dtype)
    for ki in range(k):
        for kj in range(k):
            out += xp[:, ki : ki + h, kj : kj + wd, :] @ w[ki, kj]
    return out + b


def _conv_backward(
    x: np.ndarray, w: np.ndarray, dout: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    bsz, h, wd, c_in = x.shape
    k = w.shape[0]
    pad = k // 2
    xp = np.zeros((bsz, h + 2 * pad, wd + 2 * pad, c_in), dtype=x.dtype)
    xp[:, pad : pad + h, pad : pad + wd, :] = x
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    flat_dout = dout.reshape(-1, dout.shape[3])
    for ki in range(k):
        for kj in range(k):
            patch = xp[:, ki : ki + h, kj : kj + wd, :].reshape(-1, c_in)
            dw[ki, kj] = patch.T @ flat_dout
            dxp[:, ki : ki + h, kj : kj + wd, :] += dout @ w[ki, kj].T
    db = flat_dout.sum(axis=0, dtype=np.float64).astype(dout.dtype)
    dx = dxp[:, pad : pad + h, pad : pad + wd, :]
    return dx, dw, db


def _pool_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    bsz, h, w, c = x.shape
    win = x.reshape(bsz, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(bsz, h // 2, w // 2, c, 4)
    idx = win.argmax(axis=-1)  # first maximum wins on ties
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return out, idx


def _pool_backward(dout: np.ndarray, idx: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    bsz, h, w, c = in_shape
    dwin = np.zeros((bsz, h // 2, w // 2, c, 4), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], axis=-1)
    dwin = dwin.reshape(bsz, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dwin.reshape(bsz, h, w, c)


def forward(
    params: ParamVector,
    spec: ModelSpec,
    batch: np.ndarray,
    head_id: int,
    dtype: type = np.float32,
) -> BatchOutput:
    """Run the network over a (B, S, S, 3) batch of pixels in [0, 1].

    The cache in the returned :class:`BatchOutput` feeds :func:`backward`.
    """
    x = np.asarray(batch)
    if x.ndim != 4 or x.shape[1] != spec.input_side or x.shape[2] != spec.input_side or x.shape[3] != 3:
        raise ShapeMismatchError(
            f"batch shape {x.shape} incompatible with input side {spec.input_side}"
        )
    x = x.astype(dtype, copy=False)
    spec.head_outputs(head_id)  # existence check

    blocks = []
    for i, b in enumerate(spec.conv_blocks):
        w = params.view(f"block{i}.weight").astype(dtype, copy=False)
        bias = params.view(f"block{i}.bias").astype(dtype, copy=False)
        pre = _conv_forward(x, w, bias)
        h = np.maximum(pre, 0)
        rec = {"x": x, "w": w, "mask": pre > 0}
        if b.pool:
            pooled, idx = _pool_forward(h)
            rec["pool_idx"] = idx
            rec["pre_pool_shape"] = h.shape
            h = pooled
        blocks.append(rec)
        x = h

    features = x.mean(axis=(1, 2), dtype=np.float64).astype(dtype)
    cache = {
        "blocks": blocks,
        "spatial": x.shape[1] * x.shape[2],
        "features": features,
        "dtype": dtype,
        "spec": spec,
        "params": params,
    }
    logits = head_logits(params, features, head_id, dtype)
    out = BatchOutput(features=features, logits=logits, cache=cache)
    if not np.isfinite(features).all():
        raise ShapeMismatchError("non-finite features in forward pass")
    return out


def head_logits(params: ParamVector, features: np.ndarray, head_id: int, dtype: type = np.float32) -> np.ndarray:
    w = params.view(f"head{head_id}.weight").astype(dtype, copy=False)
    b = params.view(f"head{head_id}.bias").astype(dtype, copy=False)
    return features @ w + b


def backward(
    cache: dict,
    dlogits_by_head: Mapping[int, np.ndarray],
    dfeatures: np.ndarray | None = None,
) -> np.ndarray:
    """Accumulate gradients back through heads, GAP and the conv stack.

    Returns a flat gradient array aligned with the parameter layout, in the
    forward pass's compute dtype.
    """
    dtype = cache["dtype"]
    spec: ModelSpec = cache["spec"]
    params: ParamVector = cache["params"]
    features = cache["features"]
    grads = np.zeros(params.values.size, dtype=dtype)

    def gslice(name: str) -> np.ndarray:
        for e in params.layout:
            if e.name == name:
                return grads[e.offset : e.offset + e.size].reshape(e.shape)
        raise KeyError(name)

    dfeat = np.zeros_like(features) if dfeatures is None else dfeatures.astype(dtype, copy=True)
    for head_id, dlog in dlogits_by_head.items():
        w = params.view(f"head{head_id}.weight").astype(dtype, copy=False)
        dlog = dlog.astype(dtype, copy=False)
        gslice(f"head{head_id}.weight")[...] = features.T @ dlog
        gslice(f"head{head_id}.bias")[...] = dlog.sum(axis=0, dtype=np.float64).astype(dtype)
        dfeat += dlog @ w.T

    blocks = cache["blocks"]
    last = blocks[-1]
    out_hw = cache["spatial"]
    bsz = dfeat.shape[0]
    # undo global average pooling
    side = int(np.sqrt(out_hw))
    dx = np.broadcast_to(
        (dfeat / out_hw)[:, None, None, :], (bsz, side, side, dfeat.shape[1])
    ).astype(dtype, copy=True)

    for i in range(len(blocks) - 1, -1, -1):
        rec = blocks[i]
        if "pool_idx" in rec:
            dx = _pool_backward(dx, rec["pool_idx"], rec["pre_pool_shape"])
        dx = dx * rec["mask"]
        dx, dw, db = _conv_backward(rec["x"], rec["w"], dx)
        gslice(f"block{i}.weight")[...] = dw
        gslice(f"block{i}.bias")[...] = db

    return grads


def as_batch(patches: Sequence, side: int | None = None) -> np.ndarray:
    """Stack patches into a float32 (B, S, S, 3) batch scaled to [0, 1]."""
    arr = np.stack([p.pixels for p in patches]).astype(np.float32) / 255.0
    if side is not None and arr.shape[1] != side:
        raise ShapeMismatchError(f"patch side {arr.shape[1]} != expected {side}")
    return arr


def nearest_mean_classify(feature: np.ndarray, means: Mapping[int, np.ndarray]) -> int:
    """Class of the nearest mean by Euclidean distance; ties pick the lowest id."""
    if not means:
        raise ValueError("at least one class mean required")
    ids = sorted(means)
    mat = np.stack([np.asarray(means[i], dtype=np.float64) for i in ids])
    d2 = ((mat - np.asarray(feature, dtype=np.float64)) ** 2).sum(axis=1)
    return ids[int(np.argmin(d2))]


def nearest_mean_classify_batch(features: np.ndarray, means: Mapping[int, np.ndarray]) -> np.ndarray:
    if not means:
        raise ValueError("at least one class mean required")
    ids = np.asarray(sorted(means))
    mat = np.stack([np.asarray(means[int(i)], dtype=np.float64) for i in ids])
    f = np.asarray(features, dtype=np.float64)
    d2 = ((f[:, None, :] - mat[None, :, :]) ** 2).sum(axis=2)
    return ids[np.argmin(d2, axis=1)]
