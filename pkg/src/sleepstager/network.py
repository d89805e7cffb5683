"""Multi-task 1-max CNN, the deep CNN baseline, and model checkpoints.

Both architectures emit logits of shape (B, S, Y), where S is the number of
output slots: 2*tau + 1 for one-to-many, 1 for one-to-one and many-to-one.
Slot s of the one-to-many head predicts the label of epoch n + s - tau.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autograd as ag
from .errors import ConfigError, FormatError, ShapeError
from .tfr import TFImage, make_triangular_filterbank

MODES = ("one_to_many", "one_to_one", "many_to_one")
N_CLASSES = 5


@dataclass(frozen=True)
class ContextConfig:
    tau: int = 1
    mode: str = "one_to_many"

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}", "mode")
        if self.tau < 0:
            raise ConfigError("tau must be non-negative", "tau")
        if self.mode == "one_to_one" and self.tau != 0:
            raise ConfigError("one_to_one requires tau = 0", "tau")

    @property
    def context_size(self) -> int:
        return 2 * self.tau + 1

    @property
    def n_outputs(self) -> int:
        return self.context_size if self.mode == "one_to_many" else 1

    @property
    def n_inputs(self) -> int:
        return self.context_size if self.mode == "many_to_one" else 1


@dataclass(frozen=True)
class OneMaxCnnSpec:
    """1-max CNN. ``input_dims`` is (P, M, T) of a single epoch.

    With ``learnable_fb_bins = F`` the network consumes (P, F, T) raw
    log-power planes and learns a non-negative (P, M, F) filter bank.
    """

    input_dims: tuple[int, int, int]
    filters_per_width: int = 100
    filter_widths: tuple[int, ...] = (3, 5, 7)
    n_classes: int = N_CLASSES
    context: ContextConfig = field(default_factory=ContextConfig)
    dropout_rate: float = 0.2
    lambda_reg: float = 1e-3
    head: str = "shared"
    learnable_fb_bins: int | None = None

    arch = "onemax"

    def __post_init__(self):
        p, m, t = self.input_dims
        if min(p, m, t) < 1:
            raise ConfigError(f"bad input dims {self.input_dims}", "input_dims")
        if not self.filter_widths:
            raise ConfigError("need at least one filter width", "widths")
        for w in self.filter_widths:
            if not 1 <= w < self.time_extent:
                raise ConfigError(f"filter width {w} must be < T={self.time_extent}", "widths")
        if self.filters_per_width < 1:
            raise ConfigError("need at least one filter per width", "q")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError("dropout must lie in [0, 1)", "dropout")
        if self.head not in ("shared", "per_slot"):
            raise ConfigError(f"unknown head {self.head!r}", "head")

    @property
    def time_extent(self) -> int:
        return self.input_dims[2] * self.context.n_inputs

    @property
    def network_input_dims(self) -> tuple[int, int, int]:
        p, m, t = self.input_dims
        f = m if self.learnable_fb_bins is None else self.learnable_fb_bins
        return p, f, t * self.context.n_inputs

    @property
    def feature_size(self) -> int:
        return self.filters_per_width * len(self.filter_widths)


@dataclass(frozen=True)
class DeepCnnSpec:
    """Two conv/pool stages and two dense layers; layer sizes are fixed."""

    input_dims: tuple[int, int, int]
    n_classes: int = N_CLASSES
    context: ContextConfig = field(default_factory=ContextConfig)
    dropout_rate: float = 0.2
    lambda_reg: float = 1e-3
    learnable_fb_bins: int | None = None

    arch = "deepcnn"
    FMAPS = 96
    KERNEL = (3, 3)
    POOL1 = (2, 1)
    POOL2 = (2, 2)
    FC_UNITS = 1024

    def __post_init__(self):
        self.layer_dims()  # raises if the input is too small

    @property
    def time_extent(self) -> int:
        return self.input_dims[2] * self.context.n_inputs

    @property
    def network_input_dims(self) -> tuple[int, int, int]:
        p, m, t = self.input_dims
        f = m if self.learnable_fb_bins is None else self.learnable_fb_bins
        return p, f, t * self.context.n_inputs

    def layer_dims(self) -> dict[str, tuple[int, ...]]:
        _, m, _ = self.input_dims
        t = self.time_extent
        kh, kw = self.KERNEL
        h1, w1 = m - kh + 1, t - kw + 1
        h1p, w1p = h1 // self.POOL1[0], w1 // self.POOL1[1]
        h2, w2 = h1p - kh + 1, w1p - kw + 1
        h2p, w2p = h2 // self.POOL2[0], w2 // self.POOL2[1]
        if min(h1, w1, h1p, w1p, h2, w2, h2p, w2p) < 1:
            raise ConfigError(f"input {self.input_dims} too small for the deep CNN",
                              "input_dims")
        return {"conv1": (self.FMAPS, h1, w1), "pool1": (self.FMAPS, h1p, w1p),
                "conv2": (self.FMAPS, h2, w2), "pool2": (self.FMAPS, h2p, w2p),
                "flat": (self.FMAPS * h2p * w2p,)}


ModelSpec = OneMaxCnnSpec | DeepCnnSpec


@dataclass
class ModelParams:
    tensors: dict[str, np.ndarray]
    seed: int

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()}, self.seed)

    def sq_norm(self) -> float:
        return float(sum(np.sum(v * v) for v in self.tensors.values()))


def _uniform(rng, shape, fan_in):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...], int | None]]:
    """(name, shape, fan_in) for every tensor; fan_in None means zero init."""
    p, m, _ = spec.input_dims
    y = spec.n_classes
    s = spec.context.n_outputs
    out = []
    if spec.learnable_fb_bins is not None:
        out.append(("fb", (p, m, spec.learnable_fb_bins), None))
    if isinstance(spec, OneMaxCnnSpec):
        q = spec.filters_per_width
        for w in spec.filter_widths:
            out.append((f"conv{w}.w", (q, p, m, w), p * m * w))
            out.append((f"conv{w}.b", (q,), None))
        d = spec.feature_size
        if spec.head == "shared":
            out.append(("out.w", (d, s * y), d))
            out.append(("out.b", (s * y,), None))
        else:
            for k in range(s):
                out.append((f"out{k}.w", (d, y), d))
                out.append((f"out{k}.b", (y,), None))
    else:
        f = spec.FMAPS
        kh, kw = spec.KERNEL
        flat = spec.layer_dims()["flat"][0]
        u = spec.FC_UNITS
        out += [("conv1.w", (f, p, kh, kw), p * kh * kw), ("conv1.b", (f,), None),
                ("conv2.w", (f, f, kh, kw), f * kh * kw), ("conv2.b", (f,), None),
                ("fc1.w", (flat, u), flat), ("fc1.b", (u,), None),
                ("fc2.w", (u, u), u), ("fc2.b", (u,), None),
                ("out.w", (u, s * y), u), ("out.b", (s * y,), None)]
    return out


def init_params(spec: ModelSpec, seed: int) -> ModelParams:
    """Uniform +-sqrt(6 / fan_in) weights, zero biases, triangular filter bank."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape, fan_in in _layout(spec):
        if name == "fb":
            tri = make_triangular_filterbank(shape[1], shape[2]).weights
            tensors[name] = np.broadcast_to(tri, shape).copy()
        elif fan_in is None:
            tensors[name] = np.zeros(shape)
        else:
            tensors[name] = _uniform(rng, shape, fan_in)
    return ModelParams(tensors, seed)


def as_leaves(params: ModelParams, dtype=np.float64) -> dict[str, ag.Tensor]:
    """Trainable tensors; with float64 they share memory with ``params``."""
    return {k: ag.Tensor(v.astype(dtype, copy=False), requires_grad=True, name=k)
            for k, v in params.tensors.items()}


def _compute_dtype(t: dict[str, ag.Tensor]):
    return next(iter(t.values())).data.dtype


def _check_input(spec: ModelSpec, x: np.ndarray):
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.network_input_dims:
        raise ShapeError(
            f"input shape {tuple(x.shape[1:])} does not match {spec.network_input_dims}")


def logits(t: dict[str, ag.Tensor], spec: ModelSpec, x: np.ndarray,
           train: bool = False, rng: np.random.Generator | None = None) -> ag.Tensor:
    """Batched forward pass to logits (B, S, Y), in the precision of ``t``."""
    x = np.asarray(x, dtype=_compute_dtype(t))
    _check_input(spec, x)
    if train and spec.dropout_rate > 0 and rng is None:
        raise ValueError("training-mode forward needs an rng for dropout")
    h = ag.Tensor(x)
    if "fb" in t:
        h = ag.filterbank(h, t["fb"])
    bsz = x.shape[0]
    s, y = spec.context.n_outputs, spec.n_classes
    if isinstance(spec, OneMaxCnnSpec):
        pooled = [ag.max_over_time(ag.relu(ag.conv_over_time(h, t[f"conv{w}.w"], t[f"conv{w}.b"])))
                  for w in spec.filter_widths]
        f = ag.dropout(ag.concat(pooled, axis=1), spec.dropout_rate, rng, train)
        if spec.head == "shared":
            z = ag.affine(f, t["out.w"], t["out.b"])
        else:
            z = ag.concat([ag.affine(f, t[f"out{k}.w"], t[f"out{k}.b"]) for k in range(s)], axis=1)
    else:
        r = spec.dropout_rate
        h = ag.relu(ag.conv2d(h, t["conv1.w"], t["conv1.b"]))
        h = ag.dropout(ag.max_pool2d(h, spec.POOL1), r, rng, train)
        h = ag.relu(ag.conv2d(h, t["conv2.w"], t["conv2.b"]))
        h = ag.dropout(ag.max_pool2d(h, spec.POOL2), r, rng, train)
        h = ag.reshape(h, (bsz, -1))
        h = ag.dropout(ag.relu(ag.affine(h, t["fc1.w"], t["fc1.b"])), r, rng, train)
        h = ag.dropout(ag.relu(ag.affine(h, t["fc2.w"], t["fc2.b"])), r, rng, train)
        z = ag.affine(h, t["out.w"], t["out.b"])
    return ag.reshape(z, (bsz, s, y))


def objective(t: dict[str, ag.Tensor], spec: ModelSpec, x: np.ndarray, targets: np.ndarray,
              rng: np.random.Generator | None, train: bool = True) -> tuple[ag.Tensor, ag.Tensor]:
    """Batch-mean multi-task cross-entropy plus (lambda / 2) * ||theta||^2.

    Returns ``(total, data_term)``.
    """
    z = logits(t, spec, x, train=train, rng=rng)
    data = ag.mean(ag.softmax_cross_entropy(z, targets))
    if spec.lambda_reg > 0:
        names = sorted(t)
        total = ag.add(data, ag.l2_penalty([t[k] for k in names], spec.lambda_reg))
    else:
        total = data
    return total, data


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def predict(params: ModelParams, spec: ModelSpec, x: np.ndarray, batch_size: int = 500,
            dtype=np.float64) -> np.ndarray:
    """Inference-mode posteriors (N, S, Y) as float64."""
    x = np.asarray(x, dtype=dtype)
    t = {k: ag.Tensor(v.astype(dtype, copy=False)) for k, v in params.tensors.items()}
    out = [_softmax(logits(t, spec, x[i:i + batch_size]).data.astype(np.float64))
           for i in range(0, len(x), batch_size)]
    if not out:
        return np.zeros((0, spec.context.n_outputs, spec.n_classes))
    return np.concatenate(out, axis=0)


def forward(params: ModelParams, spec: ModelSpec, image: TFImage | np.ndarray,
            train_mode: bool = False, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Posteriors for one input image, one vector per output slot, left to right."""
    values = image.values if isinstance(image, TFImage) else np.asarray(image)
    t = {k: ag.Tensor(v) for k, v in params.tensors.items()}
    z = logits(t, spec, values[None], train=train_mode, rng=rng).data[0]
    return list(_softmax(z))


def stack_context(images: Sequence[TFImage | np.ndarray]) -> np.ndarray:
    """Concatenate 2*tau + 1 neighbouring epoch images along time."""
    arrays = [im.values if isinstance(im, TFImage) else np.asarray(im) for im in images]
    return np.concatenate(arrays, axis=-1)


def context_indices(n_epochs: int, tau: int) -> np.ndarray:
    """(N, 2*tau + 1) neighbour indices with edge replication at the recording ends."""
    offsets = np.arange(-tau, tau + 1)
    return np.clip(np.arange(n_epochs)[:, None] + offsets[None, :], 0, n_epochs - 1)


def forward_many_to_one(params: ModelParams, spec: ModelSpec,
                        images: Sequence[TFImage | np.ndarray]) -> np.ndarray:
    if spec.context.mode != "many_to_one":
        raise ConfigError("forward_many_to_one needs a many_to_one spec", "mode")
    if len(images) != spec.context.context_size:
        raise ShapeError(f"expected {spec.context.context_size} context images, got {len(images)}")
    return forward(params, spec, stack_context(images))[0]


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"SSCK"
CKPT_VERSION = 1


def spec_to_dict(spec: ModelSpec) -> dict:
    d = asdict(spec)
    d["arch"] = spec.arch
    if isinstance(spec, DeepCnnSpec):
        d["layer_dims"] = {k: list(v) for k, v in spec.layer_dims().items()}
    return d


def spec_from_dict(d: dict) -> ModelSpec:
    d = dict(d)
    arch = d.pop("arch")
    d.pop("layer_dims", None)
    d["input_dims"] = tuple(d["input_dims"])
    d["context"] = ContextConfig(**d["context"])
    if arch == "onemax":
        d["filter_widths"] = tuple(d["filter_widths"])
        return OneMaxCnnSpec(**d)
    if arch == "deepcnn":
        return DeepCnnSpec(**d)
    raise FormatError(f"unknown architecture {arch!r}")


def save_checkpoint(path, params: ModelParams, spec: ModelSpec, extra: dict | None = None) -> None:
    """Header JSON plus float32 little-endian tensors, written atomically."""
    names = [name for name, _, _ in _layout(spec)]
    header = {
        "format_version": CKPT_VERSION,
        "spec": spec_to_dict(spec),
        "seed": params.seed,
        "tensors": [[n, list(params.tensors[n].shape)] for n in names],
        "extra": extra or {},
    }
    raw = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<I", len(raw)) + raw)
        for n in names:
            fh.write(np.ascontiguousarray(params.tensors[n], dtype="<f4").tobytes())
    tmp.replace(path)


def load_checkpoint(path) -> tuple[ModelParams, ModelSpec, dict]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    header = json.loads(raw[8:8 + hlen])
    if header.get("format_version") != CKPT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version")
    spec = spec_from_dict(header["spec"])
    off = 8 + hlen
    tensors = {}
    for name, shape in header["tensors"]:
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(raw, "<f4", count, off).reshape(shape).astype(np.float64)
        off += 4 * count
    if off != len(raw):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return ModelParams(tensors, header["seed"]), spec, header["extra"]
