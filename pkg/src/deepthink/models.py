"""Weight-tied recurrent networks and their feed-forward counterparts.

Every family is built as ``head(module^n(stem(x)))``. In recurrent mode a
single internal module is applied ``n`` times; in feed-forward mode ``n``
independently initialised copies are stacked. Effective depth is
``fixed_layers + iterations * module_layers`` in both modes.
"""

from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .tensor import NormStats, Tensor

FAMILIES = ("mlp", "convnet", "residual", "maze_residual")
MODES = ("recurrent", "feed_forward")

# layers per internal module, layers outside it
LAYER_COUNTS = {"mlp": (1, 2), "convnet": (1, 4), "residual": (4, 3), "maze_residual": (4, 4)}

# classifier families have fixed widths; maze nets accept any width
STANDARD_WIDTHS = {"mlp": (200, 500), "convnet": (64,), "residual": (512,), "maze_residual": (128,)}

CONVNET_FIRST = 32
CONVNET_LAST = 128
MAZE_HEAD = (32, 8, 2)


@dataclass(frozen=True)
class ModelSpec:
    family: str
    width: int
    iterations: int
    mode: str = "recurrent"
    per_iteration_bn: bool = False
    dilation: int = 1
    in_channels: int = 3
    num_classes: int = 10
    input_size: int = 32

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown family {self.family!r}; expected one of {FAMILIES}")
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}; expected one of {MODES}")
        if self.iterations < 1:
            raise ValueError(f"iterations must be positive, got {self.iterations}")
        if self.dilation < 1:
            raise ValueError(f"dilation must be positive, got {self.dilation}")
        if self.width < 1:
            raise ValueError(f"width must be positive, got {self.width}")
        if self.family != "maze_residual" and self.width not in STANDARD_WIDTHS[self.family]:
            raise ValueError(
                f"width {self.width} unsupported for family {self.family}; "
                f"allowed: {STANDARD_WIDTHS[self.family]}"
            )
        if self.family in ("mlp", "residual") and self.dilation != 1:
            raise ValueError(f"dilation is only defined for convnet and maze_residual families")

    @property
    def module_layers(self) -> int:
        return LAYER_COUNTS[self.family][0]

    @property
    def fixed_layers(self) -> int:
        return LAYER_COUNTS[self.family][1]

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str) -> "ModelSpec":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key not in types:
                raise ValueError(f"unknown model spec key {key!r}")
            if types[key] in ("int", int):
                kwargs[key] = int(value)
            elif types[key] in ("bool", bool):
                if value not in ("True", "False", "true", "false", "1", "0"):
                    raise ValueError(f"bad boolean for {key}: {value!r}")
                kwargs[key] = value in ("True", "true", "1")
            else:
                kwargs[key] = value
        return cls(**kwargs)

    def with_mode(self, mode: str) -> "ModelSpec":
        return ModelSpec(**{**asdict(self), "mode": mode})


def effective_depth(spec: ModelSpec) -> int:
    return spec.fixed_layers + spec.iterations * spec.module_layers


# ---------------------------------------------------------------------------
# layers


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = np.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


class Conv:
    def __init__(self, rng, cin, cout, k=3, stride=1, padding=1, dilation=1):
        self.weight = _uniform(rng, (cout, cin, k, k), cin * k * k)
        self.bias = Tensor(np.zeros(cout, np.float32), requires_grad=True)
        self.stride, self.padding, self.dilation = stride, padding, dilation

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.dilation)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class Linear:
    def __init__(self, rng, fin, fout):
        self.weight = _uniform(rng, (fin, fout), fin)
        self.bias = Tensor(np.zeros(fout, np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.weight, self.bias)

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]


class BatchNorm:
    def __init__(self, channels: int):
        self.gamma = Tensor(np.ones(channels, np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, np.float32), requires_grad=True)
        self.stats = NormStats.create(channels)

    def __call__(self, x: Tensor, train: bool) -> Tensor:
        return T.batch_norm(x, self.stats, self.gamma, self.beta, "train" if train else "eval")

    def parameters(self) -> list[Tensor]:
        return [self.gamma, self.beta]


def _maybe_bn(x, norms, k, train):
    return x if norms is None else norms[k](x, train)


class DenseModule:
    """One fully connected layer followed by ReLU."""

    def __init__(self, rng, width):
        self.layers = [Linear(rng, width, width)]
        self.channels = [width]

    def __call__(self, x, norms=None, train=False):
        return T.relu(_maybe_bn(self.layers[0](x), norms, 0, train))


class ConvModule:
    """One shape-preserving 3x3 convolution followed by ReLU."""

    def __init__(self, rng, width, dilation=1):
        self.layers = [Conv(rng, width, width, padding=dilation, dilation=dilation)]
        self.channels = [width]

    def __call__(self, x, norms=None, train=False):
        return T.relu(_maybe_bn(self.layers[0](x), norms, 0, train))


class ResidualModule:
    """Two basic residual blocks, four 3x3 convolutions in all."""

    def __init__(self, rng, width, dilation=1):
        self.layers = [Conv(rng, width, width, padding=dilation, dilation=dilation) for _ in range(4)]
        self.channels = [width] * 4

    def __call__(self, x, norms=None, train=False):
        for b in range(2):
            c1, c2 = self.layers[2 * b], self.layers[2 * b + 1]
            h = T.relu(_maybe_bn(c1(x), norms, 2 * b, train))
            h = _maybe_bn(c2(h), norms, 2 * b + 1, train)
            x = T.relu(T.add(h, x))
        return x


def _module_params(mod) -> list[Tensor]:
    return [p for layer in mod.layers for p in layer.parameters()]


# ---------------------------------------------------------------------------
# model


class Model:
    """Stem, internal module(s) and head realised from a :class:`ModelSpec`."""

    def __init__(self, spec: ModelSpec, stem, modules, head, norms):
        self.spec = spec
        self.stem = stem
        self.modules = modules
        self.head = head
        self.norms = norms  # one list of BatchNorm per iteration, or None

    @property
    def recurrent(self) -> bool:
        return self.spec.mode == "recurrent"

    def parameters(self) -> list[Tensor]:
        params: list[Tensor] = []
        for layer in self.stem:
            if hasattr(layer, "parameters"):
                params += layer.parameters()
        for mod in self.modules:
            params += _module_params(mod)
        for group in self.norms or []:
            for bn in group:
                params += bn.parameters()
        for layer in self.head:
            if hasattr(layer, "parameters"):
                params += layer.parameters()
        return params

    def norm_stats(self) -> list[NormStats]:
        return [bn.stats for group in self.norms or [] for bn in group]

    def module_at(self, t: int):
        """Internal module used at zero-based iteration ``t``."""
        return self.modules[0] if self.recurrent else self.modules[t]

    def norms_at(self, t: int):
        if self.norms is None:
            return None
        return self.norms[min(t, len(self.norms) - 1)]

    def embed(self, x: Tensor, train: bool = False) -> Tensor:
        for layer in self.stem:
            x = layer(x)
        return x

    def readout(self, h: Tensor) -> Tensor:
        for layer in self.head:
            h = layer(h)
        return h

    def states(self, x: Tensor, n_iters: int, train: bool = False) -> list[Tensor]:
        """Feature maps leaving the internal module after each iteration."""
        self._check_iters(n_iters)
        h = self.embed(x, train)
        out = []
        for t in range(n_iters):
            h = self.module_at(t)(h, self.norms_at(t), train)
            out.append(h)
        return out

    def forward_iterations(self, x: Tensor, n_test: int, train: bool = False) -> list[Tensor]:
        self._check_iters(n_test)
        if not self.recurrent:
            return [self.readout(self.states(x, n_test, train)[-1])]
        return [self.readout(h) for h in self.states(x, n_test, train)]

    def __call__(self, x: Tensor, train: bool = False) -> Tensor:
        h = self.states(x, self.spec.iterations, train)[-1]
        return self.readout(h)

    def _check_iters(self, n: int) -> None:
        if n < 1:
            raise ValueError(f"iteration count must be positive, got {n}")
        if not self.recurrent and n != self.spec.iterations:
            raise ValueError(
                f"feed-forward model has exactly {self.spec.iterations} module copies; "
                f"cannot run {n} iterations"
            )

    def layer_shapes(self, input_shape) -> list[tuple]:
        """Output shape of every stem/module/head stage for a given input shape."""
        shapes = []
        h = self.embed(Tensor(np.zeros(input_shape, np.float32)))
        shapes.append(h.shape)
        for t in range(self.spec.iterations):
            # normalisation never changes shapes; skip it so untrained stats are not read
            h = self.module_at(t)(h, None, False)
            shapes.append(h.shape)
        for layer in self.head:
            h = layer(h)
            shapes.append(h.shape)
        return shapes


class _Act:
    def __init__(self, fn, **kw):
        self.fn, self.kw = fn, kw

    def __call__(self, x):
        return self.fn(x, **self.kw)


_RELU = _Act(T.relu)
_FLATTEN = _Act(T.flatten)


class _GlobalAvgPool:
    def __call__(self, x):
        return T.pool2d(x, "avg", x.shape[2], x.shape[2]) if x.shape[2] == x.shape[3] else _bad_pool(x)


def _bad_pool(x):
    raise ValueError(f"global average pooling expects square maps, got {x.shape}")


def build_model(spec: ModelSpec, seed: int) -> Model:
    rng = np.random.default_rng(seed)
    n_copies = 1 if spec.mode == "recurrent" else spec.iterations
    w, d = spec.width, spec.dilation

    if spec.family == "mlp":
        fin = spec.in_channels * spec.input_size * spec.input_size
        stem = [_FLATTEN, Linear(rng, fin, w), _RELU]
        modules = [DenseModule(rng, w) for _ in range(n_copies)]
        head = [Linear(rng, w, spec.num_classes)]
    elif spec.family == "convnet":
        stem = [
            Conv(rng, spec.in_channels, CONVNET_FIRST, padding=0),
            _RELU,
            Conv(rng, CONVNET_FIRST, w, padding=0),
            _RELU,
        ]
        modules = [ConvModule(rng, w, d) for _ in range(n_copies)]
        s = spec.input_size - 4
        if s < 2:
            raise ValueError(f"convnet input size {spec.input_size} too small")
        s = (s // 2 - 2) // 2
        if s < 1:
            raise ValueError(f"convnet input size {spec.input_size} too small")
        head = [
            _Act(T.pool2d, kind="max", window=2, stride=2),
            Conv(rng, w, CONVNET_LAST, padding=0),
            _RELU,
            _Act(T.pool2d, kind="max", window=2, stride=2),
            _FLATTEN,
            Linear(rng, CONVNET_LAST * s * s, spec.num_classes),
        ]
    elif spec.family == "residual":
        stem = [Conv(rng, spec.in_channels, w, stride=2, padding=1), _RELU]
        modules = [ResidualModule(rng, w) for _ in range(n_copies)]
        head = [
            Conv(rng, w, w, stride=2, padding=1),
            _RELU,
            _GlobalAvgPool(),
            _FLATTEN,
            Linear(rng, w, spec.num_classes),
        ]
    else:
        h1, h2, h3 = MAZE_HEAD
        stem = [Conv(rng, spec.in_channels, w, padding=d, dilation=d), _RELU]
        modules = [ResidualModule(rng, w, d) for _ in range(n_copies)]
        head = [
            Conv(rng, w, h1, padding=d, dilation=d),
            _RELU,
            Conv(rng, h1, h2, padding=d, dilation=d),
            _RELU,
            Conv(rng, h2, h3, padding=d, dilation=d),
        ]

    norms = None
    if spec.per_iteration_bn:
        norms = [[BatchNorm(c) for c in modules[0].channels] for _ in range(spec.iterations)]
    return Model(spec, stem, modules, head, norms)


def count_parameters(model: Model) -> int:
    seen = set()
    total = 0
    for p in model.parameters():
        if id(p) not in seen:
            seen.add(id(p))
            total += p.size
    return total


def forward_iterations(model: Model, x: Tensor, n_test: int) -> list[Tensor]:
    return model.forward_iterations(x, n_test)


# ---------------------------------------------------------------------------
# checkpoints

CKPT_MAGIC = b"DTCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def state_arrays(model: Model) -> list[np.ndarray]:
    """Everything a checkpoint stores, in declaration order.

    Parameters first, then for each normalisation layer its running mean,
    running variance and update count.
    """
    arrays = [p.data for p in model.parameters()]
    for st in model.norm_stats():
        arrays += [st.running_mean, st.running_var, np.array([st.updates], np.float32)]
    return arrays


def checkpoint_bytes(model: Model) -> bytes:
    buf = io.BytesIO()
    spec_text = model.spec.to_text().encode("utf-8")
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<HI", CKPT_VERSION, len(spec_text)))
    buf.write(spec_text)
    for arr in state_arrays(model):
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def save_checkpoint(model: Model, path) -> None:
    Path(path).write_bytes(checkpoint_bytes(model))


def parse_checkpoint(buf: bytes) -> Model:
    if buf[:4] != CKPT_MAGIC:
        raise CheckpointError(f"bad magic {buf[:4]!r}, expected {CKPT_MAGIC!r}", 0)
    if len(buf) < 10:
        raise CheckpointError("file too short for header", len(buf))
    version, text_len = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported version {version}", 4)
    off = 10
    if off + text_len > len(buf):
        raise CheckpointError("spec block runs past end of file", off)
    try:
        spec = ModelSpec.from_text(buf[off : off + text_len].decode("utf-8"))
    except (UnicodeDecodeError, ValueError, TypeError) as exc:
        raise CheckpointError(f"unreadable model spec: {exc}", off) from exc
    off += text_len
    model = build_model(spec, 0)
    targets = state_arrays(model)
    loaded = []
    for want in targets:
        if off + 4 > len(buf):
            raise CheckpointError("truncated tensor header", off)
        (rank,) = struct.unpack_from("<I", buf, off)
        if rank != want.ndim:
            raise CheckpointError(f"tensor rank {rank} != expected {want.ndim}", off)
        if off + 4 + 4 * rank > len(buf):
            raise CheckpointError("truncated tensor header", off)
        shape = struct.unpack_from(f"<{rank}I", buf, off + 4)
        if tuple(shape) != want.shape:
            raise CheckpointError(f"tensor shape {shape} != expected {want.shape}", off)
        off += 4 + 4 * rank
        nbytes = 4 * int(np.prod(shape))
        if off + nbytes > len(buf):
            raise CheckpointError("truncated tensor data", off)
        loaded.append(np.frombuffer(buf, "<f4", int(np.prod(shape)), off).reshape(shape).astype(np.float32))
        off += nbytes
    if off != len(buf):
        raise CheckpointError(f"{len(buf) - off} trailing bytes", off)

    params = model.parameters()
    for p, arr in zip(params, loaded):
        p.data = arr
    rest = loaded[len(params) :]
    for k, st in enumerate(model.norm_stats()):
        st.running_mean, st.running_var, upd = rest[3 * k : 3 * k + 3]
        st.updates = int(upd[0])
    return model


def load_checkpoint(path) -> Model:
    return parse_checkpoint(Path(path).read_bytes())
