"""Small residual encoders parameterised by rotation-group order.

``group_order=1`` is the conventional CNN baseline; 4 and 8 are the steerable
variants. All orders share one code path: lift -> residual group-conv stages
-> orientation pool -> spatial pool -> linear head -> L2 normalisation.

Downsampling between stages is a 2x2 average pool in front of the first
block of each stage (see :func:`rotvpr.tensor_core.avg_pool2`).
"""

from __future__ import annotations

import hashlib
import io
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import aggregation as agg
from . import equivariant as eq
from . import tensor_core as tc

MODEL_MAGIC = b"EPM1"
MODEL_VERSION = 1


@dataclass
class ModelConfig:
    group_order: int = 4
    stage_widths: tuple[int, ...] = (16, 32, 64)
    blocks_per_stage: int = 2
    kernel_size: int = 3
    input_size: int = 64
    descriptor_dim: int = 512
    pooling: str = "gem"
    orientation_pool_mode: str = "max"
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        self.validate()

    def validate(self) -> None:
        if self.group_order not in eq.SUPPORTED_ORDERS:
            raise ValueError(f"group_order must be one of {eq.SUPPORTED_ORDERS}")
        if not self.stage_widths or any(w <= 0 for w in self.stage_widths):
            raise ValueError("stage_widths must be positive")
        if any(b < a for a, b in zip(self.stage_widths, self.stage_widths[1:])):
            raise ValueError("stage_widths must be non-decreasing")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise ValueError("kernel_size must be odd")
        if self.descriptor_dim < 8:
            raise ValueError("descriptor_dim must be >= 8")
        if self.pooling not in ("gem", "avg"):
            raise ValueError(f"pooling must be 'gem' or 'avg', got {self.pooling!r}")
        if self.orientation_pool_mode not in ("max", "mean"):
            raise ValueError("orientation_pool_mode must be 'max' or 'mean'")
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        down = 2 ** (len(self.stage_widths) - 1)
        if self.input_size % down:
            raise ValueError(f"input_size must be divisible by {down}")

    def to_lines(self) -> list[str]:
        out = []
        for k, v in asdict(self).items():
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            out.append(f"{k}={v}")
        return out

    @classmethod
    def from_mapping(cls, kv: dict[str, str]) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        unknown = set(kv) - set(types)
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        args = {}
        for k, v in kv.items():
            if k == "stage_widths":
                args[k] = tuple(int(x) for x in str(v).split(","))
            elif k in ("pooling", "orientation_pool_mode", "dtype"):
                args[k] = str(v)
            else:
                args[k] = int(v)
        return cls(**args)


@dataclass
class LayerGradients:
    """Parameter gradients keyed by parameter name plus the input gradient."""

    params: dict[str, np.ndarray]
    input: np.ndarray | None = None


# -- layers ---------------------------------------------------------------
# Each layer reads its parameters from the model by "<layer>.<param>" names.

class _Layer:
    name = ""

    def param_shapes(self) -> dict[str, tuple]:
        return {}

    def buffer_shapes(self) -> dict[str, tuple]:
        return {}

    def init(self, model, rng) -> None:
        pass


class _LiftConv(_Layer):
    def __init__(self, name, cin, cout, k, group):
        self.name, self.cin, self.cout, self.k, self.group = name, cin, cout, k, group

    def param_shapes(self):
        return {f"{self.name}.weight": (self.cout, self.cin, self.k, self.k)}

    def init(self, model, rng):
        std = np.sqrt(2.0 / (self.cin * self.k * self.k))
        model.params[f"{self.name}.weight"][...] = rng.standard_normal(
            self.param_shapes()[f"{self.name}.weight"]) * std

    def forward(self, x, model, training):
        w = model.params[f"{self.name}.weight"]
        return eq.lift_conv(x, w, self.group, 1, self.k // 2), x

    def backward(self, dy, x, model):
        w = model.params[f"{self.name}.weight"]
        dx, dw = eq.lift_conv_backward(dy, x, w, self.group, 1, self.k // 2)
        return dx, {f"{self.name}.weight": dw}


class _GroupConv(_Layer):
    def __init__(self, name, cin, cout, k, group):
        self.name, self.cin, self.cout, self.k, self.group = name, cin, cout, k, group

    def param_shapes(self):
        return {f"{self.name}.weight": (self.cout, self.cin, self.group.order, self.k, self.k)}

    def init(self, model, rng):
        std = np.sqrt(2.0 / (self.cin * self.group.order * self.k * self.k))
        model.params[f"{self.name}.weight"][...] = rng.standard_normal(
            self.param_shapes()[f"{self.name}.weight"]) * std

    def forward(self, x, model, training):
        w = model.params[f"{self.name}.weight"]
        return eq.group_conv(x, w, self.group, 1, self.k // 2), x

    def backward(self, dy, x, model):
        w = model.params[f"{self.name}.weight"]
        dx, dw = eq.group_conv_backward(dy, x, w, self.group, 1, self.k // 2)
        return dx, {f"{self.name}.weight": dw}


class _BatchNorm(_Layer):
    eps = 1e-5

    def __init__(self, name, c, momentum=0.1):
        self.name, self.c, self.momentum = name, c, momentum

    def param_shapes(self):
        return {f"{self.name}.gamma": (self.c,), f"{self.name}.beta": (self.c,)}

    def buffer_shapes(self):
        return {f"{self.name}.running_mean": (self.c,), f"{self.name}.running_var": (self.c,)}

    def init(self, model, rng):
        model.params[f"{self.name}.gamma"][...] = 1.0
        model.buffers[f"{self.name}.running_var"][...] = 1.0

    def _running(self, model):
        return {"mean": model.buffers[f"{self.name}.running_mean"],
                "var": model.buffers[f"{self.name}.running_var"]}

    def forward(self, x, model, training):
        y = tc.normalize_batch(x, model.params[f"{self.name}.gamma"],
                               model.params[f"{self.name}.beta"], self.eps, training,
                               self._running(model), self.momentum)
        return y, (x, training)

    def backward(self, dy, cache, model):
        x, training = cache
        dx, dg, db = tc.normalize_batch_backward(dy, x, model.params[f"{self.name}.gamma"],
                                                 self.eps, training, self._running(model))
        return dx, {f"{self.name}.gamma": dg, f"{self.name}.beta": db}


class _ResidualBlock(_Layer):
    def __init__(self, name, cin, cout, k, group, downsample, momentum=0.1):
        self.name, self.downsample = name, downsample
        self.conv1 = _GroupConv(f"{name}.conv1", cin, cout, k, group)
        self.bn1 = _BatchNorm(f"{name}.bn1", cout, momentum)
        self.conv2 = _GroupConv(f"{name}.conv2", cout, cout, k, group)
        self.bn2 = _BatchNorm(f"{name}.bn2", cout, momentum)
        self.shortcut = _GroupConv(f"{name}.shortcut", cin, cout, 1, group) if cin != cout else None

    def _parts(self):
        return [p for p in (self.conv1, self.bn1, self.conv2, self.bn2, self.shortcut) if p]

    def param_shapes(self):
        return {k: v for p in self._parts() for k, v in p.param_shapes().items()}

    def buffer_shapes(self):
        return {k: v for p in self._parts() for k, v in p.buffer_shapes().items()}

    def init(self, model, rng):
        for p in self._parts():
            p.init(model, rng)

    def forward(self, x, model, training):
        if self.downsample:
            x = tc.avg_pool2(x)
        h, c1 = self.conv1.forward(x, model, training)
        h, b1 = self.bn1.forward(h, model, training)
        r1 = h
        h = tc.relu(h)
        h, c2 = self.conv2.forward(h, model, training)
        h, b2 = self.bn2.forward(h, model, training)
        if self.shortcut is not None:
            sc, cs = self.shortcut.forward(x, model, training)
        else:
            sc, cs = x, None
        pre = h + sc
        return tc.relu(pre), (c1, b1, r1, c2, b2, cs, pre)

    def backward(self, dy, cache, model):
        c1, b1, r1, c2, b2, cs, pre = cache
        grads = {}
        dpre = tc.relu_backward(dy, pre)
        dh, g = self.bn2.backward(dpre, b2, model)
        grads.update(g)
        dh, g = self.conv2.backward(dh, c2, model)
        grads.update(g)
        dh = tc.relu_backward(dh, r1)
        dh, g = self.bn1.backward(dh, b1, model)
        grads.update(g)
        dx, g = self.conv1.backward(dh, c1, model)
        grads.update(g)
        if self.shortcut is not None:
            dsc, g = self.shortcut.backward(dpre, cs, model)
            grads.update(g)
            dx = dx + dsc
        else:
            dx = dx + dpre
        if self.downsample:
            dx = tc.avg_pool2_backward(dx)
        return dx, grads


class _Relu(_Layer):
    name = "relu"

    def forward(self, x, model, training):
        return tc.relu(x), x

    def backward(self, dy, x, model):
        return tc.relu_backward(dy, x), {}


class _OrientationPool(_Layer):
    name = "orientation_pool"

    def __init__(self, mode):
        self.mode = mode

    def forward(self, x, model, training):
        return eq.orientation_pool(x, self.mode), x

    def backward(self, dy, x, model):
        return eq.orientation_pool_backward(dy, x, self.mode), {}


class _Gem(_Layer):
    eps = 1e-6

    def __init__(self, name, p0=3.0):
        self.name, self.p0 = name, p0

    def param_shapes(self):
        return {f"{self.name}.p": (1,)}

    def init(self, model, rng):
        model.params[f"{self.name}.p"][...] = self.p0

    def forward(self, x, model, training):
        p = float(model.params[f"{self.name}.p"][0])
        return agg.gem_pool(x, p, self.eps), x

    def backward(self, dy, x, model):
        p = float(model.params[f"{self.name}.p"][0])
        dx, dp = agg.gem_pool_backward(dy, x, p, self.eps)
        return dx, {f"{self.name}.p": np.array([dp], dtype=x.dtype)}


class _AvgPool(_Layer):
    name = "avg_pool"

    def forward(self, x, model, training):
        return x.mean(axis=(-2, -1)), x.shape

    def backward(self, dy, shape, model):
        return np.broadcast_to(dy[..., None, None] / (shape[-1] * shape[-2]), shape).copy(), {}


class _Linear(_Layer):
    def __init__(self, name, din, dout):
        self.name, self.din, self.dout = name, din, dout

    def param_shapes(self):
        return {f"{self.name}.weight": (self.dout, self.din), f"{self.name}.bias": (self.dout,)}

    def init(self, model, rng):
        model.params[f"{self.name}.weight"][...] = (
            rng.standard_normal((self.dout, self.din)) / np.sqrt(self.din))

    def forward(self, x, model, training):
        return tc.linear(x, model.params[f"{self.name}.weight"],
                         model.params[f"{self.name}.bias"]), x

    def backward(self, dy, x, model):
        dx, dw, db = tc.linear_backward(dy, x, model.params[f"{self.name}.weight"])
        return dx, {f"{self.name}.weight": dw, f"{self.name}.bias": db}


class _L2Norm(_Layer):
    name = "l2"

    def forward(self, x, model, training):
        return agg.l2_normalize(x), x

    def backward(self, dy, x, model):
        return agg.l2_normalize_backward(dy, x), {}


# -- model ----------------------------------------------------------------

@dataclass
class Model:
    config: ModelConfig
    layers: list
    params: dict[str, np.ndarray] = field(default_factory=dict)
    buffers: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)

    @property
    def group(self) -> eq.GroupSpec:
        return eq.GroupSpec(self.config.group_order)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name in self.params:
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name]).tobytes())
        return h.hexdigest()

    def forward(self, x: np.ndarray, training: bool = False, keep: list | None = None):
        """Run a batch ``[B, 3, S, S]`` through the network.

        Returns ``(descriptors, tape)``; pass ``tape`` to :meth:`backward`.
        If ``keep`` is a list, every layer's output is appended to it.
        """
        x = np.asarray(x, dtype=self.dtype)
        tape = []
        for layer in self.layers:
            x, cache = layer.forward(x, self, training)
            tape.append(cache)
            if keep is not None:
                keep.append(x)
        return x, tape

    def backward(self, tape, d_out: np.ndarray) -> LayerGradients:
        grads = {}
        d = d_out
        for layer, cache in zip(reversed(self.layers), reversed(tape)):
            d, g = layer.backward(d, cache, self)
            grads.update(g)
        ordered = {name: grads[name].astype(self.dtype, copy=False) for name in self.params}
        return LayerGradients(ordered, d)


def build_layers(cfg: ModelConfig) -> list:
    group = eq.GroupSpec(cfg.group_order)
    k = cfg.kernel_size
    w0 = cfg.stage_widths[0]
    layers = [_LiftConv("lift", 3, w0, k, group), _BatchNorm("lift_bn", w0), _Relu()]
    cin = w0
    for s, width in enumerate(cfg.stage_widths):
        for b in range(cfg.blocks_per_stage):
            layers.append(_ResidualBlock(f"stage{s}.block{b}", cin, width, k, group,
                                         downsample=(s > 0 and b == 0)))
            cin = width
    layers.append(_OrientationPool(cfg.orientation_pool_mode))
    layers.append(_Gem("gem") if cfg.pooling == "gem" else _AvgPool())
    layers.append(_Linear("head", cin, cfg.descriptor_dim))
    layers.append(_L2Norm())
    return layers


def _allocate(cfg: ModelConfig) -> Model:
    layers = build_layers(cfg)
    dtype = np.dtype(cfg.dtype)
    model = Model(cfg, layers)
    for layer in layers:
        for name, shape in layer.param_shapes().items():
            model.params[name] = np.zeros(shape, dtype=dtype)
        for name, shape in layer.buffer_shapes().items():
            model.buffers[name] = np.zeros(shape, dtype=dtype)
    return model


def build_model(config: ModelConfig) -> Model:
    """Allocate and He-initialise a model deterministically from ``config.seed``."""
    config.validate()
    model = _allocate(config)
    rng = np.random.default_rng(config.seed)
    for layer in model.layers:
        layer.init(model, rng)
    return model


def encode(model: Model, image: np.ndarray) -> np.ndarray:
    """Encode one ``[3, S, S]`` image into a unit-norm descriptor."""
    s = model.config.input_size
    if image.shape != (3, s, s):
        raise ValueError(f"expected image of shape (3, {s}, {s}), got {image.shape}")
    desc, _ = model.forward(image[None], training=False)
    return desc[0]


def encode_batch(model: Model, images: np.ndarray, batch_size: int = 16, jobs: int = 1) -> np.ndarray:
    """Encode ``[B, 3, S, S]`` in inference mode; chunks may fan out over threads."""
    s = model.config.input_size
    if images.ndim != 4 or images.shape[1:] != (3, s, s):
        raise ValueError(f"expected images of shape (B, 3, {s}, {s}), got {images.shape}")
    chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
    run = lambda c: model.forward(c, training=False)[0]  # noqa: E731
    if jobs > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(jobs) as pool:
            outs = list(pool.map(run, chunks))
    else:
        outs = [run(c) for c in chunks]
    if not outs:
        return np.zeros((0, model.config.descriptor_dim), dtype=model.dtype)
    return np.concatenate(outs)


def forward_backward(model: Model, batch: np.ndarray, labels: np.ndarray, loss_fn):
    """Training-mode forward and backward pass.

    ``loss_fn(descriptors, labels)`` returns ``(loss, d_loss/d_descriptors)``.
    """
    labels = np.asarray(labels)
    if len(batch) < 2 or len(np.unique(labels)) < 2:
        raise ValueError("metric-learning batch needs at least 2 images and 2 distinct labels")
    desc, tape = model.forward(batch, training=True)
    loss, d_desc = loss_fn(desc, labels)
    if not np.isfinite(loss):
        return float(loss), None
    return float(loss), model.backward(tape, np.asarray(d_desc, dtype=model.dtype))


# -- persistence ------------------------------------------------------------

class ModelFormatError(ValueError):
    pass


def save_model(model: Model, path: str | os.PathLike) -> None:
    """Write an EPM1 checkpoint atomically (temp file + rename)."""
    path = Path(path)
    lines = model.config.to_lines() + [f"meta.{k}={v}" for k, v in model.meta.items()]
    text = "\n".join(lines).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<HI", MODEL_VERSION, len(text)))
    buf.write(text)
    for arr in list(model.params.values()) + list(model.buffers.values()):
        tc.write_tensor(buf, arr)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)


def load_model(path: str | os.PathLike) -> Model:
    data = Path(path).read_bytes()
    if data[:4] != MODEL_MAGIC:
        raise ModelFormatError(f"bad model magic {data[:4]!r}")
    if len(data) < 10:
        raise ModelFormatError("truncated model header")
    version, n = struct.unpack("<HI", data[4:10])
    if version != MODEL_VERSION:
        raise ModelFormatError(f"unsupported model version {version}")
    text = data[10:10 + n]
    if len(text) < n:
        raise ModelFormatError("truncated model config")
    kv, meta = {}, {}
    for line in text.decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        if key.startswith("meta."):
            meta[key[5:]] = value
        else:
            kv[key] = value
    model = _allocate(ModelConfig.from_mapping(kv))
    model.meta = meta
    fh = io.BytesIO(data[10 + n:])
    try:
        for store in (model.params, model.buffers):
            for name, arr in store.items():
                t = tc.read_tensor(fh)
                if t.shape != arr.shape:
                    raise ModelFormatError(f"{name}: shape {t.shape} != expected {arr.shape}")
                store[name] = t.astype(model.dtype)
    except (EOFError, ValueError) as exc:
        raise ModelFormatError(f"corrupt model file: {exc}") from exc
    if fh.read(1):
        raise ModelFormatError("trailing bytes after parameters")
    return model
