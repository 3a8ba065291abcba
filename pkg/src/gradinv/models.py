"""Small architectures, their layer typing, and the training loss.

A model is a flat sequence of typed layers (conv / batch-norm / fully
connected); the layer typing drives the per-kind weight schedules of the
weighted matching loss, so it is first-class here rather than an
implementation detail.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CONV = "conv"
BATCH_NORM = "batch_norm"
FULLY_CONNECTED = "fully_connected"

_KIND_CODES = {CONV: 1, BATCH_NORM: 2, FULLY_CONNECTED: 3}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}


@dataclass(frozen=True)
class LayerSpec:
    """One typed layer and the shapes of its parameter tensors."""

    kind: str
    name: str
    shapes: tuple[tuple[int, ...], ...]  # (weight, bias) or (scale, shift)
    kernel: int = 0
    stride: int = 1
    padding: int = 0

    def fan_in(self):
        if self.kind == CONV:
            f, c, kh, kw = self.shapes[0]
            return c * kh * kw
        if self.kind == FULLY_CONNECTED:
            return self.shapes[0][0]
        return 0


@dataclass(frozen=True)
class Architecture:
    name: str
    input_shape: tuple[int, int, int]  # (channels, height, width)
    n_classes: int
    layers: tuple[LayerSpec, ...]

    @property
    def n_layers(self):
        return len(self.layers)


class ModelParams:
    """Ordered, layer-tagged parameter collection for one architecture.

    Also used for model updates (per-layer parameter differences); the two
    share structure and arithmetic. Treat instances as immutable: helpers
    return new collections.
    """

    __slots__ = ("arch", "layers")

    def __init__(self, arch: Architecture, layers):
        layers = [tuple(ts) for ts in layers]
        if len(layers) != len(arch.layers):
            raise ValueError(
                f"expected {len(arch.layers)} layers, got {len(layers)}")
        for spec, ts in zip(arch.layers, layers):
            got = tuple(t.data.shape for t in ts)
            if got != spec.shapes:
                raise ValueError(
                    f"layer {spec.name}: expected shapes {spec.shapes}, got {got}")
        self.arch = arch
        self.layers = layers

    def tensors(self):
        for ts in self.layers:
            yield from ts

    @property
    def n_params(self):
        return sum(t.data.size for t in self.tensors())

    def flat(self):
        return np.concatenate([t.data.reshape(-1) for t in self.tensors()])

    def detached(self, requires_grad=False):
        return ModelParams(self.arch, [
            tuple(Tensor(t.data.copy(), requires_grad=requires_grad) for t in ts)
            for ts in self.layers])


ModelUpdate = ModelParams


def check_same_arch(a: ModelParams, b: ModelParams, what: str):
    if a.arch.name != b.arch.name or \
            tuple(s.shapes for s in a.arch.layers) != tuple(s.shapes for s in b.arch.layers):
        raise ValueError(f"{what}: architecture mismatch "
                         f"({a.arch.name} vs {b.arch.name})")


def params_zip(a: ModelParams, b: ModelParams, fn) -> ModelParams:
    check_same_arch(a, b, "params_zip")
    return ModelParams(a.arch, [
        tuple(fn(x, y) for x, y in zip(ta, tb))
        for ta, tb in zip(a.layers, b.layers)])


def params_sub(a: ModelParams, b: ModelParams) -> ModelParams:
    return params_zip(a, b, ad.sub)


def params_add(a: ModelParams, b: ModelParams) -> ModelParams:
    return params_zip(a, b, ad.add)


def params_scale(a: ModelParams, c: float) -> ModelParams:
    return ModelParams(a.arch, [
        tuple(ad.scale(t, c) for t in ts) for ts in a.layers])


def params_allclose(a: ModelParams, b: ModelParams, atol=0.0, rtol=0.0) -> bool:
    return all(np.allclose(x.data, y.data, atol=atol, rtol=rtol)
               for ta, tb in zip(a.layers, b.layers)
               for x, y in zip(ta, tb))


def params_max_abs_diff(a: ModelParams, b: ModelParams) -> float:
    return max(float(np.abs(x.data - y.data).max())
               for ta, tb in zip(a.layers, b.layers)
               for x, y in zip(ta, tb))


# ---------------------------------------------------------------------------
# architectures


def make_mlp_small(input_shape, n_classes, hidden=32):
    d_x = int(np.prod(input_shape))
    layers = (
        LayerSpec(FULLY_CONNECTED, "fc1", ((d_x, hidden), (hidden,))),
        LayerSpec(FULLY_CONNECTED, "fc2", ((hidden, n_classes), (n_classes,))),
    )
    return Architecture("mlp_small", tuple(input_shape), n_classes, layers)


def make_cnn_small(input_shape, n_classes, width=8):
    c, h, w = input_shape
    flat = width * h * w  # stride-1, padding-1 convs keep the spatial size
    layers = (
        LayerSpec(CONV, "conv1", ((width, c, 3, 3), (width,)),
                  kernel=3, stride=1, padding=1),
        LayerSpec(BATCH_NORM, "bn1", ((width,), (width,))),
        LayerSpec(CONV, "conv2", ((width, width, 3, 3), (width,)),
                  kernel=3, stride=1, padding=1),
        LayerSpec(BATCH_NORM, "bn2", ((width,), (width,))),
        LayerSpec(FULLY_CONNECTED, "fc", ((flat, n_classes), (n_classes,))),
    )
    return Architecture("cnn_small", tuple(input_shape), n_classes, layers)


def make_fc_single(input_shape, n_classes):
    """One fully connected layer with bias; the closed-form recovery model."""
    d_x = int(np.prod(input_shape))
    layers = (
        LayerSpec(FULLY_CONNECTED, "fc", ((d_x, n_classes), (n_classes,))),
    )
    return Architecture("fc_single", tuple(input_shape), n_classes, layers)


_ARCHS = {
    "mlp_small": make_mlp_small,
    "cnn_small": make_cnn_small,
}


def init_params(arch: Architecture, seed: int) -> ModelParams:
    """Seeded init: conv/fc uniform on [-a, a] with a = 1/sqrt(fan_in);
    batch-norm scale 1, shift 0."""
    rng = np.random.default_rng(seed)
    layers = []
    for spec in arch.layers:
        if spec.kind == BATCH_NORM:
            layers.append((Tensor(np.ones(spec.shapes[0]), requires_grad=True),
                           Tensor(np.zeros(spec.shapes[1]), requires_grad=True)))
            continue
        a = 1.0 / np.sqrt(spec.fan_in())
        layers.append(tuple(
            Tensor(rng.uniform(-a, a, size=shape), requires_grad=True)
            for shape in spec.shapes))
    return ModelParams(arch, layers)


def build_model(arch_name: str, seed: int, input_shape=(3, 8, 8), n_classes=10):
    factory = _ARCHS.get(arch_name)
    if factory is None:
        raise ValueError(f"unknown architecture {arch_name!r}; "
                         f"known: {sorted(_ARCHS)}")
    arch = factory(input_shape, n_classes)
    return arch, init_params(arch, seed)


def forward(params: ModelParams, x) -> Tensor:
    """Logits of the model on a batch ``x`` of shape (M, C, H, W)."""
    h = ad.as_tensor(x)
    for spec, ts in zip(params.arch.layers, params.layers):
        if spec.kind == CONV:
            h = ad.conv2d(h, ts[0], ts[1], stride=spec.stride,
                          padding=spec.padding)
        elif spec.kind == BATCH_NORM:
            h = ad.batch_norm_train(h, ts[0], ts[1])
        else:
            if h.data.ndim > 2:
                h = ad.reshape(h, (h.data.shape[0], -1))
            h = ad.add(ad.matmul(h, ts[0]), ts[1])
    return h


def forward_loss(params: ModelParams, x, y) -> Tensor:
    """Mean softmax cross-entropy of the model on a batch.

    ``y`` is an integer label vector or a per-sample distribution tensor;
    the loss is differentiable w.r.t. the parameters, ``x``, and soft ``y``.
    """
    return ad.softmax_cross_entropy(forward(params, x), y)


def layer_partition(arch: Architecture):
    """0-based layer indices of each kind, in forward order."""
    conv, bn, fc = [], [], []
    for i, spec in enumerate(arch.layers):
        {CONV: conv, BATCH_NORM: bn, FULLY_CONNECTED: fc}[spec.kind].append(i)
    return conv, bn, fc


# ---------------------------------------------------------------------------
# binary serialization

_MAGIC = b"GIMP"


def save_params(params: ModelParams, path):
    """Flat binary: header (arch name, layer kinds/shapes) + float64 payload."""
    arch = params.arch
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        name = arch.name.encode()
        fh.write(struct.pack("<HH", 1, len(name)))
        fh.write(name)
        fh.write(struct.pack("<III", *arch.input_shape))
        fh.write(struct.pack("<II", arch.n_classes, len(arch.layers)))
        for spec, ts in zip(arch.layers, params.layers):
            fh.write(struct.pack("<BB", _KIND_CODES[spec.kind], len(ts)))
            for t in ts:
                fh.write(struct.pack("<B", t.data.ndim))
                fh.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        for t in params.tensors():
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_params(path, arch: Architecture) -> ModelParams:
    """Load a parameter file, checking it matches ``arch``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    off = 0
    if raw[:4] != _MAGIC:
        raise ValueError(f"{path}: not a model parameter file")
    off = 4
    version, name_len = struct.unpack_from("<HH", raw, off)
    off += 4
    if version != 1:
        raise ValueError(f"{path}: unsupported version {version}")
    name = raw[off:off + name_len].decode()
    off += name_len
    input_shape = struct.unpack_from("<III", raw, off)
    off += 12
    n_classes, n_layers = struct.unpack_from("<II", raw, off)
    off += 8
    if (name, input_shape, n_classes, n_layers) != (
            arch.name, arch.input_shape, arch.n_classes, len(arch.layers)):
        raise ValueError(
            f"{path}: file is {name}/{input_shape}/{n_classes} with "
            f"{n_layers} layers, expected {arch.name}/{arch.input_shape}/"
            f"{arch.n_classes} with {len(arch.layers)}")
    shapes = []
    for spec in arch.layers:
        kind_code, n_tensors = struct.unpack_from("<BB", raw, off)
        off += 2
        if _CODE_KINDS[kind_code] != spec.kind:
            raise ValueError(f"{path}: layer kind mismatch at {spec.name}")
        layer_shapes = []
        for _ in range(n_tensors):
            (ndim,) = struct.unpack_from("<B", raw, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", raw, off)
            off += 4 * ndim
            layer_shapes.append(shape)
        if tuple(layer_shapes) != spec.shapes:
            raise ValueError(f"{path}: shape mismatch at layer {spec.name}")
        shapes.append(layer_shapes)
    layers = []
    for layer_shapes in shapes:
        ts = []
        for shape in layer_shapes:
            n = int(np.prod(shape))
            arr = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            ts.append(Tensor(arr.copy(), requires_grad=True))
        layers.append(tuple(ts))
    if off != len(raw):
        raise ValueError(f"{path}: trailing bytes")
    return ModelParams(arch, layers)
