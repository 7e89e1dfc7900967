"""A small 3D convolutional network engine on plain numpy.

Networks are declarative: a NetworkSpec is a tuple of layer descriptions
plus the input geometry, and all shape checking happens at construction.
Weights live outside the spec in a WeightSet, so the same spec can be
evaluated with different parameter values (checkpointing, finite-difference
probing).

Inputs are batched as (batch, channels, depth, height, width). Convolutions
are fixed at kernel 3, stride 1, pad 1 (shape preserving); pooling uses
stride equal to its kernel. The only stochastic layer is Dropout, which in
"train" mode draws its keep mask from the generator passed to the call;
replaying the same generator state replays the same masks.
"""

from __future__ import annotations

import hashlib
import struct
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatError

PROB_FLOOR = 1e-15


@dataclass(frozen=True)
class Convolution3D:
    filters: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1

    def __post_init__(self):
        if self.filters <= 0:
            raise ValueError(f"filters must be positive, got {self.filters}")
        if (self.kernel, self.stride, self.pad) != (3, 1, 1):
            raise ValueError("only kernel=3, stride=1, pad=1 convolutions are supported")


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Pooling:
    mode: str
    kernel: int

    def __post_init__(self):
        if self.mode not in ("max", "avg"):
            raise ValueError(f"pooling mode must be 'max' or 'avg', got {self.mode!r}")
        if self.kernel not in (2, 4):
            raise ValueError(f"pooling kernel must be 2 or 4, got {self.kernel}")


@dataclass(frozen=True)
class Dropout:
    ratio: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.ratio < 1.0:
            raise ValueError(f"dropout ratio must be in [0, 1), got {self.ratio}")


@dataclass(frozen=True)
class FullyConnected:
    outputs: int

    def __post_init__(self):
        if self.outputs <= 0:
            raise ValueError(f"outputs must be positive, got {self.outputs}")


@dataclass(frozen=True)
class Softmax:
    pass


LayerSpec = Convolution3D | ReLU | Pooling | Dropout | FullyConnected | Softmax


class NetworkSpec:
    """An immutable, shape-checked network description.

    Raises at construction if any layer cannot consume its input shape, if
    pooling does not divide the spatial side, or if the network does not end
    FullyConnected(2) -> Softmax.
    """

    def __init__(self, in_channels: int, side: int, layers):
        if in_channels <= 0 or side <= 0:
            raise ValueError("in_channels and side must be positive")
        layers = tuple(layers)
        if len(layers) < 2 or not isinstance(layers[-1], Softmax) \
                or not isinstance(layers[-2], FullyConnected):
            raise ValueError("network must end FullyConnected -> Softmax")
        if layers[-2].outputs != 2:
            raise ValueError("final FullyConnected must have 2 outputs")
        self.in_channels = in_channels
        self.side = side
        self.layers = layers
        self.param_shapes: list[dict[str, tuple[int, ...]] | None] = []

        channels, cur_side = in_channels, side
        flat: int | None = None
        for i, layer in enumerate(layers):
            if isinstance(layer, Softmax) and i != len(layers) - 1:
                raise ValueError("softmax must be the final layer")
            if isinstance(layer, Convolution3D):
                if flat is not None:
                    raise ValueError("convolution after flattening")
                self.param_shapes.append(
                    {"w": (layer.filters, channels, 3, 3, 3), "b": (layer.filters,)}
                )
                channels = layer.filters
            elif isinstance(layer, Pooling):
                if flat is not None:
                    raise ValueError("pooling after flattening")
                if cur_side % layer.kernel:
                    raise ValueError(
                        f"layer {i}: side {cur_side} not divisible by pool kernel {layer.kernel}"
                    )
                cur_side //= layer.kernel
                self.param_shapes.append(None)
            elif isinstance(layer, FullyConnected):
                features = flat if flat is not None else channels * cur_side ** 3
                self.param_shapes.append({"w": (layer.outputs, features), "b": (layer.outputs,)})
                flat = layer.outputs
            elif isinstance(layer, (ReLU, Dropout, Softmax)):
                self.param_shapes.append(None)
            else:
                raise TypeError(f"unknown layer {layer!r}")

    def __repr__(self):
        return f"NetworkSpec(in={self.in_channels}, side={self.side}, layers={self.layers!r})"

    def canonical(self) -> str:
        parts = [f"in={self.in_channels}", f"side={self.side}"]
        for layer in self.layers:
            if isinstance(layer, Convolution3D):
                parts.append(f"conv3d(filters={layer.filters},kernel=3,stride=1,pad=1)")
            elif isinstance(layer, ReLU):
                parts.append("relu")
            elif isinstance(layer, Pooling):
                parts.append(f"pool({layer.mode},{layer.kernel})")
            elif isinstance(layer, Dropout):
                parts.append(f"dropout({layer.ratio!r})")
            elif isinstance(layer, FullyConnected):
                parts.append(f"fc({layer.outputs})")
            else:
                parts.append("softmax")
        return ";".join(parts)

    def fingerprint(self) -> bytes:
        return hashlib.sha256(self.canonical().encode("utf-8")).digest()

    def parameter_count(self) -> int:
        total = 0
        for shapes in self.param_shapes:
            if shapes:
                total += sum(int(np.prod(s)) for s in shapes.values())
        return total


def build_final_model(scheme_channels: int, grid_side: int, base_width: int = 32,
                      dropout_ratio: float = 0.5) -> NetworkSpec:
    """The pose-classification architecture: three conv/pool stages with
    doubling widths, dropout, and a two-way softmax head. The spatial side
    is pooled down by 8, so it must be divisible by 8."""
    if grid_side % 8:
        raise ValueError(f"grid side {grid_side} is not divisible by 8")
    if base_width <= 0:
        raise ValueError(f"base_width must be positive, got {base_width}")
    layers = []
    for stage in range(3):
        layers.append(Convolution3D(filters=base_width * (2 ** stage)))
        layers.append(ReLU())
        layers.append(Pooling(mode="max", kernel=2))
    layers.append(Dropout(ratio=dropout_ratio))
    layers.append(FullyConnected(outputs=2))
    layers.append(Softmax())
    return NetworkSpec(scheme_channels, grid_side, layers)


class WeightSet:
    """Per-layer parameter arrays, aligned index-for-index with spec.layers.

    Layers without parameters hold None. Arrays are mutable; training
    updates them in place.
    """

    def __init__(self, layers: list[dict[str, np.ndarray] | None]):
        self.layers = layers

    def copy(self) -> "WeightSet":
        return WeightSet(
            [None if p is None else {k: v.copy() for k, v in p.items()} for p in self.layers]
        )

    def astype(self, dtype) -> "WeightSet":
        return WeightSet(
            [None if p is None else {k: v.astype(dtype) for k, v in p.items()}
             for p in self.layers]
        )

    def zeros_like(self) -> "WeightSet":
        return WeightSet(
            [None if p is None else {k: np.zeros_like(v) for k, v in p.items()}
             for p in self.layers]
        )

    def iter_params(self):
        for i, params in enumerate(self.layers):
            if params is None:
                continue
            for key in sorted(params):
                yield i, key, params[key]

    @property
    def dtype(self):
        for _, _, arr in self.iter_params():
            return arr.dtype
        return np.dtype(np.float64)


def init_weights(spec: NetworkSpec, rng: np.random.Generator,
                 dtype=np.float64) -> WeightSet:
    """Uniform(-sqrt(3/fan_in), +sqrt(3/fan_in)) weights, zero biases."""
    layers: list[dict[str, np.ndarray] | None] = []
    for shapes in spec.param_shapes:
        if shapes is None:
            layers.append(None)
            continue
        w_shape = shapes["w"]
        fan_in = int(np.prod(w_shape[1:]))
        bound = float(np.sqrt(3.0 / fan_in))
        w = rng.uniform(-bound, bound, size=w_shape).astype(dtype)
        b = np.zeros(shapes["b"], dtype=dtype)
        layers.append({"w": w, "b": b})
    return WeightSet(layers)


def _check_weights(spec: NetworkSpec, weights: WeightSet):
    if len(weights.layers) != len(spec.param_shapes):
        raise ValueError(
            f"weight set has {len(weights.layers)} layers, spec has {len(spec.param_shapes)}"
        )
    for i, shapes in enumerate(spec.param_shapes):
        params = weights.layers[i]
        if shapes is None:
            if params is not None:
                raise ValueError(f"layer {i} takes no parameters")
            continue
        if params is None or set(params) != set(shapes):
            raise ValueError(f"layer {i}: missing parameter arrays")
        for key, shape in shapes.items():
            if params[key].shape != shape:
                raise ValueError(
                    f"layer {i} {key}: shape {params[key].shape}, expected {shape}"
                )


def _conv_cols(x: np.ndarray) -> np.ndarray:
    # im2col for the fixed 3x3x3/pad-1 case: (B*D*H*W, C*27).
    b, c, d, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3, 3), axis=(2, 3, 4))
    cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(b * d * h * w, c * 27)
    return np.ascontiguousarray(cols)


def _conv_forward(x, w, b):
    batch, _, d, h, wd = x.shape
    filters = w.shape[0]
    cols = _conv_cols(x)
    y = cols @ w.reshape(filters, -1).T
    y = y.reshape(batch, d, h, wd, filters).transpose(0, 4, 1, 2, 3)
    y = y + b[None, :, None, None, None]
    return y, cols


def _conv_backward(dy, cols, x_shape, w):
    batch, channels, d, h, wd = x_shape
    filters = w.shape[0]
    dy_mat = dy.transpose(0, 2, 3, 4, 1).reshape(-1, filters)
    dw = (dy_mat.T @ cols).reshape(w.shape)
    db = dy.sum(axis=(0, 2, 3, 4))
    w_flip = w[:, :, ::-1, ::-1, ::-1].transpose(1, 0, 2, 3, 4)
    cols_dy = _conv_cols(dy)
    dx = cols_dy @ w_flip.reshape(channels, -1).T
    dx = dx.reshape(batch, d, h, wd, channels).transpose(0, 4, 1, 2, 3)
    return np.ascontiguousarray(dx), dw, db


def _pool_windows(x, k):
    b, c, d, h, w = x.shape
    view = x.reshape(b, c, d // k, k, h // k, k, w // k, k)
    return view.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(
        b, c, d // k, h // k, w // k, k ** 3
    )


def _pool_unwindow(gw, x_shape, k):
    b, c, d, h, w = x_shape
    gw = gw.reshape(b, c, d // k, h // k, w // k, k, k, k)
    gw = gw.transpose(0, 1, 2, 5, 3, 6, 4, 7)
    return gw.reshape(b, c, d, h, w)


def _softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def _nll(probs, labels):
    picked = probs[np.arange(probs.shape[0]), labels]
    if np.any(picked < PROB_FLOOR):
        warnings.warn("predicted probability clamped to avoid log(0)", RuntimeWarning)
        picked = np.maximum(picked, PROB_FLOOR)
    return float(np.mean(-np.log(picked)))


def _check_mode(spec, mode, rng):
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be 'train' or 'test', got {mode!r}")
    if mode == "train" and rng is None \
            and any(isinstance(l, Dropout) and l.ratio > 0 for l in spec.layers):
        raise ValueError("train mode with dropout requires an rng")


def _as_batch(spec, x):
    x = np.asarray(x)
    squeeze = x.ndim == 4
    if squeeze:
        x = x[None]
    expected = (spec.in_channels, spec.side, spec.side, spec.side)
    if x.ndim != 5 or x.shape[1:] != expected:
        raise ValueError(f"input shape {x.shape} does not match spec {expected}")
    return x, squeeze


def _run_layers(spec, weights, x, mode, rng, keep_cache):
    """Forward pass up to (not including) the final Softmax.

    Returns (logits, caches); caches hold whatever each layer's backward
    needs, in layer order.
    """
    caches: list = []
    act = x
    for i, layer in enumerate(spec.layers[:-1]):
        if isinstance(layer, Convolution3D):
            params = weights.layers[i]
            y, cols = _conv_forward(act, params["w"], params["b"])
            caches.append((act.shape, cols) if keep_cache else None)
            act = y
        elif isinstance(layer, ReLU):
            mask = act > 0
            caches.append(mask if keep_cache else None)
            act = act * mask
        elif isinstance(layer, Pooling):
            windows = _pool_windows(act, layer.kernel)
            if layer.mode == "max":
                idx = windows.argmax(axis=-1)
                out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
                caches.append((act.shape, idx) if keep_cache else None)
            else:
                out = windows.mean(axis=-1)
                caches.append(act.shape if keep_cache else None)
            act = out
        elif isinstance(layer, Dropout):
            if mode == "train" and layer.ratio > 0:
                mask = rng.random(act.shape) >= layer.ratio
                scale = 1.0 / (1.0 - layer.ratio)
                caches.append((mask, scale) if keep_cache else None)
                act = act * mask * np.asarray(scale, dtype=act.dtype)
            else:
                caches.append(None)
        elif isinstance(layer, FullyConnected):
            if act.ndim != 2:
                flat_shape = act.shape
                act = act.reshape(act.shape[0], -1)
            else:
                flat_shape = None
            params = weights.layers[i]
            caches.append((act, flat_shape) if keep_cache else None)
            act = act @ params["w"].T + params["b"]
        else:
            raise AssertionError(layer)
    return act, caches


def forward(spec: NetworkSpec, weights: WeightSet, x, mode: str = "test",
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Class probabilities for one example (4-d input) or a batch (5-d)."""
    _check_weights(spec, weights)
    _check_mode(spec, mode, rng)
    x, squeeze = _as_batch(spec, x)
    x = x.astype(weights.dtype, copy=False)
    logits, _ = _run_layers(spec, weights, x, mode, rng, keep_cache=False)
    probs = _softmax(logits)
    return probs[0] if squeeze else probs


def forward_loss(spec: NetworkSpec, weights: WeightSet, x, labels, mode: str = "test",
                 rng: np.random.Generator | None = None) -> tuple[float, np.ndarray]:
    """Mean negative log likelihood of `labels` plus the probabilities."""
    _check_weights(spec, weights)
    _check_mode(spec, mode, rng)
    x, _ = _as_batch(spec, x)
    x = x.astype(weights.dtype, copy=False)
    labels = _check_labels(labels, x.shape[0])
    logits, _ = _run_layers(spec, weights, x, mode, rng, keep_cache=False)
    probs = _softmax(logits)
    return _nll(probs, labels), probs


def _check_labels(labels, batch):
    labels = np.asarray(labels)
    if labels.shape == ():
        labels = labels[None]
    if labels.shape != (batch,):
        raise ValueError(f"labels shape {labels.shape} does not match batch {batch}")
    if labels.dtype.kind not in "iu" or np.any(labels < 0) or np.any(labels > 1):
        raise ValueError("labels must be integers in {0, 1}")
    return labels.astype(np.intp)


@dataclass
class BackwardResult:
    loss: float
    probs: np.ndarray
    gradients: WeightSet


def backward(spec: NetworkSpec, weights: WeightSet, x, labels, mode: str = "train",
             rng: np.random.Generator | None = None) -> BackwardResult:
    """Loss and mean parameter gradients over the batch.

    Runs its own forward pass (drawing dropout masks from `rng` exactly as
    forward would) and backpropagates through the softmax/NLL head in one
    fused step: dlogits = (probs - onehot) / batch.
    """
    _check_weights(spec, weights)
    _check_mode(spec, mode, rng)
    x, _ = _as_batch(spec, x)
    x = x.astype(weights.dtype, copy=False)
    batch = x.shape[0]
    labels = _check_labels(labels, batch)

    logits, caches = _run_layers(spec, weights, x, mode, rng, keep_cache=True)
    probs = _softmax(logits)
    loss = _nll(probs, labels)

    grads: list[dict[str, np.ndarray] | None] = [
        None if p is None else {} for p in spec.param_shapes
    ]
    delta = probs.copy()
    delta[np.arange(batch), labels] -= 1.0
    delta = (delta / batch).astype(weights.dtype)

    for i in range(len(spec.layers) - 2, -1, -1):
        layer = spec.layers[i]
        cache = caches[i]
        if isinstance(layer, Convolution3D):
            x_shape, cols = cache
            delta, dw, db = _conv_backward(delta, cols, x_shape, weights.layers[i]["w"])
            grads[i] = {"w": dw, "b": db}
        elif isinstance(layer, ReLU):
            delta = delta * cache
        elif isinstance(layer, Pooling):
            if layer.mode == "max":
                x_shape, idx = cache
                k = layer.kernel
                gw = np.zeros(
                    idx.shape + (k ** 3,), dtype=delta.dtype
                )
                np.put_along_axis(gw, idx[..., None], delta[..., None], axis=-1)
                delta = _pool_unwindow(gw, x_shape, k)
            else:
                x_shape = cache
                k = layer.kernel
                spread = delta[..., None] / (k ** 3)
                gw = np.broadcast_to(spread, delta.shape + (k ** 3,))
                delta = _pool_unwindow(np.ascontiguousarray(gw), x_shape, k)
        elif isinstance(layer, Dropout):
            if cache is not None:
                mask, scale = cache
                delta = delta * mask * np.asarray(scale, dtype=delta.dtype)
        elif isinstance(layer, FullyConnected):
            flat_in, flat_shape = cache
            params = weights.layers[i]
            grads[i] = {"w": delta.T @ flat_in, "b": delta.sum(axis=0)}
            delta = delta @ params["w"]
            if flat_shape is not None:
                delta = delta.reshape(flat_shape)
        else:
            raise AssertionError(layer)

    return BackwardResult(loss=loss, probs=probs, gradients=WeightSet(grads))


CHECKPOINT_MAGIC = b"VXCK"
_CHECKPOINT_VERSION = 1


def save_weights(spec: NetworkSpec, weights: WeightSet) -> bytes:
    """Serialize weights as float32 little-endian, keyed to the spec by a
    fingerprint of its canonical architecture string."""
    _check_weights(spec, weights)
    arrays = [(i, key, arr) for i, key, arr in weights.iter_params()]
    out = [CHECKPOINT_MAGIC, struct.pack("<I", _CHECKPOINT_VERSION),
           spec.fingerprint(), struct.pack("<I", len(arrays))]
    for _, _, arr in arrays:
        out.append(struct.pack("<I", arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(out)


def load_weights(spec: NetworkSpec, data: bytes, dtype=np.float64) -> WeightSet:
    """Inverse of save_weights. Rejects data written for a different
    architecture (fingerprint mismatch) or with unexpected shapes."""
    offset = 0

    def take(n):
        nonlocal offset
        if offset + n > len(data):
            raise FormatError("checkpoint truncated")
        chunk = data[offset:offset + n]
        offset += n
        return chunk

    if take(4) != CHECKPOINT_MAGIC:
        raise FormatError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != _CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    fingerprint = take(32)
    if fingerprint != spec.fingerprint():
        raise FormatError("checkpoint was written for a different architecture")
    (n_arrays,) = struct.unpack("<I", take(4))

    expected = [(i, key, shapes[key]) for i, shapes in enumerate(spec.param_shapes)
                if shapes for key in sorted(shapes)]
    if n_arrays != len(expected):
        raise FormatError(f"checkpoint has {n_arrays} arrays, spec needs {len(expected)}")

    layers: list[dict[str, np.ndarray] | None] = [
        None if s is None else {} for s in spec.param_shapes
    ]
    for i, key, shape in expected:
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        if dims != shape:
            raise FormatError(f"layer {i} {key}: checkpoint shape {dims}, expected {shape}")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(take(4 * count), dtype="<f4").reshape(shape)
        layers[i][key] = arr.astype(dtype)
    if offset != len(data):
        raise FormatError(f"{len(data) - offset} trailing bytes in checkpoint")
    return WeightSet(layers)
