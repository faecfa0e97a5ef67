"""Small dense-tensor network engine with exact analytic gradients.

Layers: 2-d convolution, fully-connected, ReLU, max pooling, global average
pooling and a softmax classification head.  All math is float64 numpy; the
backward pass is hand-derived per layer, which keeps gradients exact and
makes the engine checkable against finite differences.

Conventions:
  * public batches are (B, C, H, W); internally feature maps are kept in
    (B, H, W, C) order so convolution patches are contiguous for BLAS
  * fully-connected layers consume feature maps in (H, W, C) scan order
  * parameters live in one flat float64 vector; per-layer slices store the
    weight tensor first (row-major), then the bias
"""
from __future__ import annotations

import struct
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

Tensor = np.ndarray

CHECKPOINT_MAGIC = b"SPFT"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    """Input/architecture shapes do not chain."""


class NonFiniteError(FloatingPointError):
    """NaN or Inf produced by an engine operation."""


class CheckpointError(ValueError):
    """Malformed checkpoint file."""


# --------------------------------------------------------------------------
# layer specs
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel_h: int
    kernel_w: int
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class FullyConnected:
    out_dim: int


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class MaxPool:
    k: int
    stride: int


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class SoftmaxHead:
    num_classes: int


LayerSpec = Conv2D | FullyConnected | ReLU | MaxPool | GlobalAvgPool | SoftmaxHead

_LAYER_CODES: list[tuple[type, int]] = [
    (Conv2D, 1),
    (FullyConnected, 2),
    (ReLU, 3),
    (MaxPool, 4),
    (GlobalAvgPool, 5),
    (SoftmaxHead, 6),
]


def _flat_dim(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape))


def _infer_shapes(layers, input_shape):
    """Chain per-layer output shapes; raises ShapeError on inconsistency."""
    shapes = []
    cur: tuple[int, ...] = tuple(int(s) for s in input_shape)
    if len(cur) != 3 or any(s < 1 for s in cur):
        raise ShapeError(f"input_shape must be (C, H, W) with positive extents, got {input_shape}")
    for i, spec in enumerate(layers):
        if isinstance(spec, Conv2D):
            if len(cur) != 3:
                raise ShapeError(f"layer {i}: Conv2D needs a (C, H, W) input, got {cur}")
            c, h, w = cur
            hp, wp = h + 2 * spec.padding, w + 2 * spec.padding
            if hp < spec.kernel_h or wp < spec.kernel_w:
                raise ShapeError(f"layer {i}: kernel larger than padded input {hp}x{wp}")
            ho = (hp - spec.kernel_h) // spec.stride + 1
            wo = (wp - spec.kernel_w) // spec.stride + 1
            cur = (spec.out_channels, ho, wo)
        elif isinstance(spec, MaxPool):
            if len(cur) != 3:
                raise ShapeError(f"layer {i}: MaxPool needs a (C, H, W) input, got {cur}")
            c, h, w = cur
            if h < spec.k or w < spec.k:
                raise ShapeError(f"layer {i}: pool window larger than input {h}x{w}")
            cur = (c, (h - spec.k) // spec.stride + 1, (w - spec.k) // spec.stride + 1)
        elif isinstance(spec, GlobalAvgPool):
            if len(cur) != 3:
                raise ShapeError(f"layer {i}: GlobalAvgPool needs a (C, H, W) input, got {cur}")
            cur = (cur[0],)
        elif isinstance(spec, ReLU):
            pass
        elif isinstance(spec, FullyConnected):
            cur = (spec.out_dim,)
        elif isinstance(spec, SoftmaxHead):
            cur = (spec.num_classes,)
        else:
            raise ShapeError(f"layer {i}: unknown layer spec {spec!r}")
        shapes.append(cur)
    return shapes


# --------------------------------------------------------------------------
# parameter vector
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSlice:
    """Flat-vector slice of one parameterized layer: weights then bias."""
    layer_index: int
    offset: int
    weight_shape: tuple[int, ...]
    bias_size: int

    @property
    def weight_size(self) -> int:
        return _flat_dim(self.weight_shape)

    @property
    def size(self) -> int:
        return self.weight_size + self.bias_size

    @property
    def bias_offset(self) -> int:
        return self.offset + self.weight_size


def _build_layout(layers, input_shape, shapes):
    layout = []
    offset = 0
    prev = tuple(input_shape)
    for i, spec in enumerate(layers):
        if isinstance(spec, Conv2D):
            wshape = (spec.out_channels, prev[0], spec.kernel_h, spec.kernel_w)
            layout.append(ParamSlice(i, offset, wshape, spec.out_channels))
            offset += layout[-1].size
        elif isinstance(spec, FullyConnected):
            wshape = (spec.out_dim, _flat_dim(prev))
            layout.append(ParamSlice(i, offset, wshape, spec.out_dim))
            offset += layout[-1].size
        elif isinstance(spec, SoftmaxHead):
            wshape = (spec.num_classes, _flat_dim(prev))
            layout.append(ParamSlice(i, offset, wshape, spec.num_classes))
            offset += layout[-1].size
        prev = shapes[i]
    return tuple(layout), offset


@dataclass
class ParamVector:
    """Flat float64 parameter vector with layer layout and shared/fresh split.

    ``shared_mask[j]`` marks parameter ``j`` as inherited from the source
    architecture (the shared part); the complement is the fresh part, e.g. a
    newly generated classification head.
    """
    values: np.ndarray
    layout: tuple[ParamSlice, ...]
    shared_mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.shared_mask = np.asarray(self.shared_mask, dtype=bool)
        if self.values.ndim != 1 or self.shared_mask.shape != self.values.shape:
            raise ShapeError("parameter vector and shared mask must be flat and equal-length")
        pos = 0
        for sl in self.layout:
            if sl.offset != pos:
                raise ShapeError("layout slices must tile the parameter vector")
            pos += sl.size
        if pos != self.values.size:
            raise ShapeError(f"layout covers {pos} parameters, vector has {self.values.size}")

    @property
    def n(self) -> int:
        return self.values.size

    @property
    def shared_indices(self) -> np.ndarray:
        return np.flatnonzero(self.shared_mask)

    @property
    def fresh_indices(self) -> np.ndarray:
        return np.flatnonzero(~self.shared_mask)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout, self.shared_mask.copy())


# --------------------------------------------------------------------------
# network
# --------------------------------------------------------------------------

def _ensure_finite(what: str, arr: np.ndarray):
    # one-pass reduction; the full check only runs on a suspicious sum
    if not np.isfinite(arr.sum()) and not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in {what}")


_scratch = threading.local()


def _scratch_buf(key, shape) -> np.ndarray:
    """Reusable per-thread work buffer.

    Scratch contents are only valid between the forward and backward halves
    of a single engine operation, which never interleave on one thread.
    """
    pool = getattr(_scratch, "pool", None)
    if pool is None:
        pool = _scratch.pool = {}
    buf = pool.get(key)
    if buf is None or buf.shape != shape:
        buf = pool[key] = np.empty(shape)
    return buf


def _glorot_uniform(rng, shape, fan_in, fan_out):
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


class Network:
    """Feed-forward network: ordered layer specs over a flat parameter vector.

    Exactly one SoftmaxHead is required and it must be the last layer.  The
    forward/backward passes are pure given a parameter snapshot; parameters
    change only through explicit assignment to ``params.values``.
    """

    def __init__(self, layers, input_shape, seed: int = 0, params: ParamVector | None = None):
        self.layers = tuple(layers)
        self.input_shape = tuple(int(s) for s in input_shape)
        heads = [i for i, s in enumerate(self.layers) if isinstance(s, SoftmaxHead)]
        if len(heads) != 1 or heads[0] != len(self.layers) - 1:
            raise ShapeError("network needs exactly one SoftmaxHead as its last layer")
        self.shapes = _infer_shapes(self.layers, self.input_shape)
        layout, n = _build_layout(self.layers, self.input_shape, self.shapes)
        if params is None:
            values = np.zeros(n)
            rng = np.random.default_rng(seed)
            for sl in layout:
                spec = self.layers[sl.layer_index]
                if isinstance(spec, Conv2D):
                    fan_in = sl.weight_shape[1] * spec.kernel_h * spec.kernel_w
                    fan_out = spec.out_channels * spec.kernel_h * spec.kernel_w
                else:
                    fan_out, fan_in = sl.weight_shape
                values[sl.offset:sl.bias_offset] = _glorot_uniform(
                    rng, sl.weight_size, fan_in, fan_out)
            params = ParamVector(values, layout, np.ones(n, dtype=bool))
        else:
            if params.layout != layout or params.n != n:
                raise ShapeError("provided parameters do not match the architecture layout")
        self.params = params
        self._slice_by_layer = {sl.layer_index: sl for sl in layout}

    # -- introspection ------------------------------------------------------

    @property
    def n_params(self) -> int:
        return self.params.n

    @property
    def num_classes(self) -> int:
        return self.layers[-1].num_classes

    @property
    def head_slice(self) -> ParamSlice:
        return self._slice_by_layer[len(self.layers) - 1]

    def parameterized_layers(self) -> list[int]:
        return [sl.layer_index for sl in self.params.layout]

    def weight(self, layer_index: int) -> np.ndarray:
        sl = self._slice_by_layer[layer_index]
        return self.params.values[sl.offset:sl.bias_offset].reshape(sl.weight_shape)

    def bias(self, layer_index: int) -> np.ndarray:
        sl = self._slice_by_layer[layer_index]
        return self.params.values[sl.bias_offset:sl.offset + sl.size]

    def clone(self) -> "Network":
        return Network(self.layers, self.input_shape, params=self.params.copy())

    def trainable_mask(self, frozen_layers: int = 0) -> np.ndarray:
        """Boolean mask of updatable parameters.

        Freezes the first ``frozen_layers`` parameterized layers counted from
        the input.  The head is never frozen.
        """
        if frozen_layers < 0:
            raise ValueError("frozen_layers must be >= 0")
        mask = np.ones(self.n_params, dtype=bool)
        frozen = 0
        for sl in self.params.layout:
            if frozen >= frozen_layers:
                break
            if isinstance(self.layers[sl.layer_index], SoftmaxHead):
                continue
            mask[sl.offset:sl.offset + sl.size] = False
            frozen += 1
        return mask

    # -- forward / backward -------------------------------------------------

    def _check_batch(self, batch: Tensor) -> np.ndarray:
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 4 or batch.shape[1:] != self.input_shape:
            raise ShapeError(
                f"batch shape {batch.shape} does not match input shape (B, {self.input_shape})")
        return batch

    def _run_forward(self, batch: np.ndarray):
        """Returns (internal activations, caches, logits).

        4-d activations are in (B, H, W, C) order; caches hold what each
        layer's backward needs.
        """
        x = np.ascontiguousarray(batch.transpose(0, 2, 3, 1))
        acts, caches = [], []
        for i, spec in enumerate(self.layers):
            if isinstance(spec, Conv2D):
                x, cache = self._fwd_conv(i, spec, x)
            elif isinstance(spec, ReLU):
                x, cache = self._fwd_relu(x)
            elif isinstance(spec, MaxPool):
                x, cache = self._fwd_maxpool(i, spec, x)
            elif isinstance(spec, GlobalAvgPool):
                x, cache = self._fwd_gap(x)
            elif isinstance(spec, FullyConnected):
                x, cache = self._fwd_linear(i, x)
            else:  # SoftmaxHead
                logits, cache = self._fwd_linear(i, x)
                _ensure_finite(f"layer {i} logits", logits)
                x = _softmax(logits)
                caches.append(cache)
                acts.append(x)
                return acts, caches, logits
            _ensure_finite(f"layer {i} output", x)
            acts.append(x)
            caches.append(cache)
        raise AssertionError("unreachable: head is always last")

    def forward(self, batch: Tensor):
        """Full forward pass.

        Returns (activations, probs) where activations is a per-layer list in
        public (B, C, H, W) order for feature maps and probs is the head's
        class-probability matrix (rows sum to 1).
        """
        batch = self._check_batch(batch)
        acts, _, _ = self._run_forward(batch)
        public = []
        for a in acts:
            if a.ndim == 4:
                public.append(np.ascontiguousarray(a.transpose(0, 3, 1, 2)))
            else:
                public.append(a)
        return public, public[-1]

    def predict_probs(self, batch: Tensor) -> np.ndarray:
        """Class probabilities only (no public activation copies)."""
        batch = self._check_batch(batch)
        acts, _, _ = self._run_forward(batch)
        return acts[-1]

    def loss_and_grad(self, batch: Tensor, labels):
        """Mean negative log-likelihood of ``labels`` and its exact gradient."""
        batch = self._check_batch(batch)
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1 or labels.shape[0] != batch.shape[0]:
            raise ShapeError("labels must be a flat list matching the batch size")
        k = self.num_classes
        if labels.min(initial=0) < 0 or labels.max(initial=0) >= k:
            raise ValueError(f"label out of range [0, {k})")
        acts, caches, logits = self._run_forward(batch)
        logp = _log_softmax(logits)
        b = batch.shape[0]
        loss = -float(logp[np.arange(b), labels].mean())
        dlogits = acts[-1].copy()
        dlogits[np.arange(b), labels] -= 1.0
        dlogits /= b
        grad = self._run_backward(caches, dlogits)
        _ensure_finite("loss", np.asarray(loss))
        _ensure_finite("gradient", grad)
        return loss, grad

    def per_class_logprob_grad(self, x: Tensor, k: int) -> np.ndarray:
        """Exact gradient of log p(class k | x) for a single example."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.shape[0] != 1:
            raise ShapeError("per_class_logprob_grad takes a single example")
        batch = self._check_batch(x)
        if not 0 <= k < self.num_classes:
            raise ValueError(f"class index {k} out of range [0, {self.num_classes})")
        acts, caches, _ = self._run_forward(batch)
        probs = acts[-1]
        if probs[0, k] == 0.0:
            raise NonFiniteError(f"log-probability of class {k} undefined: probability underflowed to 0")
        dlogits = -probs.copy()
        dlogits[0, k] += 1.0
        grad = self._run_backward(caches, dlogits)
        _ensure_finite("gradient", grad)
        return grad

    def _run_backward(self, caches, dlogits):
        grad = np.zeros(self.n_params)
        param_layers = [sl.layer_index for sl in self.params.layout]
        dx = dlogits
        for i in range(len(self.layers) - 1, -1, -1):
            spec = self.layers[i]
            # input gradient is only needed while parameterized layers remain below
            need_dx = any(j < i for j in param_layers)
            if isinstance(spec, SoftmaxHead) or isinstance(spec, FullyConnected):
                dx = self._bwd_linear(i, caches[i], dx, grad, need_dx)
            elif isinstance(spec, Conv2D):
                dx = self._bwd_conv(i, caches[i], dx, grad, need_dx)
            elif isinstance(spec, ReLU):
                dx = dx * (caches[i] > 0)
            elif isinstance(spec, MaxPool):
                dx = self._bwd_maxpool(caches[i], dx)
            elif isinstance(spec, GlobalAvgPool):
                dx = self._bwd_gap(caches[i], dx)
            if dx is None and i > 0:
                break
        return grad

    # -- per-layer kernels (internal NHWC layout) ---------------------------

    def _fwd_conv(self, i, spec, x):
        if x.ndim != 4:
            raise ShapeError(f"layer {i}: Conv2D needs 4-d input")
        b, h, w, c = x.shape
        p, s = spec.padding, spec.stride
        kh, kw = spec.kernel_h, spec.kernel_w
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        ho = (xp.shape[1] - kh) // s + 1
        wo = (xp.shape[2] - kw) // s + 1
        # patch matrix with (kh, kw, C) column order
        cols6 = _scratch_buf(("conv_cols", i), (b, ho, wo, kh, kw, c))
        for ii in range(kh):
            for jj in range(kw):
                cols6[:, :, :, ii, jj, :] = xp[:, ii:ii + ho * s:s, jj:jj + wo * s:s, :]
        cols = cols6.reshape(b * ho * wo, kh * kw * c)
        wmat = self.weight(i).transpose(0, 2, 3, 1).reshape(spec.out_channels, -1)
        out = cols @ wmat.T
        out += self.bias(i)
        out = out.reshape(b, ho, wo, spec.out_channels)
        cache = (cols, xp.shape, (b, h, w, c), ho, wo)
        return out, cache

    def _bwd_conv(self, i, cache, dout, grad, need_dx):
        cols, xpshape, xshape, ho, wo = cache
        spec: Conv2D = self.layers[i]
        sl = self._slice_by_layer[i]
        b = xshape[0]
        co = spec.out_channels
        kh, kw, s, p = spec.kernel_h, spec.kernel_w, spec.stride, spec.padding
        c = xshape[3]
        dmat = dout.reshape(b * ho * wo, co)
        dw = (dmat.T @ cols).reshape(co, kh, kw, c).transpose(0, 3, 1, 2)
        grad[sl.offset:sl.bias_offset] = dw.ravel()
        grad[sl.bias_offset:sl.offset + sl.size] = dmat.sum(axis=0)
        if not need_dx:
            return None
        wmat = self.weight(i).transpose(0, 2, 3, 1).reshape(co, -1)
        dcols = dmat @ wmat
        dc = dcols.reshape(b, ho, wo, kh, kw, c)
        dxp = _scratch_buf(("conv_dxp", i), xpshape)
        dxp[:] = 0.0
        for ii in range(kh):
            for jj in range(kw):
                dxp[:, ii:ii + ho * s:s, jj:jj + wo * s:s, :] += dc[:, :, :, ii, jj, :]
        if p:
            return dxp[:, p:p + xshape[1], p:p + xshape[2], :]
        return dxp

    @staticmethod
    def _fwd_relu(x):
        out = np.maximum(x, 0.0)
        return out, out

    def _fwd_maxpool(self, i, spec, x):
        if x.ndim != 4:
            raise ShapeError("MaxPool needs 4-d input")
        b, h, w, c = x.shape
        k, s = spec.k, spec.stride
        fast = (s == k and h % k == 0 and w % k == 0)
        if fast:
            out = x[:, 0::k, 0::k, :]
            for ii in range(k):
                for jj in range(k):
                    if ii or jj:
                        out = np.maximum(out, x[:, ii::k, jj::k, :])
            return out, (i, x, out, (b, h, w, c), k, s, True)
        win = np.lib.stride_tricks.sliding_window_view(x, (k, k), axis=(1, 2))
        win = win[:, ::s, ::s]  # (B, Ho, Wo, C, k, k)
        ho, wo = win.shape[1], win.shape[2]
        flat = win.reshape(b, ho, wo, c, k * k)
        idx = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
        return out, (i, idx, (b, h, w, c), k, s, False)

    @staticmethod
    def _bwd_maxpool(cache, dout):
        if cache[-1]:  # non-overlapping fast path: route to the first max per window
            i, x, out, xshape, k, s, _ = cache
            b, h, w, c = xshape
            dx = _scratch_buf(("pool_dx", i), xshape)
            dx[:] = 0.0
            taken = np.zeros(out.shape, dtype=bool)
            for ii in range(k):
                for jj in range(k):
                    sl = x[:, ii::k, jj::k, :]
                    m = (sl == out) & ~taken
                    dx[:, ii::k, jj::k, :] += dout * m
                    taken |= m
            return dx
        i, idx, xshape, k, s, _ = cache
        b, h, w, c = xshape
        ho, wo = dout.shape[1], dout.shape[2]
        dx = np.zeros(xshape)
        bi = np.arange(b)[:, None, None, None]
        hi = np.arange(ho)[None, :, None, None] * s + idx // k
        wi = np.arange(wo)[None, None, :, None] * s + idx % k
        ci = np.arange(c)[None, None, None, :]
        np.add.at(dx, (bi, hi, wi, ci), dout)
        return dx

    @staticmethod
    def _fwd_gap(x):
        if x.ndim != 4:
            raise ShapeError("GlobalAvgPool needs 4-d input")
        return x.mean(axis=(1, 2)), x.shape

    @staticmethod
    def _bwd_gap(cache, dout):
        b, h, w, c = cache
        return np.broadcast_to(dout[:, None, None, :] / (h * w), (b, h, w, c))

    def _fwd_linear(self, i, x):
        b = x.shape[0]
        flat = x.reshape(b, -1)
        out = flat @ self.weight(i).T + self.bias(i)
        return out, (flat, x.shape)

    def _bwd_linear(self, i, cache, dout, grad, need_dx):
        flat, xshape = cache
        sl = self._slice_by_layer[i]
        grad[sl.offset:sl.bias_offset] = (dout.T @ flat).ravel()
        grad[sl.bias_offset:sl.offset + sl.size] = dout.sum(axis=0)
        if not need_dx:
            return None
        return (dout @ self.weight(i)).reshape(xshape)


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _softmax(logits):
    z = np.exp(logits - logits.max(axis=1, keepdims=True))
    return z / z.sum(axis=1, keepdims=True)


# --------------------------------------------------------------------------
# head replacement
# --------------------------------------------------------------------------

def replace_head(net: Network, num_classes: int, seed: int) -> Network:
    """New network with a freshly initialized classification head.

    All non-head parameters are copied bit-identically and marked shared;
    the new head becomes the fresh part.
    """
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    layers = net.layers[:-1] + (SoftmaxHead(num_classes),)
    new = Network(layers, net.input_shape, seed=0)
    old_head = net.head_slice
    new_head = new.head_slice
    new.params.values[:new_head.offset] = net.params.values[:old_head.offset]
    rng = np.random.default_rng(seed)
    in_dim = new_head.weight_shape[1]
    new.params.values[new_head.offset:new_head.bias_offset] = _glorot_uniform(
        rng, new_head.weight_size, in_dim, num_classes)
    new.params.values[new_head.bias_offset:] = 0.0
    mask = np.ones(new.n_params, dtype=bool)
    mask[new_head.offset:] = False
    new.params.shared_mask = mask
    return new


# --------------------------------------------------------------------------
# checkpoint serialization
# --------------------------------------------------------------------------

def _spec_fields(spec) -> list[int]:
    if isinstance(spec, Conv2D):
        return [spec.out_channels, spec.kernel_h, spec.kernel_w, spec.stride, spec.padding]
    if isinstance(spec, FullyConnected):
        return [spec.out_dim]
    if isinstance(spec, MaxPool):
        return [spec.k, spec.stride]
    if isinstance(spec, SoftmaxHead):
        return [spec.num_classes]
    return []


def _spec_from_fields(code: int, fields: list[int]):
    if code == 1:
        return Conv2D(*fields)
    if code == 2:
        return FullyConnected(*fields)
    if code == 3:
        return ReLU()
    if code == 4:
        return MaxPool(*fields)
    if code == 5:
        return GlobalAvgPool()
    if code == 6:
        return SoftmaxHead(*fields)
    raise CheckpointError(f"unknown layer code {code}")


def save_checkpoint(net: Network, path):
    """Write architecture and parameters in the versioned binary format.

    Layout: magic "SPFT", version u32, input shape 3xu32, layer spec table,
    fresh-index table, then all parameters as little-endian float64 in
    layout order.
    """
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += struct.pack("<I", CHECKPOINT_VERSION)
    buf += struct.pack("<III", *net.input_shape)
    buf += struct.pack("<I", len(net.layers))
    code_of = dict(_LAYER_CODES)
    for spec in net.layers:
        fields = _spec_fields(spec)
        buf += struct.pack("<II", code_of[type(spec)], len(fields))
        for f in fields:
            buf += struct.pack("<I", f)
    fresh = net.params.fresh_indices
    buf += struct.pack("<QQ", net.n_params, fresh.size)
    buf += fresh.astype("<u8").tobytes()
    buf += np.ascontiguousarray(net.params.values, dtype="<f8").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path) -> Network:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    pos = 0

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise CheckpointError("truncated checkpoint")
        out = struct.unpack_from(fmt, view, pos)
        pos += size
        return out

    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic: not a checkpoint file")
    pos = 4
    (version,) = take("<I")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    input_shape = take("<III")
    (n_layers,) = take("<I")
    layers = []
    for _ in range(n_layers):
        code, nfields = take("<II")
        fields = [take("<I")[0] for _ in range(nfields)]
        layers.append(_spec_from_fields(code, fields))
    n, n_fresh = take("<QQ")
    need = n_fresh * 8 + n * 8
    if pos + need > len(raw):
        raise CheckpointError("truncated checkpoint")
    fresh = np.frombuffer(view, dtype="<u8", count=n_fresh, offset=pos).astype(np.int64)
    pos += n_fresh * 8
    values = np.frombuffer(view, dtype="<f8", count=n, offset=pos).copy()
    net = Network(layers, input_shape, seed=0)
    if net.n_params != n:
        raise CheckpointError("parameter count does not match architecture")
    mask = np.ones(n, dtype=bool)
    mask[fresh] = False
    net.params.values[:] = values
    net.params.shared_mask = mask
    return net
