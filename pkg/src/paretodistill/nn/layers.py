"""Layer objects with parameters, cached forward passes and reverse-mode gradients.

Each layer instance is applied at most once per forward pass; the activations
needed for ``backward`` are cached on the instance. LSTM and attention layers
are forward-only.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from . import functional as F

LAYER_KINDS = (
    "dense",
    "conv2d",
    "relu",
    "masked-temperature-softmax",
    "lstm-cell",
    "multi-head-attention",
    "set-max-pool",
    "concat",
    "dot-product-score",
)
FORWARD_ONLY = frozenset({"lstm-cell", "multi-head-attention"})


@dataclass(frozen=True)
class LayerSpec:
    """Static description of one layer inside a network plan.

    ``uses`` is the number of times the layer is applied in one inference over a
    three-hero frame group (hero count times unit count for shared extractors).
    """

    name: str
    kind: str
    extents: dict[str, int] = field(default_factory=dict)
    uses: int = 1
    block: str = ""
    module: str = ""

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        for key, value in self.extents.items():
            if value < (0 if key == "padding" else 1):
                raise ValueError(f"{self.name}: extent {key}={value} must be >= 1")
        if self.kind == "conv2d":
            k, p = self.extents["kernel"], self.extents.get("padding", 0)
            if self.extents.get("same") and (k % 2 == 0 or p != k // 2):
                raise ValueError(f"{self.name}: 'same' padding needs an odd kernel")

    @property
    def differentiable(self) -> bool:
        return self.kind not in FORWARD_ONLY


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    kind = ""

    def __init__(self, name: str = ""):
        self.name = name
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache: Any = None

    def _init_params(self, dtype, **arrays):
        for key, value in arrays.items():
            self.params[key] = np.asarray(value, dtype=dtype)
        self.zero_grad()

    def zero_grad(self):
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}

    def astype(self, dtype):
        for key in self.params:
            self.params[key] = self.params[key].astype(dtype)
        self.zero_grad()
        return self

    @property
    def dtype(self):
        for value in self.params.values():
            return value.dtype
        return None

    def backward(self, dy):
        raise NotImplementedError(f"{self.kind} layers are forward-only")


class Dense(Layer):
    kind = "dense"

    def __init__(self, n_in: int, n_out: int, rng=None, name: str = "", dtype=np.float32):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self._init_params(
            dtype,
            W=glorot_uniform(rng, n_in, n_out, (n_in, n_out)),
            b=np.zeros(n_out),
        )

    @property
    def n_in(self) -> int:
        return self.params["W"].shape[0]

    @property
    def n_out(self) -> int:
        return self.params["W"].shape[1]

    def forward(self, x):
        self._cache = x
        return F.dense_forward(x, self.params["W"], self.params["b"])

    def backward(self, dy):
        x = self._cache
        x2 = x.reshape(-1, x.shape[-1])
        dy2 = dy.reshape(-1, dy.shape[-1])
        self.grads["W"] += x2.T @ dy2
        self.grads["b"] += dy2.sum(axis=0)
        return dy @ self.params["W"].T


class Conv2d(Layer):
    kind = "conv2d"

    def __init__(self, c_in, c_out, kernel, stride=1, padding=0, rng=None, name="",
                 dtype=np.float32, need_input_grad=True):
        super().__init__(name)
        self.need_input_grad = need_input_grad
        rng = rng if rng is not None else np.random.default_rng(0)
        self.stride = stride
        self.padding = padding
        fan_in, fan_out = c_in * kernel * kernel, c_out * kernel * kernel
        self._init_params(
            dtype,
            W=glorot_uniform(rng, fan_in, fan_out, (c_out, c_in, kernel, kernel)),
            b=np.zeros(c_out),
        )

    def forward(self, x):
        y, cols = F.conv2d_forward(x, self.params["W"], self.params["b"], self.stride,
                                   self.padding, return_cols=True)
        self._cache = (x, cols)
        return y

    def backward(self, dy):
        x, cols = self._cache
        dx, dw, db = F.conv2d_backward(x, self.params["W"], dy, self.stride, self.padding,
                                        need_dx=self.need_input_grad, cols=cols)
        self.grads["W"] += dw
        self.grads["b"] += db
        return dx


class ReLU(Layer):
    kind = "relu"

    def forward(self, x):
        self._cache = x > 0
        return np.where(self._cache, x, 0).astype(x.dtype, copy=False)

    def backward(self, dy):
        return np.where(self._cache, dy, 0).astype(dy.dtype, copy=False)


class SetMaxPool(Layer):
    """Elementwise max over ``axis``; ties route the gradient to the first index."""

    kind = "set-max-pool"

    def __init__(self, axis: int = 0, name: str = ""):
        super().__init__(name)
        self.axis = axis

    def forward(self, x):
        moved = np.moveaxis(x, self.axis, 0)
        self._cache = moved
        return F.set_max_pool(moved)

    def backward(self, dy):
        return np.moveaxis(F.set_max_pool_backward(self._cache, dy), 0, self.axis)


class Concat(Layer):
    kind = "concat"

    def __init__(self, axis: int = -1, name: str = ""):
        super().__init__(name)
        self.axis = axis

    def forward(self, parts):
        self._cache = [p.shape[self.axis] for p in parts]
        return np.concatenate(parts, axis=self.axis)

    def backward(self, dy):
        cuts = np.cumsum(self._cache)[:-1]
        return np.split(dy, cuts, axis=self.axis)


class DotProductScore(Layer):
    """score[..., j] = <query[..., :], keys[..., j, :]>."""

    kind = "dot-product-score"

    def forward(self, query, keys):
        self._cache = (query, keys)
        return np.einsum("...a,...ja->...j", query, keys)

    def backward(self, dy):
        query, keys = self._cache
        dq = np.einsum("...j,...ja->...a", dy, keys)
        dk = dy[..., :, None] * query[..., None, :]
        return dq, dk


class MaskedTemperatureSoftmax(Layer):
    kind = "masked-temperature-softmax"

    def __init__(self, tau: float = 1.0, name: str = ""):
        super().__init__(name)
        self.tau = tau

    def forward(self, logits, mask):
        p = F.masked_temperature_softmax(logits, mask, self.tau)
        self._cache = p
        return p

    def backward(self, dp):
        return F.masked_softmax_backward(self._cache, dp, self.tau)


class LSTMCell(Layer):
    kind = "lstm-cell"

    def __init__(self, n_in, hidden, rng=None, name="", dtype=np.float32):
        super().__init__(name)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.hidden = hidden
        self._init_params(
            dtype,
            W=glorot_uniform(rng, n_in + hidden, 4 * hidden, (n_in + hidden, 4 * hidden)),
            b=np.zeros(4 * hidden),
        )

    def forward(self, x, h, c):
        return F.lstm_cell_forward(x, h, c, self.params["W"], self.params["b"])


class MultiHeadAttention(Layer):
    kind = "multi-head-attention"

    def __init__(self, dim, heads, rng=None, name="", dtype=np.float32):
        super().__init__(name)
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.heads = heads
        arrays = {}
        for proj in ("q", "k", "v", "o"):
            arrays["W" + proj] = glorot_uniform(rng, dim, dim, (dim, dim))
            arrays["b" + proj] = np.zeros(dim)
        self._init_params(dtype, **arrays)

    def forward(self, tokens):
        p = self.params
        return F.multi_head_attention_forward(
            tokens, self.heads, p["Wq"], p["bq"], p["Wk"], p["bk"],
            p["Wv"], p["bv"], p["Wo"], p["bo"],
        )
