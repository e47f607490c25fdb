"""Minimal dense 3D convnet machinery on numpy with hand-written backprop.

Written for checkability rather than speed: every layer exposes an explicit
``backward`` and every parameter gradient can be verified against central
finite differences (construct the net with ``dtype=np.float64`` for that; the
default f32 is for training throughput).

Conventions: activations are (N, C, D, H, W); convolutions run through an
im2col buffer and one matmul; losses reduce to a scalar. Nothing here mutates
state unless asked to (batch-norm running stats update only when
``update_stats`` is true), so a loss evaluation is a pure function of the
parameters, which is what the gradient checker needs.
"""

from __future__ import annotations

import numpy as np


class Param:
    """A named tensor with its gradient accumulator."""

    __slots__ = ("name", "value", "grad", "decay")

    def __init__(self, name: str, value: np.ndarray, decay: bool):
        self.name = name
        self.value = value
        self.grad = np.zeros_like(value)
        self.decay = decay  # participates in weight decay


class Layer:
    def params(self) -> list[Param]:
        return []

    def state(self) -> dict[str, np.ndarray]:
        """Non-trainable tensors that still belong in a checkpoint."""
        return {}

    def forward(self, x: np.ndarray, train: bool, update_stats: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError


def _conv_out(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


class Conv3d(Layer):
    def __init__(self, name: str, cin: int, cout: int, k: int = 3,
                 stride: int = 1, pad: int = 1, rng: np.random.Generator = None,
                 dtype=np.float32, bias: bool = True):
        fan_in = cin * k ** 3
        scale = np.sqrt(2.0 / fan_in)
        rng = rng or np.random.default_rng(0)
        self.k, self.stride, self.pad = k, stride, pad
        self.cin, self.cout = cin, cout
        self.w = Param(f"{name}.w",
                       (rng.standard_normal((cout, cin, k, k, k)) * scale).astype(dtype),
                       decay=True)
        # A conv feeding batch norm gets no bias: the normalization subtracts
        # it exactly, leaving a parameter with identically zero gradient.
        self.b = Param(f"{name}.b", np.zeros(cout, dtype=dtype), decay=False) \
            if bias else None
        self._col: np.ndarray | None = None
        self._xshape: tuple | None = None

    def params(self) -> list[Param]:
        return [self.w] if self.b is None else [self.w, self.b]

    def forward(self, x, train, update_stats):
        n, c, d, h, w = x.shape
        k, s, p = self.k, self.stride, self.pad
        do, ho, wo = (_conv_out(d, k, s, p), _conv_out(h, k, s, p), _conv_out(w, k, s, p))
        if min(do, ho, wo) < 1:
            raise ValueError(f"conv output collapsed: input {x.shape}, k={k} s={s} p={p}")
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p), (p, p))) if p else x
        win = np.lib.stride_tricks.sliding_window_view(xp, (k, k, k), axis=(2, 3, 4))
        win = win[:, :, ::s, ::s, ::s][:, :, :do, :ho, :wo]
        # (N, C, Do, Ho, Wo, k, k, k) -> (N*L, C*k^3); one flat GEMM beats a
        # batched matmul by a wide margin on skinny kernels.
        col = win.transpose(0, 2, 3, 4, 1, 5, 6, 7).reshape(
            n * do * ho * wo, c * k ** 3)
        self._col = col if train else None
        self._xshape = x.shape
        wmat = self.w.value.reshape(self.cout, -1)
        out = col @ wmat.T
        if self.b is not None:
            out += self.b.value
        return (out.reshape(n, do * ho * wo, self.cout)
                .transpose(0, 2, 1).reshape(n, self.cout, do, ho, wo))

    def backward(self, dout):
        n, cout, do, ho, wo = dout.shape
        k, s, p = self.k, self.stride, self.pad
        _, c, d, h, w = self._xshape
        dmat = (dout.reshape(n, cout, do * ho * wo).transpose(0, 2, 1)
                .reshape(n * do * ho * wo, cout))
        col = self._col
        self.w.grad += (dmat.T @ col).reshape(self.w.value.shape)
        if self.b is not None:
            self.b.grad += dmat.sum(axis=0)
        dcol = dmat @ self.w.value.reshape(cout, -1)  # (N*L, C*k^3)
        dcol = dcol.reshape(n, do, ho, wo, c, k, k, k).transpose(0, 4, 1, 2, 3, 5, 6, 7)
        dxp = np.zeros((n, c, d + 2 * p, h + 2 * p, w + 2 * p), dtype=dout.dtype)
        for kd in range(k):
            for kh in range(k):
                for kw in range(k):
                    dxp[:, :, kd:kd + s * do:s, kh:kh + s * ho:s, kw:kw + s * wo:s] += \
                        dcol[:, :, :, :, :, kd, kh, kw]
        self._col = None
        if p:
            return dxp[:, :, p:-p, p:-p, p:-p]
        return dxp


class BatchNorm3d(Layer):
    def __init__(self, name: str, c: int, momentum: float = 0.1,
                 eps: float = 1e-5, dtype=np.float32):
        self.gamma = Param(f"{name}.gamma", np.ones(c, dtype=dtype), decay=False)
        self.beta = Param(f"{name}.beta", np.zeros(c, dtype=dtype), decay=False)
        self.running_mean = np.zeros(c, dtype=dtype)
        self.running_var = np.ones(c, dtype=dtype)
        self.name = name
        self.momentum = momentum
        self.eps = eps
        self._cache = None

    def params(self) -> list[Param]:
        return [self.gamma, self.beta]

    def state(self) -> dict[str, np.ndarray]:
        return {f"{self.name}.running_mean": self.running_mean,
                f"{self.name}.running_var": self.running_var}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.running_mean = state[f"{self.name}.running_mean"].astype(self.running_mean.dtype)
        self.running_var = state[f"{self.name}.running_var"].astype(self.running_var.dtype)

    def forward(self, x, train, update_stats):
        axes = (0, 2, 3, 4)
        shape = (1, -1, 1, 1, 1)
        if train:
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = x.size // x.shape[1]
            if update_stats:
                unbiased = var * (m / max(m - 1, 1))
                self.running_mean = ((1 - self.momentum) * self.running_mean
                                     + self.momentum * mean).astype(self.running_mean.dtype)
                self.running_var = ((1 - self.momentum) * self.running_var
                                    + self.momentum * unbiased).astype(self.running_var.dtype)
        else:
            mean = self.running_mean
            var = self.running_var
        ivar = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(shape)) * ivar.reshape(shape)
        if train:
            self._cache = (xhat, ivar)
        return self.gamma.value.reshape(shape) * xhat + self.beta.value.reshape(shape)

    def backward(self, dout):
        xhat, ivar = self._cache
        self._cache = None
        axes = (0, 2, 3, 4)
        shape = (1, -1, 1, 1, 1)
        m = dout.size // dout.shape[1]
        dgamma = (dout * xhat).sum(axis=axes)
        dbeta = dout.sum(axis=axes)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        g = self.gamma.value.reshape(shape) * ivar.reshape(shape)
        return g * (dout - (dbeta.reshape(shape) + xhat * dgamma.reshape(shape)) / m)


class ReLU(Layer):
    def __init__(self):
        self._mask = None

    def forward(self, x, train, update_stats):
        out = np.maximum(x, 0)
        if train:
            self._mask = x > 0
        return out

    def backward(self, dout):
        dx = dout * self._mask
        self._mask = None
        return dx


class MaxPool3d(Layer):
    """2x2x2 max pooling, stride 2. Input spatial dims must be even."""

    def __init__(self):
        self._cache = None

    def forward(self, x, train, update_stats):
        n, c, d, h, w = x.shape
        if d % 2 or h % 2 or w % 2:
            raise ValueError(f"pooling needs even dims, got {x.shape}")
        win = x.reshape(n, c, d // 2, 2, h // 2, 2, w // 2, 2)
        win = win.transpose(0, 1, 2, 4, 6, 3, 5, 7).reshape(n, c, d // 2, h // 2, w // 2, 8)
        arg = win.argmax(axis=-1)  # first occurrence on ties: deterministic
        out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
        if train:
            self._cache = (arg, x.shape)
        return out

    def backward(self, dout):
        arg, xshape = self._cache
        self._cache = None
        n, c, d, h, w = xshape
        dwin = np.zeros((n, c, d // 2, h // 2, w // 2, 8), dtype=dout.dtype)
        np.put_along_axis(dwin, arg[..., None], dout[..., None], axis=-1)
        dwin = dwin.reshape(n, c, d // 2, h // 2, w // 2, 2, 2, 2)
        return dwin.transpose(0, 1, 2, 5, 3, 6, 4, 7).reshape(n, c, d, h, w)


class GlobalAvgPool(Layer):
    """(N, C, D, H, W) -> (N, C)."""

    def __init__(self):
        self._shape = None

    def forward(self, x, train, update_stats):
        self._shape = x.shape
        return x.mean(axis=(2, 3, 4))

    def backward(self, dout):
        n, c, d, h, w = self._shape
        return np.broadcast_to(dout[:, :, None, None, None],
                               (n, c, d, h, w)) / (d * h * w)


class Linear(Layer):
    def __init__(self, name: str, nin: int, nout: int,
                 rng: np.random.Generator = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        scale = np.sqrt(2.0 / nin)
        self.w = Param(f"{name}.w",
                       (rng.standard_normal((nin, nout)) * scale).astype(dtype),
                       decay=True)
        self.b = Param(f"{name}.b", np.zeros(nout, dtype=dtype), decay=False)
        self._x = None

    def params(self) -> list[Param]:
        return [self.w, self.b]

    def forward(self, x, train, update_stats):
        if train:
            self._x = x
        return x @ self.w.value + self.b.value

    def backward(self, dout):
        self.w.grad += self._x.T @ dout
        self.b.grad += dout.sum(axis=0)
        dx = dout @ self.w.value.T
        self._x = None
        return dx


class Sequential(Layer):
    def __init__(self, layers: list[Layer]):
        self.layers = layers

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self.layers:
            out.update(layer.state())
        return out

    def forward(self, x, train, update_stats):
        for layer in self.layers:
            x = layer.forward(x, train, update_stats)
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def weighted_cross_entropy(logits: np.ndarray, targets: np.ndarray,
                           class_weights: np.ndarray) -> tuple[float, np.ndarray]:
    """Weighted-mean cross entropy and its gradient w.r.t. the logits.

    Loss = sum_i w[y_i] * (-log p_i[y_i]) / sum_i w[y_i], matching the usual
    weighted-CE convention so per-class weights rescale, not inflate, the loss.
    """
    n = logits.shape[0]
    p = softmax(logits.astype(np.float64))
    w = np.asarray(class_weights, dtype=np.float64)[targets]
    wsum = w.sum()
    eps = np.finfo(np.float64).tiny
    loss = float((w * -np.log(p[np.arange(n), targets] + eps)).sum() / wsum)
    dlogits = p
    dlogits[np.arange(n), targets] -= 1.0
    dlogits *= (w / wsum)[:, None]
    return loss, dlogits.astype(logits.dtype)


class Adam:
    """ADAM with optional L2 weight decay folded into the gradient.

    Decay applies only to parameters flagged ``decay`` (conv and linear
    weights), never to biases or batch-norm scale/shift.
    """

    def __init__(self, params: list[Param], lr: float = 1e-3,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in params]
        self.v = [np.zeros_like(p.value) for p in params]

    def step(self) -> None:
        self.t += 1
        b1, b2 = self.b1, self.b2
        for i, p in enumerate(self.params):
            g = p.grad
            if self.weight_decay and p.decay:
                g = g + self.weight_decay * p.value
            self.m[i] = b1 * self.m[i] + (1 - b1) * g
            self.v[i] = b2 * self.v[i] + (1 - b2) * g * g
            mhat = self.m[i] / (1 - b1 ** self.t)
            vhat = self.v[i] / (1 - b2 ** self.t)
            p.value -= (self.lr * mhat / (np.sqrt(vhat) + self.eps)).astype(p.value.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad[...] = 0.0
