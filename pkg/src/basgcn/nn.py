"""Dense numpy layers with hand-written backward passes.

Every ``*_forward`` returns ``(output, cache)`` and the matching ``*_backward``
takes the upstream gradient plus that cache. Batched tensors put the batch
axis first: grids are ``(B, M, channels)``, adjacencies ``(B, M, M)``.
"""

from __future__ import annotations

import numpy as np


class Param:
    """A trainable array and its accumulated gradient."""

    __slots__ = ("value", "grad")

    def __init__(self, value):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


def glorot(rng, shape, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


# ---------------------------------------------------------------------------
# activations


def relu(x):
    return np.maximum(x, 0.0)


def relu_forward(x):
    out = relu(x)
    return out, out > 0


def relu_backward(dout, mask):
    return dout * mask


# ---------------------------------------------------------------------------
# graph convolution


def row_normalize(A):
    """D^-1 A with D the row sums; rows summing to zero stay zero."""
    A = np.asarray(A, dtype=np.float64)
    deg = A.sum(axis=-1, keepdims=True)
    inv = np.divide(1.0, deg, out=np.zeros_like(deg), where=deg != 0)
    return A * inv


def propagation_matrix(A_D, mode: str):
    """Normalized in- or out-adjacency for a (batch of) backtrackless adjacency."""
    A_D = np.asarray(A_D, dtype=np.float64)
    if mode == "in":
        return row_normalize(np.swapaxes(A_D, -1, -2))
    if mode == "out":
        return row_normalize(A_D)
    raise ValueError(f"mode must be 'in' or 'out', not {mode!r}")


def graph_conv_forward(X, N, W):
    """relu(N @ y) with y[b, m, h] = sum_c X[b, m, c] * W[h, m, c].

    X (B, M, C), N (B, M, M) normalized propagation matrices, W (H, M, C).
    Returns (B, M, H).
    """
    if X.ndim != 3 or W.ndim != 3 or X.shape[1:] != W.shape[1:]:
        raise ValueError(f"filter shape {W.shape} does not match input {X.shape}")
    if N.shape != (X.shape[0], X.shape[1], X.shape[1]):
        raise ValueError(f"adjacency shape {N.shape} does not match input {X.shape}")
    # per-vertex filter rows: (M, B, C) @ (M, C, H) -> (M, B, H)
    y = np.swapaxes(np.swapaxes(X, 0, 1) @ np.swapaxes(W, 0, 1).transpose(0, 2, 1), 0, 1)
    pre = N @ y
    out, mask = relu_forward(pre)
    return out, (X, N, W, mask)


def graph_conv_backward(dout, cache):
    X, N, W, mask = cache
    dpre = relu_backward(dout, mask)
    dy = np.swapaxes(N, 1, 2) @ dpre
    dy_m = np.swapaxes(dy, 0, 1)  # (M, B, H)
    dW = np.swapaxes(np.swapaxes(dy_m, 1, 2) @ np.swapaxes(X, 0, 1), 0, 1)
    dX = np.swapaxes(dy_m @ np.swapaxes(W, 0, 1), 0, 1)
    return dX, dW


def _single_conv(X, A_D, W, mode):
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if X.shape != W.shape:
        raise ValueError(f"filter shape {W.shape} does not match input {X.shape}")
    N = propagation_matrix(A_D, mode)
    out, _ = graph_conv_forward(X[None], N[None], W[None])
    return out[0]


def graph_conv_in(X, A_D, W):
    """In-neighbourhood convolution of one grid with one M x c filter -> (M, 1)."""
    return _single_conv(X, A_D, W, "in")


def graph_conv_out(X, A_D, W):
    """Out-neighbourhood convolution of one grid with one M x c filter -> (M, 1)."""
    return _single_conv(X, A_D, W, "out")


def graph_conv_layer(Z_prev, A_D, filters, mode: str):
    """Apply a bank of filters (sequence of M x H arrays, or an (H', M, H) array)."""
    W = np.asarray(filters, dtype=np.float64)
    Z_prev = np.asarray(Z_prev, dtype=np.float64)
    if W.ndim != 3 or W.shape[1:] != Z_prev.shape:
        raise ValueError(f"filter bank {W.shape} incompatible with input {Z_prev.shape}")
    N = propagation_matrix(A_D, mode)
    out, _ = graph_conv_forward(Z_prev[None], N[None], W)
    return out[0]


def dgcnn_conv(X, A_tilde, W):
    """Undirected baseline: relu(D^-1 (A + I) X W)."""
    X = np.asarray(X, dtype=np.float64)
    W = np.asarray(W, dtype=np.float64)
    if X.shape[1] != W.shape[0] or A_tilde.shape != (X.shape[0], X.shape[0]):
        raise ValueError("shape mismatch")
    return relu(row_normalize(A_tilde) @ (X @ W))


# ---------------------------------------------------------------------------
# 1-D CNN pieces


def conv1d_forward(x, w, b):
    """Same-padded stride-1 cross-correlation.

    x (B, L, C), w (k, C, O) with k odd, b (O,). Returns (B, L, O).
    """
    k, C, O = w.shape
    if k % 2 != 1:
        raise ValueError("kernel size must be odd")
    if x.ndim != 3 or x.shape[2] != C:
        raise ValueError(f"input {x.shape} does not match kernel {w.shape}")
    B, L, _ = x.shape
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    cols = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (B, L, C, k)
    cols = cols.transpose(0, 1, 3, 2).reshape(B * L, k * C)
    out = cols @ w.reshape(k * C, O) + b
    return out.reshape(B, L, O), (cols, w, x.shape)


def conv1d_backward(dout, cache):
    cols, w, xshape = cache
    k, C, O = w.shape
    B, L, _ = xshape
    d2 = dout.reshape(B * L, O)
    dw = (cols.T @ d2).reshape(k, C, O)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(k * C, O).T).reshape(B, L, k, C)
    pad = k // 2
    dxp = np.zeros((B, L + 2 * pad, C))
    for i in range(k):
        dxp[:, i:i + L] += dcols[:, :, i]
    return dxp[:, pad:pad + L], dw, db


def avgpool_forward(x, size: int = 2):
    """Non-overlapping mean pooling along axis 1; a trailing remainder is dropped."""
    B, L, C = x.shape
    n = L // size
    out = x[:, :n * size].reshape(B, n, size, C).mean(axis=2)
    return out, (x.shape, size)


def avgpool_backward(dout, cache):
    (B, L, C), size = cache
    dx = np.zeros((B, L, C))
    n = dout.shape[1]
    dx[:, :n * size] = np.repeat(dout / size, size, axis=1)
    return dx


def fc_forward(x, w, b):
    """x (B, D_in) @ w (D_in, D_out) + b."""
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"input width {x.shape[-1]} does not match weights {w.shape}")
    return x @ w + b, (x, w)


def fc_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def dropout_forward(x, rate: float, rng, training: bool):
    """Inverted dropout; identity outside training."""
    if not training or rate == 0.0:
        return x, None
    keep = 1.0 - rate
    mask = (rng.random(x.shape) < keep) / keep
    return x * mask, mask


def dropout_backward(dout, mask):
    return dout if mask is None else dout * mask


def softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Mean cross-entropy over the batch.

    Returns ``(loss, probs, dlogits)`` where ``dlogits`` is the gradient of the
    mean loss, ``(probs - onehot) / B``.
    """
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    B = logits.shape[0]
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    probs = np.exp(logp)
    loss = float(-logp[np.arange(B), labels].mean())
    dlogits = probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    return loss, probs, dlogits / B


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params, lr=5e-5, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]
        self.t = 0

    def step(self):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.value -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self):
        return {"t": np.array(self.t), **{f"m{i}": m for i, m in enumerate(self.m)},
                **{f"v{i}": v for i, v in enumerate(self.v)}}

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"])
        for i in range(len(self.params)):
            self.m[i][...] = arrays[f"m{i}"]
            self.v[i][...] = arrays[f"v{i}"]


def adam_step(params, grads, state: Adam):
    """Functional wrapper: copy ``grads`` into ``params`` and take one step."""
    for p, g in zip(params, grads):
        p.grad[...] = g
    state.step()
    return params
