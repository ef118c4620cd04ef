"""Small differentiable kernel used by the terrain network.

Every layer is a pair of functions: a forward pass returning ``(output, cache)``
and a backward pass consuming the cache. Arrays are float64 and batched along
the leading axis; images are channels-last ``(N, H, W, C)``.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64


def conv_output_size(size: int, kernel: int, stride: int, padding: int = 0) -> int:
    """Spatial extent after a valid convolution (floor formula)."""
    return (size + 2 * padding - kernel) // stride + 1


# --------------------------------------------------------------------------- #
# convolution


def conv2d_forward(x, kernels, bias, stride=1, padding=0, relu=False):
    """Channels-last 2-D convolution.

    Parameters
    ----------
    x : array (N, H, W, Cin) or (H, W, Cin)
    kernels : array (Kh, Kw, Cin, Cout)
    bias : array (Cout,)
    stride, padding : int
        Padding defaults to 0 (valid convolution).
    relu : bool
        Apply a ReLU to the output.

    Returns
    -------
    out, cache
    """
    x = np.asarray(x, dtype=DTYPE)
    kernels = np.asarray(kernels, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    squeeze = x.ndim == 3
    if squeeze:
        x = x[None]
    if x.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d expects (N,H,W,C) input and (Kh,Kw,Cin,Cout) kernels, "
                         f"got {x.shape} and {kernels.shape}")
    if stride < 1 or padding < 0:
        raise ValueError(f"invalid stride={stride} / padding={padding}")
    kh, kw, cin, cout = kernels.shape
    if x.shape[3] != cin:
        raise ValueError(f"input has {x.shape[3]} channels, kernels expect {cin}")
    if bias.shape != (cout,):
        raise ValueError(f"bias shape {bias.shape} does not match Cout={cout}")
    if padding:
        x = np.pad(x, ((0, 0), (padding, padding), (padding, padding), (0, 0)))
    n, h, w, _ = x.shape
    if kh > h or kw > w:
        raise ValueError(f"kernel {kh}x{kw} larger than (padded) input {h}x{w}")
    ho = (h - kh) // stride + 1
    wo = (w - kw) // stride + 1

    windows = sliding_window_view(x, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    # windows: (N, Ho, Wo, Cin, Kh, Kw) -> cols ordered (Kh, Kw, Cin) to match kernels
    cols = windows.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * cin)
    out = cols @ kernels.reshape(-1, cout) + bias
    out = out.reshape(n, ho, wo, cout)
    if relu:
        out = np.maximum(out, 0.0)
    cache = (cols, kernels, x.shape, stride, padding, out if relu else None, squeeze)
    return (out[0] if squeeze else out), cache


def conv2d_backward(dout, cache, input_grad=True):
    """Returns ``(dx, dkernels, dbias)``; ``dx`` is None when ``input_grad`` is off."""
    cols, kernels, xshape, stride, padding, relu_out, squeeze = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if squeeze:
        dout = dout[None]
    if relu_out is not None:
        dout = dout * (relu_out > 0)
    kh, kw, cin, cout = kernels.shape
    n, h, w, _ = xshape
    ho, wo = dout.shape[1], dout.shape[2]
    d2 = dout.reshape(-1, cout)
    dbias = d2.sum(axis=0)
    dkernels = (cols.T @ d2).reshape(kernels.shape)
    if not input_grad:
        return None, dkernels, dbias
    dcols = (d2 @ kernels.reshape(-1, cout).T).reshape(n, ho, wo, kh, kw, cin)
    dx = np.zeros(xshape, dtype=DTYPE)
    hspan = stride * (ho - 1) + 1
    wspan = stride * (wo - 1) + 1
    for i in range(kh):
        for j in range(kw):
            dx[:, i:i + hspan:stride, j:j + wspan:stride, :] += dcols[:, :, :, i, j, :]
    if padding:
        dx = dx[:, padding:h - padding, padding:w - padding, :]
    if squeeze:
        dx = dx[0]
    return dx, dkernels, dbias


def conv2d(x, kernels, bias, stride=1, padding=0, relu=False):
    return conv2d_forward(x, kernels, bias, stride, padding, relu)[0]


# --------------------------------------------------------------------------- #
# dense


def dense_forward(x, weight, bias, relu=False):
    x = np.asarray(x, dtype=DTYPE)
    weight = np.asarray(weight, dtype=DTYPE)
    bias = np.asarray(bias, dtype=DTYPE)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0] or bias.shape != (weight.shape[1],):
        raise ValueError(f"dense shape mismatch: x {x.shape}, weight {weight.shape}, "
                         f"bias {bias.shape}")
    out = x @ weight + bias
    if relu:
        out = np.maximum(out, 0.0)
    return out, (x, weight, out if relu else None)


def dense_backward(dout, cache):
    """Returns ``(dx, dweight, dbias)``; accepts any number of leading axes."""
    x, weight, relu_out = cache
    dout = np.asarray(dout, dtype=DTYPE)
    if relu_out is not None:
        dout = dout * (relu_out > 0)
    x2 = x.reshape(-1, x.shape[-1])
    d2 = dout.reshape(-1, dout.shape[-1])
    return dout @ weight.T, x2.T @ d2, d2.sum(axis=0)


def dense(x, weight, bias, relu=False):
    return dense_forward(x, weight, bias, relu)[0]


# --------------------------------------------------------------------------- #
# LSTM


def _sigmoid(z):
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def lstm_step_forward(x, h, c, weight, bias):
    """One LSTM update.

    ``weight`` has shape ``(Din + Dh, 4 * Dh)`` acting on ``[x, h]``; the gate
    blocks are ordered input, forget, output, candidate.
    """
    x = np.asarray(x, dtype=DTYPE)
    h = np.asarray(h, dtype=DTYPE)
    c = np.asarray(c, dtype=DTYPE)
    dh = h.shape[-1]
    din = x.shape[-1]
    if weight.shape != (din + dh, 4 * dh) or bias.shape != (4 * dh,) or c.shape != h.shape \
            or x.shape[:-1] != h.shape[:-1]:
        raise ValueError(f"lstm shape mismatch: x {x.shape}, h {h.shape}, c {c.shape}, "
                         f"weight {weight.shape}, bias {bias.shape}")
    xh = np.concatenate([x, h], axis=-1)
    z = xh @ weight + bias
    i = _sigmoid(z[..., :dh])
    f = _sigmoid(z[..., dh:2 * dh])
    o = _sigmoid(z[..., 2 * dh:3 * dh])
    g = np.tanh(z[..., 3 * dh:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (xh, c, i, f, o, g, tc, weight, din)


def lstm_step_backward(dh_new, dc_new, cache):
    """Returns ``(dx, dh, dc, dweight, dbias)``."""
    xh, c, i, f, o, g, tc, weight, din = cache
    dc_total = dc_new + dh_new * o * (1.0 - tc * tc)
    do = dh_new * tc
    di = dc_total * g
    dg = dc_total * i
    df = dc_total * c
    dc = dc_total * f
    dz = np.concatenate([
        di * i * (1.0 - i),
        df * f * (1.0 - f),
        do * o * (1.0 - o),
        dg * (1.0 - g * g),
    ], axis=-1)
    dxh = dz @ weight.T
    xh2 = xh.reshape(-1, xh.shape[-1])
    dz2 = dz.reshape(-1, dz.shape[-1])
    return dxh[..., :din], dxh[..., din:], dc, xh2.T @ dz2, dz2.sum(axis=0)


def lstm_step(x, h, c, weight, bias):
    h_new, c_new, _ = lstm_step_forward(x, h, c, weight, bias)
    return h_new, c_new


# --------------------------------------------------------------------------- #
# losses


def softmax(logits):
    logits = np.asarray(logits, dtype=DTYPE)
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, labels):
    """Cross-entropy of integer labels under ``softmax(logits)``.

    Works on a single vector or any batch of vectors along the last axis.
    Returns ``(loss, probs, grad_logits)`` where ``loss`` has the batch shape.
    """
    logits = np.asarray(logits, dtype=DTYPE)
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if n_classes < 2:
        raise ValueError("need at least two classes")
    if labels.shape != logits.shape[:-1]:
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    log_probs = z - lse
    probs = np.exp(log_probs)
    labels = labels.astype(np.intp)
    loss = -np.take_along_axis(log_probs, labels[..., None], axis=-1)[..., 0]
    grad = probs.copy()
    np.put_along_axis(grad, labels[..., None], np.take_along_axis(grad, labels[..., None], -1) - 1.0,
                      axis=-1)
    return loss, probs, grad


# --------------------------------------------------------------------------- #
# dropout


def dropout_mask(shape, rate, rng):
    """Inverted-dropout mask: zeros with probability ``rate``, survivors scaled."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape, dtype=DTYPE)
    keep = rng.random(shape) >= rate
    return keep / (1.0 - rate)


def dropout(x, rate, rng, training):
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = np.asarray(x, dtype=DTYPE)
    if not training or rate == 0.0:
        return x
    return x * dropout_mask(x.shape, rate, rng)


# --------------------------------------------------------------------------- #
# optimizer


class Adam:
    """Adam with bias-corrected moments.

    State is kept per parameter name; ``step`` updates the ``params`` mapping
    in place and returns it.
    """

    def __init__(self, learning_rate=1e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.learning_rate = learning_rate
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.first_moment: dict[str, np.ndarray] = {}
        self.second_moment: dict[str, np.ndarray] = {}

    def step(self, params, grads):
        for name, g in grads.items():
            if name not in params:
                raise KeyError(f"gradient for unknown parameter {name!r}")
            if np.shape(g) != np.shape(params[name]):
                raise ValueError(f"gradient shape {np.shape(g)} != parameter shape "
                                 f"{np.shape(params[name])} for {name!r}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name!r}")
        self.step_count += 1
        t = self.step_count
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** t
        c2 = 1.0 - b2 ** t
        for name, g in grads.items():
            m = self.first_moment.get(name)
            if m is None:
                m = self.first_moment[name] = np.zeros_like(params[name], dtype=DTYPE)
                self.second_moment[name] = np.zeros_like(params[name], dtype=DTYPE)
            v = self.second_moment[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            params[name] -= self.learning_rate * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return params

    def state_dict(self):
        return {
            "learning_rate": self.learning_rate, "beta1": self.beta1, "beta2": self.beta2,
            "eps": self.eps, "step_count": self.step_count,
            "first_moment": {k: v.copy() for k, v in self.first_moment.items()},
            "second_moment": {k: v.copy() for k, v in self.second_moment.items()},
        }
