"""Building blocks of the encoder + BiLSTM network and the baseline cells.

Parameters travel as plain mappings from short names to :class:`Tensor`
(``{"w_f": ..., "b_f": ...}``); :func:`scope` cuts such a view out of a
model-wide flat parameter dict.  All layers accept a leading batch axis.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

from . import tensor as tn
from .tensor import Tensor

LN_EPS = 1e-6
FFN_WIDTH = 256
GATES = ("f", "i", "c", "o")


class ConfigurationError(ValueError):
    pass


def scope(params: Mapping[str, Tensor], prefix: str) -> Dict[str, Tensor]:
    cut = prefix + "."
    return {k[len(cut):]: v for k, v in params.items() if k.startswith(cut)}


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape)


# --------------------------------------------------------------------------
# initialisers
# --------------------------------------------------------------------------

def init_attention(rng, F: int, heads: int, d_k: int) -> Dict[str, np.ndarray]:
    if heads < 1 or d_k < 1:
        raise ConfigurationError(f"attention needs heads >= 1 and d_k >= 1 (got {heads}, {d_k})")
    p = OrderedDict()
    for i in range(heads):
        for kind in ("wq", "wk", "wv"):
            p[f"{kind}.{i}"] = glorot(rng, (F, d_k), F, d_k)
    p["wo"] = glorot(rng, (heads * d_k, F), heads * d_k, F)
    return p


def init_norm(F: int) -> Dict[str, np.ndarray]:
    return OrderedDict(gamma=np.ones(F), beta=np.zeros(F))


def init_ffn(rng, F: int, width: int = FFN_WIDTH) -> Dict[str, np.ndarray]:
    return OrderedDict(
        w1=glorot(rng, (F, width), F, width), b1=np.zeros(width),
        w2=glorot(rng, (width, F), width, F), b2=np.zeros(F),
    )


def init_lstm(rng, F: int, H: int) -> Dict[str, np.ndarray]:
    p = OrderedDict()
    for g in GATES:
        p[f"w_{g}"] = glorot(rng, (H, F + H), F + H, H)
    for g in GATES:
        p[f"b_{g}"] = np.zeros(H)
    return p


def init_gru(rng, F: int, H: int) -> Dict[str, np.ndarray]:
    p = OrderedDict()
    for g in ("z", "r", "h"):
        p[f"w_{g}"] = glorot(rng, (H, F + H), F + H, H)
    for g in ("z", "r", "h"):
        p[f"b_{g}"] = np.zeros(H)
    return p


def init_rnn(rng, F: int, H: int) -> Dict[str, np.ndarray]:
    return OrderedDict(w=glorot(rng, (H, F + H), F + H, H), b=np.zeros(H))


def init_conv(rng, F: int, channels: int, k: int) -> Dict[str, np.ndarray]:
    return OrderedDict(kernel=glorot(rng, (k, F, channels), k * F, channels), bias=np.zeros(channels))


def init_head(rng, n_in: int, hidden: int) -> Dict[str, np.ndarray]:
    return OrderedDict(
        w1=glorot(rng, (n_in, hidden), n_in, hidden), b1=np.zeros(hidden),
        w2=glorot(rng, (hidden, 1), hidden, 1), b2=np.zeros(1),
    )


# --------------------------------------------------------------------------
# encoder
# --------------------------------------------------------------------------

def multi_head_attention(X: Tensor, p: Mapping[str, Tensor], return_weights: bool = False):
    """Scaled dot-product self-attention over the time axis of X (T x F or B x T x F).

    Heads are discovered from the ``wq.<i>`` keys; ``wo`` maps the
    concatenated head outputs back to F columns.
    """
    heads = sum(1 for k in p if k.startswith("wq."))
    if heads == 0:
        raise ConfigurationError("attention: no heads configured")
    d_k = p["wq.0"].shape[1]
    if d_k == 0:
        raise ConfigurationError("attention: key width d_k is 0")
    inv_sqrt = 1.0 / math.sqrt(d_k)
    Z = None
    weights = []
    for i in range(heads):
        Q = tn.matmul(X, p[f"wq.{i}"])
        K = tn.matmul(X, p[f"wk.{i}"])
        V = tn.matmul(X, p[f"wv.{i}"])
        A = tn.softmax_rows(tn.scale(tn.matmul(Q, tn.transpose(K)), inv_sqrt))
        Zi = tn.matmul(A, V)
        Z = Zi if Z is None else tn.concat_last_axis(Z, Zi)
        weights.append(A)
    out = tn.matmul(Z, p["wo"])
    return (out, weights) if return_weights else out


def residual_norm(sub_output: Tensor, sub_input: Tensor, gamma: Tensor, beta: Tensor,
                  eps: float = LN_EPS) -> Tensor:
    if sub_output.shape != sub_input.shape:
        raise tn.DimensionError(f"residual_norm: {sub_output.shape} vs {sub_input.shape}")
    return tn.layer_norm(tn.add(sub_output, sub_input), gamma, beta, eps)


def feed_forward(X: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    hidden = tn.relu(tn.add(tn.matmul(X, p["w1"]), p["b1"]))
    return tn.add(tn.matmul(hidden, p["w2"]), p["b2"])


# --------------------------------------------------------------------------
# recurrent cells
# --------------------------------------------------------------------------

def _zeros(batch_shape: tuple, H: int) -> Tensor:
    return Tensor(np.zeros(batch_shape + (H,)))


def lstm_cell_step(x_t: Tensor, h_prev: Tensor, c_prev: Tensor,
                   p: Mapping[str, Tensor]) -> Tuple[Tensor, Tensor]:
    """One LSTM step; each gate weight is H x (F+H) applied to [x_t, h_prev]."""
    xh = tn.concat_last_axis(x_t, h_prev)

    def gate(g):
        return tn.add(tn.matmul(xh, tn.transpose(p[f"w_{g}"])), p[f"b_{g}"])

    f = tn.sigmoid(gate("f"))
    i = tn.sigmoid(gate("i"))
    c_tilde = tn.tanh(gate("c"))
    o = tn.sigmoid(gate("o"))
    c = tn.add(tn.mul(f, c_prev), tn.mul(i, c_tilde))
    h = tn.mul(o, tn.tanh(c))
    return h, c


def _slice(x: Tensor, k: int, H: int) -> Tensor:
    return tn.slice_axis(x, -1, k * H, (k + 1) * H)


def lstm_sweep(X: Tensor, p: Mapping[str, Tensor], reverse: bool = False) -> Tensor:
    """Run one LSTM direction over B x T x F from zero state; returns B x T x H.

    Same arithmetic as repeated :func:`lstm_cell_step`, but the input half of
    every gate product is computed for all steps in one matmul.
    """
    B, T, F = X.shape
    if T == 0:
        raise tn.DimensionError("lstm: empty sequence")
    H = p["b_f"].shape[0]
    w_all = None
    for g in GATES:
        wt = tn.transpose(p[f"w_{g}"])
        w_all = wt if w_all is None else tn.concat_last_axis(w_all, wt)
    b_all = None
    for g in GATES:
        b_all = p[f"b_{g}"] if b_all is None else tn.concat_last_axis(b_all, p[f"b_{g}"])
    w_x = tn.slice_axis(w_all, 0, 0, F)
    w_h = tn.slice_axis(w_all, 0, F, F + H)
    xw = tn.add(tn.matmul(X, w_x), b_all)

    order = range(T - 1, -1, -1) if reverse else range(T)
    h = c = None
    outputs: List[Optional[Tensor]] = [None] * T
    for t in order:
        z = tn.take_step(xw, t)
        if h is not None:
            z = tn.add(z, tn.matmul(h, w_h))
        s = tn.sigmoid(z)
        f, i, o = _slice(s, 0, H), _slice(s, 1, H), _slice(s, 3, H)
        g = tn.tanh(_slice(z, 2, H))
        c = tn.mul(i, g) if c is None else tn.add(tn.mul(f, c), tn.mul(i, g))
        h = tn.mul(o, tn.tanh(c))
        outputs[t] = h
    return tn.stack_steps(outputs)


def bilstm(X: Tensor, fwd: Mapping[str, Tensor], bwd: Mapping[str, Tensor]) -> Tensor:
    """Row t of the result is [h_f(t), h_b(t)]; shape B x T x 2H."""
    if X.ndim != 3:
        raise tn.DimensionError(f"bilstm expects B x T x F, got {X.shape}")
    if X.shape[1] == 0:
        raise tn.DimensionError("bilstm: empty sequence")
    return tn.concat_last_axis(lstm_sweep(X, fwd), lstm_sweep(X, bwd, reverse=True))


def gru_step(x_t: Tensor, h_prev: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    xh = tn.concat_last_axis(x_t, h_prev)
    z = tn.sigmoid(tn.add(tn.matmul(xh, tn.transpose(p["w_z"])), p["b_z"]))
    r = tn.sigmoid(tn.add(tn.matmul(xh, tn.transpose(p["w_r"])), p["b_r"]))
    xrh = tn.concat_last_axis(x_t, tn.mul(r, h_prev))
    cand = tn.tanh(tn.add(tn.matmul(xrh, tn.transpose(p["w_h"])), p["b_h"]))
    # h = h_prev + z * (cand - h_prev)
    return tn.add(h_prev, tn.mul(z, tn.sub(cand, h_prev)))


def rnn_step(x_t: Tensor, h_prev: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    xh = tn.concat_last_axis(x_t, h_prev)
    return tn.tanh(tn.add(tn.matmul(xh, tn.transpose(p["w"])), p["b"]))


def _sweep(X: Tensor, p, step, H: int) -> Tensor:
    B, T, _ = X.shape
    if T == 0:
        raise tn.DimensionError("empty sequence")
    h = _zeros((B,), H)
    outs = []
    for t in range(T):
        h = step(tn.take_step(X, t), h, p)
        outs.append(h)
    return tn.stack_steps(outs)


def gru_sweep(X: Tensor, p) -> Tensor:
    return _sweep(X, p, gru_step, p["b_z"].shape[0])


def rnn_sweep(X: Tensor, p) -> Tensor:
    return _sweep(X, p, rnn_step, p["b"].shape[0])


def conv1d(X: Tensor, p: Mapping[str, Tensor], activation: Optional[str] = "relu") -> Tensor:
    """Valid-padding convolution over time: B x T x F -> B x (T-k+1) x C."""
    k, F, C = p["kernel"].shape
    if k > X.shape[1]:
        raise ConfigurationError(f"conv1d: kernel length {k} exceeds sequence length {X.shape[1]}")
    cols = tn.unfold_time(X, k)
    out = tn.add(tn.matmul(cols, tn.reshape(p["kernel"], (k * F, C))), p["bias"])
    return tn.relu(out) if activation == "relu" else out


# --------------------------------------------------------------------------
# output head
# --------------------------------------------------------------------------

def head_logits(flat: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    hidden = tn.relu(tn.add(tn.matmul(flat, p["w1"]), p["b1"]))
    return tn.add(tn.matmul(hidden, p["w2"]), p["b2"])


def head(flat: Tensor, p: Mapping[str, Tensor]) -> Tensor:
    """Two dense layers, ReLU then sigmoid; ``flat`` is B x n_in (or n_in).

    Differentiable; for reporting use :func:`head_probability`, which also
    keeps saturated outputs strictly inside (0, 1).
    """
    if flat.ndim == 1:
        flat = tn.reshape(flat, (1, flat.shape[0]))
    return tn.sigmoid(head_logits(flat, p))


def head_probability(flat: Tensor, p: Mapping[str, Tensor]) -> np.ndarray:
    if flat.ndim == 1:
        flat = tn.reshape(flat, (1, flat.shape[0]))
    return tn.probability(head_logits(flat, p).data)
