"""Architectures assembled from :mod:`resebilstm.layers` behind one forward interface."""

from __future__ import annotations

import json
from collections import OrderedDict
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Dict, Optional

import numpy as np

from . import checkpoint
from . import layers as L
from . import tensor as tn
from .tensor import Tensor

# architecture -> (encoder variant, sequence block)
ARCHITECTURES = {
    "rese_bilstm": ("full", "bilstm"),
    "m1_e_bilstm": ("no_residual", "bilstm"),
    "m2_a_bilstm": ("no_ffn", "bilstm"),
    "m4_rese_lstm": ("full", "lstm"),
    "bilstm": (None, "bilstm"),
    "lstm": (None, "lstm"),
    "gru": (None, "gru"),
    "rnn": (None, "rnn"),
    "cnn": (None, "cnn"),
}

ABLATIONS = {
    "M1": "m1_e_bilstm",
    "M2": "m2_a_bilstm",
    "M3": "bilstm",
    "M4": "m4_rese_lstm",
}

ABLATION_LABELS = {
    "M1": "E-BiLSTM (M1)",
    "M2": "A-BiLSTM (M2)",
    "M3": "BiLSTM (M3)",
    "M4": "LSTM (M4)",
}

DISPLAY_NAMES = {
    "rese_bilstm": "ResE-BiLSTM",
    "m1_e_bilstm": "E-BiLSTM (M1)",
    "m2_a_bilstm": "A-BiLSTM (M2)",
    "m4_rese_lstm": "LSTM (M4)",
    "bilstm": "BiLSTM",
    "lstm": "LSTM",
    "gru": "GRU",
    "rnn": "RNN",
    "cnn": "CNN",
}


class ModelError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    architecture: str = "rese_bilstm"
    T: int = 14
    F: int = 17
    H: int = 64
    heads: int = 4
    d_k: int = 16
    d_head: int = 64
    dropout: float = 0.1
    seed: int = 0
    conv_channels: int = 64
    conv_kernel: int = 3

    def validate(self) -> "ModelSpec":
        if self.architecture not in ARCHITECTURES:
            raise ModelError(f"unknown architecture {self.architecture!r}; "
                             f"expected one of {sorted(ARCHITECTURES)}")
        if min(self.T, self.F, self.H, self.d_head) < 1:
            raise ModelError(f"non-positive width in {self}")
        if ARCHITECTURES[self.architecture][0] and (self.heads < 1 or self.d_k < 1):
            raise L.ConfigurationError("attention needs heads >= 1 and d_k >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ModelError(f"dropout rate {self.dropout} outside [0, 1)")
        return self

    @property
    def encoder(self) -> Optional[str]:
        return ARCHITECTURES[self.architecture][0]

    @property
    def sequence_block(self) -> str:
        return ARCHITECTURES[self.architecture][1]


def ablation_variant(base: ModelSpec, which: str) -> ModelSpec:
    """Spec of ablation variant M1..M4 derived from a full ResE-BiLSTM spec."""
    if base.architecture != "rese_bilstm":
        raise ModelError(f"ablation variants derive from rese_bilstm, not {base.architecture}")
    try:
        arch = ABLATIONS[which.upper()]
    except KeyError:
        raise ModelError(f"unknown ablation variant {which!r}; expected M1..M4") from None
    return replace(base, architecture=arch)


def _head_inputs(spec: ModelSpec) -> int:
    block = spec.sequence_block
    if block == "bilstm":
        return spec.T * 2 * spec.H
    if block == "cnn":
        return spec.conv_channels
    return spec.T * spec.H


def init_params(spec: ModelSpec) -> "OrderedDict[str, np.ndarray]":
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()

    def put(prefix, group):
        for k, v in group.items():
            params[f"{prefix}.{k}"] = v

    F, H = spec.F, spec.H
    if spec.encoder is not None:
        put("attn", L.init_attention(rng, F, spec.heads, spec.d_k))
        put("norm1", L.init_norm(F))
        if spec.encoder != "no_ffn":
            put("ffn", L.init_ffn(rng, F))
            put("norm2", L.init_norm(F))
    block = spec.sequence_block
    if block == "bilstm":
        put("lstm_f", L.init_lstm(rng, F, H))
        put("lstm_b", L.init_lstm(rng, F, H))
    elif block == "lstm":
        put("lstm_f", L.init_lstm(rng, F, H))
    elif block == "gru":
        put("gru", L.init_gru(rng, F, H))
    elif block == "rnn":
        put("rnn", L.init_rnn(rng, F, H))
    elif block == "cnn":
        put("conv", L.init_conv(rng, F, spec.conv_channels, spec.conv_kernel))
    put("head", L.init_head(rng, _head_inputs(spec), spec.d_head))
    return params


def encode(spec: ModelSpec, X: Tensor, p: Dict[str, Tensor],
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """Residual-enhanced encoder (or an ablated form of it); identity when absent."""
    if spec.encoder is None:
        return X
    attn_out = L.multi_head_attention(X, L.scope(p, "attn"))
    n1 = L.scope(p, "norm1")
    if spec.encoder == "no_residual":
        normed = tn.layer_norm(attn_out, n1["gamma"], n1["beta"], L.LN_EPS)
    else:
        normed = L.residual_norm(attn_out, X, n1["gamma"], n1["beta"])
    normed = tn.dropout(normed, spec.dropout, rng)
    if spec.encoder == "no_ffn":
        return normed
    ff = L.feed_forward(normed, L.scope(p, "ffn"))
    n2 = L.scope(p, "norm2")
    if spec.encoder == "no_residual":
        return tn.layer_norm(ff, n2["gamma"], n2["beta"], L.LN_EPS)
    # the second skip carries the attention output, as in the reference pseudocode
    return L.residual_norm(ff, attn_out, n2["gamma"], n2["beta"])


def logits(spec: ModelSpec, X: Tensor, p: Dict[str, Tensor],
           rng: Optional[np.random.Generator] = None) -> Tensor:
    """Pre-sigmoid scores, shape B x 1."""
    if X.ndim != 3 or X.shape[1:] != (spec.T, spec.F):
        raise tn.DimensionError(f"batch shape {X.shape} does not match (B, {spec.T}, {spec.F})")
    Z = encode(spec, X, p, rng)
    block = spec.sequence_block
    if block == "bilstm":
        seq = L.bilstm(Z, L.scope(p, "lstm_f"), L.scope(p, "lstm_b"))
    elif block == "lstm":
        seq = L.lstm_sweep(Z, L.scope(p, "lstm_f"))
    elif block == "gru":
        seq = L.gru_sweep(Z, L.scope(p, "gru"))
    elif block == "rnn":
        seq = L.rnn_sweep(Z, L.scope(p, "rnn"))
    else:
        conv = L.conv1d(Z, L.scope(p, "conv"))
        flat = tn.max_over_axis(conv, axis=1)
        return L.head_logits(flat, L.scope(p, "head"))
    B = X.shape[0]
    flat = tn.reshape(seq, (B, seq.shape[1] * seq.shape[2]))
    return L.head_logits(flat, L.scope(p, "head"))


class Model:
    """A spec plus its named parameters."""

    def __init__(self, spec: ModelSpec, params: Optional[Dict[str, np.ndarray]] = None):
        self.spec = spec.validate()
        self.params = init_params(spec) if params is None else OrderedDict(params)

    def parameter_count(self) -> int:
        return int(sum(v.size for v in self.params.values()))

    def tensors(self, requires_grad: bool = False) -> Dict[str, Tensor]:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}

    def logits(self, X: Tensor, p: Dict[str, Tensor], rng=None) -> Tensor:
        return logits(self.spec, X, p, rng)

    def forward(self, batch, chunk: int = 2048) -> np.ndarray:
        """Probabilities for a B x T x F batch (evaluation mode, no dropout)."""
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim != 3 or batch.shape[1:] != (self.spec.T, self.spec.F):
            raise tn.DimensionError(
                f"batch shape {batch.shape} does not match (B, {self.spec.T}, {self.spec.F})")
        p = self.tensors()
        out = np.empty(batch.shape[0])
        for start in range(0, batch.shape[0], chunk):
            z = logits(self.spec, Tensor(batch[start:start + chunk]), p).data[:, 0]
            out[start:start + chunk] = tn.probability(z)
        return out

    __call__ = forward

    def save(self, path) -> None:
        path = Path(path)
        checkpoint.save(path, self.params)
        sidecar(path).write_text(json.dumps(asdict(self.spec), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Model":
        path = Path(path)
        spec = ModelSpec(**json.loads(sidecar(path).read_text()))
        params = checkpoint.load(path)
        expected = init_params(spec)
        if list(params) != list(expected) or any(params[k].shape != expected[k].shape for k in expected):
            raise checkpoint.CheckpointError(f"{path}: parameter inventory does not match spec")
        return cls(spec, params)


def sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".spec.json")


def build(spec: ModelSpec) -> Model:
    return Model(spec)
