"""Scaled dot-product attention, timestamp-injected attention and inter-step weights."""

import logging
from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np

from .exceptions import ConfigError, ShapeError
from .tensor_core import (
    Tensor,
    add,
    as_tensor,
    concat_cols,
    cosine_similarity_matrix,
    glorot,
    matmul,
    mul,
    slice_cols,
    softmax_cols,
    softmax_rows,
    transpose,
)


logger = logging.getLogger(__name__)

SIMILARITIES = ("cosine", "dot")


@dataclass
class AttentionParams:
    """Query/key/value/output projections of one attention sublayer."""
    d_model: int
    d_k: int
    W_q: Tensor
    W_k: Tensor
    W_v: Tensor
    W_o: Tensor
    n_heads: int = 1

    def __post_init__(self):
        if self.d_model <= 0 or self.d_k <= 0:
            raise ShapeError(f"attention dims must be positive (d_model={self.d_model}, d_k={self.d_k})")
        if self.n_heads < 1 or self.d_k % self.n_heads:
            raise ShapeError(f"d_k={self.d_k} is not divisible into {self.n_heads} heads")
        expected = {
            "W_q": (self.d_model, self.d_k),
            "W_k": (self.d_model, self.d_k),
            "W_v": (self.d_model, self.d_k),
            "W_o": (self.d_k, self.d_model),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ShapeError(f"{name} has shape {actual}, expected {shape}")

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        d_model: int,
        d_k: int,
        n_heads: int = 1,
    ) -> "AttentionParams":
        return cls(
            d_model=d_model,
            d_k=d_k,
            W_q=glorot(rng, d_model, d_k, "W_q"),
            W_k=glorot(rng, d_model, d_k, "W_k"),
            W_v=glorot(rng, d_model, d_k, "W_v"),
            W_o=glorot(rng, d_k, d_model, "W_o"),
            n_heads=n_heads,
        )

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v, "W_o": self.W_o}

    def project(self, H: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
        if H.shape[1] != self.d_model:
            raise ShapeError(f"input width {H.shape[1]} does not match d_model={self.d_model}")
        return matmul(H, self.W_q), matmul(H, self.W_k), matmul(H, self.W_v)


@dataclass(frozen=True)
class TimestampEncoding:
    """Fixed sinusoidal encoding of scalar cycle indices.

    Even components are ``sin(w t)`` and odd components ``(1 - cos(w t)) / 2``, with
    geometric frequencies ``w_m = base ** (-2m / d_k)``. Every component lies in
    [-1, 1] and ``t = 0`` encodes to the zero vector.
    """
    d_k: int
    base: float = 10000.0
    null: bool = False

    def frequencies(self) -> np.ndarray:
        pair = np.arange(self.d_k) // 2
        return self.base ** (-2.0 * pair / self.d_k)

    def encode(self, timestamps: np.ndarray) -> np.ndarray:
        t = np.asarray(timestamps, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(t)):
            raise ShapeError("timestamps must be finite")
        if self.null:
            return np.zeros((t.size, self.d_k))
        phase = np.outer(t, self.frequencies())
        encoded = np.empty_like(phase)
        encoded[:, 0::2] = np.sin(phase[:, 0::2])
        encoded[:, 1::2] = 0.5 * (1.0 - np.cos(phase[:, 1::2]))
        return encoded


def _check_qkv(Q: Tensor, K: Tensor, V: Tensor, n_heads: int):
    if not Q.shape[0] == K.shape[0] == V.shape[0]:
        raise ShapeError(f"row counts differ: Q{Q.shape} K{K.shape} V{V.shape}")
    if Q.shape[1] != K.shape[1]:
        raise ShapeError(f"query width {Q.shape[1]} differs from key width {K.shape[1]}")
    if n_heads < 1 or Q.shape[1] % n_heads or V.shape[1] % n_heads:
        raise ShapeError(f"widths {Q.shape[1]}/{V.shape[1]} do not split into {n_heads} heads")


def _attend(Q: Tensor, K: Tensor, V: Tensor) -> Tuple[Tensor, Tensor]:
    scores = mul(matmul(Q, transpose(K)), 1.0 / np.sqrt(Q.shape[1]))
    weights = softmax_rows(scores)
    return matmul(weights, V), weights


def _multi_head(Q: Tensor, K: Tensor, V: Tensor, n_heads: int) -> Tuple[Tensor, Tensor]:
    if n_heads == 1:
        return _attend(Q, K, V)
    dq, dv = Q.shape[1] // n_heads, V.shape[1] // n_heads
    outputs = []
    weight_sum = np.zeros((Q.shape[0], Q.shape[0]))
    for h in range(n_heads):
        out, weights = _attend(
            slice_cols(Q, h * dq, (h + 1) * dq),
            slice_cols(K, h * dq, (h + 1) * dq),
            slice_cols(V, h * dv, (h + 1) * dv),
        )
        outputs.append(out)
        weight_sum += weights.data
    # Reported weights are the head average; gradients flow through the outputs.
    return concat_cols(outputs), Tensor(weight_sum / n_heads)


def scaled_dot_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    n_heads: int = 1,
) -> Tuple[Tensor, Tensor]:
    """``softmax_rows(Q K^T / sqrt(d_k)) V`` and its row-stochastic weights."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    _check_qkv(Q, K, V, n_heads)
    return _multi_head(Q, K, V, n_heads)


def timestamp_attention(
    Q: Tensor,
    K: Tensor,
    V: Tensor,
    timestamps: np.ndarray,
    encoding: Optional[TimestampEncoding] = None,
    n_heads: int = 1,
) -> Tuple[Tensor, Tensor]:
    """Attention with the timestamp encoding added to every query and key row."""
    Q, K, V = as_tensor(Q), as_tensor(K), as_tensor(V)
    _check_qkv(Q, K, V, n_heads)
    t = np.asarray(timestamps, dtype=np.float64).reshape(-1)
    if t.size != Q.shape[0]:
        raise ShapeError(f"{t.size} timestamps for {Q.shape[0]} steps")
    encoding = encoding or TimestampEncoding(Q.shape[1])
    E = encoding.encode(t)
    if E.shape != Q.shape:
        raise ShapeError(f"encoding shape {E.shape} does not match queries {Q.shape}")
    E = Tensor(E)
    return _multi_head(add(Q, E), add(K, E), V, n_heads)


def similarity_matrix(X: Tensor, similarity: str = "cosine") -> Tensor:
    if similarity == "cosine":
        return cosine_similarity_matrix(X, X)
    if similarity == "dot":
        return matmul(X, transpose(X))
    raise ConfigError(f"unknown similarity {similarity!r}; expected one of {SIMILARITIES}")


def temporal_step_weights(X: Tensor, similarity: str = "cosine") -> Tensor:
    """Column-stochastic ``A[i, t] = exp(sim(x_i, x_t)) / sum_j exp(sim(x_j, x_t))``."""
    X = as_tensor(X)
    return softmax_cols(similarity_matrix(X, similarity))
