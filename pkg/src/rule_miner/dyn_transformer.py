"""Encoder stack with time-decayed feedforward and gated attention residuals."""

import logging
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional

import numpy as np

from .exceptions import InputError, ShapeError
from .tensor_core import (
    Tensor,
    add,
    as_tensor,
    concat_cols,
    exp,
    gelu,
    glorot,
    make_rng,
    matmul,
    max_all,
    min_all,
    mul,
    neg,
    reduce_mean,
    sigmoid,
    softplus,
    sqrt,
    sub,
    zeros_param,
)
from .temporal_attention import (
    AttentionParams,
    TimestampEncoding,
    scaled_dot_attention,
    timestamp_attention,
)


logger = logging.getLogger(__name__)

GATE_VARIANCE_FLOOR = 1e-12


@dataclass(frozen=True)
class AblationFlags:
    """Switches for the temporal machinery, the layer gate and self-attention."""
    use_time_dependency: bool = True
    use_dynamic_weights: bool = True
    use_self_attention: bool = True

    def to_dict(self) -> Dict[str, bool]:
        return asdict(self)


ABLATION_VARIANTS: Dict[str, AblationFlags] = {
    "full": AblationFlags(),
    "no_time_dependency": AblationFlags(use_time_dependency=False),
    "no_dynamic_weights": AblationFlags(use_dynamic_weights=False),
    "no_self_attention": AblationFlags(use_self_attention=False),
}


@dataclass
class GateParams:
    """Maps [mean, std, min, max] of the layer input to the gate logit."""
    w: Tensor
    b: Tensor

    def __post_init__(self):
        if self.w.shape != (4, 1) or self.b.shape != (1, 1):
            raise ShapeError(f"gate expects w[4x1], b[1x1], got {self.w.shape}, {self.b.shape}")


@dataclass
class EncoderLayer:
    attn: AttentionParams
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor
    rho: Tensor
    gate: GateParams

    @classmethod
    def initialize(
        cls,
        rng: np.random.Generator,
        d_model: int,
        d_ff: int,
        d_k: int,
        n_heads: int = 1,
        decay_init: float = 0.01,
    ) -> "EncoderLayer":
        if decay_init <= 0:
            raise InputError(f"decay_init must be positive, got {decay_init}")
        return cls(
            attn=AttentionParams.initialize(rng, d_model, d_k, n_heads),
            W1=glorot(rng, d_model, d_ff, "W1"),
            b1=zeros_param(1, d_ff, "b1"),
            W2=glorot(rng, d_ff, d_model, "W2"),
            b2=zeros_param(1, d_model, "b2"),
            rho=Tensor([[np.log(np.expm1(decay_init))]], requires_grad=True, name="rho"),
            gate=GateParams(w=zeros_param(4, 1, "gate.w"), b=zeros_param(1, 1, "gate.b")),
        )

    @property
    def decay_rate(self) -> float:
        """Current lambda = softplus(rho), always >= 0."""
        return softplus(self.rho).item()

    def named_parameters(self) -> Dict[str, Tensor]:
        params = {f"attn.{name}": p for name, p in self.attn.named_parameters().items()}
        params.update({
            "ffn.W1": self.W1,
            "ffn.b1": self.b1,
            "ffn.W2": self.W2,
            "ffn.b2": self.b2,
            "decay.rho": self.rho,
            "gate.w": self.gate.w,
            "gate.b": self.gate.b,
        })
        return params


def feedforward(H: Tensor, layer: EncoderLayer) -> Tensor:
    hidden = gelu(add(matmul(H, layer.W1), layer.b1))
    return add(matmul(hidden, layer.W2), layer.b2)


def time_decay_ffn(
    H: Tensor,
    ages: np.ndarray,
    layer: EncoderLayer,
    use_decay: bool = True,
) -> Tensor:
    """FFN output scaled per step by ``exp(-lambda * age)``."""
    ages = np.asarray(ages, dtype=np.float64).reshape(-1)
    if ages.size != H.shape[0]:
        raise ShapeError(f"{ages.size} ages for {H.shape[0]} steps")
    if not np.all(np.isfinite(ages)) or np.any(ages < 0):
        raise InputError(f"ages must be finite and non-negative, got min {ages.min()}")

    out = feedforward(H, layer)
    if not use_decay:
        return out
    factor = exp(neg(mul(Tensor(ages.reshape(-1, 1)), softplus(layer.rho))))
    return mul(out, factor)


def dynamic_weight(H: Tensor, gate: GateParams) -> Tensor:
    """Layer gate ``2 * sigmoid(w . [mean, std, min, max](H) + b)`` as a [1x1] tensor."""
    mean = reduce_mean(H)
    centered = sub(H, mean)
    std = sqrt(add(reduce_mean(mul(centered, centered)), GATE_VARIANCE_FLOOR))
    stats = concat_cols([mean, std, min_all(H), max_all(H)])
    return mul(sigmoid(add(matmul(stats, gate.w), gate.b)), 2.0)


def layer_forward(
    H: Tensor,
    timestamps: np.ndarray,
    flags: AblationFlags,
    layer: EncoderLayer,
    encoding: Optional[TimestampEncoding] = None,
) -> Tensor:
    """One residual attention sublayer followed by one residual time-decayed FFN."""
    H = as_tensor(H)
    timestamps = np.asarray(timestamps, dtype=np.float64).reshape(-1)
    if H.shape[1] != layer.attn.d_model:
        raise ShapeError(f"layer input width {H.shape[1]} != d_model {layer.attn.d_model}")
    if timestamps.size != H.shape[0]:
        raise ShapeError(f"{timestamps.size} timestamps for {H.shape[0]} steps")

    if flags.use_self_attention:
        Q, K, V = layer.attn.project(H)
        if flags.use_time_dependency:
            context, _ = timestamp_attention(
                Q, K, V, timestamps,
                encoding=encoding or TimestampEncoding(layer.attn.d_k),
                n_heads=layer.attn.n_heads,
            )
        else:
            context, _ = scaled_dot_attention(Q, K, V, n_heads=layer.attn.n_heads)
        update = matmul(context, layer.attn.W_o)
        if flags.use_dynamic_weights:
            update = mul(update, dynamic_weight(H, layer.gate))
        H = add(H, update)

    ages = timestamps[-1] - timestamps
    return add(H, time_decay_ffn(H, ages, layer, use_decay=flags.use_time_dependency))


class DynamicTransformer:
    """Input projection followed by a stack of :class:`EncoderLayer`."""

    def __init__(
        self,
        d_in: int,
        d_model: int = 32,
        d_ff: int = 64,
        n_layers: int = 2,
        d_k: int = 32,
        n_heads: int = 1,
        decay_init: float = 0.01,
        timestamp_base: float = 10000.0,
        rng: Optional[np.random.Generator] = None,
    ):
        if min(d_in, d_model, d_ff, d_k) <= 0:
            raise ShapeError("encoder dimensions must be positive")
        if n_layers < 1:
            raise ShapeError(f"encoder needs at least one layer, got {n_layers}")
        rng = rng if rng is not None else make_rng(0, "init")

        self.d_in = d_in
        self.d_model = d_model
        self.W_in = glorot(rng, d_in, d_model, "W_in")
        self.b_in = zeros_param(1, d_model, "b_in")
        self.layers: List[EncoderLayer] = [
            EncoderLayer.initialize(rng, d_model, d_ff, d_k, n_heads, decay_init)
            for _ in range(n_layers)
        ]
        self.encoding = TimestampEncoding(d_k, base=timestamp_base)

        logger.debug(
            f"DynamicTransformer initialized: d_in={d_in} d_model={d_model} "
            f"layers={n_layers} heads={n_heads}"
        )

    def named_parameters(self) -> Dict[str, Tensor]:
        params = {"encoder.W_in": self.W_in, "encoder.b_in": self.b_in}
        for index, layer in enumerate(self.layers):
            for name, tensor in layer.named_parameters().items():
                params[f"encoder.layers.{index}.{name}"] = tensor
        return params

    def decay_rates(self) -> List[float]:
        return [layer.decay_rate for layer in self.layers]

    def encode(self, X: Tensor, timestamps: np.ndarray, flags: AblationFlags) -> Tensor:
        X = as_tensor(X)
        if X.shape[1] != self.d_in:
            raise ShapeError(f"input width {X.shape[1]} != d_in {self.d_in}")
        H = add(matmul(X, self.W_in), self.b_in)
        for layer in self.layers:
            H = layer_forward(H, timestamps, flags, layer, self.encoding)
        return H


def encode(
    X: Tensor,
    timestamps: np.ndarray,
    flags: AblationFlags,
    model: DynamicTransformer,
) -> Tensor:
    return model.encode(X, timestamps, flags)
