"""Joint rule-likelihood / RUL training with drift-scaled adaptive-moment updates."""

import logging
from dataclasses import asdict, dataclass, field
from itertools import islice
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config.settings import ModelConfig, RunConfig, TrainConfig
from .data_io import WindowedSample
from .dyn_transformer import AblationFlags, DynamicTransformer
from .exceptions import InputError, NumericError, ShapeError
from .rule_engine import (
    FeatureStats,
    RuleAssignment,
    RuleCodebook,
    RuleGenerator,
    assign_probabilities,
    attention_salience,
    cumulative_rule_count,
    discretize_code,
    profile_windows,
    rule_states,
)
from .tensor_core import (
    Tape,
    Tensor,
    add,
    as_tensor,
    backward,
    glorot,
    log,
    make_rng,
    matmul,
    mul,
    reduce_mean,
    reduce_sum,
    stack_rows,
    sub,
    zeros_param,
)
from .temporal_attention import temporal_step_weights


logger = logging.getLogger(__name__)

RuleKey = Tuple[Any, int]
CODEBOOK_PARAM = "codebook.codes"


@dataclass
class ModelInput:
    """A window with its normalised model features and scaled RUL target."""
    sample: WindowedSample
    features: np.ndarray
    rul_target: float

    @property
    def timestamps(self) -> np.ndarray:
        return self.sample.timestamps


@dataclass
class ForwardOutput:
    hidden: Tensor
    step_weights: Tensor
    rule_states: Tensor
    assignments: Tensor
    rul: Tensor

    @property
    def window_code(self) -> int:
        """Argmax code at the final step."""
        return int(np.argmax(self.assignments.data[-1]))

    def step_mass(self) -> np.ndarray:
        """Mean attention mass each step receives across all columns."""
        return self.step_weights.data.mean(axis=1)


class RuleMiningModel:
    """Encoder, rule recurrence, codebook and RUL head."""

    def __init__(
        self,
        encoder: DynamicTransformer,
        generator: RuleGenerator,
        codebook: RuleCodebook,
        head_w: Tensor,
        head_b: Tensor,
        temperature: float = 0.5,
        similarity: str = "cosine",
    ):
        if generator.d_model != encoder.d_model:
            raise ShapeError(f"generator d_model {generator.d_model} != encoder {encoder.d_model}")
        if codebook.d_r != generator.d_r:
            raise ShapeError(f"codebook width {codebook.d_r} != rule state width {generator.d_r}")
        self.encoder = encoder
        self.generator = generator
        self.codebook = codebook
        self.head_w = head_w
        self.head_b = head_b
        self.temperature = temperature
        self.similarity = similarity

    @classmethod
    def build(cls, config: ModelConfig, d_in: int, seed: int) -> "RuleMiningModel":
        rng = make_rng(seed, "init")
        encoder = DynamicTransformer(
            d_in=d_in,
            d_model=config.d_model,
            d_ff=config.d_ff,
            n_layers=config.layers,
            d_k=config.d_k,
            n_heads=config.n_heads,
            decay_init=config.decay_init,
            timestamp_base=config.timestamp_base,
            rng=rng,
        )
        generator = RuleGenerator.initialize(rng, config.d_model, config.d_r)
        codebook = RuleCodebook.random(rng, config.m, config.d_r)
        return cls(
            encoder=encoder,
            generator=generator,
            codebook=codebook,
            head_w=glorot(rng, config.d_model, 1, "head.w"),
            head_b=zeros_param(1, 1, "head.b"),
            temperature=config.temperature,
            similarity=config.similarity,
        )

    def named_parameters(self) -> Dict[str, Tensor]:
        params = dict(self.encoder.named_parameters())
        params.update({f"generator.{k}": v for k, v in self.generator.named_parameters().items()})
        params[CODEBOOK_PARAM] = self.codebook.codes
        params["head.w"] = self.head_w
        params["head.b"] = self.head_b
        return params

    def forward(self, features: Any, timestamps: np.ndarray, flags: AblationFlags) -> ForwardOutput:
        H = self.encoder.encode(as_tensor(features), timestamps, flags)
        A = temporal_step_weights(H, self.similarity)
        R = rule_states(H, A, self.generator)
        P = assign_probabilities(R, self.codebook.codes, self.temperature)
        rul = add(matmul(reduce_mean(H, axis=0), self.head_w), self.head_b)
        return ForwardOutput(hidden=H, step_weights=A, rule_states=R, assignments=P, rul=rul)


# ---------------------------------------------------------------------------
# Loss terms
# ---------------------------------------------------------------------------

def rule_log_likelihood(
    assignments: Union[Tensor, np.ndarray, Sequence[RuleAssignment]],
    targets: Sequence[int],
) -> Tensor:
    """Negative log-likelihood ``-sum_t log p(target_t)`` as a scalar tensor.

    Probabilities below 1e-12 are clamped before the log.
    """
    if isinstance(assignments, (list, tuple)) and assignments and isinstance(assignments[0], RuleAssignment):
        assignments = np.stack([a.probabilities for a in assignments])
    probs = as_tensor(assignments)
    targets = np.asarray(targets, dtype=np.int64).reshape(-1)
    if targets.size != probs.shape[0]:
        raise ShapeError(f"{targets.size} targets for {probs.shape[0]} steps")
    if np.any(targets < 0) or np.any(targets >= probs.shape[1]):
        raise InputError(f"targets must lie in [0, {probs.shape[1]})")
    onehot = np.zeros(probs.shape)
    onehot[np.arange(targets.size), targets] = 1.0
    picked = reduce_sum(mul(probs, onehot), axis=1)
    return mul(reduce_sum(log(picked)), -1.0)


@dataclass
class LossTerms:
    nll: float
    rul_mse: float
    code_entropy_reg: float
    repulsion: float = 0.0
    w_nll: float = 1.0
    w_rul: float = 1.0
    w_ent: float = 0.1
    w_rep: float = 0.1

    @property
    def total(self) -> float:
        return (self.w_nll * self.nll + self.w_rul * self.rul_mse
                + self.w_ent * self.code_entropy_reg + self.w_rep * self.repulsion)


def batch_loss(
    model: RuleMiningModel,
    batch: Sequence[ModelInput],
    flags: AblationFlags,
    config: TrainConfig,
) -> Tuple[Tensor, LossTerms, List[ForwardOutput]]:
    """Weighted training objective over one batch, with its parts and forward outputs."""
    if not batch:
        raise InputError("empty batch")
    outputs = [model.forward(item.features, item.timestamps, flags) for item in batch]

    per_window = []
    for out in outputs:
        probs = out.assignments
        targets = np.argmax(probs.data, axis=1)
        per_window.append(mul(rule_log_likelihood(probs, targets), 1.0 / probs.shape[0]))
    nll = reduce_mean(stack_rows(per_window))

    marginal = reduce_mean(stack_rows([out.assignments for out in outputs]), axis=0)
    entropy_reg = reduce_sum(mul(marginal, log(marginal)))

    targets = Tensor(np.array([[item.rul_target] for item in batch]))
    diff = sub(stack_rows([out.rul for out in outputs]), targets)
    rul_mse = reduce_mean(mul(diff, diff))

    repulsion = model.codebook.repulsion()

    total = add(
        add(mul(nll, config.w_nll), mul(rul_mse, config.w_rul)),
        add(mul(entropy_reg, config.w_ent), mul(repulsion, config.w_rep)),
    )
    terms = LossTerms(
        nll=nll.item(),
        rul_mse=rul_mse.item(),
        code_entropy_reg=entropy_reg.item(),
        repulsion=repulsion.item(),
        w_nll=config.w_nll,
        w_rul=config.w_rul,
        w_ent=config.w_ent,
        w_rep=config.w_rep,
    )
    return total, terms, outputs


# ---------------------------------------------------------------------------
# Drift and learning rate
# ---------------------------------------------------------------------------

def symmetric_gaussian_kl(
    mean_p: np.ndarray,
    var_p: np.ndarray,
    mean_q: np.ndarray,
    var_q: np.ndarray,
    eps: float = 1e-8,
) -> np.ndarray:
    """Per-feature ``(KL(p||q) + KL(q||p)) / 2`` for diagonal Gaussians."""
    var_p = np.maximum(np.asarray(var_p, dtype=np.float64), eps)
    var_q = np.maximum(np.asarray(var_q, dtype=np.float64), eps)
    shift2 = (np.asarray(mean_p, dtype=np.float64) - np.asarray(mean_q, dtype=np.float64)) ** 2
    kl_pq = 0.5 * (np.log(var_q / var_p) + (var_p + shift2) / var_q - 1.0)
    kl_qp = 0.5 * (np.log(var_p / var_q) + (var_q + shift2) / var_p - 1.0)
    return np.maximum(0.5 * (kl_pq + kl_qp), 0.0)


class DriftMonitor:
    """Historical (exponentially decayed) versus current per-feature statistics."""

    def __init__(self, decay: float = 0.99, eps: float = 1e-8):
        self.decay = decay
        self.eps = eps
        self.historical_mean: Optional[np.ndarray] = None
        self.historical_var: Optional[np.ndarray] = None
        self.current_mean: Optional[np.ndarray] = None
        self.current_var: Optional[np.ndarray] = None
        self.drift = 0.0
        self.stats = {"batches_observed": 0, "max_drift": 0.0}

    def set_statistics(
        self,
        historical_mean: np.ndarray,
        historical_var: np.ndarray,
        current_mean: np.ndarray,
        current_var: np.ndarray,
    ) -> float:
        self.historical_mean = np.asarray(historical_mean, dtype=np.float64).reshape(-1)
        self.historical_var = np.asarray(historical_var, dtype=np.float64).reshape(-1)
        self.current_mean = np.asarray(current_mean, dtype=np.float64).reshape(-1)
        self.current_var = np.asarray(current_var, dtype=np.float64).reshape(-1)
        self.drift = distribution_divergence(self)
        return self.drift

    def observe(self, rows: np.ndarray) -> float:
        """Score a batch against history, then fold it into the history."""
        rows = np.atleast_2d(np.asarray(rows, dtype=np.float64))
        mean, var = rows.mean(axis=0), rows.var(axis=0)
        if self.historical_mean is None:
            self.historical_mean, self.historical_var = mean.copy(), var.copy()
        drift = self.set_statistics(self.historical_mean, self.historical_var, mean, var)

        self.historical_mean = self.decay * self.historical_mean + (1 - self.decay) * mean
        self.historical_var = self.decay * self.historical_var + (1 - self.decay) * var
        self.stats["batches_observed"] += 1
        self.stats["max_drift"] = max(self.stats["max_drift"], drift)
        return drift


def distribution_divergence(monitor: DriftMonitor) -> float:
    """Mean symmetric Gaussian KL between the monitor's historical and current statistics."""
    if monitor.historical_mean is None or monitor.current_mean is None:
        return 0.0
    if monitor.historical_mean.shape != monitor.current_mean.shape:
        raise ShapeError(
            f"historical stats {monitor.historical_mean.shape} vs current {monitor.current_mean.shape}"
        )
    return float(symmetric_gaussian_kl(
        monitor.historical_mean, monitor.historical_var,
        monitor.current_mean, monitor.current_var,
        eps=monitor.eps,
    ).mean())


def adaptive_learning_rate(base_lr: float, drift: float, kappa: float = 1.0) -> float:
    """``base_lr / (1 + kappa * drift)``."""
    if not base_lr > 0:
        raise InputError(f"base learning rate must be positive, got {base_lr}")
    if drift < 0 or kappa < 0:
        raise InputError(f"drift and kappa must be non-negative, got {drift}, {kappa}")
    return base_lr / (1.0 + kappa * drift)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    lr: float
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


class AdamOptimizer:
    """Adaptive-moment updates over a named parameter set."""

    def __init__(
        self,
        params: Dict[str, Tensor],
        lr: float = 1e-3,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-8,
    ):
        self.params = params
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = OptimizerState(
            lr=lr,
            first_moment={name: np.zeros_like(p.data) for name, p in params.items()},
            second_moment={name: np.zeros_like(p.data) for name, p in params.items()},
        )

    def step(self, grads: Dict[Tensor, np.ndarray], lr: Optional[float] = None) -> None:
        """Apply one update; a zero learning rate leaves everything untouched."""
        lr = self.state.lr if lr is None else lr
        if lr == 0.0:
            return
        self.state.step += 1
        correction1 = 1.0 - self.beta1 ** self.state.step
        correction2 = 1.0 - self.beta2 ** self.state.step
        for name, param in self.params.items():
            grad = grads.get(param)
            if grad is None:
                continue
            m = self.state.first_moment[name]
            v = self.state.second_moment[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * grad
            v *= self.beta2
            v += (1.0 - self.beta2) * grad * grad
            param.data -= lr * (m / correction1) / (np.sqrt(v / correction2) + self.eps)

    def reset_moments(self, name: str, rows: Sequence[int]) -> None:
        """Zero both moments for ``rows`` of parameter ``name`` (after the rows were reseeded)."""
        if name not in self.params:
            raise InputError(f"unknown parameter {name!r}")
        rows = list(rows)
        self.state.first_moment[name][rows] = 0.0
        self.state.second_moment[name][rows] = 0.0


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class StepRecord:
    step: int
    nll: float
    rul_mse: float
    entropy_reg: float
    repulsion: float
    total: float
    drift: float
    lr: float

    def to_row(self) -> Dict[str, float]:
        return asdict(self)


LOG_COLUMNS = ["step", "nll", "rul_mse", "entropy_reg", "total", "drift", "lr"]

StepCallback = Callable[[int, Sequence[ModelInput], List[ForwardOutput]], None]


def train_epoch(
    model: RuleMiningModel,
    batches: Sequence[Sequence[ModelInput]],
    optimizer: AdamOptimizer,
    monitor: DriftMonitor,
    flags: AblationFlags,
    config: TrainConfig,
    step_offset: int = 0,
    on_step: Optional[StepCallback] = None,
) -> List[StepRecord]:
    """One pass over ``batches``: forward, backward, drift update, scaled Adam step."""
    records = []
    for index, batch in enumerate(batches):
        step = step_offset + index
        with Tape() as tape:
            total, terms, outputs = batch_loss(model, batch, flags, config)
        value = total.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite loss {value} at batch {step}")
        grads = backward(tape, total)

        drift = monitor.observe(np.vstack([item.features for item in batch]))
        lr = 0.0 if config.lr == 0 else adaptive_learning_rate(config.lr, drift, config.kappa)
        optimizer.step(grads, lr)

        record = StepRecord(
            step=step,
            nll=terms.nll,
            rul_mse=terms.rul_mse,
            entropy_reg=terms.code_entropy_reg,
            repulsion=terms.repulsion,
            total=value,
            drift=drift,
            lr=lr,
        )
        records.append(record)
        if config.log_every and step % config.log_every == 0:
            logger.debug(
                f"step {step}: total={value:.6f} nll={terms.nll:.6f} "
                f"rul_mse={terms.rul_mse:.6f} drift={drift:.6f} lr={lr:.3e}"
            )
        if on_step is not None:
            on_step(step, batch, outputs)
    return records


@dataclass
class TrainingResult:
    history: List[StepRecord]
    rule_keys: List[List[RuleKey]]
    codes_in_use: Optional[int] = None

    @property
    def rule_timeline(self) -> List[int]:
        return cumulative_rule_count(self.rule_keys)


class Trainer:
    """Seeded codebook seeding, batching, code revival and the step loop for one run."""

    def __init__(
        self,
        model: RuleMiningModel,
        config: RunConfig,
        feature_stats: Optional[FeatureStats] = None,
    ):
        self.model = model
        self.config = config
        self.flags = config.flags
        self.feature_stats = feature_stats
        train = config.train
        self.optimizer = AdamOptimizer(
            model.named_parameters(), lr=train.lr, beta1=train.beta1, beta2=train.beta2, eps=train.eps
        )
        self.monitor = DriftMonitor(decay=train.drift_decay)
        self.rule_keys: List[List[RuleKey]] = []
        self._recent_states: List[np.ndarray] = []
        self._sample_order: Optional[np.ndarray] = None

        self.stats = {
            "steps": 0,
            "windows_seen": 0,
            "step_rules": 0,
            "revivals": 0,
            "codes_in_use": 0,
        }

        logger.info(
            f"Trainer initialized: steps={train.steps}, batch_size={train.batch_size}, "
            f"lr={train.lr}, seed={train.seed}, flags={self.flags.to_dict()}"
        )

    def _final_states(self, samples: Sequence[ModelInput], order: Sequence[int]) -> np.ndarray:
        return np.stack([
            self.model.forward(samples[i].features, samples[i].timestamps, self.flags).rule_states.data[-1]
            for i in order
        ])

    def initialize_codebook(self, samples: Sequence[ModelInput]):
        """k-means++ over final-step rule states of a seeded sample of windows."""
        rng = make_rng(self.config.train.seed, "codebook")
        self._sample_order = rng.permutation(len(samples))[:self.config.train.codebook_init_windows]
        self.model.codebook.initialize(self._final_states(samples, self._sample_order), rng)

    def revive_codes(self, states: np.ndarray) -> List[int]:
        """Reseed unused codes from ``states`` and clear their optimizer moments."""
        revived = self.model.codebook.revive(states)
        if revived:
            self.optimizer.reset_moments(CODEBOOK_PARAM, revived)
            self.stats["revivals"] += len(revived)
        return revived

    def codes_in_use(self, states: np.ndarray) -> int:
        return int(np.unique(self.model.codebook.nearest(states)).size)

    def ensure_codes_in_use(self, samples: Sequence[ModelInput], revive: bool = True) -> int:
        """After the loop, revive until ``train.min_codes_in_use`` codes win some sampled window.

        Gives up after ``m`` rounds; with ``revive=False`` it only counts.
        """
        order = self._sample_order if self._sample_order is not None else np.arange(len(samples))
        states = self._final_states(samples, order)
        target = min(self.config.train.min_codes_in_use, self.model.codebook.m)
        used = self.codes_in_use(states)
        rounds = 0
        while revive and used < target and rounds < self.model.codebook.m and self.revive_codes(states):
            used = self.codes_in_use(states)
            rounds += 1
        if used < target:
            logger.warning(
                f"Only {used} of {self.model.codebook.m} codes in use after training "
                f"(wanted {target}); the sampled rule states are too few or too alike"
            )
        self.stats["codes_in_use"] = used
        return used

    def batches(self, samples: Sequence[ModelInput]) -> Iterator[List[ModelInput]]:
        """Endless seeded epochs of shuffled batches."""
        rng = make_rng(self.config.train.seed, "batching")
        size = self.config.train.batch_size
        while True:
            order = rng.permutation(len(samples))
            for start in range(0, len(order), size):
                yield [samples[i] for i in order[start:start + size]]

    def _revive_on_schedule(self, step: int, outputs: List[ForwardOutput]):
        every = self.config.train.revive_every
        if not every or self.config.train.lr == 0:
            return
        self._recent_states.extend(out.rule_states.data[-1] for out in outputs)
        self._recent_states = self._recent_states[-self.config.train.codebook_init_windows:]
        if (step + 1) % every == 0:
            self.revive_codes(np.stack(self._recent_states))

    def _track_rules(self, step: int, batch: Sequence[ModelInput], outputs: List[ForwardOutput]):
        self.stats["steps"] += 1
        self.stats["windows_seen"] += len(batch)
        self._revive_on_schedule(step, outputs)
        if self.feature_stats is None:
            self.rule_keys.append([])
            return

        rules_config = self.config.rules
        profiles = profile_windows([item.sample for item in batch], self.feature_stats)
        salience = attention_salience(
            np.stack([item.sample.sensors for item in batch]),
            np.stack([out.step_mass() for out in outputs]),
        )
        codes = np.array([out.window_code for out in outputs])
        keys = []
        for code in np.unique(codes):
            rules = discretize_code(
                int(code), np.flatnonzero(codes == code), profiles, salience,
                top_k=rules_config.top_k, salience_ratio=rules_config.salience_ratio,
                cooccurrence=rules_config.cooccurrence, max_rules=rules_config.max_rules_per_code,
            )
            keys.extend(
                rule.key for rule in rules
                if rule.confidence is not None and rule.confidence >= rules_config.min_confidence
            )
        self.rule_keys.append(keys)
        self.stats["step_rules"] += len(keys)

    def fit(self, samples: Sequence[ModelInput]) -> TrainingResult:
        if not samples:
            raise InputError("no training windows")
        steps = self.config.train.steps
        if steps > 0:
            self.initialize_codebook(samples)
        batches = list(islice(self.batches(samples), steps))
        history = train_epoch(
            self.model, batches, self.optimizer, self.monitor, self.flags, self.config.train,
            on_step=self._track_rules,
        )
        codes_in_use = None
        if steps > 0:
            codes_in_use = self.ensure_codes_in_use(samples, revive=self.config.train.lr > 0)
        result = TrainingResult(history=history, rule_keys=self.rule_keys, codes_in_use=codes_in_use)
        if history:
            timeline = result.rule_timeline
            logger.info(
                f"Training finished: {len(history)} steps, loss {history[0].total:.4f} -> "
                f"{history[-1].total:.4f}, {timeline[-1]} distinct rules seen, "
                f"{codes_in_use}/{self.model.codebook.m} codes in use"
            )
        else:
            logger.info("Training finished: zero steps requested, parameters left at initialization")
        return result
