"""Rule-state recurrence, rule codebook, and discretised rules with their statistics."""

import json
import logging
from dataclasses import dataclass, replace
from typing import Any, Dict, FrozenSet, Hashable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .data_io import Atom, FeatureBuilder, Predicate, WindowedSample, stack_sensors
from .exceptions import ConfigError, InputError, ShapeError, UndefinedMetricError
from .tensor_core import (
    Tensor,
    add,
    as_tensor,
    concat_cols,
    cosine_similarity,
    cosine_similarity_matrix,
    glorot,
    matmul,
    mul,
    reduce_sum,
    sigmoid,
    softmax_rows,
    stack_rows,
    sub,
    take_row,
    tanh,
    transpose,
    zeros_param,
)
from .temporal_attention import temporal_step_weights
from .utils.deduplication import RuleDeduplicator


logger = logging.getLogger(__name__)

# Re-exported so callers can build antecedents from this module.
__all__ = [
    "Atom",
    "DiscretizedRule",
    "FeatureStats",
    "Predicate",
    "RuleAssignment",
    "RuleCodebook",
    "RuleGenerator",
    "StepTransitionMatrix",
    "WindowProfiles",
    "assign_code",
    "assign_probabilities",
    "attention_salience",
    "code_transition_counts",
    "confidence",
    "cumulative_rule_count",
    "discretize_code",
    "discretize_rule",
    "event_matrix",
    "fit_feature_stats",
    "generate_rule_state",
    "profile_windows",
    "rule_correlation",
    "rule_states",
    "rules_from_json",
    "rules_to_json",
    "score_rule",
    "sort_rules",
    "step_transition_matrix",
    "support",
]


# ---------------------------------------------------------------------------
# Rule-state recurrence
# ---------------------------------------------------------------------------

@dataclass
class RuleGenerator:
    """Gated recurrence parameters over the joint ``[context; previous state]`` input."""
    d_model: int
    d_r: int
    W_z: Tensor
    b_z: Tensor
    W_r: Tensor
    b_r: Tensor

    def __post_init__(self):
        joint = self.d_model + self.d_r
        for name, shape in (("W_z", (joint, self.d_r)), ("W_r", (joint, self.d_r)),
                            ("b_z", (1, self.d_r)), ("b_r", (1, self.d_r))):
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")

    @classmethod
    def initialize(cls, rng: np.random.Generator, d_model: int, d_r: int) -> "RuleGenerator":
        joint = d_model + d_r
        return cls(
            d_model=d_model,
            d_r=d_r,
            W_z=glorot(rng, joint, d_r, "W_z"),
            b_z=zeros_param(1, d_r, "b_z"),
            W_r=glorot(rng, joint, d_r, "W_r"),
            b_r=zeros_param(1, d_r, "b_r"),
        )

    def named_parameters(self) -> Dict[str, Tensor]:
        return {"W_z": self.W_z, "b_z": self.b_z, "W_r": self.W_r, "b_r": self.b_r}


def generate_rule_state(x_ctx: Tensor, r_prev: Tensor, generator: RuleGenerator) -> Tensor:
    """``r_t = (1 - z) * r_prev + z * tanh(W_r [x; r_prev] + b_r)`` with sigmoid gate ``z``."""
    x_ctx, r_prev = as_tensor(x_ctx), as_tensor(r_prev)
    if x_ctx.shape != (1, generator.d_model):
        raise ShapeError(f"context has shape {x_ctx.shape}, expected (1, {generator.d_model})")
    if r_prev.shape != (1, generator.d_r):
        raise ShapeError(f"rule state has shape {r_prev.shape}, expected (1, {generator.d_r})")

    joint = concat_cols([x_ctx, r_prev])
    gate = sigmoid(add(matmul(joint, generator.W_z), generator.b_z))
    candidate = tanh(add(matmul(joint, generator.W_r), generator.b_r))
    return add(mul(sub(1.0, gate), r_prev), mul(gate, candidate))


def rule_states(
    H: Tensor,
    A: Tensor,
    generator: RuleGenerator,
    r0: Optional[Tensor] = None,
) -> Tensor:
    """Run the recurrence over every step; step t reads the context ``sum_i A[i, t] h_i``."""
    H, A = as_tensor(H), as_tensor(A)
    steps = H.shape[0]
    if A.shape != (steps, steps):
        raise ShapeError(f"step weights {A.shape} do not match {steps} steps")
    context = matmul(transpose(A), H)
    state = r0 if r0 is not None else Tensor(np.zeros((1, generator.d_r)))
    states = []
    for t in range(steps):
        state = generate_rule_state(take_row(context, t), state, generator)
        states.append(state)
    return stack_rows(states)


@dataclass
class StepTransitionMatrix:
    """Column-stochastic similarity transitions between one sequence's rule states."""
    matrix: Tensor

    @property
    def values(self) -> np.ndarray:
        return self.matrix.numpy()


def step_transition_matrix(states: Any) -> StepTransitionMatrix:
    if not isinstance(states, Tensor):
        states = Tensor(np.atleast_2d(np.asarray(states, dtype=np.float64)))
    return StepTransitionMatrix(matrix=temporal_step_weights(states, similarity="cosine"))


# ---------------------------------------------------------------------------
# Codebook and assignments
# ---------------------------------------------------------------------------

def _unit_rows(matrix: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    return matrix / np.maximum(np.linalg.norm(matrix, axis=1, keepdims=True), eps)


class RuleCodebook:
    """Learnable set of ``m`` rule vectors."""

    def __init__(self, codes: Tensor):
        if codes.shape[0] < 2:
            raise ConfigError(f"codebook needs at least 2 codes, got {codes.shape[0]}")
        self.codes = codes
        self.codes.requires_grad = True
        self.codes.name = self.codes.name or "codes"
        self.stats = {
            "initializations": 0,
            "duplicate_codes_jittered": 0,
            "codes_revived": 0,
        }

    @classmethod
    def random(cls, rng: np.random.Generator, m: int, d_r: int) -> "RuleCodebook":
        return cls(Tensor(rng.uniform(-0.5, 0.5, size=(m, d_r)), requires_grad=True, name="codes"))

    @property
    def m(self) -> int:
        return self.codes.shape[0]

    @property
    def d_r(self) -> int:
        return self.codes.shape[1]

    def initialize(self, states: np.ndarray, rng: np.random.Generator):
        """k-means++ seeding of the codes from a sample of rule states."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if states.shape[0] == 0:
            raise InputError("cannot seed the codebook from zero states")
        if states.shape[1] != self.d_r:
            raise ShapeError(f"states have width {states.shape[1]}, codebook expects {self.d_r}")

        count = states.shape[0]
        chosen = [int(rng.integers(count))]
        dist2 = ((states - states[chosen[0]]) ** 2).sum(axis=1)
        for _ in range(1, self.m):
            total = dist2.sum()
            if total <= 1e-18:
                index = int(rng.integers(count))
            else:
                index = int(rng.choice(count, p=dist2 / total))
            chosen.append(index)
            dist2 = np.minimum(dist2, ((states - states[index]) ** 2).sum(axis=1))

        centers = states[chosen].copy()
        for i in range(1, self.m):
            while np.min(np.linalg.norm(centers[:i] - centers[i], axis=1)) <= 1e-8:
                centers[i] += rng.normal(0.0, 1e-3, size=self.d_r)
                self.stats["duplicate_codes_jittered"] += 1

        self.codes.data[...] = centers
        self.stats["initializations"] += 1
        logger.debug(f"Codebook seeded from {count} states (m={self.m})")

    def repulsion(self) -> Tensor:
        """Mean off-diagonal cosine similarity between codes."""
        sims = cosine_similarity_matrix(self.codes, self.codes)
        diagonal = float(np.trace(sims.data))
        return mul(sub(reduce_sum(sims), diagonal), 1.0 / (self.m * (self.m - 1)))

    def min_pairwise_distance(self) -> float:
        codes = self.codes.data
        diffs = np.linalg.norm(codes[:, None, :] - codes[None, :, :], axis=2)
        return float(diffs[~np.eye(self.m, dtype=bool)].min())

    def nearest(self, states: np.ndarray) -> np.ndarray:
        """Highest-cosine code per state row; the argmax of the assignment at any temperature."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        return np.argmax(_unit_rows(states) @ _unit_rows(self.codes.data).T, axis=1)

    def revive(self, states: np.ndarray, tol: float = 1e-6) -> List[int]:
        """Move codes no state selects onto the states worst served by the codes in use.

        Dead codes are reseeded farthest-point style in cosine distance; a state within
        ``tol`` of a code already in use is never picked. Returns the reseeded code ids.
        """
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if states.shape[0] == 0:
            return []
        if states.shape[1] != self.d_r:
            raise ShapeError(f"states have width {states.shape[1]}, codebook expects {self.d_r}")

        in_use = np.unique(self.nearest(states))
        dead = [code for code in range(self.m) if code not in set(in_use.tolist())]
        units = _unit_rows(states)
        distance = 1.0 - (units @ _unit_rows(self.codes.data[in_use]).T).max(axis=1)

        revived = []
        for code in dead:
            index = int(np.argmax(distance))
            if distance[index] <= tol:
                break
            self.codes.data[code] = states[index]
            distance = np.minimum(distance, 1.0 - units @ units[index])
            revived.append(code)

        self.stats["codes_revived"] += len(revived)
        if revived:
            logger.debug(f"Revived codes {revived} ({in_use.size}/{self.m} were in use)")
        return revived


@dataclass
class RuleAssignment:
    """Distribution over codes and its argmax (lowest id wins ties)."""
    probabilities: np.ndarray
    code: int

    @classmethod
    def from_probabilities(cls, probabilities: np.ndarray) -> "RuleAssignment":
        probabilities = np.asarray(probabilities, dtype=np.float64).reshape(-1)
        return cls(probabilities=probabilities, code=int(np.argmax(probabilities)))


def _check_temperature(temperature: float):
    if not temperature > 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")


def assign_probabilities(states: Tensor, codes: Tensor, temperature: float) -> Tensor:
    """``[T x m]`` rows of ``softmax(cos(r_t, code_j) / tau)``."""
    _check_temperature(temperature)
    return softmax_rows(mul(cosine_similarity_matrix(as_tensor(states), codes), 1.0 / temperature))


def assign_code(state: Any, book: RuleCodebook, temperature: float) -> RuleAssignment:
    _check_temperature(temperature)
    vector = state.data if isinstance(state, Tensor) else np.asarray(state, dtype=np.float64)
    sims = np.array([cosine_similarity(vector, code) for code in book.codes.data])
    logits = sims / temperature
    weights = np.exp(logits - logits.max())
    return RuleAssignment.from_probabilities(weights / weights.sum())


def code_transition_counts(sequences: Iterable[Sequence[int]], m: int) -> np.ndarray:
    """Row-stochastic code-to-next-code matrix with one Laplace count per cell."""
    counts = np.ones((m, m))
    pairs = 0
    for sequence in sequences:
        codes = [int(c) for c in sequence]
        if any(not 0 <= c < m for c in codes):
            raise InputError(f"code ids must lie in [0, {m}), got {codes}")
        for current, following in zip(codes, codes[1:]):
            counts[current, following] += 1
            pairs += 1
    if pairs == 0:
        raise InputError("need at least one consecutive pair of assignments")
    return counts / counts.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# Window profiles
# ---------------------------------------------------------------------------

@dataclass
class FeatureStats:
    """Thresholds and bin edges fitted on the training windows."""
    window: int
    trend_threshold: np.ndarray
    level_edges: np.ndarray
    band_edges: np.ndarray
    anomaly_z: float = 3.0

    @property
    def n_sensors(self) -> int:
        return self.trend_threshold.size

    @property
    def n_bands(self) -> int:
        return self.band_edges.size + 1

    def level_bin(self, feature: int, value: float) -> int:
        return int(np.searchsorted(self.level_edges[feature], value, side="right"))

    def level_bins(self, means: np.ndarray) -> np.ndarray:
        return np.stack(
            [np.searchsorted(self.level_edges[f], means[:, f], side="right")
             for f in range(self.n_sensors)],
            axis=1,
        )

    def rul_bands(self, ruls: Sequence[float]) -> np.ndarray:
        return np.searchsorted(self.band_edges, np.asarray(ruls, dtype=np.float64), side="right")

    def to_dict(self) -> Dict[str, Any]:
        return {
            "window": self.window,
            "trend_threshold": self.trend_threshold.tolist(),
            "level_edges": self.level_edges.tolist(),
            "band_edges": self.band_edges.tolist(),
            "anomaly_z": self.anomaly_z,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "FeatureStats":
        return cls(
            window=int(data["window"]),
            trend_threshold=np.array(data["trend_threshold"], dtype=np.float64),
            level_edges=np.array(data["level_edges"], dtype=np.float64).reshape(
                len(data["trend_threshold"]), -1),
            band_edges=np.array(data["band_edges"], dtype=np.float64),
            anomaly_z=float(data["anomaly_z"]),
        )


def fit_feature_stats(
    samples: Sequence[WindowedSample],
    anomaly_z: float = 3.0,
    trend_factor: float = 0.01,
    level_bins: int = 3,
    bands: int = 4,
    band_edges: Optional[Sequence[float]] = None,
) -> FeatureStats:
    """Trend thresholds, equal-frequency level edges and RUL band edges."""
    if level_bins < 1 or bands < 1:
        raise ConfigError(f"need >= 1 level bin and band, got {level_bins}, {bands}")
    windows = stack_sensors(samples)
    rows = windows.reshape(-1, windows.shape[2])
    means = windows.mean(axis=1)

    level_q = np.arange(1, level_bins) / level_bins
    level_edges = (np.quantile(means, level_q, axis=0).T if level_bins > 1
                   else np.zeros((windows.shape[2], 0)))
    if band_edges is None:
        ruls = np.array([sample.rul for sample in samples])
        band_edges = np.quantile(ruls, np.arange(1, bands) / bands)

    return FeatureStats(
        window=windows.shape[1],
        trend_threshold=trend_factor * rows.std(axis=0),
        level_edges=np.asarray(level_edges, dtype=np.float64),
        band_edges=np.asarray(band_edges, dtype=np.float64),
        anomaly_z=anomaly_z,
    )


@dataclass
class WindowProfiles:
    """Per-window, per-sensor descriptors shared by every rule statistic."""
    slopes: np.ndarray
    max_abs_z: np.ndarray
    means: np.ndarray
    deviation: np.ndarray
    level_bins: np.ndarray
    bands: np.ndarray
    stats: FeatureStats

    def __len__(self) -> int:
        return self.bands.size

    @property
    def n_sensors(self) -> int:
        return self.slopes.shape[1]

    def atom_mask(self, atom: Atom) -> np.ndarray:
        f = atom.feature
        if not 0 <= f < self.n_sensors:
            raise ShapeError(f"atom feature {f} outside [0, {self.n_sensors})")
        if atom.predicate == Predicate.TREND_UP:
            return self.slopes[:, f] > self.stats.trend_threshold[f]
        if atom.predicate == Predicate.TREND_DOWN:
            return self.slopes[:, f] < -self.stats.trend_threshold[f]
        if atom.predicate == Predicate.ANOMALY_HIGH:
            return self.max_abs_z[:, f] > self.stats.anomaly_z
        return self.level_bins[:, f] == atom.level_bin

    def coverage(self, antecedent: Iterable[Atom]) -> np.ndarray:
        mask = np.ones(len(self), dtype=bool)
        for atom in antecedent:
            mask &= self.atom_mask(atom)
        return mask

    def transaction(self, index: int, include_levels: bool = True) -> FrozenSet[Atom]:
        """Every atom that holds in window ``index``."""
        window = self.stats.window
        items = []
        for f in range(self.n_sensors):
            threshold = self.stats.trend_threshold[f]
            if self.slopes[index, f] > threshold:
                items.append(Atom(f, Predicate.TREND_UP, window))
            elif self.slopes[index, f] < -threshold:
                items.append(Atom(f, Predicate.TREND_DOWN, window))
            if self.max_abs_z[index, f] > self.stats.anomaly_z:
                items.append(Atom(f, Predicate.ANOMALY_HIGH, window))
            if include_levels:
                items.append(Atom(f, Predicate.LEVEL_IN_BIN, window, int(self.level_bins[index, f])))
        return frozenset(items)

    def transactions(self, include_levels: bool = True) -> List[FrozenSet[Atom]]:
        return [self.transaction(i, include_levels) for i in range(len(self))]


def profile_windows(
    samples: Sequence[WindowedSample],
    stats: FeatureStats,
    builder: Optional[FeatureBuilder] = None,
) -> WindowProfiles:
    windows = stack_sensors(samples)
    if windows.shape[2] != stats.n_sensors:
        raise ShapeError(f"windows have {windows.shape[2]} sensors, stats expect {stats.n_sensors}")
    described = (builder or FeatureBuilder()).window_statistics(windows)
    return WindowProfiles(
        slopes=described["slope"],
        max_abs_z=described["max_abs_z"],
        means=described["mean"],
        deviation=described["deviation"],
        level_bins=stats.level_bins(described["mean"]),
        bands=stats.rul_bands([sample.rul for sample in samples]),
        stats=stats,
    )


def attention_salience(sensors: np.ndarray, step_weights: np.ndarray) -> np.ndarray:
    """Attention-weighted absolute deviation per sensor.

    ``sensors`` is ``[T x S]`` (or ``[N x T x S]``), ``step_weights`` the matching
    ``[T]`` (or ``[N x T]``) attention mass per step.
    """
    sensors = np.asarray(sensors, dtype=np.float64)
    weights = np.asarray(step_weights, dtype=np.float64)
    deviation = np.abs(sensors - sensors.mean(axis=-2, keepdims=True))
    return (weights[..., None] * deviation).sum(axis=-2)


# ---------------------------------------------------------------------------
# Discretised rules
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DiscretizedRule:
    rule_id: int
    antecedent: Tuple[Atom, ...]
    consequent: int
    support: float = 0.0
    confidence: Optional[float] = None
    members: int = 0

    def __post_init__(self):
        if not self.antecedent:
            raise InputError(f"rule {self.rule_id} has an empty antecedent")
        object.__setattr__(self, "antecedent", tuple(sorted(self.antecedent)))

    @property
    def key(self) -> Tuple[Tuple[Atom, ...], int]:
        return self.antecedent, self.consequent

    def label(self) -> str:
        return " & ".join(atom.label() for atom in self.antecedent) + f" => band {self.consequent}"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.rule_id,
            "antecedent": [atom.to_dict() for atom in self.antecedent],
            "consequent": self.consequent,
            "support": self.support,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "DiscretizedRule":
        return cls(
            rule_id=int(data["id"]),
            antecedent=tuple(Atom.from_dict(a) for a in data["antecedent"]),
            consequent=int(data["consequent"]),
            support=float(data["support"]),
            confidence=None if data.get("confidence") is None else float(data["confidence"]),
        )


def support(rule: DiscretizedRule, profiles: WindowProfiles) -> float:
    """Fraction of windows satisfying the whole antecedent."""
    if len(profiles) == 0:
        raise InputError("support needs at least one window")
    return float(profiles.coverage(rule.antecedent).mean())


def confidence(rule: DiscretizedRule, profiles: WindowProfiles) -> float:
    """Among covered windows, the fraction whose RUL band equals the consequent."""
    if len(profiles) == 0:
        raise InputError("confidence needs at least one window")
    mask = profiles.coverage(rule.antecedent)
    if not mask.any():
        raise UndefinedMetricError(f"confidence of rule {rule.rule_id} is undefined at zero support")
    return float((profiles.bands[mask] == rule.consequent).mean())


def score_rule(rule: DiscretizedRule, profiles: WindowProfiles) -> DiscretizedRule:
    value = support(rule, profiles)
    return replace(rule, support=value, confidence=confidence(rule, profiles) if value > 0 else None)


def _dominant_atom(feature: int, members: np.ndarray, profiles: WindowProfiles) -> Atom:
    stats = profiles.stats
    if profiles.max_abs_z[members, feature].mean() > stats.anomaly_z:
        return Atom(feature, Predicate.ANOMALY_HIGH, stats.window)
    slope = profiles.slopes[members, feature].mean()
    threshold = stats.trend_threshold[feature]
    if slope > threshold:
        return Atom(feature, Predicate.TREND_UP, stats.window)
    if slope < -threshold:
        return Atom(feature, Predicate.TREND_DOWN, stats.window)
    level = stats.level_bin(feature, profiles.means[members, feature].mean())
    return Atom(feature, Predicate.LEVEL_IN_BIN, stats.window, level)


EVENT_PREDICATES = (Predicate.TREND_UP, Predicate.TREND_DOWN, Predicate.ANOMALY_HIGH)


def event_matrix(profiles: WindowProfiles) -> Tuple[List[Atom], np.ndarray]:
    """Every trend/anomaly atom and the ``[N x A]`` mask of the windows it holds in.

    Atoms are ordered feature-major, predicates in ``EVENT_PREDICATES`` order.
    """
    window = profiles.stats.window
    atoms = [Atom(f, p, window) for f in range(profiles.n_sensors) for p in EVENT_PREDICATES]
    threshold = profiles.stats.trend_threshold[None, :]
    masks = np.stack([
        profiles.slopes > threshold,
        profiles.slopes < -threshold,
        profiles.max_abs_z > profiles.stats.anomaly_z,
    ], axis=2)
    return atoms, masks.reshape(len(profiles), len(atoms))


def _salience_scores(
    members: np.ndarray, profiles: WindowProfiles, salience: Optional[np.ndarray],
) -> np.ndarray:
    salience = profiles.deviation if salience is None else np.asarray(salience, dtype=np.float64)
    if salience.shape != profiles.slopes.shape:
        raise ShapeError(f"salience shape {salience.shape} != profile shape {profiles.slopes.shape}")
    return salience[members].mean(axis=0)


def _level_antecedent(
    members: np.ndarray, profiles: WindowProfiles, scores: np.ndarray, top_k: int, salience_ratio: float,
) -> List[Atom]:
    order = np.argsort(-scores, kind="stable")
    top_score = scores[order[0]]
    atoms = []
    for rank, feature in enumerate(order[:top_k]):
        atom = _dominant_atom(int(feature), members, profiles)
        if rank > 0 and atom.is_level and scores[feature] < salience_ratio * top_score:
            continue
        atoms.append(atom)
    return atoms


def _event_antecedent(
    members: np.ndarray,
    scope: np.ndarray,
    profiles: WindowProfiles,
    scores: np.ndarray,
    top_k: int,
    cooccurrence: float,
) -> List[Atom]:
    """Seed with the atom most enriched in ``members`` against the windows outside ``scope``,
    then add atoms that co-fire on at least ``cooccurrence`` of the windows still covered."""
    atoms, masks = event_matrix(profiles)
    inside = masks[members]
    counts = inside.sum(axis=0)
    if not counts.any():
        return []

    outside = np.ones(len(profiles), dtype=bool)
    outside[scope] = False
    rate_out = masks[outside].mean(axis=0) if outside.any() else np.zeros(len(atoms))
    enrichment = inside.mean(axis=0) - rate_out
    feature_score = np.repeat(scores, len(EVENT_PREDICATES))
    # lexsort: last key is primary; ties fall back to atom order
    ranked = np.lexsort((np.arange(len(atoms)), -feature_score, -counts, -enrichment))
    ranked = ranked[counts[ranked] > 0]

    seed = int(ranked[0])
    chosen = [seed]
    covered = inside[:, seed].copy()
    for index in ranked[1:]:
        if len(chosen) >= top_k:
            break
        if inside[covered, index].mean() >= cooccurrence:
            chosen.append(int(index))
            covered &= inside[:, index]
    return [atoms[i] for i in chosen]


def discretize_rule(
    code_id: int,
    members: Sequence[int],
    profiles: WindowProfiles,
    salience: Optional[np.ndarray] = None,
    top_k: int = 3,
    salience_ratio: float = 0.75,
    cooccurrence: float = 0.9,
    scope: Optional[Sequence[int]] = None,
) -> Optional[DiscretizedRule]:
    """Turn the windows assigned to one code into a scored antecedent => band rule.

    When trend or anomaly atoms fire among the members, the antecedent is seeded with the
    atom whose firing rate in ``members`` most exceeds its rate outside ``scope`` (the code's
    full membership, ``members`` by default) and grown greedily, up to ``top_k`` atoms, with
    atoms that co-fire on at least ``cooccurrence`` of the windows the antecedent still covers.
    The consequent is the majority band among the covered members.

    Otherwise features are ranked by mean ``salience`` (``[N x S]`` aligned with ``profiles``;
    defaults to the unweighted absolute deviation) and the top ``top_k`` are labelled with
    their dominant predicate; level-bin atoms other than the top one are kept only when their
    salience reaches ``salience_ratio`` of the top. Returns None for an empty membership.
    """
    members = np.asarray(members, dtype=np.int64).reshape(-1)
    if members.size == 0:
        logger.debug(f"Code {code_id} has no member windows; no rule emitted")
        return None
    if top_k < 1:
        raise ConfigError(f"top_k must be >= 1, got {top_k}")
    if not 0 < cooccurrence <= 1:
        raise ConfigError(f"cooccurrence must be in (0, 1], got {cooccurrence}")

    scores = _salience_scores(members, profiles, salience)
    scope = members if scope is None else np.asarray(scope, dtype=np.int64).reshape(-1)
    atoms = _event_antecedent(members, scope, profiles, scores, top_k, cooccurrence)
    if not atoms:
        atoms = _level_antecedent(members, profiles, scores, top_k, salience_ratio)

    covered = profiles.coverage(atoms)[members]
    voters = members[covered] if covered.any() else members
    band_counts = np.bincount(profiles.bands[voters], minlength=profiles.stats.n_bands)
    rule = DiscretizedRule(
        rule_id=int(code_id),
        antecedent=tuple(atoms),
        consequent=int(np.argmax(band_counts)),
        members=int(voters.size),
    )
    return score_rule(rule, profiles)


def discretize_code(
    code_id: int,
    members: Sequence[int],
    profiles: WindowProfiles,
    salience: Optional[np.ndarray] = None,
    top_k: int = 3,
    salience_ratio: float = 0.75,
    cooccurrence: float = 0.9,
    min_members: int = 1,
    max_rules: int = 8,
) -> List[DiscretizedRule]:
    """Peel rules off one code's membership until nothing rule-like is left.

    Each round discretises the members not yet covered by an earlier rule. Peeling stops
    after ``max_rules`` rules, when fewer than ``min_members`` windows remain, when no
    trend or anomaly atom fires in the remainder, or after a level-only rule.
    """
    members = np.asarray(members, dtype=np.int64).reshape(-1)
    if max_rules < 1:
        raise ConfigError(f"max_rules must be >= 1, got {max_rules}")
    _, masks = event_matrix(profiles)

    rules: List[DiscretizedRule] = []
    remaining = members
    while len(rules) < max_rules and remaining.size >= max(min_members, 1):
        if rules and not masks[remaining].any():
            break
        rule = discretize_rule(
            code_id, remaining, profiles, salience,
            top_k=top_k, salience_ratio=salience_ratio, cooccurrence=cooccurrence, scope=members,
        )
        if rule is None:
            break
        rules.append(rule)
        if all(atom.is_level for atom in rule.antecedent):
            break
        remaining = remaining[~profiles.coverage(rule.antecedent)[remaining]]

    if len(rules) > 1:
        logger.debug(f"Code {code_id}: peeled {len(rules)} rules from {members.size} windows")
    return rules


def sort_rules(rules: Iterable[DiscretizedRule]) -> List[DiscretizedRule]:
    """Descending confidence, then ascending id; undefined confidence sorts last."""
    return sorted(
        rules,
        key=lambda r: (-(r.confidence if r.confidence is not None else -1.0), r.rule_id),
    )


def rule_correlation(rules: Sequence[DiscretizedRule], profiles: WindowProfiles) -> np.ndarray:
    """Jaccard similarity of the window sets covered by each pair of rules."""
    masks = [profiles.coverage(rule.antecedent) for rule in rules]
    size = len(rules)
    matrix = np.eye(size)
    for i in range(size):
        for j in range(i + 1, size):
            union = np.logical_or(masks[i], masks[j]).sum()
            inter = np.logical_and(masks[i], masks[j]).sum()
            value = inter / union if union and masks[i].any() and masks[j].any() else 0.0
            matrix[i, j] = matrix[j, i] = value
    return matrix


def cumulative_rule_count(stream: Iterable[Iterable[Hashable]]) -> List[int]:
    """Distinct rules seen up to each step. Items are rule keys or DiscretizedRules."""
    dedup = RuleDeduplicator()
    series = []
    for step_rules in stream:
        keys = [item.key if isinstance(item, DiscretizedRule) else item for item in step_rules]
        series.append(dedup.observe_step(keys, scope="timeline"))
    return series


def rules_to_json(rules: Iterable[DiscretizedRule]) -> str:
    return json.dumps([rule.to_dict() for rule in sort_rules(rules)], indent=2, sort_keys=True) + "\n"


def rules_from_json(text: str) -> List[DiscretizedRule]:
    data = json.loads(text)
    if not isinstance(data, list):
        raise InputError("rules document must be a JSON array")
    return [DiscretizedRule.from_dict(item) for item in data]
