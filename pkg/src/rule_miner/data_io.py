"""CMAPSS ingestion, window features, normalization and the planted-rule generator."""

import json
import logging
import threading
from collections import defaultdict
from dataclasses import dataclass, field
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from .exceptions import ConfigError, InputError, ParseError, ValidationError
from .tensor_core import make_rng


logger = logging.getLogger(__name__)

SETTING_COUNT = 3
SENSOR_COUNT = 21
CMAPSS_COLUMNS = 2 + SETTING_COUNT + SENSOR_COUNT
MIN_FEATURE_WINDOW = 4
# Below this length a single spike cannot reach |z| > 3: max |z| <= (T-1)/sqrt(T).
MIN_ANOMALY_WINDOW = 12

PathLike = Union[str, Path]


class Predicate(str, Enum):
    """Window-level predicate vocabulary shared by mined and planted rules."""
    TREND_UP = "trend-up"
    TREND_DOWN = "trend-down"
    ANOMALY_HIGH = "anomaly-high"
    LEVEL_IN_BIN = "level-in-bin"


@dataclass(frozen=True, order=True)
class Atom:
    """One antecedent item: a predicate over one sensor across a window of ``window`` cycles."""
    feature: int
    predicate: Predicate
    window: int
    level_bin: int = -1

    @property
    def is_level(self) -> bool:
        return self.predicate == Predicate.LEVEL_IN_BIN

    def label(self) -> str:
        name = self.predicate.value
        if self.is_level:
            name = f"{name}({self.level_bin})"
        return f"s{self.feature}:{name}@{self.window}"

    def to_dict(self) -> Dict[str, Any]:
        data: Dict[str, Any] = {
            "feature": self.feature,
            "predicate": self.predicate.value,
            "window": self.window,
        }
        if self.is_level:
            data["bin"] = self.level_bin
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Atom":
        return cls(
            feature=int(data["feature"]),
            predicate=Predicate(data["predicate"]),
            window=int(data["window"]),
            level_bin=int(data.get("bin", -1)),
        )


# ---------------------------------------------------------------------------
# CMAPSS records
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EngineRecord:
    """One CMAPSS line."""
    unit_id: int
    cycle: int
    op_settings: Tuple[float, ...]
    sensors: Tuple[float, ...]


@dataclass
class EngineUnit:
    """All records of one engine, ordered by cycle."""
    unit_id: int
    records: List[EngineRecord]

    @property
    def ruls(self) -> List[int]:
        last = self.records[-1].cycle
        return [last - record.cycle for record in self.records]

    def sensor_matrix(self) -> np.ndarray:
        return np.array([record.sensors for record in self.records], dtype=np.float64)

    def cycles(self) -> np.ndarray:
        return np.array([record.cycle for record in self.records], dtype=np.float64)


def _as_index(value: float, column: str, line_number: int) -> int:
    if not value.is_integer() or value < 1:
        raise ParseError(f"{column} must be a positive integer, got {value!r}", line_number)
    return int(value)


def parse_cmapss(path: PathLike) -> List[EngineUnit]:
    """Parse a whitespace-separated CMAPSS file into per-unit record sequences."""
    groups: Dict[int, List[EngineRecord]] = defaultdict(list)

    with open(path, "r", encoding="utf-8") as f:
        for line_number, raw in enumerate(f, start=1):
            fields = raw.split()
            if not fields:
                continue
            if len(fields) != CMAPSS_COLUMNS:
                raise ParseError(
                    f"expected {CMAPSS_COLUMNS} columns, got {len(fields)}", line_number
                )
            try:
                values = [float(token) for token in fields]
            except ValueError as e:
                raise ParseError(f"non-numeric field ({e})", line_number) from e
            if not all(np.isfinite(values)):
                raise ParseError("non-finite field", line_number)

            unit_id = _as_index(values[0], "unit", line_number)
            cycle = _as_index(values[1], "cycle", line_number)
            groups[unit_id].append(EngineRecord(
                unit_id=unit_id,
                cycle=cycle,
                op_settings=tuple(values[2:2 + SETTING_COUNT]),
                sensors=tuple(values[2 + SETTING_COUNT:]),
            ))

    if not groups:
        raise InputError(f"no CMAPSS records found in {path}")

    units = []
    for unit_id in sorted(groups):
        records = sorted(groups[unit_id], key=lambda r: r.cycle)
        cycles = [r.cycle for r in records]
        if cycles != list(range(1, len(records) + 1)):
            raise ValidationError(
                f"unit {unit_id}: cycles are not consecutive from 1 "
                f"(first={cycles[0]}, last={cycles[-1]}, count={len(cycles)})"
            )
        units.append(EngineUnit(unit_id=unit_id, records=records))

    logger.info(f"Parsed {sum(len(u.records) for u in units)} records for {len(units)} units from {path}")
    return units


def serialize_cmapss(units: Sequence[EngineUnit], path: PathLike) -> None:
    """Write units back in the 26-column CMAPSS text layout."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        for unit in units:
            for record in unit.records:
                values = [repr(float(v)) for v in (*record.op_settings, *record.sensors)]
                f.write(f"{record.unit_id} {record.cycle} {' '.join(values)}\n")


# ---------------------------------------------------------------------------
# Window features
# ---------------------------------------------------------------------------

class FeatureBuilder:
    """Builds trend, anomaly and periodicity descriptors from sensor windows."""

    def __init__(self, energy_floor: float = 1e-12):
        self.energy_floor = energy_floor
        self.lock = threading.RLock()
        self.stats = {
            "windows_processed": 0,
            "constant_signals": 0,
        }

    def window_statistics(self, windows: np.ndarray) -> Dict[str, np.ndarray]:
        """Vectorised descriptors for a stack of windows shaped ``[N x T x S]``.

        Returns ``mean``, ``slope``, ``max_abs_z``, ``periodicity`` and ``deviation``
        (mean absolute deviation from the window mean), each ``[N x S]``.
        """
        windows = np.asarray(windows, dtype=np.float64)
        if windows.ndim != 3:
            raise InputError(f"expected [N x T x S] windows, got shape {windows.shape}")
        length = windows.shape[1]
        if length < MIN_FEATURE_WINDOW:
            raise InputError(f"window length must be >= {MIN_FEATURE_WINDOW}, got {length}")

        steps = np.arange(length, dtype=np.float64)
        centered_steps = steps - steps.mean()
        denom = float(centered_steps @ centered_steps)

        mean = windows.mean(axis=1)
        centered = windows - mean[:, None, :]
        std = np.sqrt((centered ** 2).mean(axis=1))
        live = std > 1e-12 * np.maximum(1.0, np.abs(mean))

        slope = np.einsum("t,nts->ns", centered_steps, centered) / denom
        safe_std = np.where(live, std, 1.0)
        max_abs_z = np.abs(centered).max(axis=1) / safe_std

        detrended = centered - slope[:, None, :] * centered_steps[None, :, None]
        spectrum = np.abs(np.fft.rfft(detrended, axis=1)) ** 2
        band_energy = spectrum[:, 1:, :]
        total = band_energy.sum(axis=1)
        residual = (detrended ** 2).sum(axis=1)
        signal = (centered ** 2).sum(axis=1)
        periodic = live & (residual > self.energy_floor * signal) & (total > 0)
        periodicity = np.where(periodic, band_energy.max(axis=1) / np.where(total > 0, total, 1.0), 0.0)

        with self.lock:
            self.stats["windows_processed"] += windows.shape[0]
            self.stats["constant_signals"] += int((~live).sum())

        return {
            "mean": mean,
            "slope": np.where(live, slope, 0.0),
            "max_abs_z": np.where(live, max_abs_z, 0.0),
            "periodicity": periodicity,
            "deviation": np.abs(centered).mean(axis=1),
        }

    def extract(self, window: np.ndarray) -> np.ndarray:
        """Per-sensor ``[trend, anomaly, periodicity]`` rows, shaped ``[S x 3]``."""
        window = np.asarray(window, dtype=np.float64)
        if window.ndim == 1:
            window = window[:, None]
        stats = self.window_statistics(window[None, :, :])
        return np.stack([stats["slope"][0], stats["max_abs_z"][0], stats["periodicity"][0]], axis=1)


# Shared by every caller of extract_features; its counters are lock-guarded.
_default_builder = FeatureBuilder()


def extract_features(window: np.ndarray) -> np.ndarray:
    """Trend, anomaly and periodicity for each sensor of one ``[T x S]`` window."""
    return _default_builder.extract(window)


@dataclass
class WindowedSample:
    """A window of normalised sensor rows with its cycle timestamps and RUL label."""
    sensors: np.ndarray
    timestamps: np.ndarray
    rul: float
    unit_id: int

    def __post_init__(self):
        self.sensors = np.asarray(self.sensors, dtype=np.float64)
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        if self.sensors.ndim != 2 or self.sensors.shape[0] != self.timestamps.size:
            raise InputError(
                f"sensor rows {self.sensors.shape} do not match {self.timestamps.size} timestamps"
            )
        if np.any(np.diff(self.timestamps) <= 0):
            raise InputError(f"timestamps of unit {self.unit_id} are not strictly increasing")
        if self.rul < 0:
            raise InputError(f"RUL must be non-negative, got {self.rul}")

    @property
    def window(self) -> int:
        return self.sensors.shape[0]

    @property
    def n_sensors(self) -> int:
        return self.sensors.shape[1]

    @cached_property
    def derived(self) -> np.ndarray:
        return extract_features(self.sensors)

    @cached_property
    def features(self) -> np.ndarray:
        """``[T x 4S]``: sensors followed by broadcast trend, anomaly and periodicity blocks."""
        flat = self.derived.T.reshape(1, -1)
        return np.hstack([self.sensors, np.repeat(flat, self.window, axis=0)])

    def to_dict(self) -> Dict[str, Any]:
        return {
            "unit_id": self.unit_id,
            "rul": self.rul,
            "timestamps": [int(t) if float(t).is_integer() else float(t) for t in self.timestamps],
            "sensors": self.sensors.tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "WindowedSample":
        return cls(
            sensors=np.array(data["sensors"], dtype=np.float64),
            timestamps=np.array(data["timestamps"], dtype=np.float64),
            rul=float(data["rul"]),
            unit_id=int(data["unit_id"]),
        )


def stack_sensors(samples: Sequence[WindowedSample]) -> np.ndarray:
    """``[N x T x S]`` array of the samples' sensor windows."""
    if not samples:
        raise InputError("no windows to stack")
    return np.stack([sample.sensors for sample in samples])


def build_windows(
    units: Sequence[EngineUnit],
    window: int = 30,
    stride: int = 5,
    rul_cap: float = 125.0,
    sensor_stats: Optional["NormalizationStats"] = None,
) -> List[WindowedSample]:
    """Slide fixed-length windows over every unit; RUL is taken at the window end."""
    if window < MIN_FEATURE_WINDOW or stride < 1:
        raise ConfigError(f"invalid windowing: window={window}, stride={stride}")

    samples = []
    skipped = 0
    for unit in units:
        sensors = unit.sensor_matrix()
        if sensor_stats is not None:
            sensors = sensor_stats.apply(sensors)
        cycles = unit.cycles()
        ruls = unit.ruls
        if len(cycles) < window:
            skipped += 1
            continue
        for start in range(0, len(cycles) - window + 1, stride):
            end = start + window
            samples.append(WindowedSample(
                sensors=sensors[start:end],
                timestamps=cycles[start:end],
                rul=float(min(ruls[end - 1], rul_cap)),
                unit_id=unit.unit_id,
            ))

    if skipped:
        logger.warning(f"Skipped {skipped} units shorter than the {window}-cycle window")
    logger.info(f"Built {len(samples)} windows (T={window}, stride={stride}) from {len(units)} units")
    return samples


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------

@dataclass
class NormalizationStats:
    """Per-feature z-score parameters fitted on the training split."""
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray

    def apply(self, array: np.ndarray) -> np.ndarray:
        array = np.asarray(array, dtype=np.float64)
        if array.shape[-1] != self.mean.size:
            raise InputError(f"expected {self.mean.size} features, got {array.shape[-1]}")
        scaled = (array - self.mean) / self.std
        return np.where(self.constant, 0.0, scaled)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant": self.constant.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NormalizationStats":
        return cls(
            mean=np.array(data["mean"], dtype=np.float64),
            std=np.array(data["std"], dtype=np.float64),
            constant=np.array(data["constant"], dtype=bool),
        )


def normalize(
    arrays: Sequence[np.ndarray],
    stats: Optional[NormalizationStats] = None,
) -> Tuple[List[np.ndarray], NormalizationStats]:
    """Z-score every array's columns; fit ``stats`` on the arrays when none are given."""
    if not arrays:
        raise InputError("nothing to normalise")
    if stats is None:
        rows = np.vstack([np.asarray(a, dtype=np.float64) for a in arrays])
        mean = rows.mean(axis=0)
        std = rows.std(axis=0)
        constant = std < 1e-12
        stats = NormalizationStats(mean=mean, std=np.where(constant, 1.0, std), constant=constant)
        if constant.any():
            logger.info(f"{int(constant.sum())} zero-variance features left at 0 after centering")
    return [stats.apply(a) for a in arrays], stats


# ---------------------------------------------------------------------------
# Planted-rule generator
# ---------------------------------------------------------------------------

@dataclass
class PlantedRule:
    """Ground-truth rule injected by the generator."""
    rule_id: int
    antecedent: Tuple[Atom, ...]
    consequent: int
    injection_rate: float

    def to_dict(self) -> Dict[str, Any]:
        return {
            "id": self.rule_id,
            "antecedent": [atom.to_dict() for atom in self.antecedent],
            "consequent": self.consequent,
            "injection_rate": self.injection_rate,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "PlantedRule":
        return cls(
            rule_id=int(data["id"]),
            antecedent=tuple(sorted(Atom.from_dict(a) for a in data["antecedent"])),
            consequent=int(data["consequent"]),
            injection_rate=float(data["injection_rate"]),
        )


@dataclass
class SyntheticDataset:
    """Generated windows, their planted rules and the RUL band edges they were built with."""
    windows: List[WindowedSample]
    planted_rules: List[PlantedRule]
    band_edges: List[float]
    members: Dict[int, List[int]] = field(default_factory=dict)
    seed: int = 0

    def sidecar(self) -> Dict[str, Any]:
        return {
            "seed": self.seed,
            "n_windows": len(self.windows),
            "window": self.windows[0].window if self.windows else 0,
            "n_sensors": self.windows[0].n_sensors if self.windows else 0,
            "band_edges": list(self.band_edges),
            "rules": [rule.to_dict() for rule in self.planted_rules],
            "members": {str(k): v for k, v in sorted(self.members.items())},
        }


def _overlap_pairs(overlaps: Sequence[Sequence[float]], k: int) -> Dict[int, Tuple[int, float]]:
    pairs: Dict[int, Tuple[int, float]] = {}
    seen = set()
    for entry in overlaps:
        if len(entry) != 3:
            raise ConfigError(f"overlap entries are [rule_a, rule_b, jaccard], got {entry}")
        a, b, jaccard = int(entry[0]), int(entry[1]), float(entry[2])
        if not (0 <= a < k and 0 <= b < k) or a == b:
            raise ConfigError(f"overlap refers to invalid rules {a}, {b}")
        if a in seen or b in seen:
            raise ConfigError(f"rule {a if a in seen else b} appears in more than one overlap")
        if not 0.0 < jaccard <= 1.0:
            raise ConfigError(f"overlap Jaccard must be in (0, 1], got {jaccard}")
        seen.update((a, b))
        pairs[a] = (b, jaccard)
    return pairs


def synth_planted_rules(
    seed: int,
    k: int,
    n: int,
    injection_rates: Optional[Sequence[float]] = None,
    overlaps: Sequence[Sequence[float]] = (),
    n_sensors: int = SENSOR_COUNT,
    window: int = 30,
    amplitude: float = 2.0,
    spike: float = 1.0,
    noise: float = 0.1,
    atoms_per_rule: int = 2,
    bands: int = 4,
    rul_cap: float = 125.0,
) -> SyntheticDataset:
    """Generate noise windows with planted antecedent patterns and forced RUL bands.

    Noise is uniform and exactly detrended per window, so no trend or anomaly predicate
    fires outside the injected windows. Planted rules use disjoint sensors. Each
    ``overlaps`` entry ``[a, b, jaccard]`` makes rules a and b share windows so that
    their coverage Jaccard equals ``jaccard``; overlapping rules share a consequent.
    """
    if k < 1:
        raise ConfigError(f"rule count must be >= 1, got {k}")
    if n < 100:
        raise ConfigError(f"window count must be >= 100, got {n}")
    if window < MIN_FEATURE_WINDOW:
        raise ConfigError(f"window must be >= {MIN_FEATURE_WINDOW}, got {window}")
    if k * atoms_per_rule > n_sensors:
        raise ConfigError(
            f"{k} rules x {atoms_per_rule} atoms need more than {n_sensors} sensors"
        )
    rates = [0.1] * k if injection_rates is None else [float(r) for r in injection_rates]
    if len(rates) != k:
        raise ConfigError(f"expected {k} injection rates, got {len(rates)}")
    if any(not 0.0 < r <= 1.0 for r in rates):
        raise ConfigError(f"injection rates must be in (0, 1], got {rates}")

    pairs = _overlap_pairs(overlaps, k)
    sizes = [int(round(r * n)) for r in rates]
    shared: Dict[int, int] = {}
    for a, (b, jaccard) in pairs.items():
        count = int(round(jaccard * (sizes[a] + sizes[b]) / (1.0 + jaccard)))
        if count > min(sizes[a], sizes[b]):
            raise ConfigError(f"overlap {jaccard} is unreachable for rules {a} and {b}")
        shared[a] = count
    required = sum(sizes) - sum(shared.values())
    if required > n:
        raise ConfigError(
            f"disjoint injection needs {required} windows but only {n} exist "
            f"(rates sum to {sum(rates):.3f})"
        )

    rng = make_rng(seed, "generator")
    band_width = rul_cap / bands
    band_edges = [band_width * b for b in range(1, bands)]

    # Rules
    predicates = [Predicate.TREND_UP, Predicate.TREND_DOWN]
    if window >= MIN_ANOMALY_WINDOW:
        predicates.append(Predicate.ANOMALY_HIGH)
    sensor_order = rng.permutation(n_sensors)
    consequents = [j % bands for j in range(k)]
    for a, (b, _) in pairs.items():
        consequents[b] = consequents[a]
    planted = []
    for j in range(k):
        features = sorted(int(f) for f in sensor_order[j * atoms_per_rule:(j + 1) * atoms_per_rule])
        atoms = tuple(sorted(
            Atom(feature=f, predicate=predicates[int(rng.integers(len(predicates)))], window=window)
            for f in features
        ))
        planted.append(PlantedRule(rule_id=j, antecedent=atoms, consequent=consequents[j],
                                   injection_rate=sizes[j] / n))

    # Window membership
    order = [int(i) for i in rng.permutation(n)]
    cursor = 0
    members: Dict[int, List[int]] = {j: [] for j in range(k)}
    partners = {b: a for a, (b, _) in pairs.items()}
    for j in range(k):
        if j in partners:
            continue
        if j in pairs:
            b = pairs[j][0]
            block = order[cursor:cursor + shared[j]]
            cursor += shared[j]
            members[j].extend(block)
            members[b].extend(block)
            for rule in (j, b):
                extra = sizes[rule] - shared[j]
                members[rule].extend(order[cursor:cursor + extra])
                cursor += extra
        else:
            members[j].extend(order[cursor:cursor + sizes[j]])
            cursor += sizes[j]

    window_rules: Dict[int, List[int]] = defaultdict(list)
    for j, indices in members.items():
        for index in indices:
            window_rules[index].append(j)

    # Signals
    steps = np.arange(window, dtype=np.float64)
    centered_steps = steps - steps.mean()
    ramp = centered_steps / (window - 1)
    samples = []
    for i in range(n):
        levels = rng.uniform(-1.0, 1.0, size=n_sensors)
        jitter = rng.uniform(-noise, noise, size=(window, n_sensors))
        jitter -= jitter.mean(axis=0)
        jitter -= np.outer(centered_steps, centered_steps @ jitter / (centered_steps @ centered_steps))
        sensors = levels[None, :] + jitter

        rules_here = window_rules.get(i, [])
        for j in rules_here:
            for atom in planted[j].antecedent:
                if atom.predicate == Predicate.TREND_UP:
                    sensors[:, atom.feature] += amplitude * ramp
                elif atom.predicate == Predicate.TREND_DOWN:
                    sensors[:, atom.feature] -= amplitude * ramp
                else:
                    sensors[window // 2, atom.feature] += spike

        band = planted[rules_here[0]].consequent if rules_here else int(rng.integers(bands))
        rul = rng.uniform(band * band_width + 0.5, (band + 1) * band_width - 0.5)
        start = int(rng.integers(1, 200))
        samples.append(WindowedSample(
            sensors=sensors,
            timestamps=np.arange(start, start + window, dtype=np.float64),
            rul=float(rul),
            unit_id=i + 1,
        ))

    logger.info(
        f"Generated {n} synthetic windows with {k} planted rules "
        f"(seed={seed}, injected={sum(sizes) - sum(shared.values())})"
    )
    return SyntheticDataset(
        windows=samples,
        planted_rules=planted,
        band_edges=band_edges,
        members={j: sorted(v) for j, v in members.items()},
        seed=seed,
    )


WINDOWS_FILE = "windows.jsonl"
SIDECAR_FILE = "planted_rules.json"


def save_synthetic(dataset: SyntheticDataset, out_dir: PathLike) -> Tuple[Path, Path]:
    """Persist windows as JSON lines plus the planted-rule sidecar."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    windows_path = out / WINDOWS_FILE
    sidecar_path = out / SIDECAR_FILE
    with open(windows_path, "w", encoding="utf-8", newline="\n") as f:
        for sample in dataset.windows:
            f.write(json.dumps(sample.to_dict(), sort_keys=True) + "\n")
    with open(sidecar_path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(dataset.sidecar(), indent=2, sort_keys=True) + "\n")
    return windows_path, sidecar_path


def load_synthetic(directory: PathLike) -> SyntheticDataset:
    directory = Path(directory)
    with open(directory / WINDOWS_FILE, "r", encoding="utf-8") as f:
        windows = [WindowedSample.from_dict(json.loads(line)) for line in f if line.strip()]
    with open(directory / SIDECAR_FILE, "r", encoding="utf-8") as f:
        sidecar = json.load(f)
    return SyntheticDataset(
        windows=windows,
        planted_rules=[PlantedRule.from_dict(r) for r in sidecar["rules"]],
        band_edges=[float(e) for e in sidecar["band_edges"]],
        members={int(k): [int(i) for i in v] for k, v in sidecar.get("members", {}).items()},
        seed=int(sidecar.get("seed", 0)),
    )
