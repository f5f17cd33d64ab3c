"""Rule mining, metrics, the Apriori baseline, ablation grids and figure exports."""

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from itertools import combinations
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, Hashable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from .config.settings import RunConfig, thread_count
from .data_io import PlantedRule
from .dyn_transformer import ABLATION_VARIANTS, AblationFlags
from .exceptions import ConfigError, InputError
from .rule_engine import (
    DiscretizedRule,
    WindowProfiles,
    attention_salience,
    discretize_code,
    rule_correlation,
    score_rule,
    sort_rules,
)
from .training import ModelInput, RuleMiningModel
from .utils.deduplication import RuleDeduplicator
from .utils.logging import log_error_with_context, log_performance


logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.6f"
ABLATION_COLUMNS = [
    "variant",
    "rule_mining_accuracy",
    "rule_coverage",
    "calculation_efficiency_seconds",
    "rule_count",
    "status",
]

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Mining
# ---------------------------------------------------------------------------

@dataclass
class MiningResult:
    rules: List[DiscretizedRule]
    window_codes: np.ndarray
    wall_time_seconds: float
    candidates: int = 0


def mine_rules(
    model: RuleMiningModel,
    inputs: Sequence[ModelInput],
    profiles: WindowProfiles,
    config: RunConfig,
    flags: Optional[AblationFlags] = None,
) -> MiningResult:
    """Assign every window a code, peel rules off each code's members and keep the ones that pass.

    ``profiles`` must be aligned with ``inputs``. Kept rules are numbered in discovery order.
    Runs without a tape.
    """
    if not inputs:
        raise InputError("mining needs at least one window")
    if len(profiles) != len(inputs):
        raise InputError(f"{len(profiles)} profiles for {len(inputs)} windows")
    flags = flags or config.flags
    rules_config = config.rules
    start = time.perf_counter()

    outputs = [model.forward(item.features, item.timestamps, flags) for item in inputs]
    codes = np.array([out.window_code for out in outputs], dtype=np.int64)
    salience = attention_salience(
        np.stack([item.sample.sensors for item in inputs]),
        np.stack([out.step_mass() for out in outputs]),
    )

    dedup = RuleDeduplicator()
    rules = []
    candidates = 0
    for code in np.unique(codes):
        members = np.flatnonzero(codes == code)
        if members.size < rules_config.min_members:
            continue
        peeled = discretize_code(
            int(code), members, profiles, salience,
            top_k=rules_config.top_k, salience_ratio=rules_config.salience_ratio,
            cooccurrence=rules_config.cooccurrence, min_members=rules_config.min_members,
            max_rules=rules_config.max_rules_per_code,
        )
        for rule in peeled:
            candidates += 1
            if rule.support < rules_config.min_support or rule.confidence is None \
                    or rule.confidence < rules_config.min_confidence:
                continue
            if dedup.is_unique(rule.key, scope="mining"):
                rules.append(replace(rule, rule_id=len(rules)))

    rules = sort_rules(rules)
    elapsed = time.perf_counter() - start
    log_performance(
        logger, "mine_rules", elapsed * 1000,
        windows=len(inputs), codes_used=int(np.unique(codes).size),
        candidates=candidates, rules=len(rules),
    )
    return MiningResult(rules=rules, window_codes=codes, wall_time_seconds=elapsed, candidates=candidates)


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class RuleScore:
    accuracy: float
    coverage: float
    covered: int
    n_windows: int


def score_rules(rules: Sequence[DiscretizedRule], profiles: WindowProfiles) -> RuleScore:
    """Coverage of the rule set and accuracy of the highest-confidence firing rule per window."""
    n = len(profiles)
    if n == 0:
        raise InputError("scoring needs at least one window")
    predicted = np.full(n, -1, dtype=np.int64)
    for rule in sort_rules(rules):
        fires = profiles.coverage(rule.antecedent) & (predicted < 0)
        predicted[fires] = rule.consequent
    covered = predicted >= 0
    count = int(covered.sum())
    accuracy = float((predicted[covered] == profiles.bands[covered]).mean()) if count else 0.0
    return RuleScore(accuracy=accuracy, coverage=count / n, covered=count, n_windows=n)


def planted_recovery(
    rules: Sequence[DiscretizedRule],
    planted: Sequence[PlantedRule],
) -> Tuple[float, List[int]]:
    """Share of planted rules matched by an emitted rule with equal consequent and event atoms."""
    if not planted:
        return 0.0, []
    emitted = {
        (frozenset(atom for atom in rule.antecedent if not atom.is_level), rule.consequent)
        for rule in rules
    }
    recovered = [
        p.rule_id for p in planted if (frozenset(p.antecedent), p.consequent) in emitted
    ]
    return len(recovered) / len(planted), recovered


def planted_as_rules(planted: Sequence[PlantedRule], profiles: WindowProfiles) -> List[DiscretizedRule]:
    """The generator's ground truth scored on ``profiles``; the oracle rule set."""
    return sort_rules(
        score_rule(DiscretizedRule(p.rule_id, p.antecedent, p.consequent), profiles) for p in planted
    )


@dataclass
class MetricsReport:
    rule_mining_accuracy: float
    rule_coverage: float
    wall_time_seconds: float
    rule_count: int
    config_fingerprint: str
    zero_rules: bool = False
    covered_windows: int = 0
    n_windows: int = 0
    planted_recovery: Optional[float] = None
    recovered_rules: Optional[List[int]] = None
    miner: str = "dynamic"

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def build_report(
    rules: Sequence[DiscretizedRule],
    profiles: WindowProfiles,
    config: RunConfig,
    wall_time_seconds: float,
    planted: Optional[Sequence[PlantedRule]] = None,
    miner: str = "dynamic",
) -> MetricsReport:
    score = score_rules(rules, profiles)
    recovery, recovered = (None, None) if not planted else planted_recovery(rules, planted)
    if not rules:
        logger.warning("No rules passed the filters; reporting coverage 0 and accuracy 0")
    return MetricsReport(
        rule_mining_accuracy=score.accuracy,
        rule_coverage=score.coverage,
        wall_time_seconds=wall_time_seconds if config.eval.record_wall_time else 0.0,
        rule_count=len(rules),
        config_fingerprint=config.fingerprint(),
        zero_rules=not rules,
        covered_windows=score.covered,
        n_windows=score.n_windows,
        planted_recovery=recovery,
        recovered_rules=recovered,
        miner=miner,
    )


def evaluate(
    model: RuleMiningModel,
    inputs: Sequence[ModelInput],
    profiles: WindowProfiles,
    config: RunConfig,
    planted: Optional[Sequence[PlantedRule]] = None,
) -> Tuple[MetricsReport, MiningResult]:
    """Mine on the evaluation windows and score the result; wall time covers mining only."""
    mining = mine_rules(model, inputs, profiles, config)
    report = build_report(mining.rules, profiles, config, mining.wall_time_seconds, planted)
    logger.info(
        f"Evaluation: accuracy={report.rule_mining_accuracy:.4f} coverage={report.rule_coverage:.4f} "
        f"rules={report.rule_count} wall_time={report.wall_time_seconds:.3f}s"
    )
    return report, mining


# ---------------------------------------------------------------------------
# Apriori baseline
# ---------------------------------------------------------------------------

def frequent_itemsets(
    transactions: Sequence[FrozenSet[Hashable]],
    min_support: float,
    max_size: Optional[int] = None,
) -> Dict[FrozenSet[Hashable], int]:
    """Level-wise frequent itemset search with downward-closure pruning.

    An itemset is frequent when ``count / len(transactions) >= min_support``. Returns
    every frequent itemset with its transaction count.
    """
    if not 0.0 < min_support <= 1.0:
        raise ConfigError(f"min_support must be in (0, 1], got {min_support}")
    if not transactions:
        raise InputError("no transactions")
    n = len(transactions)
    items = sorted({item for t in transactions for item in t}, key=repr)
    index = {item: i for i, item in enumerate(items)}
    matrix = np.zeros((n, len(items)), dtype=bool)
    for row, transaction in enumerate(transactions):
        matrix[row, [index[item] for item in transaction]] = True
    threshold = min_support * n - 1e-9

    counts = matrix.sum(axis=0)
    level = {(i,): int(counts[i]) for i in range(len(items)) if counts[i] >= threshold}
    found: Dict[Tuple[int, ...], int] = dict(level)

    k = 2
    while level and (max_size is None or k <= max_size):
        previous = sorted(level)
        # Join on a shared (k-2)-prefix, then drop candidates with an infrequent subset
        candidates = []
        for a, b in combinations(previous, 2):
            if a[:-1] != b[:-1]:
                continue
            candidate = a + (b[-1],)
            if all(sub in level for sub in combinations(candidate, k - 1)):
                candidates.append(candidate)

        level = {}
        for candidate in candidates:
            count = int(matrix[:, list(candidate)].all(axis=1).sum())
            if count >= threshold:
                level[candidate] = count
        found.update(level)
        k += 1

    return {frozenset(items[i] for i in itemset): count for itemset, count in found.items()}


def apriori_baseline(
    profiles: WindowProfiles,
    min_support: float,
    min_confidence: float,
    max_size: int = 3,
    include_levels: bool = True,
) -> List[DiscretizedRule]:
    """Classical itemset miner over the windows' predicate atoms, rules X => RUL band."""
    if not 0.0 < min_support <= 1.0:
        raise ConfigError(f"min_support must be in (0, 1], got {min_support}")
    if not 0.0 <= min_confidence <= 1.0:
        raise ConfigError(f"min_confidence must be in [0, 1], got {min_confidence}")
    start = time.perf_counter()
    itemsets = frequent_itemsets(profiles.transactions(include_levels), min_support, max_size)

    n = len(profiles)
    n_bands = profiles.stats.n_bands
    rules = []
    for itemset in sorted(itemsets, key=lambda s: (len(s), sorted(s))):
        mask = profiles.coverage(itemset)
        covered = int(mask.sum())
        band_counts = np.bincount(profiles.bands[mask], minlength=n_bands)
        for band in range(n_bands):
            conf = band_counts[band] / covered
            if conf >= min_confidence:
                rules.append(DiscretizedRule(
                    rule_id=len(rules),
                    antecedent=tuple(itemset),
                    consequent=band,
                    support=covered / n,
                    confidence=float(conf),
                    members=covered,
                ))

    log_performance(
        logger, "apriori_baseline", (time.perf_counter() - start) * 1000,
        itemsets=len(itemsets), rules=len(rules),
    )
    return sort_rules(rules)


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

@dataclass
class AblationRow:
    variant: str
    report: Optional[MetricsReport]
    status: str = "ok"
    seeds_ok: List[int] = field(default_factory=list)

    def to_record(self) -> Dict[str, Any]:
        if self.report is None:
            metrics: Dict[str, Any] = {
                "rule_mining_accuracy": np.nan,
                "rule_coverage": np.nan,
                "calculation_efficiency_seconds": np.nan,
                "rule_count": np.nan,
            }
        else:
            metrics = {
                "rule_mining_accuracy": self.report.rule_mining_accuracy,
                "rule_coverage": self.report.rule_coverage,
                "calculation_efficiency_seconds": self.report.wall_time_seconds,
                "rule_count": self.report.rule_count,
            }
        return {"variant": self.variant, **metrics, "status": self.status}


CellRunner = Callable[[RunConfig], MetricsReport]


def _median_report(variant: str, reports: List[MetricsReport]) -> MetricsReport:
    return MetricsReport(
        rule_mining_accuracy=float(np.median([r.rule_mining_accuracy for r in reports])),
        rule_coverage=float(np.median([r.rule_coverage for r in reports])),
        wall_time_seconds=float(np.median([r.wall_time_seconds for r in reports])),
        rule_count=int(np.median([r.rule_count for r in reports])),
        config_fingerprint=reports[0].config_fingerprint,
        zero_rules=all(r.zero_rules for r in reports),
        covered_windows=int(np.median([r.covered_windows for r in reports])),
        n_windows=int(np.median([r.n_windows for r in reports])),
        miner=variant,
    )


def run_ablations(
    base_config: RunConfig,
    runner: CellRunner,
    seeds: Optional[Sequence[int]] = None,
    threads: Optional[int] = None,
) -> List[AblationRow]:
    """Train and evaluate every variant for every seed; one median row per variant.

    A failing cell is logged and left out of its variant's median; a variant with no
    successful cell gets status ``failed``.
    """
    seeds = list(base_config.eval.seeds if seeds is None else seeds)
    if not seeds:
        raise ConfigError("ablation needs at least one seed")
    if len(seeds) < 3:
        logger.warning(f"Only {len(seeds)} seeds; medians over fewer than 3 runs are fragile")
    threads = threads or thread_count()
    cells = [(variant, seed) for variant in ABLATION_VARIANTS for seed in seeds]

    def run_cell(cell: Tuple[str, int]) -> Tuple[str, int, Optional[MetricsReport]]:
        variant, seed = cell
        config = base_config.with_variant(ABLATION_VARIANTS[variant], seed)
        try:
            return variant, seed, runner(config)
        except Exception as e:
            log_error_with_context(logger, e, "ablation_cell", variant=variant, seed=seed)
            return variant, seed, None

    logger.info(f"Running {len(cells)} ablation cells on {threads} worker(s)")
    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(run_cell, cells))

    rows = []
    for variant in ABLATION_VARIANTS:
        done = [(seed, report) for v, seed, report in results if v == variant and report is not None]
        if not done:
            rows.append(AblationRow(variant=variant, report=None, status="failed"))
            continue
        status = "ok" if len(done) == len(seeds) else "partial"
        rows.append(AblationRow(
            variant=variant,
            report=_median_report(variant, [report for _, report in done]),
            status=status,
            seeds_ok=[seed for seed, _ in done],
        ))
    return rows


def ablation_table(rows: Sequence[AblationRow]) -> pd.DataFrame:
    return pd.DataFrame([row.to_record() for row in rows], columns=ABLATION_COLUMNS)


def _write_csv(frame: pd.DataFrame, path: Path, index: bool = False, **kwargs: Any) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=index, float_format=FLOAT_FORMAT, lineterminator="\n",
                 encoding="utf-8", **kwargs)
    return path


def write_ablation_csv(rows: Sequence[AblationRow], path: PathLike) -> Path:
    return _write_csv(ablation_table(rows), Path(path))


# ---------------------------------------------------------------------------
# Figure data
# ---------------------------------------------------------------------------

TIMELINE_FILE = "rule_timeline.csv"
SUPPORT_FILE = "support_distribution.csv"
CORRELATION_FILE = "rule_correlation.csv"


def export_figures(
    timeline: Sequence[int],
    rules: Sequence[DiscretizedRule],
    profiles: WindowProfiles,
    out_dir: PathLike,
) -> List[Path]:
    """Write the rule timeline, support distribution and rule correlation matrix as CSV."""
    out = Path(out_dir)
    rules = sort_rules(rules)
    ids = [rule.rule_id for rule in rules]

    timeline_frame = pd.DataFrame({
        "step": np.arange(len(timeline), dtype=np.int64),
        "cumulative_rules": np.asarray(timeline, dtype=np.int64),
    })
    support_frame = pd.DataFrame({
        "rule_id": np.asarray(ids, dtype=np.int64),
        "support": np.asarray([rule.support for rule in rules], dtype=np.float64),
    })
    matrix = rule_correlation(rules, profiles) if rules else np.zeros((0, 0))
    correlation_frame = pd.DataFrame(matrix, index=pd.Index(ids, name="rule_id"),
                                     columns=[str(i) for i in ids])

    paths = [
        _write_csv(timeline_frame, out / TIMELINE_FILE),
        _write_csv(support_frame, out / SUPPORT_FILE),
        _write_csv(correlation_frame, out / CORRELATION_FILE, index=True),
    ]
    logger.info(f"Exported figure data for {len(rules)} rules and {len(timeline)} steps to {out}")
    return paths
