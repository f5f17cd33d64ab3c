"""End-to-end orchestration: data preparation, training, mining, evaluation and exports."""

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, List, Optional, Sequence, Tuple, Union

import pandas as pd

from .checkpoint import CheckpointManager, RestoredRun
from .config.settings import RunConfig
from .data_io import (
    EngineUnit,
    NormalizationStats,
    PlantedRule,
    SyntheticDataset,
    WindowedSample,
    build_windows,
    load_synthetic,
    normalize,
    parse_cmapss,
    synth_planted_rules,
)
from .eval_harness import (
    AblationRow,
    MetricsReport,
    MiningResult,
    apriori_baseline,
    build_report,
    evaluate,
    export_figures,
    mine_rules,
    run_ablations,
)
from .exceptions import InputError, ShapeError
from .rule_engine import (
    DiscretizedRule,
    FeatureStats,
    WindowProfiles,
    fit_feature_stats,
    profile_windows,
    rules_to_json,
)
from .training import LOG_COLUMNS, ModelInput, RuleMiningModel, Trainer, TrainingResult
from .utils.logging import log_function_call


logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

TRAINING_LOG_FILE = "training_log.csv"
RULES_FILE = "rules.json"
METRICS_FILE = "metrics.json"
ABLATION_FILE = "ablation.csv"
BASELINE_METRICS_FILE = "baseline_metrics.json"
BASELINE_RULES_FILE = "baseline_rules.json"


@dataclass
class PreparedData:
    """Training and evaluation windows plus whatever ground truth the source carries."""
    train: List[WindowedSample]
    eval: List[WindowedSample]
    planted_rules: List[PlantedRule] = field(default_factory=list)
    band_edges: Optional[List[float]] = None
    sensor_stats: Optional[NormalizationStats] = None

    @property
    def n_sensors(self) -> int:
        return self.train[0].n_sensors

    @property
    def d_in(self) -> int:
        return self.train[0].features.shape[1]


@dataclass
class TrainedRun:
    model: RuleMiningModel
    result: TrainingResult
    input_stats: NormalizationStats
    feature_stats: FeatureStats
    d_in: int
    sensor_stats: Optional[NormalizationStats] = None


def generate_synthetic(config: RunConfig, seed: Optional[int] = None) -> SyntheticDataset:
    synth = config.synth
    return synth_planted_rules(
        seed=synth.seed if seed is None else seed,
        k=synth.rules,
        n=synth.windows,
        injection_rates=synth.injection_rates,
        overlaps=synth.overlaps,
        n_sensors=synth.n_sensors,
        window=synth.window,
        amplitude=synth.amplitude,
        spike=synth.spike,
        noise=synth.noise,
        atoms_per_rule=synth.atoms_per_rule,
        bands=config.windowing.bands,
        rul_cap=config.windowing.rul_cap,
    )


def _split(items: Sequence[Any], eval_fraction: float) -> Tuple[List[Any], List[Any]]:
    """Hold out the trailing share of ``items``; with no hold-out both sides are everything."""
    held_out = int(round(eval_fraction * len(items)))
    if held_out == 0:
        everything = list(items)
        return everything, everything
    if held_out >= len(items):
        raise InputError(f"eval_fraction {eval_fraction} leaves no training data")
    return list(items[:-held_out]), list(items[-held_out:])


def to_model_inputs(
    samples: Sequence[WindowedSample],
    input_stats: NormalizationStats,
    rul_cap: float,
) -> List[ModelInput]:
    return [
        ModelInput(
            sample=sample,
            features=input_stats.apply(sample.features),
            rul_target=min(sample.rul, rul_cap) / rul_cap,
        )
        for sample in samples
    ]


def write_training_log(result: TrainingResult, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame([record.to_row() for record in result.history], columns=LOG_COLUMNS)
    frame.to_csv(path, index=False, float_format="%.6f", lineterminator="\n", encoding="utf-8")
    return path


def _write_json(data: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(json.dumps(data, indent=2, sort_keys=True) + "\n")
    return path


class RuleMiningPipeline:
    """Runs the rule miner's stages for one configuration."""

    def __init__(self, config: RunConfig):
        self.config = config

        self.stats = {
            "windows_loaded": 0,
            "runs_trained": 0,
            "rules_mined": 0,
            "errors": 0,
        }

        logger.info(f"RuleMiningPipeline initialized (config {config.fingerprint()[:12]})")

    # -- data --------------------------------------------------------------

    @log_function_call
    def prepare(
        self,
        source: Optional[str] = None,
        sensor_stats: Optional[NormalizationStats] = None,
    ) -> PreparedData:
        """Load ``source`` ("synth", a saved synthetic directory or a CMAPSS file) and split it.

        CMAPSS sensors are z-scored with ``sensor_stats`` when given, otherwise with
        statistics fitted on the training units.
        """
        source = source or self.config.data.source
        fraction = self.config.data.eval_fraction

        if source == "synth" or Path(source).is_dir():
            dataset = generate_synthetic(self.config) if source == "synth" else load_synthetic(source)
            if not dataset.windows:
                raise InputError(f"synthetic dataset {source} has no windows")
            train, held_out = _split(dataset.windows, fraction)
            data = PreparedData(
                train=train,
                eval=held_out,
                planted_rules=list(dataset.planted_rules),
                band_edges=list(dataset.band_edges),
            )
        else:
            units = parse_cmapss(source)
            train_units, eval_units = _split(units, fraction)
            if sensor_stats is None:
                _, sensor_stats = normalize([unit.sensor_matrix() for unit in train_units])
            windowing = self.config.windowing

            def build(group: List[EngineUnit]) -> List[WindowedSample]:
                return build_windows(
                    group, windowing.window, windowing.stride, windowing.rul_cap, sensor_stats
                )

            train = build(train_units)
            data = PreparedData(
                train=train,
                eval=train if eval_units is train_units else build(eval_units),
                sensor_stats=sensor_stats,
            )

        if not data.train or not data.eval:
            raise InputError(f"no windows could be built from {source}")
        self.stats["windows_loaded"] += len(data.train) + (
            0 if data.eval is data.train else len(data.eval))
        logger.info(
            f"Prepared {len(data.train)} training and {len(data.eval)} evaluation windows "
            f"from {source}"
        )
        return data

    def fit_feature_stats(self, data: PreparedData) -> FeatureStats:
        rules, windowing = self.config.rules, self.config.windowing
        return fit_feature_stats(
            data.train,
            anomaly_z=rules.anomaly_z,
            trend_factor=rules.trend_factor,
            level_bins=windowing.level_bins,
            bands=windowing.bands,
            band_edges=data.band_edges,
        )

    # -- training ----------------------------------------------------------

    def _train(
        self,
        config: RunConfig,
        inputs: Sequence[ModelInput],
        d_in: int,
        feature_stats: FeatureStats,
    ) -> Tuple[RuleMiningModel, TrainingResult]:
        model = RuleMiningModel.build(config.model, d_in, config.train.seed)
        result = Trainer(model, config, feature_stats).fit(inputs)
        return model, result

    @log_function_call
    def train(self, data: PreparedData) -> TrainedRun:
        _, input_stats = normalize([sample.features for sample in data.train])
        feature_stats = self.fit_feature_stats(data)
        inputs = to_model_inputs(data.train, input_stats, self.config.windowing.rul_cap)
        model, result = self._train(self.config, inputs, data.d_in, feature_stats)
        self.stats["runs_trained"] += 1
        return TrainedRun(
            model=model,
            result=result,
            input_stats=input_stats,
            feature_stats=feature_stats,
            d_in=data.d_in,
            sensor_stats=data.sensor_stats,
        )

    def save(self, run: TrainedRun, out_dir: PathLike) -> List[Path]:
        """Write the checkpoint and the training log into ``out_dir``."""
        manager = CheckpointManager(out_dir)
        checkpoint = manager.build_checkpoint(
            run.model,
            self.config,
            d_in=run.d_in,
            input_stats=run.input_stats,
            feature_stats=run.feature_stats,
            sensor_stats=run.sensor_stats,
            rule_timeline=run.result.rule_timeline,
            training_stats={"steps": len(run.result.history)},
        )
        log_path = write_training_log(run.result, Path(out_dir) / TRAINING_LOG_FILE)
        return [manager.save(checkpoint), log_path]

    @staticmethod
    def restore(checkpoint_path: PathLike) -> RestoredRun:
        manager = CheckpointManager(Path(checkpoint_path).parent)
        return manager.restore(manager.load(checkpoint_path))

    # -- mining and evaluation ---------------------------------------------

    def _eval_inputs(
        self,
        run: RestoredRun,
        data: PreparedData,
    ) -> Tuple[List[ModelInput], WindowProfiles]:
        if data.n_sensors != run.feature_stats.n_sensors:
            raise ShapeError(
                f"data has {data.n_sensors} sensors but the checkpoint was trained on "
                f"{run.feature_stats.n_sensors}"
            )
        inputs = to_model_inputs(data.eval, run.input_stats, self.config.windowing.rul_cap)
        return inputs, profile_windows(data.eval, run.feature_stats)

    @log_function_call
    def mine(self, run: RestoredRun, data: PreparedData) -> MiningResult:
        inputs, profiles = self._eval_inputs(run, data)
        mining = mine_rules(run.model, inputs, profiles, self.config)
        self.stats["rules_mined"] += len(mining.rules)
        return mining

    @log_function_call
    def evaluate(self, run: RestoredRun, data: PreparedData) -> Tuple[MetricsReport, MiningResult]:
        inputs, profiles = self._eval_inputs(run, data)
        report, mining = evaluate(run.model, inputs, profiles, self.config, data.planted_rules)
        self.stats["rules_mined"] += len(mining.rules)
        return report, mining

    def export(self, run: RestoredRun, data: PreparedData, out_dir: PathLike) -> List[Path]:
        inputs, profiles = self._eval_inputs(run, data)
        mining = mine_rules(run.model, inputs, profiles, self.config)
        return export_figures(run.rule_timeline, mining.rules, profiles, out_dir)

    @log_function_call
    def baseline(
        self,
        data: PreparedData,
        feature_stats: Optional[FeatureStats] = None,
    ) -> Tuple[MetricsReport, List[DiscretizedRule]]:
        """Apriori rules on the evaluation windows, scored like the mined rules."""
        feature_stats = feature_stats or self.fit_feature_stats(data)
        profiles = profile_windows(data.eval, feature_stats)
        settings = self.config.eval
        start = time.perf_counter()
        rules = apriori_baseline(
            profiles,
            min_support=settings.apriori_min_support,
            min_confidence=settings.apriori_min_confidence,
            max_size=settings.apriori_max_size,
            include_levels=settings.apriori_include_levels,
        )
        report = build_report(
            rules, profiles, self.config, time.perf_counter() - start, data.planted_rules, miner="apriori"
        )
        return report, rules

    # -- ablations ---------------------------------------------------------

    @log_function_call
    def ablate(self, data: PreparedData, seeds: Optional[Sequence[int]] = None) -> List[AblationRow]:
        """Train and evaluate every ablation variant on the same windows."""
        _, input_stats = normalize([sample.features for sample in data.train])
        feature_stats = self.fit_feature_stats(data)
        rul_cap = self.config.windowing.rul_cap
        train_inputs = to_model_inputs(data.train, input_stats, rul_cap)
        eval_inputs = to_model_inputs(data.eval, input_stats, rul_cap)
        profiles = profile_windows(data.eval, feature_stats)

        def run_cell(config: RunConfig) -> MetricsReport:
            model, _ = self._train(config, train_inputs, data.d_in, feature_stats)
            report, _ = evaluate(model, eval_inputs, profiles, config, data.planted_rules)
            return report

        rows = run_ablations(self.config, run_cell, seeds=seeds)
        self.stats["runs_trained"] += sum(len(row.seeds_ok) for row in rows)
        self.stats["errors"] += sum(row.status != "ok" for row in rows)
        return rows


# -- artifact writers used by the CLI ----------------------------------------

def write_rules(rules: Sequence[DiscretizedRule], path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(rules_to_json(rules))
    return path


def write_report(report: MetricsReport, path: PathLike) -> Path:
    return _write_json(report.to_dict(), Path(path))

