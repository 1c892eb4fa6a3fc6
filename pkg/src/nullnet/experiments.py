"""End-to-end pipelines behind the command line: train, attack, evaluate."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import attacks, evaluate
from .config import ExperimentConfig
from .data import Dataset, load_digits, stratified_sample, synthetic_blobs
from .defense import (DefenseConfig, NullProbabilityFn, RobustConfig, null_train, plain_train,
                      robust_train)
from .errors import ConfigError, ConsistencyError, FormatError
from .nn import Classifier, NetworkSpec, load_checkpoint, profile, save_checkpoint
from .protocol import RemoteOracle, parse_address
from .rng import stream
from .threat import (TARGETED_GREEDY, AdversaryDataset, BlackBoxReport, ClassifierOracle,
                     SubstituteSchedule, generate_transfer_set, random_targets,
                     train_substitute_blackbox, train_substitute_blind)
from .training import SGDConfig, TrainingLog

log = logging.getLogger(__name__)

TARGET_FILE = "target.ndf"
SUBSTITUTE_FILE = "substitute.ndf"
TRAIN_LOG_FILE = "training_log.csv"
NULL_FN_FILE = "null_fn.csv"
TRAIN_REPORT_FILE = "train_report.csv"
ATTACK_REPORT_FILE = "attack_report.csv"
EVAL_REPORT_FILE = "evaluation.csv"
CONFIG_FILE = "config.txt"


def transfer_file(kind: str) -> str:
    return f"transfer_{kind}.csv"


@dataclass
class ExperimentData:
    train: Dataset
    validation: Dataset  # the target's own validation data
    adversary: AdversaryDataset
    source: Dataset  # clean samples the adversary perturbs
    test: Dataset


def derived_seed(seed: int, *path: str) -> int:
    return int(stream(seed, *path).integers(0, 2**31 - 1))


def prepare_data(cfg: ExperimentConfig) -> ExperimentData:
    """Split data four ways: target train, target validation, adversary
    (train, validation, source) and test. The adversary only ever sees the
    validation split beyond the target's own validation slice."""
    if cfg.dataset == "digits":
        try:
            splits = load_digits(cfg.data_dir)
        except FileNotFoundError as exc:
            raise ConfigError(f"data_dir: {exc}") from None
        train_full, val_full, test_full = splits["train"], splits["validation"], splits["test"]
    else:
        need_val = cfg.validation_size + cfg.adversary_train + cfg.adversary_validation \
            + cfg.source_samples
        n = cfg.train_size + need_val + cfg.test_size
        blobs = synthetic_blobs(n, cfg.blob_dims, cfg.blob_classes, cfg.blob_separation, cfg.seed)
        cut = np.cumsum([cfg.train_size, need_val])
        train_full = blobs.subset(np.arange(cut[0]), "train")
        val_full = blobs.subset(np.arange(cut[0], cut[1]), "validation")
        test_full = blobs.subset(np.arange(cut[1], n), "test")

    def check(key: str, want: int, have: int):
        if want > have:
            raise ConfigError(f"{key}: asks for {want} samples, only {have} available")

    check("train_size", cfg.train_size, len(train_full))
    check("test_size", cfg.test_size, len(test_full))
    check("validation_size", cfg.validation_size, len(val_full))
    train_idx = stratified_sample(train_full, cfg.train_size, stream(cfg.seed, "target", "data"))
    train = train_full.subset(np.sort(train_idx), "train")
    validation = val_full.subset(np.arange(cfg.validation_size), "validation")
    pool = val_full.subset(np.arange(cfg.validation_size, len(val_full)), "validation")
    check("adversary_train", cfg.adversary_train + cfg.adversary_validation + cfg.source_samples,
          len(pool))
    adversary = AdversaryDataset.carve(pool, cfg.adversary_train, cfg.adversary_validation, cfg.seed)
    src_idx = stratified_sample(pool, cfg.source_samples, stream(cfg.seed, "adversary", "source"),
                                exclude=adversary.pool_index)
    source = pool.subset(np.sort(src_idx), "source")
    test = test_full.take(cfg.test_size, "test")
    return ExperimentData(train, validation, adversary, source, test)


def target_spec(cfg: ExperimentConfig, data: ExperimentData, name: str | None = None,
                with_null: bool | None = None) -> NetworkSpec:
    has_null = cfg.defense == "null" if with_null is None else with_null
    K = data.train.class_count
    return profile(name or cfg.profile, K + int(has_null), has_null, data.train.input_shape)


def sgd_config(cfg: ExperimentConfig) -> SGDConfig:
    return SGDConfig(cfg.learning_rate, cfg.batch_size)


@dataclass
class TrainOutcome:
    classifier: Classifier
    log: TrainingLog
    null_fn: NullProbabilityFn | None = None
    best_epoch: int | None = None


def train_target(cfg: ExperimentConfig, data: ExperimentData) -> TrainOutcome:
    spec = target_spec(cfg, data)
    sgd = sgd_config(cfg)
    if cfg.defense == "none":
        clf, tlog = plain_train(data.train, spec, cfg.epochs, sgd, cfg.seed, data.validation)
        return TrainOutcome(clf, tlog)
    if cfg.defense in ("robust0", "robustinf"):
        rc = RobustConfig(cfg.alpha, cfg.defense, cfg.robust_epsilon, cfg.epochs, sgd)
        clf, tlog = robust_train(data.train, rc, spec, cfg.seed, data.validation)
        return TrainOutcome(clf, tlog)
    dc = DefenseConfig(cfg.alpha, cfg.q, cfg.initial_epochs, cfg.adversarial_epochs, sgd,
                       cfg.max_features_cap or None, cfg.null_fn_samples)
    res = null_train(data.train, data.validation, dc, spec, cfg.seed)
    return TrainOutcome(res.classifier, res.log, res.null_fn, res.best_epoch)


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"out: cannot create {out}: {exc.strerror}") from None
    return out


def cmd_train(cfg: ExperimentConfig) -> dict:
    out = _out_dir(cfg)
    data = prepare_data(cfg)
    res = train_target(cfg, data)
    save_checkpoint(res.classifier, out / TARGET_FILE)
    res.log.write_csv(out / TRAIN_LOG_FILE)
    if res.null_fn is not None:
        res.null_fn.write_csv(out / NULL_FN_FILE)
    acc = evaluate.test_accuracy(res.classifier, data.test)
    evaluate.write_reports_csv([acc], out / TRAIN_REPORT_FILE)
    (out / CONFIG_FILE).write_text(cfg.to_text(), encoding="utf-8")
    log.info("\n%s", evaluate.format_table([(f"{cfg.profile} ({cfg.defense})", acc.value)]))
    return {"checkpoint": out / TARGET_FILE, "test_accuracy": acc.value,
            "null_fn": res.null_fn, "best_epoch": res.best_epoch}


# -- attack ----------------------------------------------------------------------

def open_target(cfg: ExperimentConfig, data: ExperimentData):
    """Oracle for the configured target: remote address or local checkpoint."""
    K = data.train.class_count
    if cfg.oracle:
        try:
            host, port = parse_address(cfg.oracle)
        except ValueError as exc:
            raise ConfigError(f"oracle: {exc}") from None
        return RemoteOracle(host, port, null_label=K)
    if not cfg.target_checkpoint:
        raise ConfigError("target_checkpoint: set it or pass an oracle address")
    clf = load_target(cfg.target_checkpoint, data)
    return ClassifierOracle(clf)


def load_target(path, data: ExperimentData) -> Classifier:
    try:
        clf = load_checkpoint(path)
    except OSError as exc:
        raise ConfigError(f"target_checkpoint: cannot read {path}: {exc.strerror}") from None
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from None
    if clf.input_dim != data.train.input_dim:
        raise ConsistencyError(f"{path}: input size {clf.input_dim} does not match the data")
    if clf.spec.valid_classes != data.train.class_count:
        raise ConsistencyError(f"{path}: {clf.spec.valid_classes} classes, data has "
                               f"{data.train.class_count}")
    return clf


@dataclass
class AttackOutcome:
    substitute: Classifier
    transfer_sets: dict[str, list[attacks.AdversarialResult]]
    reports: list[evaluate.EvaluationReport]
    adversary_queries: int
    evaluation_queries: int
    blackbox: BlackBoxReport | None
    rows: list[tuple]


def _empty_rows(metric: str, grid) -> list[tuple]:
    return [(metric, e, 0, 0, float("nan")) for e in grid] + [(metric, "all", 0, 0, float("nan"))]


def run_attack(cfg: ExperimentConfig, data: ExperimentData, oracle) -> AttackOutcome:
    sub_spec = target_spec(cfg, data, cfg.substitute_profile, with_null=False)
    sub_seed = derived_seed(cfg.seed, "substitute", "seed")
    sgd = sgd_config(cfg)
    start = oracle.query_count
    bb = None
    if cfg.threat_model == "blind":
        sub = train_substitute_blind(data.adversary, sub_spec, cfg.substitute_epochs, sgd, sub_seed)
    else:
        bb = BlackBoxReport()
        sched = SubstituteSchedule(cfg.substitute_epochs, cfg.substitute_rounds,
                                   tuple(cfg.epsilon_grid), cfg.null_handling, sgd)
        sub = train_substitute_blackbox(data.adversary, oracle, sub_spec, sched, sub_seed, bb)
    adversary_queries = oracle.query_count - start

    grid = tuple(cfg.epsilon_grid)
    targets = random_targets(data.source.y, data.train.class_count,
                             derived_seed(cfg.seed, "targets"))
    sets: dict[str, list[attacks.AdversarialResult]] = {}
    reports: list[evaluate.EvaluationReport] = []
    rows: list[tuple] = []
    eval_start = oracle.query_count
    for kind in cfg.attacks:
        results: list[attacks.AdversarialResult] = []
        attempts: dict[float, int] = {}
        for eps in grid:
            att: list[int] = []
            results += generate_transfer_set(
                sub, data.source, kind, eps,
                target_labels=targets if kind == TARGETED_GREEDY else None,
                sample_ids=np.arange(len(data.source)), attempts_out=att)
            attempts[eps] = att[0]
        sets[kind] = results
        mode = evaluate.TARGETED if kind == TARGETED_GREEDY else evaluate.MISCLASSIFICATION
        if sum(attempts.values()) > 0:
            succ = evaluate.substitute_success_rate(results, attempts, f"{kind}:substitute_success_rate")
            reports.append(succ)
            rows += succ.rows()
        else:
            rows += _empty_rows(f"{kind}:substitute_success_rate", grid)
        if results:
            rate, nulls = evaluate.transfer_reports(oracle, results, mode, epsilons=grid)
            rate.metric_name = f"{kind}:transferability_rate"
            nulls.metric_name = f"{kind}:null_fraction"
            reports += [rate, nulls]
            rows += rate.rows() + nulls.rows()
        else:
            rows += _empty_rows(f"{kind}:transferability_rate", grid)
            rows += _empty_rows(f"{kind}:null_fraction", grid)
    evaluation_queries = oracle.query_count - eval_start
    rows.append(("oracle_queries", "all", adversary_queries, 1, float(adversary_queries)))
    rows.append(("evaluation_queries", "all", evaluation_queries, 1, float(evaluation_queries)))
    return AttackOutcome(sub, sets, reports, adversary_queries, evaluation_queries, bb, rows)


def write_rows_csv(rows, path) -> None:
    evaluate.write_reports_csv([], path, extra_rows=rows)


def cmd_attack(cfg: ExperimentConfig) -> AttackOutcome:
    out = _out_dir(cfg)
    data = prepare_data(cfg)
    oracle = open_target(cfg, data)
    try:
        outcome = run_attack(cfg, data, oracle)
    finally:
        if hasattr(oracle, "close"):
            oracle.close()
    save_checkpoint(outcome.substitute, out / SUBSTITUTE_FILE)
    dim = data.source.input_dim
    for kind, results in outcome.transfer_sets.items():
        attacks.write_results_csv(results, out / transfer_file(kind), dim)
    write_rows_csv(outcome.rows, out / ATTACK_REPORT_FILE)
    (out / CONFIG_FILE).write_text(cfg.to_text(), encoding="utf-8")
    if outcome.blackbox is not None and outcome.blackbox.error:
        log.warning("black-box training stopped early: %s", outcome.blackbox.error)
    return outcome


# -- evaluate --------------------------------------------------------------------

def cmd_evaluate(cfg: ExperimentConfig) -> list[tuple]:
    """Test accuracy of the target plus transferability of every transfer
    set found in ``out``."""
    out = _out_dir(cfg)
    data = prepare_data(cfg)
    oracle = open_target(cfg, data)
    rows: list[tuple] = []
    try:
        labels = oracle.query_batch(data.test.X)
        correct = int(np.sum(labels == data.test.y))
        acc = evaluate.EvaluationReport("test_accuracy", correct, len(data.test))
        rows += acc.rows()
        for kind in cfg.attacks:
            path = out / transfer_file(kind)
            if not path.exists():
                continue
            try:
                results = attacks.read_results_csv(path)
            except (ValueError, IndexError) as exc:
                raise FormatError(f"{path}: {exc}") from None
            if not results:
                rows += _empty_rows(f"{kind}:transferability_rate", cfg.epsilon_grid)
                continue
            mode = evaluate.TARGETED if kind == TARGETED_GREEDY else evaluate.MISCLASSIFICATION
            rate, nulls = evaluate.transfer_reports(oracle, results, mode,
                                                    epsilons=cfg.epsilon_grid)
            rate.metric_name = f"{kind}:transferability_rate"
            nulls.metric_name = f"{kind}:null_fraction"
            rows += rate.rows() + nulls.rows()
    finally:
        if hasattr(oracle, "close"):
            oracle.close()
    write_rows_csv(rows, out / EVAL_REPORT_FILE)
    log.info("\n%s", evaluate.format_table([("target", acc.value)]))
    return rows
