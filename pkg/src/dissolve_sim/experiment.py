"""Config-driven experiment orchestration.

One experiment = generate a dataset pair, derive the consent split, build
the successor dataset and its complement, run every configured regime,
evaluate per epoch, and write a summary table plus per-regime curves and
checkpoints. Everything below the run log is a pure function of the
config bytes: rerunning the same config reproduces the output files
byte for byte.

Output layout (all writes go through a staging directory and are moved
into place only on success; a failed run leaves its partial outputs under
``failed/`` instead, never mixed with complete results)::

    summary.csv                   one row per regime
    curve_<regime>.csv            per-epoch trace
    ckpt_<regime>.json            final checkpoint, or
    divergence_<regime>.json      structured report incl. last finite checkpoint
    run.log                       stage timings and provenance (timestamped)
"""

from __future__ import annotations

import importlib.resources
import os
import shutil
import time
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from pathlib import Path

from . import jsonio
from .consent import (
    AllowLabelGroup,
    ConsentRule,
    FirmDataset,
    build_cdc_dataset,
    complement_dataset,
    consent_rule_from_obj,
    consent_rule_to_obj,
    with_consent,
)
from .datagen import (
    GeneratorConfig,
    derived_pretrain_generator,
    generate,
    generator_config_from_obj,
    generator_config_to_obj,
)
from .errors import ConfigurationError, DissolveSimError
from .metrics import MetricRow
from .nn import (
    ModelArchitecture,
    SigmoidBinaryCrossEntropy,
    SoftmaxCrossEntropy,
    checkpoint_to_doc,
    load_checkpoint,
    save_checkpoint,
)
from .regimes import (
    ALL_REGIMES,
    EvalSuite,
    PretrainSpec,
    REGIME_FINE_TUNE,
    REGIME_GRADIENT_ASCENT,
    REGIME_ORIGINAL,
    REGIME_RETRAIN_PRETRAINED,
    REGIME_RETRAIN_SCRATCH,
    RegimeResult,
    run_fine_tune,
    run_gradient_ascent_unlearn,
    run_original,
    run_retrain_pretrained,
    run_retrain_scratch,
)
from .seeding import STAGE_DATA, STAGE_PRETRAIN, stage_seed

TOOL_VERSION = "0.1.0"
OUTPUT_DIR_ENV = "DISSOLVE_SIM_OUT"
SUMMARY_HEADER = "regime,forget_rate,retain_rate,epochs,n_forget_eval,n_retain_eval"


@dataclass(frozen=True)
class OptimizerSettings:
    learning_rate: float = 0.001
    batch_size: int = 128

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigurationError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")


@dataclass(frozen=True)
class RegimeSpec:
    kind: str
    epochs: int
    init_checkpoint: str | None = None
    pretrain_epochs: int | None = None
    pretrain_generator: GeneratorConfig | None = None

    def __post_init__(self) -> None:
        if self.kind not in ALL_REGIMES:
            raise ConfigurationError(f"unknown regime kind {self.kind!r}; known: {ALL_REGIMES}")
        if self.epochs < 0:
            raise ConfigurationError(f"regime {self.kind!r}: epochs must be >= 0")
        if self.kind == REGIME_RETRAIN_PRETRAINED and self.pretrain_epochs is None:
            raise ConfigurationError(
                f"regime {self.kind!r} requires pretrain epochs (pretrain.epochs)"
            )


@dataclass(frozen=True)
class ExperimentConfig:
    experiment_name: str
    master_seed: int
    generator: GeneratorConfig
    consent_rule: ConsentRule
    architecture_hidden_dims: tuple[int, ...]
    architecture_activation: str
    regimes: tuple[RegimeSpec, ...]
    optimizer: OptimizerSettings = OptimizerSettings()
    eval_every: int = 1
    output_dir: str = "out"
    config_hash: str = ""

    def __post_init__(self) -> None:
        if not self.regimes:
            raise ConfigurationError("at least one regime is required")
        if self.eval_every < 1:
            raise ConfigurationError("eval_every must be >= 1")
        kinds = [r.kind for r in self.regimes]
        if len(set(kinds)) != len(kinds):
            raise ConfigurationError("duplicate regime kinds in one experiment")
        has_original = REGIME_ORIGINAL in kinds
        for spec in self.regimes:
            if spec.kind in (REGIME_FINE_TUNE, REGIME_GRADIENT_ASCENT):
                if spec.init_checkpoint is None and not has_original:
                    raise ConfigurationError(
                        f"regime {spec.kind!r} needs an init checkpoint: add an "
                        f"'{REGIME_ORIGINAL}' regime or set init_checkpoint"
                    )


@dataclass(frozen=True)
class SummaryRow:
    regime: str
    forget_rate: float
    retain_rate: float
    epochs: int
    n_forget_eval: int
    n_retain_eval: int

    def as_metric_row(self) -> MetricRow:
        return MetricRow(
            regime=self.regime,
            forget_rate=self.forget_rate,
            retain_rate=self.retain_rate,
            n_forget_eval=self.n_forget_eval,
            n_retain_eval=self.n_retain_eval,
        )


@dataclass(frozen=True)
class ExperimentSummary:
    rows: tuple[SummaryRow, ...]
    config_hash: str
    tool_version: str
    started_at: str
    finished_at: str


@dataclass(frozen=True)
class ExperimentResult:
    output_dir: Path
    summary: ExperimentSummary
    regime_results: dict[str, RegimeResult]
    diverged: bool


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------


def _regime_spec_from_obj(obj: dict) -> RegimeSpec:
    pretrain = obj.get("pretrain") or {}
    pretrain_generator = None
    if "generator" in pretrain:
        pretrain_generator = generator_config_from_obj(pretrain["generator"])
    return RegimeSpec(
        kind=obj["kind"],
        epochs=int(obj["epochs"]),
        init_checkpoint=obj.get("init_checkpoint"),
        pretrain_epochs=None if "epochs" not in pretrain else int(pretrain["epochs"]),
        pretrain_generator=pretrain_generator,
    )


def experiment_config_from_obj(obj: dict, config_hash: str | None = None) -> ExperimentConfig:
    try:
        master_seed = int(obj["master_seed"])
        generator = generator_config_from_obj(
            obj["generator"], default_seed=stage_seed(master_seed, STAGE_DATA)
        )
        arch = obj.get("architecture", {})
        hidden = tuple(int(d) for d in arch.get("hidden_dims", (32, 32)))
        activation = arch.get("activation", "relu")
        config = ExperimentConfig(
            experiment_name=obj["experiment_name"],
            master_seed=master_seed,
            generator=generator,
            consent_rule=consent_rule_from_obj(obj["consent_rule"]),
            architecture_hidden_dims=hidden,
            architecture_activation=activation,
            regimes=tuple(_regime_spec_from_obj(r) for r in obj["regimes"]),
            optimizer=OptimizerSettings(
                learning_rate=float(obj.get("optimizer", {}).get("learning_rate", 0.001)),
                batch_size=int(obj.get("optimizer", {}).get("batch_size", 128)),
            ),
            eval_every=int(obj.get("eval_every", 1)),
            output_dir=obj.get("output_dir", "out"),
        )
    except KeyError as exc:
        raise ConfigurationError(f"experiment config missing field {exc}") from exc
    if config_hash is None:
        config_hash = jsonio.sha256_bytes(jsonio.dumps(_config_to_obj(config)).encode("utf-8"))
    return replace(config, config_hash=config_hash)


def _config_to_obj(config: ExperimentConfig) -> dict:
    regimes = []
    for spec in config.regimes:
        entry: dict = {"kind": spec.kind, "epochs": spec.epochs}
        if spec.init_checkpoint is not None:
            entry["init_checkpoint"] = spec.init_checkpoint
        if spec.pretrain_epochs is not None:
            pretrain: dict = {"epochs": spec.pretrain_epochs}
            if spec.pretrain_generator is not None:
                pretrain["generator"] = generator_config_to_obj(spec.pretrain_generator)
            entry["pretrain"] = pretrain
        regimes.append(entry)
    return {
        "experiment_name": config.experiment_name,
        "master_seed": config.master_seed,
        "generator": generator_config_to_obj(config.generator),
        "consent_rule": consent_rule_to_obj(config.consent_rule),
        "architecture": {
            "hidden_dims": list(config.architecture_hidden_dims),
            "activation": config.architecture_activation,
        },
        "optimizer": {
            "learning_rate": config.optimizer.learning_rate,
            "batch_size": config.optimizer.batch_size,
        },
        "regimes": regimes,
        "eval_every": config.eval_every,
        "output_dir": config.output_dir,
    }


def load_experiment_config(path: Path | str) -> ExperimentConfig:
    """Load a config file; its byte hash links every output artifact back."""
    path = Path(path)
    raw = path.read_bytes()
    obj = jsonio.load_path(path)
    return experiment_config_from_obj(obj, config_hash=jsonio.sha256_bytes(raw))


def bundled_config_path(name: str) -> Path:
    """Path of one of the packaged experiment configs (by bare name)."""
    resource = importlib.resources.files("dissolve_sim") / "configs" / f"{name}.json"
    path = Path(str(resource))
    if not path.exists():
        raise ConfigurationError(f"no bundled config named {name!r}")
    return path


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


def _complete_architecture(config: ExperimentConfig, dataset: FirmDataset) -> ModelArchitecture:
    space = dataset.label_space
    if space.kind == "multiclass":
        assert space.num_classes is not None
        head = SoftmaxCrossEntropy(num_classes=space.num_classes)
    else:
        head = SigmoidBinaryCrossEntropy(num_labels=space.num_labels)
    return ModelArchitecture(
        input_dim=dataset.spec.total_dim,
        hidden_dims=config.architecture_hidden_dims,
        activation=config.architecture_activation,
        head=head,
    )


def _label_subsets(
    rule: ConsentRule, dataset: FirmDataset
) -> tuple[tuple[int, ...] | None, tuple[int, ...] | None]:
    if dataset.label_space.kind == "multiclass":
        return None, None
    if not isinstance(rule, AllowLabelGroup):
        raise ConfigurationError(
            "multilabel experiments need an allow_label_group consent rule to "
            "define the retained and forgotten label groups"
        )
    retain = dataset.label_space.labels_of_group(rule.group)
    forget = dataset.label_space.labels_outside_group(rule.group)
    if not forget:
        raise ConfigurationError("consent rule leaves no forgotten label group")
    return retain, forget


def _resolve_output_dir(config: ExperimentConfig, override: str | Path | None) -> Path:
    if override is not None:
        return Path(override)
    env = os.environ.get(OUTPUT_DIR_ENV)
    if env:
        return Path(env)
    return Path(config.output_dir)


class _RunLog:
    def __init__(self) -> None:
        self.lines: list[str] = []

    def note(self, text: str) -> None:
        stamp = datetime.now(timezone.utc).isoformat(timespec="milliseconds")
        self.lines.append(f"{stamp} {text}")

    def write(self, path: Path) -> None:
        path.write_text("\n".join(self.lines) + "\n", encoding="utf-8")


def _write_summary_csv(path: Path, rows: list[SummaryRow], config_hash: str) -> None:
    lines = [f"# config_hash={config_hash}", SUMMARY_HEADER]
    for row in rows:
        lines.append(
            f"{row.regime},{row.forget_rate:.6f},{row.retain_rate:.6f},"
            f"{row.epochs},{row.n_forget_eval},{row.n_retain_eval}"
        )
    jsonio.write_text_atomic(path, "\n".join(lines) + "\n")


def run_experiment(
    config: ExperimentConfig, output_dir: str | Path | None = None
) -> ExperimentResult:
    """Execute the full pipeline for one experiment config.

    ``output_dir`` (e.g. from a CLI flag) wins over the ``DISSOLVE_SIM_OUT``
    environment variable, which wins over the config's own ``output_dir``.
    """
    out_dir = _resolve_output_dir(config, output_dir)
    staging = out_dir / "_staging"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir(parents=True)
    log = _RunLog()
    started_at = datetime.now(timezone.utc).isoformat(timespec="milliseconds")
    log.note(f"experiment={config.experiment_name} tool_version={TOOL_VERSION}")
    log.note(f"config_hash={config.config_hash}")

    stage = "setup"
    try:
        stage = "generate"
        tick = time.monotonic()
        train_fd, test_fd = generate(config.generator)
        log.note(f"stage={stage} elapsed_s={time.monotonic() - tick:.3f}")

        stage = "dissolve"
        tick = time.monotonic()
        successor = getattr(config.consent_rule, "successor", 1)
        train_fd = with_consent(train_fd, config.consent_rule)
        test_fd = with_consent(test_fd, config.consent_rule)
        cdc_train = build_cdc_dataset(train_fd, successor)
        comp_train = complement_dataset(train_fd, cdc_train)
        cdc_test = build_cdc_dataset(test_fd, successor)
        comp_test = complement_dataset(test_fd, cdc_test)
        retain_subset, forget_subset = _label_subsets(config.consent_rule, train_fd)
        eval_suite = EvalSuite.from_datasets(cdc_test, comp_test, retain_subset, forget_subset)
        architecture = _complete_architecture(config, train_fd)
        log.note(
            f"stage={stage} elapsed_s={time.monotonic() - tick:.3f} "
            f"cdc_train={len(cdc_train)} complement_train={len(comp_train)} "
            f"cdc_test={len(cdc_test)} complement_test={len(comp_test)}"
        )

        stage = "regimes"
        results: dict[str, RegimeResult] = {}
        ordered = sorted(config.regimes, key=lambda s: s.kind != REGIME_ORIGINAL)
        opts = dict(
            learning_rate=config.optimizer.learning_rate,
            batch_size=config.optimizer.batch_size,
            eval_every=config.eval_every,
        )
        for spec in ordered:
            tick = time.monotonic()
            seed = stage_seed(config.master_seed, f"regime/{spec.kind}")
            if spec.kind == REGIME_ORIGINAL:
                result = run_original(train_fd, architecture, spec.epochs, seed, eval_suite, **opts)
            elif spec.kind == REGIME_RETRAIN_SCRATCH:
                result = run_retrain_scratch(
                    cdc_train, architecture, spec.epochs, seed, eval_suite, **opts
                )
            elif spec.kind == REGIME_RETRAIN_PRETRAINED:
                generator = spec.pretrain_generator or derived_pretrain_generator(
                    config.generator, stage_seed(config.master_seed, STAGE_PRETRAIN)
                )
                assert spec.pretrain_epochs is not None
                pretrain = PretrainSpec(generator=generator, epochs=spec.pretrain_epochs)
                result = run_retrain_pretrained(
                    cdc_train, architecture, pretrain, spec.epochs, seed, eval_suite, **opts
                )
            else:
                if spec.init_checkpoint is not None:
                    init = load_checkpoint(spec.init_checkpoint)
                else:
                    init = results[REGIME_ORIGINAL].checkpoint
                if spec.kind == REGIME_FINE_TUNE:
                    result = run_fine_tune(
                        init, cdc_train, spec.epochs, seed, eval_suite, **opts
                    )
                else:
                    result = run_gradient_ascent_unlearn(
                        init, comp_train, cdc_train, spec.epochs, seed, eval_suite, **opts
                    )
            results[spec.kind] = result

            result.trace.to_csv(
                staging / f"curve_{spec.kind}.csv", comment=f"config_hash={config.config_hash}"
            )
            checkpoint = result.checkpoint.with_provenance(
                replace(result.checkpoint.provenance, config_hash=config.config_hash)
            )
            if result.divergence is None:
                save_checkpoint(checkpoint, staging / f"ckpt_{spec.kind}.json")
            else:
                report_doc = result.divergence.to_obj()
                report_doc["config_hash"] = config.config_hash
                report_doc["last_finite_checkpoint"] = checkpoint_to_doc(checkpoint)
                jsonio.dump_path(report_doc, staging / f"divergence_{spec.kind}.json")
            outcome = "diverged" if result.divergence is not None else "ok"
            log.note(
                f"stage=regime/{spec.kind} elapsed_s={time.monotonic() - tick:.3f} "
                f"epochs={result.epochs_completed} outcome={outcome}"
            )

        stage = "summary"
        summary_rows = []
        for spec in config.regimes:
            result = results[spec.kind]
            forget, retain = eval_suite.rates(result.checkpoint)
            summary_rows.append(
                SummaryRow(
                    regime=spec.kind,
                    forget_rate=forget,
                    retain_rate=retain,
                    epochs=result.epochs_completed,
                    n_forget_eval=eval_suite.n_forget,
                    n_retain_eval=eval_suite.n_retain,
                )
            )
        _write_summary_csv(staging / "summary.csv", summary_rows, config.config_hash)
    except Exception as exc:
        log.note(f"stage={stage} error={exc}")
        log.write(staging / "run.log")
        failed = out_dir / "failed"
        if failed.exists():
            shutil.rmtree(failed)
        staging.rename(failed)
        if isinstance(exc, DissolveSimError):
            raise type(exc)(f"stage {stage!r}: {exc}") from exc
        raise DissolveSimError(f"stage {stage!r}: {exc}") from exc

    finished_at = datetime.now(timezone.utc).isoformat(timespec="milliseconds")
    log.note("status=complete")
    log.write(staging / "run.log")
    for entry in sorted(staging.iterdir()):
        os.replace(entry, out_dir / entry.name)
    staging.rmdir()

    diverged = any(r.divergence is not None for r in results.values())
    summary = ExperimentSummary(
        rows=tuple(summary_rows),
        config_hash=config.config_hash,
        tool_version=TOOL_VERSION,
        started_at=started_at,
        finished_at=finished_at,
    )
    return ExperimentResult(
        output_dir=out_dir, summary=summary, regime_results=results, diverged=diverged
    )
