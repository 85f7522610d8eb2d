"""Training regimes over the dissolved datasets.

Five regimes, each producing a provenance-tagged checkpoint and a
per-epoch trace of train loss, forget rate, and retain rate:

* ``original``   -- train on the firm's full dataset.
* ``retrain_scratch`` -- fresh initialization, train only on the
  successor's consented data.
* ``retrain_pretrained`` -- first train on an auxiliary synthetic
  distribution (a stand-in for generic pre-trained weights), then train on
  the consented data.
* ``fine_tune``  -- continue training the original checkpoint on the
  consented data only; catastrophic forgetting of the complement is the
  unlearning mechanism under study.
* ``gradient_ascent_unlearn`` -- alternate raw gradient-ascent steps on
  complement batches with Adam descent steps on consented batches. This
  baseline is intentionally unstable; a mandatory divergence guard halts
  it at the first non-finite value and reports the last finite checkpoint.

The scratch / pretrained / fine-tune regimes receive only consented data
for training. Evaluation data is held separately in an :class:`EvalSuite`.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .consent import Dataset, feature_matrix, labels_array
from .datagen import GeneratorConfig, generate
from .errors import ConfigurationError, DivergenceSignal, ValidationError
from .metrics import accuracy, micro_f1
from .nn import (
    Gradients,
    ModelArchitecture,
    ModelCheckpoint,
    SigmoidBinaryCrossEntropy,
    SoftmaxCrossEntropy,
    TrainingProvenance,
    adam_step,
    AdamState,
    apply_gradients,
    batch_loss,
    initialize_checkpoint,
    loss_and_gradients,
    predict,
    train_epochs,
)
from .seeding import STAGE_BATCH, STAGE_INIT, stage_seed

REGIME_ORIGINAL = "original"
REGIME_RETRAIN_SCRATCH = "retrain_scratch"
REGIME_RETRAIN_PRETRAINED = "retrain_pretrained"
REGIME_FINE_TUNE = "fine_tune"
REGIME_GRADIENT_ASCENT = "gradient_ascent_unlearn"

ALL_REGIMES = (
    REGIME_ORIGINAL,
    REGIME_RETRAIN_SCRATCH,
    REGIME_RETRAIN_PRETRAINED,
    REGIME_FINE_TUNE,
    REGIME_GRADIENT_ASCENT,
)

TRACE_HEADER = ("epoch", "train_loss", "forget_rate", "retain_rate")


@dataclass(frozen=True)
class TraceRow:
    epoch: int
    train_loss: float
    forget_rate: float
    retain_rate: float


@dataclass(frozen=True)
class TrainingTrace:
    """Per-epoch metric rows; epoch 0, when present, is the pre-training state."""

    rows: tuple[TraceRow, ...]

    def __post_init__(self) -> None:
        previous = None
        for row in self.rows:
            if previous is not None and row.epoch <= previous:
                raise ValidationError("trace epochs must be strictly increasing")
            previous = row.epoch
            if not 0.0 <= row.forget_rate <= 1.0 or not 0.0 <= row.retain_rate <= 1.0:
                raise ValidationError(f"trace rates out of [0, 1] at epoch {row.epoch}")
            if not math.isfinite(row.train_loss):
                raise ValidationError(f"non-finite trace loss at epoch {row.epoch}")

    def __len__(self) -> int:
        return len(self.rows)

    def final_row(self) -> TraceRow:
        if not self.rows:
            raise ValidationError("trace is empty")
        return self.rows[-1]

    def row_at(self, epoch: int) -> TraceRow:
        for row in self.rows:
            if row.epoch == epoch:
                return row
        raise ValidationError(f"no trace row at epoch {epoch}")

    def to_csv(self, path: Path | str, comment: str | None = None) -> None:
        lines = []
        if comment:
            lines.append(f"# {comment}")
        lines.append(",".join(TRACE_HEADER))
        for row in self.rows:
            lines.append(
                f"{row.epoch},{row.train_loss:.6f},{row.forget_rate:.6f},{row.retain_rate:.6f}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    @classmethod
    def from_csv(cls, path: Path | str) -> "TrainingTrace":
        rows = []
        with open(path, "r", encoding="utf-8", newline="") as handle:
            content = [line for line in handle if not line.startswith("#")]
        reader = csv.DictReader(content)
        if reader.fieldnames is None or tuple(reader.fieldnames) != TRACE_HEADER:
            raise ValidationError(f"unexpected trace header {reader.fieldnames!r}")
        for entry in reader:
            rows.append(
                TraceRow(
                    epoch=int(entry["epoch"]),
                    train_loss=float(entry["train_loss"]),
                    forget_rate=float(entry["forget_rate"]),
                    retain_rate=float(entry["retain_rate"]),
                )
            )
        return cls(rows=tuple(rows))


@dataclass(frozen=True)
class DivergenceReport:
    """Structured outcome of a run halted by the divergence guard."""

    regime: str
    epoch: int
    batch_index: int
    message: str

    def to_obj(self) -> dict:
        return {
            "regime": self.regime,
            "epoch": self.epoch,
            "batch_index": self.batch_index,
            "message": self.message,
        }


@dataclass(frozen=True)
class EvalSuite:
    """Held-out retained and forgotten evaluation sets, pre-stacked as arrays."""

    retain_features: np.ndarray
    retain_labels: np.ndarray
    forget_features: np.ndarray
    forget_labels: np.ndarray
    retain_label_subset: tuple[int, ...] | None = None
    forget_label_subset: tuple[int, ...] | None = None

    @classmethod
    def from_datasets(
        cls,
        retain_data: Dataset,
        forget_data: Dataset,
        retain_label_subset: Sequence[int] | None = None,
        forget_label_subset: Sequence[int] | None = None,
    ) -> "EvalSuite":
        if len(retain_data.records) == 0:
            raise ConfigurationError("retain evaluation set is empty")
        if len(forget_data.records) == 0:
            raise ConfigurationError("forget evaluation set is empty")
        multilabel = retain_data.label_space.kind == "multilabel"
        if multilabel and (retain_label_subset is None or forget_label_subset is None):
            raise ConfigurationError("multilabel evaluation needs retain and forget label subsets")
        return cls(
            retain_features=feature_matrix(retain_data),
            retain_labels=labels_array(retain_data),
            forget_features=feature_matrix(forget_data),
            forget_labels=labels_array(forget_data),
            retain_label_subset=None if retain_label_subset is None else tuple(retain_label_subset),
            forget_label_subset=None if forget_label_subset is None else tuple(forget_label_subset),
        )

    @property
    def n_retain(self) -> int:
        return self.retain_features.shape[0]

    @property
    def n_forget(self) -> int:
        return self.forget_features.shape[0]

    def rates(self, checkpoint: ModelCheckpoint) -> tuple[float, float]:
        """(forget_rate, retain_rate) of a checkpoint on the held-out sets."""
        if isinstance(checkpoint.architecture.head, SoftmaxCrossEntropy):
            retain = accuracy(predict(checkpoint, self.retain_features), self.retain_labels)
            forget = 1.0 - accuracy(predict(checkpoint, self.forget_features), self.forget_labels)
        else:
            assert self.retain_label_subset is not None and self.forget_label_subset is not None
            retain = micro_f1(
                predict(checkpoint, self.retain_features),
                self.retain_labels,
                self.retain_label_subset,
            )
            forget = 1.0 - micro_f1(
                predict(checkpoint, self.forget_features),
                self.forget_labels,
                self.forget_label_subset,
            )
        return forget, retain


@dataclass(frozen=True)
class PretrainSpec:
    """Auxiliary distribution and epoch budget for the pretrained regime."""

    generator: GeneratorConfig
    epochs: int

    def __post_init__(self) -> None:
        if self.epochs < 0:
            raise ConfigurationError("pretrain epochs must be >= 0")


@dataclass(frozen=True)
class RegimeResult:
    checkpoint: ModelCheckpoint
    trace: TrainingTrace
    epochs_completed: int
    divergence: DivergenceReport | None = None


# ---------------------------------------------------------------------------
# Shared plumbing
# ---------------------------------------------------------------------------


def _training_arrays(data: Dataset) -> tuple[np.ndarray, np.ndarray]:
    return feature_matrix(data), labels_array(data)


def _check_architecture(architecture: ModelArchitecture, data: Dataset) -> None:
    if architecture.input_dim != data.spec.total_dim:
        raise ConfigurationError(
            f"architecture input_dim {architecture.input_dim} != data dim {data.spec.total_dim}"
        )
    space = data.label_space
    head = architecture.head
    if space.kind == "multiclass":
        if not isinstance(head, SoftmaxCrossEntropy) or head.num_classes != space.num_classes:
            raise ConfigurationError("architecture head does not match the multiclass label space")
    else:
        if not isinstance(head, SigmoidBinaryCrossEntropy) or head.num_labels != space.num_labels:
            raise ConfigurationError("architecture head does not match the multilabel label space")


def _trace_callback(
    eval_suite: EvalSuite, epochs: int, eval_every: int, rows: list[TraceRow]
):
    def callback(epoch: int, checkpoint: ModelCheckpoint, epoch_loss: float) -> None:
        if epoch % eval_every == 0 or epoch == epochs:
            forget, retain = eval_suite.rates(checkpoint)
            rows.append(
                TraceRow(
                    epoch=epoch, train_loss=epoch_loss, forget_rate=forget, retain_rate=retain
                )
            )

    return callback


def _epoch_zero_row(
    checkpoint: ModelCheckpoint,
    features: np.ndarray,
    labels: np.ndarray,
    eval_suite: EvalSuite,
) -> TraceRow:
    forget, retain = eval_suite.rates(checkpoint)
    return TraceRow(
        epoch=0,
        train_loss=batch_loss(checkpoint, features, labels),
        forget_rate=forget,
        retain_rate=retain,
    )


def _run_training_regime(
    regime: str,
    start: ModelCheckpoint,
    data: Dataset,
    epochs: int,
    seed: int,
    eval_suite: EvalSuite,
    *,
    learning_rate: float,
    batch_size: int,
    eval_every: int,
    include_epoch_zero: bool,
    provenance: TrainingProvenance,
) -> RegimeResult:
    if eval_every < 1:
        raise ConfigurationError("eval_every must be >= 1")
    features, labels = _training_arrays(data)
    rows: list[TraceRow] = []
    if include_epoch_zero:
        rows.append(_epoch_zero_row(start, features, labels, eval_suite))
    outcome = train_epochs(
        start,
        features,
        labels,
        epochs=epochs,
        seed=stage_seed(seed, STAGE_BATCH),
        batch_size=batch_size,
        learning_rate=learning_rate,
        epoch_callback=_trace_callback(eval_suite, epochs, eval_every, rows),
    )
    completed = outcome.epochs_completed
    checkpoint = outcome.checkpoint.with_provenance(replace(provenance, epochs=completed))
    divergence = None
    if outcome.halt is not None:
        divergence = DivergenceReport(
            regime=regime,
            epoch=outcome.halt.epoch,
            batch_index=outcome.halt.batch_index,
            message=outcome.halt.message,
        )
    return RegimeResult(
        checkpoint=checkpoint,
        trace=TrainingTrace(rows=tuple(rows)),
        epochs_completed=completed,
        divergence=divergence,
    )


# ---------------------------------------------------------------------------
# Regimes
# ---------------------------------------------------------------------------


def run_original(
    firm_data: Dataset,
    architecture: ModelArchitecture,
    epochs: int,
    seed: int,
    eval_suite: EvalSuite,
    *,
    learning_rate: float = 0.001,
    batch_size: int = 128,
    eval_every: int = 1,
) -> RegimeResult:
    """Train the monopolist's model on the full dataset."""
    if len(firm_data.records) == 0:
        raise ConfigurationError("original training data is empty")
    _check_architecture(architecture, firm_data)
    start = initialize_checkpoint(architecture, stage_seed(seed, STAGE_INIT))
    provenance = TrainingProvenance(
        regime=REGIME_ORIGINAL, dataset_id=firm_data.dataset_id, epochs=epochs, seed=seed
    )
    return _run_training_regime(
        REGIME_ORIGINAL,
        start,
        firm_data,
        epochs,
        seed,
        eval_suite,
        learning_rate=learning_rate,
        batch_size=batch_size,
        eval_every=eval_every,
        include_epoch_zero=False,
        provenance=provenance,
    )


def run_retrain_scratch(
    cdc_data: Dataset,
    architecture: ModelArchitecture,
    epochs: int,
    seed: int,
    eval_suite: EvalSuite,
    *,
    learning_rate: float = 0.001,
    batch_size: int = 128,
    eval_every: int = 1,
) -> RegimeResult:
    """Fresh initialization, trained only on the consented successor data."""
    if len(cdc_data.records) == 0:
        raise ConfigurationError("consented dataset is empty; nothing to retrain on")
    _check_architecture(architecture, cdc_data)
    start = initialize_checkpoint(architecture, stage_seed(seed, STAGE_INIT))
    provenance = TrainingProvenance(
        regime=REGIME_RETRAIN_SCRATCH, dataset_id=cdc_data.dataset_id, epochs=epochs, seed=seed
    )
    return _run_training_regime(
        REGIME_RETRAIN_SCRATCH,
        start,
        cdc_data,
        epochs,
        seed,
        eval_suite,
        learning_rate=learning_rate,
        batch_size=batch_size,
        eval_every=eval_every,
        include_epoch_zero=False,
        provenance=provenance,
    )


def run_retrain_pretrained(
    cdc_data: Dataset,
    architecture: ModelArchitecture,
    pretrain: PretrainSpec,
    epochs: int,
    seed: int,
    eval_suite: EvalSuite,
    *,
    learning_rate: float = 0.001,
    batch_size: int = 128,
    eval_every: int = 1,
) -> RegimeResult:
    """Pretrain on an auxiliary synthetic distribution, then train on the
    consented data. With zero pretrain epochs this reduces exactly to
    retraining from scratch under the same seed."""
    if len(cdc_data.records) == 0:
        raise ConfigurationError("consented dataset is empty; nothing to retrain on")
    _check_architecture(architecture, cdc_data)
    start = initialize_checkpoint(architecture, stage_seed(seed, STAGE_INIT))
    provenance = TrainingProvenance(
        regime=REGIME_RETRAIN_PRETRAINED,
        dataset_id=cdc_data.dataset_id,
        epochs=epochs,
        seed=seed,
    )
    if pretrain.epochs > 0:
        aux_train, _ = generate(pretrain.generator)
        _check_architecture(architecture, aux_train)
        aux_features, aux_labels = _training_arrays(aux_train)
        aux_outcome = train_epochs(
            start,
            aux_features,
            aux_labels,
            epochs=pretrain.epochs,
            seed=stage_seed(seed, "pretrain-batch"),
            batch_size=batch_size,
            learning_rate=learning_rate,
        )
        if aux_outcome.halt is not None:
            raise ConfigurationError(
                f"auxiliary pretraining diverged at epoch {aux_outcome.halt.epoch}"
            )
        start = aux_outcome.checkpoint
        provenance = TrainingProvenance(
            regime=REGIME_RETRAIN_PRETRAINED,
            dataset_id=cdc_data.dataset_id,
            epochs=epochs,
            seed=seed,
            pretrain_dataset_id=aux_train.dataset_id,
            pretrain_epochs=pretrain.epochs,
            pretrain_seed=pretrain.generator.seed,
        )
    return _run_training_regime(
        REGIME_RETRAIN_PRETRAINED,
        start,
        cdc_data,
        epochs,
        seed,
        eval_suite,
        learning_rate=learning_rate,
        batch_size=batch_size,
        eval_every=eval_every,
        include_epoch_zero=False,
        provenance=provenance,
    )


def run_fine_tune(
    init_checkpoint: ModelCheckpoint,
    cdc_data: Dataset,
    epochs: int,
    seed: int,
    eval_suite: EvalSuite,
    *,
    learning_rate: float = 0.001,
    batch_size: int = 128,
    eval_every: int = 1,
) -> RegimeResult:
    """Continue training the original model on the consented data only.

    The full output head is kept, so forgetting shows up as behavioral
    change rather than architectural removal. The trace starts with an
    epoch-0 row recording the pre-fine-tuning rates.
    """
    if init_checkpoint.provenance.regime != REGIME_ORIGINAL:
        raise ConfigurationError(
            f"fine-tuning must start from an '{REGIME_ORIGINAL}' checkpoint, "
            f"got {init_checkpoint.provenance.regime!r}"
        )
    if len(cdc_data.records) == 0:
        raise ConfigurationError("consented dataset is empty; nothing to fine-tune on")
    _check_architecture(init_checkpoint.architecture, cdc_data)
    provenance = TrainingProvenance(
        regime=REGIME_FINE_TUNE,
        dataset_id=cdc_data.dataset_id,
        epochs=epochs,
        seed=seed,
        init_regime=init_checkpoint.provenance.regime,
    )
    return _run_training_regime(
        REGIME_FINE_TUNE,
        init_checkpoint,
        cdc_data,
        epochs,
        seed,
        eval_suite,
        learning_rate=learning_rate,
        batch_size=batch_size,
        eval_every=eval_every,
        include_epoch_zero=True,
        provenance=provenance,
    )


def run_gradient_ascent_unlearn(
    init_checkpoint: ModelCheckpoint,
    forget_data: Dataset,
    retain_data: Dataset,
    epochs: int,
    seed: int,
    eval_suite: EvalSuite,
    *,
    learning_rate: float = 0.001,
    batch_size: int = 128,
    eval_every: int = 1,
) -> RegimeResult:
    """Alternating gradient-ascent unlearning with a divergence guard.

    Each epoch walks the complement (forget) batches once; every ascent
    step is followed by one Adam descent step on the next consented batch.
    Ascent applies raw gradient steps, so the loss feedback loop is real:
    inflated learning rates blow up within a few epochs, which the guard
    converts into a structured report instead of emitting non-finite
    metrics. Divergence is an expected outcome here, not a crash.
    """
    if init_checkpoint.provenance.regime != REGIME_ORIGINAL:
        raise ConfigurationError(
            f"gradient-ascent unlearning must start from an '{REGIME_ORIGINAL}' checkpoint, "
            f"got {init_checkpoint.provenance.regime!r}"
        )
    if len(forget_data.records) == 0 or len(retain_data.records) == 0:
        raise ConfigurationError("gradient-ascent unlearning needs forget and retain data")
    if epochs < 0:
        raise ConfigurationError("epochs must be >= 0")
    _check_architecture(init_checkpoint.architecture, forget_data)
    _check_architecture(init_checkpoint.architecture, retain_data)
    if eval_every < 1:
        raise ConfigurationError("eval_every must be >= 1")

    forget_X, forget_Y = _training_arrays(forget_data)
    retain_X, retain_Y = _training_arrays(retain_data)
    rng = np.random.default_rng(stage_seed(seed, STAGE_BATCH))

    checkpoint = init_checkpoint
    state = AdamState.fresh(checkpoint, learning_rate=learning_rate)
    rows: list[TraceRow] = [_epoch_zero_row(checkpoint, retain_X, retain_Y, eval_suite)]
    provenance = TrainingProvenance(
        regime=REGIME_GRADIENT_ASCENT,
        dataset_id=forget_data.dataset_id,
        epochs=epochs,
        seed=seed,
        init_regime=init_checkpoint.provenance.regime,
    )
    divergence: DivergenceReport | None = None
    completed = 0

    n_forget = forget_X.shape[0]
    n_retain = retain_X.shape[0]
    retain_cursor = 0
    retain_perm = rng.permutation(n_retain)

    for epoch in range(1, epochs + 1):
        forget_perm = rng.permutation(n_forget)
        descent_loss_total = 0.0
        descent_count = 0
        try:
            for batch_index, start in enumerate(range(0, n_forget, batch_size)):
                idx = forget_perm[start : start + batch_size]
                _, ascent_grads = loss_and_gradients(
                    checkpoint, forget_X[idx], forget_Y[idx], direction="ascent"
                )
                checkpoint = apply_gradients(checkpoint, ascent_grads, learning_rate)

                if retain_cursor + batch_size > n_retain:
                    retain_perm = rng.permutation(n_retain)
                    retain_cursor = 0
                ridx = retain_perm[retain_cursor : retain_cursor + batch_size]
                retain_cursor += batch_size
                loss, grads = loss_and_gradients(checkpoint, retain_X[ridx], retain_Y[ridx])
                checkpoint, state = adam_step(state, checkpoint, grads)
                descent_loss_total += loss * len(ridx)
                descent_count += len(ridx)
        except DivergenceSignal as signal:
            divergence = DivergenceReport(
                regime=REGIME_GRADIENT_ASCENT,
                epoch=epoch,
                batch_index=batch_index,
                message=str(signal),
            )
            break
        completed = epoch
        if epoch % eval_every == 0 or epoch == epochs:
            forget, retain = eval_suite.rates(checkpoint)
            rows.append(
                TraceRow(
                    epoch=epoch,
                    train_loss=descent_loss_total / max(descent_count, 1),
                    forget_rate=forget,
                    retain_rate=retain,
                )
            )

    return RegimeResult(
        checkpoint=checkpoint.with_provenance(replace(provenance, epochs=completed)),
        trace=TrainingTrace(rows=tuple(rows)),
        epochs_completed=completed,
        divergence=divergence,
    )
