"""Minimal deterministic feedforward network engine.

Dense layers with relu or tanh, a softmax cross-entropy or per-label
sigmoid binary cross-entropy head, exact backpropagation, and
bias-corrected Adam. Everything runs in binary64 and is verified against
central finite differences in the test suite. Checkpoints round-trip
bit-exactly through a 17-significant-digit text format.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence, Union

import numpy as np

from . import jsonio
from .errors import CheckpointError, ConfigurationError, DivergenceSignal, ValidationError

CHECKPOINT_FORMAT_VERSION = 1
ADAM_STATE_FORMAT_VERSION = 1

ACTIVATIONS = ("relu", "tanh")


@dataclass(frozen=True)
class SoftmaxCrossEntropy:
    num_classes: int

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ValidationError("softmax head needs num_classes >= 2")

    @property
    def output_dim(self) -> int:
        return self.num_classes


@dataclass(frozen=True)
class SigmoidBinaryCrossEntropy:
    num_labels: int

    def __post_init__(self) -> None:
        if self.num_labels < 1:
            raise ValidationError("sigmoid head needs num_labels >= 1")

    @property
    def output_dim(self) -> int:
        return self.num_labels


Head = Union[SoftmaxCrossEntropy, SigmoidBinaryCrossEntropy]


@dataclass(frozen=True)
class ModelArchitecture:
    input_dim: int
    hidden_dims: tuple[int, ...]
    activation: str
    head: Head

    def __post_init__(self) -> None:
        if self.input_dim < 1:
            raise ValidationError("input_dim must be >= 1")
        if any(d < 1 for d in self.hidden_dims):
            raise ValidationError("hidden dims must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValidationError(f"activation must be one of {ACTIVATIONS}")

    @property
    def output_dim(self) -> int:
        return self.head.output_dim

    def layer_dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden_dims, self.output_dim)


@dataclass(frozen=True)
class TrainingProvenance:
    """Which regime produced a checkpoint, from which data, for how long."""

    regime: str
    dataset_id: str
    epochs: int
    seed: int
    init_regime: str | None = None
    pretrain_dataset_id: str | None = None
    pretrain_epochs: int | None = None
    pretrain_seed: int | None = None
    config_hash: str | None = None

    def to_obj(self) -> dict:
        obj: dict = {
            "regime": self.regime,
            "dataset_id": self.dataset_id,
            "epochs": self.epochs,
            "seed": self.seed,
        }
        for key in (
            "init_regime",
            "pretrain_dataset_id",
            "pretrain_epochs",
            "pretrain_seed",
            "config_hash",
        ):
            value = getattr(self, key)
            if value is not None:
                obj[key] = value
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> "TrainingProvenance":
        for key in ("regime", "dataset_id", "epochs", "seed"):
            if key not in obj:
                raise CheckpointError(f"provenance.{key} missing")
        return cls(
            regime=obj["regime"],
            dataset_id=obj["dataset_id"],
            epochs=int(obj["epochs"]),
            seed=int(obj["seed"]),
            init_regime=obj.get("init_regime"),
            pretrain_dataset_id=obj.get("pretrain_dataset_id"),
            pretrain_epochs=None if obj.get("pretrain_epochs") is None else int(obj["pretrain_epochs"]),
            pretrain_seed=None if obj.get("pretrain_seed") is None else int(obj["pretrain_seed"]),
            config_hash=obj.get("config_hash"),
        )


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.asarray(array, dtype=np.float64)
    array.flags.writeable = False
    return array


@dataclass(frozen=True)
class ModelCheckpoint:
    """Architecture plus all weights. Arrays are read-only; updates copy."""

    architecture: ModelArchitecture
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]
    provenance: TrainingProvenance

    def __post_init__(self) -> None:
        dims = self.architecture.layer_dims()
        expected = len(dims) - 1
        if len(self.weights) != expected or len(self.biases) != expected:
            raise ValidationError(f"expected {expected} layers, got {len(self.weights)}")
        object.__setattr__(self, "weights", tuple(_frozen(w) for w in self.weights))
        object.__setattr__(self, "biases", tuple(_frozen(b) for b in self.biases))
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape != (dims[i], dims[i + 1]):
                raise ValidationError(
                    f"layers[{i}].weights shape {w.shape} != {(dims[i], dims[i + 1])}"
                )
            if b.shape != (dims[i + 1],):
                raise ValidationError(f"layers[{i}].biases shape {b.shape} != {(dims[i + 1],)}")
            if not np.isfinite(w).all() or not np.isfinite(b).all():
                raise ValidationError(f"layers[{i}] contains non-finite values")

    def num_parameters(self) -> int:
        return sum(w.size for w in self.weights) + sum(b.size for b in self.biases)

    def with_provenance(self, provenance: TrainingProvenance) -> "ModelCheckpoint":
        return replace(self, provenance=provenance)


@dataclass(frozen=True)
class Gradients:
    weights: tuple[np.ndarray, ...]
    biases: tuple[np.ndarray, ...]

    def negated(self) -> "Gradients":
        return Gradients(
            weights=tuple(-w for w in self.weights),
            biases=tuple(-b for b in self.biases),
        )


def initialize_checkpoint(
    architecture: ModelArchitecture,
    seed: int,
    provenance: TrainingProvenance | None = None,
) -> ModelCheckpoint:
    """Fan-in scaled uniform weights, zero biases, from the init generator."""
    rng = np.random.default_rng(seed)
    dims = architecture.layer_dims()
    weights = []
    biases = []
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = 1.0 / np.sqrt(fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    if provenance is None:
        provenance = TrainingProvenance(regime="init", dataset_id="", epochs=0, seed=seed)
    return ModelCheckpoint(
        architecture=architecture,
        weights=tuple(weights),
        biases=tuple(biases),
        provenance=provenance,
    )


# ---------------------------------------------------------------------------
# Forward / loss / gradients
# ---------------------------------------------------------------------------


def _activate(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.tanh(z)


def _activate_grad(z: np.ndarray, kind: str) -> np.ndarray:
    if kind == "relu":
        return (z > 0.0).astype(np.float64)
    t = np.tanh(z)
    return 1.0 - t * t


def forward(
    checkpoint: ModelCheckpoint, features: np.ndarray
) -> tuple[np.ndarray, dict[str, list[np.ndarray]]]:
    """Run the network; returns logits and the cache needed for backprop."""
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != checkpoint.architecture.input_dim:
        raise ValidationError(
            f"expected batch shape (B, {checkpoint.architecture.input_dim}), got {X.shape}"
        )
    if not np.isfinite(X).all():
        raise ValidationError("input batch contains non-finite values")
    kind = checkpoint.architecture.activation
    activations = [X]
    preacts: list[np.ndarray] = []
    hidden = X
    for w, b in zip(checkpoint.weights[:-1], checkpoint.biases[:-1]):
        z = hidden @ w + b
        preacts.append(z)
        hidden = _activate(z, kind)
        activations.append(hidden)
    logits = hidden @ checkpoint.weights[-1] + checkpoint.biases[-1]
    return logits, {"activations": activations, "preacts": preacts}


def softmax_probabilities(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(shifted)
    return exp / exp.sum(axis=1, keepdims=True)


def _stable_sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _head_loss_and_delta(
    head: Head, logits: np.ndarray, labels: np.ndarray
) -> tuple[float, np.ndarray]:
    """Mean loss and dLoss/dLogits for the head."""
    batch = logits.shape[0]
    if isinstance(head, SoftmaxCrossEntropy):
        y = np.asarray(labels)
        if y.shape != (batch,):
            raise ValidationError(f"expected class labels of shape ({batch},), got {y.shape}")
        if y.min() < 0 or y.max() >= head.num_classes:
            raise ValidationError("class label out of range")
        shifted = logits - logits.max(axis=1, keepdims=True)
        logsumexp = np.log(np.exp(shifted).sum(axis=1)) + logits.max(axis=1)
        loss = float((logsumexp - logits[np.arange(batch), y]).mean())
        delta = softmax_probabilities(logits)
        delta[np.arange(batch), y] -= 1.0
        return loss, delta / batch
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != logits.shape:
        raise ValidationError(f"expected label matrix of shape {logits.shape}, got {y.shape}")
    # Logit-space binary cross-entropy: max(z,0) - z*y + log(1 + exp(-|z|)).
    loss_terms = np.maximum(logits, 0.0) - logits * y + np.log1p(np.exp(-np.abs(logits)))
    loss = float(loss_terms.mean())
    delta = (_stable_sigmoid(logits) - y) / loss_terms.size
    return loss, delta


def loss_and_gradients(
    checkpoint: ModelCheckpoint,
    features: np.ndarray,
    labels: np.ndarray,
    direction: str = "descent",
) -> tuple[float, Gradients]:
    """Mean batch loss and parameter gradients.

    ``direction="ascent"`` returns exactly negated gradients (the loss value
    is unchanged). Raises :class:`DivergenceSignal` when the loss or any
    gradient is non-finite; the caller decides policy.
    """
    if direction not in ("descent", "ascent"):
        raise ConfigurationError(f"direction must be 'descent' or 'ascent', got {direction!r}")
    logits, cache = forward(checkpoint, features)
    loss, delta = _head_loss_and_delta(checkpoint.architecture.head, logits, labels)
    if not np.isfinite(loss):
        raise DivergenceSignal(f"non-finite loss {loss!r}")

    activations = cache["activations"]
    preacts = cache["preacts"]
    kind = checkpoint.architecture.activation
    num_layers = len(checkpoint.weights)
    grad_w: list[np.ndarray] = [np.empty(0)] * num_layers
    grad_b: list[np.ndarray] = [np.empty(0)] * num_layers

    for layer in range(num_layers - 1, -1, -1):
        grad_w[layer] = activations[layer].T @ delta
        grad_b[layer] = delta.sum(axis=0)
        if layer > 0:
            delta = (delta @ checkpoint.weights[layer].T) * _activate_grad(
                preacts[layer - 1], kind
            )

    for g in grad_w + grad_b:
        if not np.isfinite(g).all():
            raise DivergenceSignal("non-finite gradient")

    gradients = Gradients(weights=tuple(grad_w), biases=tuple(grad_b))
    if direction == "ascent":
        gradients = gradients.negated()
    return loss, gradients


def batch_loss(checkpoint: ModelCheckpoint, features: np.ndarray, labels: np.ndarray) -> float:
    """Mean loss without gradients (used for pre-training trace rows)."""
    logits, _ = forward(checkpoint, features)
    loss, _ = _head_loss_and_delta(checkpoint.architecture.head, logits, labels)
    return loss


def predict(checkpoint: ModelCheckpoint, features: np.ndarray) -> np.ndarray:
    """Class indices (softmax head, ties to the lowest index) or a 0/1 label
    matrix (sigmoid head, predicted 1 only for probability strictly > 0.5)."""
    logits, _ = forward(checkpoint, features)
    if isinstance(checkpoint.architecture.head, SoftmaxCrossEntropy):
        return logits.argmax(axis=1)
    return (logits > 0.0).astype(np.int64)


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    """Bias-corrected Adam accumulators, shaped like the checkpoint."""

    step_count: int
    m_weights: tuple[np.ndarray, ...]
    m_biases: tuple[np.ndarray, ...]
    v_weights: tuple[np.ndarray, ...]
    v_biases: tuple[np.ndarray, ...]
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, checkpoint: ModelCheckpoint, learning_rate: float = 0.001) -> "AdamState":
        zeros_w = tuple(np.zeros_like(w) for w in checkpoint.weights)
        zeros_b = tuple(np.zeros_like(b) for b in checkpoint.biases)
        return cls(
            step_count=0,
            m_weights=zeros_w,
            m_biases=zeros_b,
            v_weights=tuple(np.zeros_like(w) for w in checkpoint.weights),
            v_biases=tuple(np.zeros_like(b) for b in checkpoint.biases),
            learning_rate=learning_rate,
        )


def _adam_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    state: AdamState,
    t: int,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    m_new = state.beta1 * m + (1.0 - state.beta1) * grad
    v_new = state.beta2 * v + (1.0 - state.beta2) * grad * grad
    m_hat = m_new / (1.0 - state.beta1**t)
    v_hat = v_new / (1.0 - state.beta2**t)
    updated = param - state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return updated, m_new, v_new


def adam_step(
    state: AdamState, checkpoint: ModelCheckpoint, gradients: Gradients
) -> tuple[ModelCheckpoint, AdamState]:
    """One bias-corrected Adam step; returns a new checkpoint and state."""
    for g in gradients.weights + gradients.biases:
        if not np.isfinite(g).all():
            raise DivergenceSignal("non-finite gradient passed to adam_step")
    t = state.step_count + 1
    new_w, new_b = [], []
    m_w, m_b, v_w, v_b = [], [], [], []
    for w, g, m, v in zip(checkpoint.weights, gradients.weights, state.m_weights, state.v_weights):
        updated, m_new, v_new = _adam_update(w, g, m, v, state, t)
        new_w.append(updated)
        m_w.append(m_new)
        v_w.append(v_new)
    for b, g, m, v in zip(checkpoint.biases, gradients.biases, state.m_biases, state.v_biases):
        updated, m_new, v_new = _adam_update(b, g, m, v, state, t)
        new_b.append(updated)
        m_b.append(m_new)
        v_b.append(v_new)
    for arr in new_w + new_b:
        if not np.isfinite(arr).all():
            raise DivergenceSignal("non-finite weight after adam step")
    new_checkpoint = replace(checkpoint, weights=tuple(new_w), biases=tuple(new_b))
    new_state = replace(
        state,
        step_count=t,
        m_weights=tuple(m_w),
        m_biases=tuple(m_b),
        v_weights=tuple(v_w),
        v_biases=tuple(v_b),
    )
    return new_checkpoint, new_state


def apply_gradients(
    checkpoint: ModelCheckpoint, gradients: Gradients, learning_rate: float
) -> ModelCheckpoint:
    """Raw gradient step: w <- w - lr * g. Used for gradient-ascent unlearning
    (with already-negated gradients), where Adam's step normalization would
    mask the instability the divergence guard exists to catch."""
    new_w = [w - learning_rate * g for w, g in zip(checkpoint.weights, gradients.weights)]
    new_b = [b - learning_rate * g for b, g in zip(checkpoint.biases, gradients.biases)]
    for arr in new_w + new_b:
        if not np.isfinite(arr).all():
            raise DivergenceSignal("non-finite weight after gradient step")
    return replace(checkpoint, weights=tuple(new_w), biases=tuple(new_b))


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StepDivergence:
    """Where a training loop hit non-finite values (1-based epoch, 0-based batch)."""

    epoch: int
    batch_index: int
    message: str


@dataclass(frozen=True)
class TrainOutcome:
    checkpoint: ModelCheckpoint
    epoch_losses: tuple[float, ...]
    halt: StepDivergence | None = None

    @property
    def epochs_completed(self) -> int:
        return len(self.epoch_losses)


def train_epochs(
    checkpoint: ModelCheckpoint,
    features: np.ndarray,
    labels: np.ndarray,
    *,
    epochs: int,
    seed: int,
    batch_size: int = 128,
    learning_rate: float = 0.001,
    epoch_callback: Callable[[int, ModelCheckpoint, float], None] | None = None,
) -> TrainOutcome:
    """Adam training with per-epoch seeded reshuffling.

    The final partial batch is used. On a divergence signal the loop halts
    and returns the last finite checkpoint plus the epoch/batch location.
    """
    if epochs < 0:
        raise ConfigurationError("epochs must be >= 0")
    if batch_size < 1:
        raise ConfigurationError("batch_size must be >= 1")
    n = features.shape[0]
    if n == 0:
        raise ConfigurationError("training data is empty")
    rng = np.random.default_rng(seed)
    state = AdamState.fresh(checkpoint, learning_rate=learning_rate)
    epoch_losses: list[float] = []
    for epoch in range(1, epochs + 1):
        perm = rng.permutation(n)
        loss_total = 0.0
        for batch_index, start in enumerate(range(0, n, batch_size)):
            idx = perm[start : start + batch_size]
            try:
                loss, grads = loss_and_gradients(checkpoint, features[idx], labels[idx])
                checkpoint, state = adam_step(state, checkpoint, grads)
            except DivergenceSignal as signal:
                return TrainOutcome(
                    checkpoint=checkpoint,
                    epoch_losses=tuple(epoch_losses),
                    halt=StepDivergence(epoch=epoch, batch_index=batch_index, message=str(signal)),
                )
            loss_total += loss * len(idx)
        epoch_loss = loss_total / n
        epoch_losses.append(epoch_loss)
        if epoch_callback is not None:
            epoch_callback(epoch, checkpoint, epoch_loss)
    return TrainOutcome(checkpoint=checkpoint, epoch_losses=tuple(epoch_losses))


# ---------------------------------------------------------------------------
# Checkpoint and optimizer-state files
# ---------------------------------------------------------------------------


def head_to_obj(head: Head) -> dict:
    if isinstance(head, SoftmaxCrossEntropy):
        return {"kind": "softmax_cross_entropy", "num_classes": head.num_classes}
    return {"kind": "sigmoid_binary_cross_entropy", "num_labels": head.num_labels}


def head_from_obj(obj: dict) -> Head:
    kind = obj.get("kind")
    if kind == "softmax_cross_entropy":
        return SoftmaxCrossEntropy(num_classes=int(obj["num_classes"]))
    if kind == "sigmoid_binary_cross_entropy":
        return SigmoidBinaryCrossEntropy(num_labels=int(obj["num_labels"]))
    raise CheckpointError(f"unknown head kind {kind!r}")


def architecture_to_obj(architecture: ModelArchitecture) -> dict:
    return {
        "input_dim": architecture.input_dim,
        "hidden_dims": list(architecture.hidden_dims),
        "activation": architecture.activation,
        "head": head_to_obj(architecture.head),
    }


def architecture_from_obj(obj: dict) -> ModelArchitecture:
    try:
        return ModelArchitecture(
            input_dim=int(obj["input_dim"]),
            hidden_dims=tuple(int(d) for d in obj["hidden_dims"]),
            activation=obj["activation"],
            head=head_from_obj(obj["head"]),
        )
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"malformed architecture: {exc}") from exc
    except ValidationError as exc:
        raise CheckpointError(f"invalid architecture: {exc}") from exc


def checkpoint_to_doc(checkpoint: ModelCheckpoint) -> dict:
    return {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": architecture_to_obj(checkpoint.architecture),
        "layers": [
            {"weights": w, "biases": b} for w, b in zip(checkpoint.weights, checkpoint.biases)
        ],
        "provenance": checkpoint.provenance.to_obj(),
    }


def save_checkpoint(checkpoint: ModelCheckpoint, path: Path | str) -> None:
    jsonio.dump_path(checkpoint_to_doc(checkpoint), path)


def load_checkpoint(path: Path | str) -> ModelCheckpoint:
    doc = jsonio.load_path(path)
    version = doc.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    architecture = architecture_from_obj(doc.get("architecture", {}))
    layers = doc.get("layers")
    dims = architecture.layer_dims()
    if not isinstance(layers, list) or len(layers) != len(dims) - 1:
        raise CheckpointError(f"layers: expected {len(dims) - 1} entries")
    weights = []
    biases = []
    for i, layer in enumerate(layers):
        w = np.asarray(layer.get("weights"), dtype=np.float64)
        b = np.asarray(layer.get("biases"), dtype=np.float64)
        if w.shape != (dims[i], dims[i + 1]):
            raise CheckpointError(
                f"layers[{i}].weights: shape {w.shape} inconsistent with architecture "
                f"{(dims[i], dims[i + 1])}"
            )
        if b.shape != (dims[i + 1],):
            raise CheckpointError(f"layers[{i}].biases: shape {b.shape} inconsistent")
        if not np.isfinite(w).all():
            raise CheckpointError(f"layers[{i}].weights: non-finite value")
        if not np.isfinite(b).all():
            raise CheckpointError(f"layers[{i}].biases: non-finite value")
        weights.append(w)
        biases.append(b)
    provenance = TrainingProvenance.from_obj(doc.get("provenance", {}))
    return ModelCheckpoint(
        architecture=architecture,
        weights=tuple(weights),
        biases=tuple(biases),
        provenance=provenance,
    )


def adam_state_to_doc(state: AdamState) -> dict:
    return {
        "format_version": ADAM_STATE_FORMAT_VERSION,
        "step_count": state.step_count,
        "learning_rate": state.learning_rate,
        "beta1": state.beta1,
        "beta2": state.beta2,
        "epsilon": state.epsilon,
        "layers": [
            {"m_weights": mw, "m_biases": mb, "v_weights": vw, "v_biases": vb}
            for mw, mb, vw, vb in zip(
                state.m_weights, state.m_biases, state.v_weights, state.v_biases
            )
        ],
    }


def save_adam_state(state: AdamState, path: Path | str) -> None:
    jsonio.dump_path(adam_state_to_doc(state), path)


def load_adam_state(path: Path | str) -> AdamState:
    doc = jsonio.load_path(path)
    if doc.get("format_version") != ADAM_STATE_FORMAT_VERSION:
        raise CheckpointError(f"unsupported state format_version {doc.get('format_version')!r}")
    layers = doc["layers"]
    return AdamState(
        step_count=int(doc["step_count"]),
        m_weights=tuple(np.asarray(l["m_weights"], dtype=np.float64) for l in layers),
        m_biases=tuple(np.asarray(l["m_biases"], dtype=np.float64) for l in layers),
        v_weights=tuple(np.asarray(l["v_weights"], dtype=np.float64) for l in layers),
        v_biases=tuple(np.asarray(l["v_biases"], dtype=np.float64) for l in layers),
        learning_rate=float(doc["learning_rate"]),
        beta1=float(doc["beta1"]),
        beta2=float(doc["beta2"]),
        epsilon=float(doc["epsilon"]),
    )
