"""User data vectors, consent matrices, and successor dataset construction.

A firm's dataset holds one feature vector per user, partitioned into task
blocks. Each user carries a binary tasks-by-successors consent grid. A
successor company receives a masked copy of the dataset in which every
non-consented task block is zeroed; users who consented to nothing for
that successor are dropped entirely (optionally kept as all-zero rows).
The complement of a successor dataset is the set of original, unmasked
records of the dropped users.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Mapping, Sequence, Union

import numpy as np

from . import jsonio
from .errors import ConfigurationError, ProvenanceError, ValidationError

DATASET_FORMAT_VERSION = 1


@dataclass(frozen=True)
class TaskBlockSpec:
    """Names and widths of the task blocks every feature vector is built from."""

    task_names: tuple[str, ...]
    block_dims: tuple[int, ...]

    def __post_init__(self) -> None:
        if len(self.task_names) < 1:
            raise ValidationError("at least one task block is required")
        if len(self.task_names) != len(self.block_dims):
            raise ValidationError("task_names and block_dims must have equal length")
        if len(set(self.task_names)) != len(self.task_names):
            raise ValidationError("task names must be unique")
        if any(d < 1 for d in self.block_dims):
            raise ValidationError("every block dimension must be >= 1")

    @property
    def num_tasks(self) -> int:
        return len(self.task_names)

    @property
    def total_dim(self) -> int:
        return sum(self.block_dims)

    def block_slices(self) -> tuple[slice, ...]:
        slices = []
        offset = 0
        for dim in self.block_dims:
            slices.append(slice(offset, offset + dim))
            offset += dim
        return tuple(slices)


@dataclass(frozen=True)
class LabelSpace:
    """Shared label metadata for all records of a dataset.

    ``multiclass`` datasets label each record with a single class index.
    ``multilabel`` datasets attach a binary vector over named label groups;
    every label belongs to exactly one group.
    """

    kind: str
    num_classes: int | None = None
    label_groups: tuple[str, ...] | None = None
    group_of_label: tuple[int, ...] | None = None

    def __post_init__(self) -> None:
        if self.kind == "multiclass":
            if self.num_classes is None or self.num_classes < 2:
                raise ValidationError("multiclass label space needs num_classes >= 2")
        elif self.kind == "multilabel":
            if not self.label_groups or self.group_of_label is None:
                raise ValidationError("multilabel label space needs groups and group_of_label")
            if len(self.group_of_label) < 2:
                raise ValidationError("multilabel label space needs at least 2 labels")
            n_groups = len(self.label_groups)
            if any(g < 0 or g >= n_groups for g in self.group_of_label):
                raise ValidationError("group_of_label references an unknown group index")
        else:
            raise ValidationError(f"unknown label space kind {self.kind!r}")

    @classmethod
    def multiclass(cls, num_classes: int) -> "LabelSpace":
        return cls(kind="multiclass", num_classes=num_classes)

    @classmethod
    def multilabel(cls, label_groups: Sequence[str], group_of_label: Sequence[int]) -> "LabelSpace":
        return cls(
            kind="multilabel",
            label_groups=tuple(label_groups),
            group_of_label=tuple(int(g) for g in group_of_label),
        )

    @property
    def num_labels(self) -> int:
        if self.kind != "multilabel":
            raise ValidationError("num_labels is only defined for multilabel spaces")
        assert self.group_of_label is not None
        return len(self.group_of_label)

    @property
    def output_dim(self) -> int:
        if self.kind == "multiclass":
            assert self.num_classes is not None
            return self.num_classes
        return self.num_labels

    def group_index(self, group: str) -> int:
        if self.kind != "multilabel" or self.label_groups is None:
            raise ConfigurationError("label groups are only defined for multilabel spaces")
        try:
            return self.label_groups.index(group)
        except ValueError:
            raise ConfigurationError(
                f"unknown label group {group!r}; known groups: {list(self.label_groups)}"
            ) from None

    def labels_of_group(self, group: str) -> tuple[int, ...]:
        gid = self.group_index(group)
        assert self.group_of_label is not None
        return tuple(i for i, g in enumerate(self.group_of_label) if g == gid)

    def labels_outside_group(self, group: str) -> tuple[int, ...]:
        gid = self.group_index(group)
        assert self.group_of_label is not None
        return tuple(i for i, g in enumerate(self.group_of_label) if g != gid)


@dataclass(frozen=True)
class UserRecord:
    """One user's concatenated task-block feature vector plus labels."""

    user_id: str
    features: tuple[float, ...]
    labels: Union[int, tuple[int, ...]]
    origin_class: int | None = None


@dataclass(frozen=True)
class ConsentMatrix:
    """Binary tasks-by-successors grid: rows are tasks, columns are successors."""

    entries: tuple[tuple[int, ...], ...]

    def __post_init__(self) -> None:
        if len(self.entries) < 1:
            raise ValidationError("consent matrix needs at least one task row")
        width = len(self.entries[0])
        if width < 1:
            raise ValidationError("consent matrix needs at least one successor column")
        for row in self.entries:
            if len(row) != width:
                raise ValidationError("consent matrix rows must have equal length")
            for bit in row:
                if bit not in (0, 1):
                    raise ValidationError(f"consent entries must be 0 or 1, got {bit!r}")

    @property
    def num_tasks(self) -> int:
        return len(self.entries)

    @property
    def num_successors(self) -> int:
        return len(self.entries[0])

    def column(self, successor: int) -> tuple[int, ...]:
        """Consent bits for a 1-based successor index, one per task."""
        if not 1 <= successor <= self.num_successors:
            raise ValidationError(
                f"successor index {successor} out of range [1, {self.num_successors}]"
            )
        return tuple(row[successor - 1] for row in self.entries)

    def to_flat(self) -> tuple[int, ...]:
        return tuple(bit for row in self.entries for bit in row)

    @classmethod
    def from_flat(cls, flat: Sequence[int], num_tasks: int, num_successors: int) -> "ConsentMatrix":
        if len(flat) != num_tasks * num_successors:
            raise ValidationError(
                f"flat consent length {len(flat)} != {num_tasks}x{num_successors}"
            )
        rows = tuple(
            tuple(int(b) for b in flat[j * num_successors : (j + 1) * num_successors])
            for j in range(num_tasks)
        )
        return cls(rows)

    @classmethod
    def all_ones(cls, num_tasks: int, num_successors: int) -> "ConsentMatrix":
        return cls(tuple(tuple(1 for _ in range(num_successors)) for _ in range(num_tasks)))

    @classmethod
    def all_zeros(cls, num_tasks: int, num_successors: int) -> "ConsentMatrix":
        return cls(tuple(tuple(0 for _ in range(num_successors)) for _ in range(num_tasks)))


def _validate_records(
    records: Sequence[UserRecord], spec: TaskBlockSpec, label_space: LabelSpace
) -> None:
    total_dim = spec.total_dim
    seen: set[str] = set()
    for record in records:
        if record.user_id in seen:
            raise ValidationError(f"duplicate user_id {record.user_id!r}")
        seen.add(record.user_id)
        if len(record.features) != total_dim:
            raise ValidationError(
                f"record {record.user_id!r} has {len(record.features)} features, "
                f"expected {total_dim}"
            )
        for value in record.features:
            if not math.isfinite(value):
                raise ValidationError(f"record {record.user_id!r} has non-finite feature {value!r}")
        if label_space.kind == "multiclass":
            if not isinstance(record.labels, int):
                raise ValidationError(f"record {record.user_id!r}: multiclass label must be an int")
            assert label_space.num_classes is not None
            if not 0 <= record.labels < label_space.num_classes:
                raise ValidationError(
                    f"record {record.user_id!r}: class {record.labels} out of range"
                )
        else:
            labels = record.labels
            if not isinstance(labels, tuple) or len(labels) != label_space.num_labels:
                raise ValidationError(
                    f"record {record.user_id!r}: multilabel vector must have length "
                    f"{label_space.num_labels}"
                )
            if any(bit not in (0, 1) for bit in labels):
                raise ValidationError(f"record {record.user_id!r}: labels must be 0/1")


@dataclass(frozen=True)
class FirmDataset:
    """The firm's full dataset: records plus per-user consent grids.

    An empty record list is permitted so that complements of full-consent
    datasets remain representable.
    """

    spec: TaskBlockSpec
    records: tuple[UserRecord, ...]
    consent: Mapping[str, ConsentMatrix]
    num_successors: int
    label_space: LabelSpace
    dataset_id: str = ""

    def __post_init__(self) -> None:
        if self.num_successors < 1:
            raise ValidationError("num_successors must be >= 1")
        _validate_records(self.records, self.spec, self.label_space)
        record_ids = {r.user_id for r in self.records}
        consent_ids = set(self.consent.keys())
        if record_ids != consent_ids:
            missing = record_ids - consent_ids
            extra = consent_ids - record_ids
            raise ValidationError(
                f"consent map does not cover records exactly "
                f"(missing={sorted(missing)[:3]}, extra={sorted(extra)[:3]})"
            )
        for user_id, matrix in self.consent.items():
            if matrix.num_tasks != self.spec.num_tasks or matrix.num_successors != self.num_successors:
                raise ValidationError(
                    f"consent matrix for {user_id!r} has shape "
                    f"({matrix.num_tasks}, {matrix.num_successors}), expected "
                    f"({self.spec.num_tasks}, {self.num_successors})"
                )

    def __len__(self) -> int:
        return len(self.records)

    def user_ids(self) -> tuple[str, ...]:
        return tuple(r.user_id for r in self.records)


@dataclass(frozen=True)
class SuccessorDataset:
    """A masked, filtered dataset as received by one successor company."""

    successor_index: int
    spec: TaskBlockSpec
    records: tuple[UserRecord, ...]
    dropped_user_ids: tuple[str, ...]
    label_space: LabelSpace
    dataset_id: str = ""

    def __post_init__(self) -> None:
        if self.successor_index < 1:
            raise ValidationError("successor_index must be >= 1")
        _validate_records(self.records, self.spec, self.label_space)
        retained = {r.user_id for r in self.records}
        if retained & set(self.dropped_user_ids):
            raise ValidationError("retained and dropped user ids overlap")

    def __len__(self) -> int:
        return len(self.records)

    def user_ids(self) -> tuple[str, ...]:
        return tuple(r.user_id for r in self.records)


Dataset = Union[FirmDataset, SuccessorDataset]


# ---------------------------------------------------------------------------
# Consent rules
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AllowClasses:
    """Full consent for one successor iff the record's origin class is allowed."""

    classes: frozenset[int]
    successor: int


@dataclass(frozen=True)
class AllowLabelGroup:
    """Full consent for one successor iff the record carries any label of the group.

    A record carrying labels from both the consented and the forgotten group
    counts as consenting: the user chose to contribute the record.
    """

    group: str
    successor: int


@dataclass(frozen=True)
class PerUserRandom:
    """Each consent entry drawn independently as Bernoulli(probability)."""

    probability: float
    seed: int = 0


@dataclass(frozen=True)
class ExplicitConsent:
    """Caller-provided consent matrices, one per user."""

    matrices: Mapping[str, ConsentMatrix]


ConsentRule = Union[AllowClasses, AllowLabelGroup, PerUserRandom, ExplicitConsent]


def _column_matrix(num_tasks: int, num_successors: int, successor: int, consented: bool) -> ConsentMatrix:
    rows = tuple(
        tuple(1 if (k == successor - 1 and consented) else 0 for k in range(num_successors))
        for _ in range(num_tasks)
    )
    return ConsentMatrix(rows)


def consent_from_rule(dataset: FirmDataset, rule: ConsentRule) -> dict[str, ConsentMatrix]:
    """Materialize a consent rule into a complete user -> matrix map."""
    num_tasks = dataset.spec.num_tasks
    num_successors = dataset.num_successors

    if isinstance(rule, (AllowClasses, AllowLabelGroup)):
        if not 1 <= rule.successor <= num_successors:
            raise ConfigurationError(
                f"rule references successor {rule.successor}, dataset has {num_successors}"
            )

    if isinstance(rule, AllowClasses):
        if dataset.label_space.kind == "multiclass":
            assert dataset.label_space.num_classes is not None
            known = set(range(dataset.label_space.num_classes))
        else:
            known = {r.origin_class for r in dataset.records if r.origin_class is not None}
        unknown = set(rule.classes) - known
        if unknown:
            raise ConfigurationError(f"rule references unknown classes {sorted(unknown)}")
        return {
            r.user_id: _column_matrix(
                num_tasks, num_successors, rule.successor, r.origin_class in rule.classes
            )
            for r in dataset.records
        }

    if isinstance(rule, AllowLabelGroup):
        group_labels = set(dataset.label_space.labels_of_group(rule.group))
        result = {}
        for record in dataset.records:
            assert isinstance(record.labels, tuple)
            carries = any(record.labels[i] for i in group_labels)
            result[record.user_id] = _column_matrix(
                num_tasks, num_successors, rule.successor, carries
            )
        return result

    if isinstance(rule, PerUserRandom):
        if not 0.0 <= rule.probability <= 1.0:
            raise ConfigurationError(f"probability {rule.probability} outside [0, 1]")
        rng = np.random.default_rng(rule.seed)
        result = {}
        for record in dataset.records:
            draws = rng.random((num_tasks, num_successors)) < rule.probability
            result[record.user_id] = ConsentMatrix(
                tuple(tuple(int(b) for b in row) for row in draws)
            )
        return result

    if isinstance(rule, ExplicitConsent):
        record_ids = set(dataset.user_ids())
        given_ids = set(rule.matrices.keys())
        if given_ids != record_ids:
            unknown = given_ids - record_ids
            missing = record_ids - given_ids
            raise ConfigurationError(
                f"explicit consent map mismatch (unknown={sorted(unknown)[:3]}, "
                f"missing={sorted(missing)[:3]})"
            )
        return {r.user_id: rule.matrices[r.user_id] for r in dataset.records}

    raise ConfigurationError(f"unknown consent rule {rule!r}")


def with_consent(dataset: FirmDataset, rule: ConsentRule) -> FirmDataset:
    """Return a copy of the dataset with consent replaced per the rule."""
    return replace(dataset, consent=consent_from_rule(dataset, rule))


# ---------------------------------------------------------------------------
# Masking
# ---------------------------------------------------------------------------


def build_cdc_vector(
    record: UserRecord, spec: TaskBlockSpec, consent: ConsentMatrix, successor: int
) -> tuple[float, ...]:
    """Mask a record's features for one successor.

    Block j is kept verbatim when the consent bit is 1 and replaced with
    literal zeros when it is 0 (literal, so no negative zeros leak in).
    The original record is not modified.
    """
    if consent.num_tasks != spec.num_tasks:
        raise ValidationError(
            f"consent has {consent.num_tasks} task rows, spec has {spec.num_tasks}"
        )
    if len(record.features) != spec.total_dim:
        raise ValidationError(
            f"record has {len(record.features)} features, spec expects {spec.total_dim}"
        )
    bits = consent.column(successor)
    masked: list[float] = []
    for bit, block_slice, dim in zip(bits, spec.block_slices(), spec.block_dims):
        if bit:
            masked.extend(record.features[block_slice])
        else:
            masked.extend([0.0] * dim)
    return tuple(masked)


def build_cdc_dataset(
    dataset: FirmDataset, successor: int, drop_all_zero: bool = True
) -> SuccessorDataset:
    """Build the consciously contributed dataset for one successor.

    With ``drop_all_zero`` (the default), users whose entire consent column
    is zero are moved to ``dropped_user_ids`` instead of being kept as
    all-zero rows; masked records keep their labels either way.
    """
    if not 1 <= successor <= dataset.num_successors:
        raise ValidationError(
            f"successor {successor} out of range [1, {dataset.num_successors}]"
        )
    retained: list[UserRecord] = []
    dropped: list[str] = []
    for record in dataset.records:
        consent = dataset.consent[record.user_id]
        bits = consent.column(successor)
        if drop_all_zero and not any(bits):
            dropped.append(record.user_id)
            continue
        masked = build_cdc_vector(record, dataset.spec, consent, successor)
        retained.append(replace(record, features=masked))
    suffix = f"cdc-s{successor}"
    dataset_id = f"{dataset.dataset_id}/{suffix}" if dataset.dataset_id else suffix
    return SuccessorDataset(
        successor_index=successor,
        spec=dataset.spec,
        records=tuple(retained),
        dropped_user_ids=tuple(dropped),
        label_space=dataset.label_space,
        dataset_id=dataset_id,
    )


def complement_dataset(dataset: FirmDataset, successor_ds: SuccessorDataset) -> FirmDataset:
    """Return the original records the successor did not receive.

    Retained plus complement partition the source dataset; the complement
    keeps unmasked features and the users' original consent matrices.
    """
    source_ids = set(dataset.user_ids())
    retained_ids = set(successor_ds.user_ids())
    dropped_ids = set(successor_ds.dropped_user_ids)
    if not retained_ids <= source_ids or not dropped_ids <= source_ids:
        stray = sorted((retained_ids | dropped_ids) - source_ids)[:3]
        raise ProvenanceError(f"successor dataset references unknown user ids {stray}")
    if (retained_ids | dropped_ids) != source_ids:
        missing = sorted(source_ids - (retained_ids | dropped_ids))[:3]
        raise ProvenanceError(f"successor dataset does not account for user ids {missing}")
    records = tuple(r for r in dataset.records if r.user_id in dropped_ids)
    consent = {r.user_id: dataset.consent[r.user_id] for r in records}
    suffix = f"complement-s{successor_ds.successor_index}"
    dataset_id = f"{dataset.dataset_id}/{suffix}" if dataset.dataset_id else suffix
    return FirmDataset(
        spec=dataset.spec,
        records=records,
        consent=consent,
        num_successors=dataset.num_successors,
        label_space=dataset.label_space,
        dataset_id=dataset_id,
    )


def successor_as_firm(successor_ds: SuccessorDataset, source: FirmDataset) -> FirmDataset:
    """Re-wrap a successor dataset as a FirmDataset, reusing source consent."""
    consent = {r.user_id: source.consent[r.user_id] for r in successor_ds.records}
    return FirmDataset(
        spec=successor_ds.spec,
        records=successor_ds.records,
        consent=consent,
        num_successors=source.num_successors,
        label_space=successor_ds.label_space,
        dataset_id=successor_ds.dataset_id,
    )


# ---------------------------------------------------------------------------
# Array views
# ---------------------------------------------------------------------------


def feature_matrix(dataset: Dataset) -> np.ndarray:
    """Stack record features into an (N, d) float64 matrix."""
    if len(dataset.records) == 0:
        return np.zeros((0, dataset.spec.total_dim), dtype=np.float64)
    return np.array([r.features for r in dataset.records], dtype=np.float64)


def labels_array(dataset: Dataset) -> np.ndarray:
    """Stack record labels: (N,) int class vector or (N, L) binary matrix."""
    if dataset.label_space.kind == "multiclass":
        return np.array([r.labels for r in dataset.records], dtype=np.int64)
    return np.array([r.labels for r in dataset.records], dtype=np.int64).reshape(
        len(dataset.records), dataset.label_space.num_labels
    )


# ---------------------------------------------------------------------------
# Dataset file format
# ---------------------------------------------------------------------------


def _label_space_to_obj(space: LabelSpace) -> dict:
    if space.kind == "multiclass":
        return {"kind": "multiclass", "num_classes": space.num_classes}
    return {
        "kind": "multilabel",
        "groups": list(space.label_groups or ()),
        "group_of_label": list(space.group_of_label or ()),
    }


def _label_space_from_obj(obj: dict) -> LabelSpace:
    kind = obj.get("kind")
    if kind == "multiclass":
        return LabelSpace.multiclass(int(obj["num_classes"]))
    if kind == "multilabel":
        return LabelSpace.multilabel(obj["groups"], obj["group_of_label"])
    raise ValidationError(f"unknown label space kind {kind!r}")


def dataset_to_doc(dataset: FirmDataset) -> dict:
    records = []
    for record in dataset.records:
        labels = record.labels if isinstance(record.labels, int) else list(record.labels)
        records.append(
            {
                "user_id": record.user_id,
                "features": list(record.features),
                "labels": labels,
                "origin_class": record.origin_class,
            }
        )
    return {
        "format_version": DATASET_FORMAT_VERSION,
        "spec": {
            "task_names": list(dataset.spec.task_names),
            "block_dims": list(dataset.spec.block_dims),
        },
        "num_successors": dataset.num_successors,
        "label_space": _label_space_to_obj(dataset.label_space),
        "records": records,
        "consent": {r.user_id: list(dataset.consent[r.user_id].to_flat()) for r in dataset.records},
    }


def save_dataset(dataset: FirmDataset, path: Path | str) -> None:
    jsonio.dump_path(dataset_to_doc(dataset), path)


def load_dataset(path: Path | str) -> FirmDataset:
    path = Path(path)
    doc = jsonio.load_path(path)
    version = doc.get("format_version")
    if version != DATASET_FORMAT_VERSION:
        raise ValidationError(f"unsupported dataset format_version {version!r}")
    spec = TaskBlockSpec(
        task_names=tuple(doc["spec"]["task_names"]),
        block_dims=tuple(int(d) for d in doc["spec"]["block_dims"]),
    )
    label_space = _label_space_from_obj(doc["label_space"])
    num_successors = int(doc["num_successors"])
    records = []
    for entry in doc["records"]:
        raw_labels = entry["labels"]
        labels: Union[int, tuple[int, ...]]
        if label_space.kind == "multiclass":
            labels = int(raw_labels)
        else:
            labels = tuple(int(b) for b in raw_labels)
        origin = entry.get("origin_class")
        records.append(
            UserRecord(
                user_id=entry["user_id"],
                features=tuple(float(x) for x in entry["features"]),
                labels=labels,
                origin_class=None if origin is None else int(origin),
            )
        )
    consent = {
        user_id: ConsentMatrix.from_flat(flat, spec.num_tasks, num_successors)
        for user_id, flat in doc["consent"].items()
    }
    return FirmDataset(
        spec=spec,
        records=tuple(records),
        consent=consent,
        num_successors=num_successors,
        label_space=label_space,
        dataset_id=path.stem,
    )


# ---------------------------------------------------------------------------
# Consent rule (de)serialization for config documents
# ---------------------------------------------------------------------------


def consent_rule_to_obj(rule: ConsentRule) -> dict:
    if isinstance(rule, AllowClasses):
        return {
            "kind": "allow_classes",
            "classes": sorted(rule.classes),
            "successor": rule.successor,
        }
    if isinstance(rule, AllowLabelGroup):
        return {"kind": "allow_label_group", "group": rule.group, "successor": rule.successor}
    if isinstance(rule, PerUserRandom):
        return {"kind": "per_user_random", "probability": rule.probability, "seed": rule.seed}
    if isinstance(rule, ExplicitConsent):
        raise ConfigurationError("explicit consent maps are not representable in config documents")
    raise ConfigurationError(f"unknown consent rule {rule!r}")


def consent_rule_from_obj(obj: dict) -> ConsentRule:
    kind = obj.get("kind")
    if kind == "allow_classes":
        return AllowClasses(
            classes=frozenset(int(c) for c in obj["classes"]),
            successor=int(obj.get("successor", 1)),
        )
    if kind == "allow_label_group":
        return AllowLabelGroup(group=obj["group"], successor=int(obj.get("successor", 1)))
    if kind == "per_user_random":
        return PerUserRandom(probability=float(obj["probability"]), seed=int(obj.get("seed", 0)))
    raise ConfigurationError(f"unknown consent rule kind {kind!r}")
