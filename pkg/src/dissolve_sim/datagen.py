"""Seeded synthetic dataset generators.

Three families:

* ``GaussianClasses`` -- a single-task multiclass dataset; class means are
  drawn from a seeded isotropic Gaussian scaled by ``class_separation`` and
  samples are mean plus isotropic noise. Stands in for image corpora.
* ``MultiLabelSkills`` -- a two-or-more-group multi-label dataset; each
  record belongs to a primary group ("administrative", "developer", ...),
  activates labels of its group with ``label_density``, and optionally
  leaks labels of other groups at ``cross_group_overlap_rate``. Features
  are the sum of per-label direction vectors plus noise. Stands in for a
  resume/skills corpus.
* ``MultiTask`` -- several Gaussian task blocks sharing one class label,
  for exercising per-task block masking.

Structure (class means, label directions) is drawn from a separate
structure seed so that different sampling seeds can share one underlying
world; that is what makes auxiliary pretraining distributions meaningful.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .consent import ConsentMatrix, FirmDataset, LabelSpace, TaskBlockSpec, UserRecord
from .errors import ConfigurationError
from .seeding import STAGE_STRUCTURE, stage_seed


@dataclass(frozen=True)
class GaussianClasses:
    num_classes: int
    per_class_count: int
    dim: int
    class_separation: float
    noise_sigma: float
    structure_seed: int | None = None

    def __post_init__(self) -> None:
        if self.num_classes < 2:
            raise ConfigurationError("num_classes must be >= 2")
        if self.per_class_count < 2:
            raise ConfigurationError("per_class_count must be >= 2 for a stratified split")
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")
        if self.noise_sigma <= 0:
            raise ConfigurationError("noise_sigma must be > 0")
        if self.class_separation < 0:
            raise ConfigurationError("class_separation must be >= 0")


@dataclass(frozen=True)
class SkillGroup:
    name: str
    num_labels: int

    def __post_init__(self) -> None:
        if self.num_labels < 1:
            raise ConfigurationError("each group needs at least one label")


@dataclass(frozen=True)
class MultiLabelSkills:
    num_records: int
    dim: int
    groups: tuple[SkillGroup, ...]
    label_density: float
    cross_group_overlap_rate: float
    noise_sigma: float = 1.0
    group_record_counts: tuple[int, ...] | None = None
    structure_seed: int | None = None

    def __post_init__(self) -> None:
        if self.num_records < 4:
            raise ConfigurationError("num_records must be >= 4")
        if self.dim < 1:
            raise ConfigurationError("dim must be >= 1")
        if len(self.groups) < 2:
            raise ConfigurationError("at least two label groups are required")
        names = [g.name for g in self.groups]
        if len(set(names)) != len(names):
            raise ConfigurationError("group names must be unique")
        if not 0.0 < self.label_density <= 1.0:
            raise ConfigurationError("label_density must be in (0, 1]")
        if not 0.0 <= self.cross_group_overlap_rate <= 1.0:
            raise ConfigurationError("cross_group_overlap_rate must be in [0, 1]")
        if self.noise_sigma <= 0:
            raise ConfigurationError("noise_sigma must be > 0")
        if self.group_record_counts is not None:
            if len(self.group_record_counts) != len(self.groups):
                raise ConfigurationError("group_record_counts must match the number of groups")
            if any(c < 2 for c in self.group_record_counts):
                raise ConfigurationError("each group needs at least 2 records")
            if sum(self.group_record_counts) != self.num_records:
                raise ConfigurationError("group_record_counts must sum to num_records")


@dataclass(frozen=True)
class TaskBlock:
    task_name: str
    classes: GaussianClasses


@dataclass(frozen=True)
class MultiTask:
    tasks: tuple[TaskBlock, ...]
    structure_seed: int | None = None

    def __post_init__(self) -> None:
        if len(self.tasks) < 1:
            raise ConfigurationError("at least one task block is required")
        names = [t.task_name for t in self.tasks]
        if len(set(names)) != len(names):
            raise ConfigurationError("task names must be unique")
        first = self.tasks[0].classes
        for task in self.tasks[1:]:
            if task.classes.num_classes != first.num_classes:
                raise ConfigurationError("all task blocks must share num_classes")
            if task.classes.per_class_count != first.per_class_count:
                raise ConfigurationError("all task blocks must share per_class_count")


Variant = Union[GaussianClasses, MultiLabelSkills, MultiTask]


@dataclass(frozen=True)
class GeneratorConfig:
    seed: int
    variant: Variant
    test_fraction: float

    def __post_init__(self) -> None:
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError("test_fraction must be in (0, 1)")


def _effective_structure_seed(config: GeneratorConfig) -> int:
    declared = config.variant.structure_seed
    if declared is not None:
        return declared
    return stage_seed(config.seed, STAGE_STRUCTURE)


def _stratified_test_counts(group_sizes: list[int], test_fraction: float) -> list[int]:
    """Largest-remainder apportionment of the test split across groups.

    Guarantees each group's test count is within 1 of exact proportionality
    and that every group keeps at least one train and one test record.
    """
    total = sum(group_sizes)
    target = int(round(total * test_fraction))
    quotas = [size * test_fraction for size in group_sizes]
    counts = [int(math.floor(q)) for q in quotas]
    remainder = target - sum(counts)
    if remainder > 0:
        order = sorted(
            range(len(group_sizes)), key=lambda i: (-(quotas[i] - counts[i]), i)
        )
        for i in order[:remainder]:
            counts[i] += 1
    for size, count in zip(group_sizes, counts):
        if count < 1 or count >= size:
            raise ConfigurationError(
                f"test_fraction {test_fraction} leaves a group without both a "
                f"train and a test record (size={size}, test={count})"
            )
    return counts


def _near_equal_split(total: int, parts: int) -> list[int]:
    base = total // parts
    extra = total % parts
    return [base + (1 if i < extra else 0) for i in range(parts)]


def _split_records(
    records_by_group: list[list[UserRecord]], test_fraction: float
) -> tuple[list[UserRecord], list[UserRecord]]:
    test_counts = _stratified_test_counts([len(g) for g in records_by_group], test_fraction)
    train: list[UserRecord] = []
    test: list[UserRecord] = []
    for group, count in zip(records_by_group, test_counts):
        train.extend(group[: len(group) - count])
        test.extend(group[len(group) - count :])
    return train, test


def _all_ones_consent(records: list[UserRecord], num_tasks: int, num_successors: int):
    matrix = ConsentMatrix.all_ones(num_tasks, num_successors)
    return {r.user_id: matrix for r in records}


def _make_pair(
    spec: TaskBlockSpec,
    label_space: LabelSpace,
    records_by_group: list[list[UserRecord]],
    test_fraction: float,
    num_successors: int,
    dataset_id: str,
) -> tuple[FirmDataset, FirmDataset]:
    train_records, test_records = _split_records(records_by_group, test_fraction)
    datasets = []
    for tag, recs in (("train", train_records), ("test", test_records)):
        datasets.append(
            FirmDataset(
                spec=spec,
                records=tuple(recs),
                consent=_all_ones_consent(recs, spec.num_tasks, num_successors),
                num_successors=num_successors,
                label_space=label_space,
                dataset_id=f"{dataset_id}-{tag}",
            )
        )
    return datasets[0], datasets[1]


def _gaussian_class_means(variant: GaussianClasses, structure_seed: int) -> np.ndarray:
    rng = np.random.default_rng(structure_seed)
    return rng.standard_normal((variant.num_classes, variant.dim)) * variant.class_separation


def _generate_gaussian(
    config: GeneratorConfig, num_successors: int
) -> tuple[FirmDataset, FirmDataset]:
    variant = config.variant
    assert isinstance(variant, GaussianClasses)
    means = _gaussian_class_means(variant, _effective_structure_seed(config))
    sample_rng = np.random.default_rng(stage_seed(config.seed, "samples"))
    prefix = f"u{config.seed}"
    spec = TaskBlockSpec(task_names=("features",), block_dims=(variant.dim,))
    label_space = LabelSpace.multiclass(variant.num_classes)

    records_by_class: list[list[UserRecord]] = []
    index = 0
    for cls in range(variant.num_classes):
        noise = sample_rng.standard_normal((variant.per_class_count, variant.dim))
        block = means[cls] + variant.noise_sigma * noise
        group = []
        for row in block:
            group.append(
                UserRecord(
                    user_id=f"{prefix}-{index:06d}",
                    features=tuple(float(x) for x in row),
                    labels=cls,
                    origin_class=cls,
                )
            )
            index += 1
        records_by_class.append(group)

    dataset_id = f"gaussian{variant.num_classes}-s{config.seed}"
    return _make_pair(
        spec, label_space, records_by_class, config.test_fraction, num_successors, dataset_id
    )


def _generate_skills(
    config: GeneratorConfig, num_successors: int
) -> tuple[FirmDataset, FirmDataset]:
    variant = config.variant
    assert isinstance(variant, MultiLabelSkills)
    structure_rng = np.random.default_rng(_effective_structure_seed(config))
    sample_rng = np.random.default_rng(stage_seed(config.seed, "samples"))
    prefix = f"u{config.seed}"

    label_counts = [g.num_labels for g in variant.groups]
    total_labels = sum(label_counts)
    group_of_label: list[int] = []
    for gid, count in enumerate(label_counts):
        group_of_label.extend([gid] * count)
    label_space = LabelSpace.multilabel([g.name for g in variant.groups], group_of_label)

    # Per-label direction vectors with roughly unit norm.
    directions = structure_rng.standard_normal((total_labels, variant.dim)) / math.sqrt(
        variant.dim
    )

    if variant.group_record_counts is not None:
        record_counts = list(variant.group_record_counts)
    else:
        record_counts = _near_equal_split(variant.num_records, len(variant.groups))
        if any(c < 2 for c in record_counts):
            raise ConfigurationError("num_records too small for the number of groups")

    label_offsets = np.cumsum([0] + label_counts)
    label_rows: list[np.ndarray] = []
    origins: list[int] = []
    for gid, count in enumerate(record_counts):
        own = slice(label_offsets[gid], label_offsets[gid + 1])
        for _ in range(count):
            row = np.zeros(total_labels, dtype=np.int64)
            own_draw = sample_rng.random(label_counts[gid]) < variant.label_density
            if not own_draw.any():
                own_draw[sample_rng.integers(label_counts[gid])] = True
            row[own] = own_draw.astype(np.int64)
            if variant.cross_group_overlap_rate > 0.0:
                others = np.ones(total_labels, dtype=bool)
                others[own] = False
                leak = sample_rng.random(int(others.sum())) < variant.cross_group_overlap_rate
                row[others] = leak.astype(np.int64)
            label_rows.append(row)
            origins.append(gid)

    label_matrix = np.stack(label_rows)
    noise = sample_rng.standard_normal((len(label_rows), variant.dim))
    features = label_matrix @ directions + variant.noise_sigma * noise

    spec = TaskBlockSpec(task_names=("skills",), block_dims=(variant.dim,))
    records_by_group: list[list[UserRecord]] = [[] for _ in variant.groups]
    for index, (row, labels, gid) in enumerate(zip(features, label_matrix, origins)):
        records_by_group[gid].append(
            UserRecord(
                user_id=f"{prefix}-{index:06d}",
                features=tuple(float(x) for x in row),
                labels=tuple(int(b) for b in labels),
                origin_class=gid,
            )
        )

    dataset_id = f"skills{variant.num_records}-s{config.seed}"
    return _make_pair(
        spec, label_space, records_by_group, config.test_fraction, num_successors, dataset_id
    )


def _generate_multitask(
    config: GeneratorConfig, num_successors: int
) -> tuple[FirmDataset, FirmDataset]:
    variant = config.variant
    assert isinstance(variant, MultiTask)
    structure_root = _effective_structure_seed(config)
    sample_rng = np.random.default_rng(stage_seed(config.seed, "samples"))
    prefix = f"u{config.seed}"

    first = variant.tasks[0].classes
    num_classes = first.num_classes
    per_class = first.per_class_count
    task_means = [
        _gaussian_class_means(task.classes, stage_seed(structure_root, f"task/{i}"))
        for i, task in enumerate(variant.tasks)
    ]

    spec = TaskBlockSpec(
        task_names=tuple(t.task_name for t in variant.tasks),
        block_dims=tuple(t.classes.dim for t in variant.tasks),
    )
    label_space = LabelSpace.multiclass(num_classes)

    records_by_class: list[list[UserRecord]] = []
    index = 0
    for cls in range(num_classes):
        blocks = []
        for task, means in zip(variant.tasks, task_means):
            noise = sample_rng.standard_normal((per_class, task.classes.dim))
            blocks.append(means[cls] + task.classes.noise_sigma * noise)
        stacked = np.concatenate(blocks, axis=1)
        group = []
        for row in stacked:
            group.append(
                UserRecord(
                    user_id=f"{prefix}-{index:06d}",
                    features=tuple(float(x) for x in row),
                    labels=cls,
                    origin_class=cls,
                )
            )
            index += 1
        records_by_class.append(group)

    dataset_id = f"multitask{len(variant.tasks)}x{num_classes}-s{config.seed}"
    return _make_pair(
        spec, label_space, records_by_class, config.test_fraction, num_successors, dataset_id
    )


def generate(config: GeneratorConfig, num_successors: int = 1) -> tuple[FirmDataset, FirmDataset]:
    """Generate a (train, test) dataset pair, deterministically from the seed.

    The test split is disjoint and stratified by class (or primary group);
    per-group test counts deviate from exact proportionality by at most one.
    Consent is initialized to all-ones and is normally replaced via a rule.
    """
    if num_successors < 1:
        raise ConfigurationError("num_successors must be >= 1")
    if isinstance(config.variant, GaussianClasses):
        return _generate_gaussian(config, num_successors)
    if isinstance(config.variant, MultiLabelSkills):
        return _generate_skills(config, num_successors)
    if isinstance(config.variant, MultiTask):
        return _generate_multitask(config, num_successors)
    raise ConfigurationError(f"unknown generator variant {config.variant!r}")


# ---------------------------------------------------------------------------
# Separability oracle
# ---------------------------------------------------------------------------


def nearest_mean_accuracy(
    means: np.ndarray, noise_sigma: float, rng: np.random.Generator, num_samples: int
) -> float:
    """Monte-Carlo accuracy of the optimal nearest-mean classifier.

    With equal priors and shared isotropic covariance, maximum likelihood
    reduces to nearest class mean; ties resolve to the lowest class index.
    """
    num_classes = means.shape[0]
    classes = rng.integers(0, num_classes, size=num_samples)
    samples = means[classes] + noise_sigma * rng.standard_normal((num_samples, means.shape[1]))
    # Squared distance to every mean; argmin picks the first minimum.
    d2 = ((samples[:, None, :] - means[None, :, :]) ** 2).sum(axis=2)
    predictions = d2.argmin(axis=1)
    return float((predictions == classes).mean())


def bayes_accuracy_estimate(config: GeneratorConfig, num_mc_samples: int = 20000) -> float:
    """Estimate the Bayes-optimal accuracy of a GaussianClasses config.

    Uses the true generating means and noise level, so this is an oracle for
    calibrating separability, independent of any trained model.
    """
    if not isinstance(config.variant, GaussianClasses):
        raise ConfigurationError("bayes_accuracy_estimate supports only GaussianClasses variants")
    if num_mc_samples < 1:
        raise ConfigurationError("num_mc_samples must be >= 1")
    means = _gaussian_class_means(config.variant, _effective_structure_seed(config))
    rng = np.random.default_rng(stage_seed(config.seed, "bayes-mc"))
    return nearest_mean_accuracy(means, config.variant.noise_sigma, rng, num_mc_samples)


# ---------------------------------------------------------------------------
# Default configurations
# ---------------------------------------------------------------------------


def default_image_analog_config(seed: int = 101) -> GeneratorConfig:
    """Ten well-separated Gaussian classes (Bayes accuracy >= 0.99), 1000 each."""
    return GeneratorConfig(
        seed=seed,
        variant=GaussianClasses(
            num_classes=10, per_class_count=1000, dim=16, class_separation=6.0, noise_sigma=1.0
        ),
        test_fraction=0.1,
    )


def default_skills_config(seed: int = 202) -> GeneratorConfig:
    """Two-group skills corpus at full scale: 29020 records, 25000/4020 split,
    14009 of them carrying an administrative label."""
    return GeneratorConfig(
        seed=seed,
        variant=MultiLabelSkills(
            num_records=29020,
            dim=64,
            groups=(SkillGroup("administrative", 8), SkillGroup("developer", 8)),
            label_density=0.3,
            cross_group_overlap_rate=0.0,
            noise_sigma=0.2,
            group_record_counts=(14009, 15011),
        ),
        test_fraction=4020 / 29020,
    )


# ---------------------------------------------------------------------------
# Config (de)serialization
# ---------------------------------------------------------------------------


def _variant_to_obj(variant: Variant) -> dict:
    if isinstance(variant, GaussianClasses):
        obj: dict = {
            "kind": "gaussian_classes",
            "num_classes": variant.num_classes,
            "per_class_count": variant.per_class_count,
            "dim": variant.dim,
            "class_separation": variant.class_separation,
            "noise_sigma": variant.noise_sigma,
        }
        if variant.structure_seed is not None:
            obj["structure_seed"] = variant.structure_seed
        return obj
    if isinstance(variant, MultiLabelSkills):
        obj = {
            "kind": "multilabel_skills",
            "num_records": variant.num_records,
            "dim": variant.dim,
            "groups": [{"name": g.name, "num_labels": g.num_labels} for g in variant.groups],
            "label_density": variant.label_density,
            "cross_group_overlap_rate": variant.cross_group_overlap_rate,
            "noise_sigma": variant.noise_sigma,
        }
        if variant.group_record_counts is not None:
            obj["group_record_counts"] = list(variant.group_record_counts)
        if variant.structure_seed is not None:
            obj["structure_seed"] = variant.structure_seed
        return obj
    if isinstance(variant, MultiTask):
        obj = {
            "kind": "multi_task",
            "tasks": [
                {"task_name": t.task_name, "classes": _variant_to_obj(t.classes)}
                for t in variant.tasks
            ],
        }
        if variant.structure_seed is not None:
            obj["structure_seed"] = variant.structure_seed
        return obj
    raise ConfigurationError(f"unknown variant {variant!r}")


def _gaussian_from_obj(obj: dict) -> GaussianClasses:
    return GaussianClasses(
        num_classes=int(obj["num_classes"]),
        per_class_count=int(obj["per_class_count"]),
        dim=int(obj["dim"]),
        class_separation=float(obj["class_separation"]),
        noise_sigma=float(obj["noise_sigma"]),
        structure_seed=None if obj.get("structure_seed") is None else int(obj["structure_seed"]),
    )


def variant_from_obj(obj: dict) -> Variant:
    kind = obj.get("kind")
    if kind == "gaussian_classes":
        return _gaussian_from_obj(obj)
    if kind == "multilabel_skills":
        counts = obj.get("group_record_counts")
        return MultiLabelSkills(
            num_records=int(obj["num_records"]),
            dim=int(obj["dim"]),
            groups=tuple(
                SkillGroup(name=g["name"], num_labels=int(g["num_labels"]))
                for g in obj["groups"]
            ),
            label_density=float(obj["label_density"]),
            cross_group_overlap_rate=float(obj["cross_group_overlap_rate"]),
            noise_sigma=float(obj.get("noise_sigma", 1.0)),
            group_record_counts=None if counts is None else tuple(int(c) for c in counts),
            structure_seed=None
            if obj.get("structure_seed") is None
            else int(obj["structure_seed"]),
        )
    if kind == "multi_task":
        return MultiTask(
            tasks=tuple(
                TaskBlock(task_name=t["task_name"], classes=_gaussian_from_obj(t["classes"]))
                for t in obj["tasks"]
            ),
            structure_seed=None
            if obj.get("structure_seed") is None
            else int(obj["structure_seed"]),
        )
    raise ConfigurationError(f"unknown generator variant kind {kind!r}")


def generator_config_to_obj(config: GeneratorConfig) -> dict:
    return {
        "seed": config.seed,
        "variant": _variant_to_obj(config.variant),
        "test_fraction": config.test_fraction,
    }


def generator_config_from_obj(obj: dict, default_seed: int | None = None) -> GeneratorConfig:
    seed = obj.get("seed", default_seed)
    if seed is None:
        raise ConfigurationError("generator config needs a seed (or a master seed to derive one)")
    return GeneratorConfig(
        seed=int(seed),
        variant=variant_from_obj(obj["variant"]),
        test_fraction=float(obj["test_fraction"]),
    )


def derived_pretrain_generator(main: GeneratorConfig, pretrain_seed: int) -> GeneratorConfig:
    """Auxiliary distribution for pretraining: same world, fresh sampling seed.

    Pins the main config's effective structure seed so class means or label
    directions are shared while users and noise differ.
    """
    structure = _effective_structure_seed(main)
    if isinstance(main.variant, MultiTask):
        variant: Variant = replace(main.variant, structure_seed=structure)
    else:
        variant = replace(main.variant, structure_seed=structure)
    return replace(main, seed=pretrain_seed, variant=variant)
