"""Command-line interface.

Subcommands::

    gen-data        generate a seeded synthetic dataset pair
    dissolve        apply a consent rule and write successor + complement files
    train           run one training regime on a dataset file
    evaluate        compute forget/retain rates for a checkpoint
    run-experiment  execute a full experiment config

Exit codes: 0 on success, 1 on configuration errors (including usage),
2 on runtime errors or divergence aborts.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from . import jsonio
from .consent import (
    AllowClasses,
    AllowLabelGroup,
    ConsentRule,
    PerUserRandom,
    build_cdc_dataset,
    complement_dataset,
    load_dataset,
    save_dataset,
    successor_as_firm,
    with_consent,
)
from .datagen import generate, generator_config_from_obj
from .errors import (
    CheckpointError,
    ConfigurationError,
    DissolveSimError,
    MetricUndefinedError,
    ProvenanceError,
    ValidationError,
)
from .experiment import load_experiment_config, run_experiment
from .nn import (
    ModelArchitecture,
    SigmoidBinaryCrossEntropy,
    SoftmaxCrossEntropy,
    load_checkpoint,
    save_checkpoint,
)
from .regimes import (
    EvalSuite,
    PretrainSpec,
    REGIME_FINE_TUNE,
    REGIME_GRADIENT_ASCENT,
    REGIME_ORIGINAL,
    REGIME_RETRAIN_PRETRAINED,
    REGIME_RETRAIN_SCRATCH,
    run_fine_tune,
    run_gradient_ascent_unlearn,
    run_original,
    run_retrain_pretrained,
    run_retrain_scratch,
)

_CONFIG_ERRORS = (
    ConfigurationError,
    ValidationError,
    ProvenanceError,
    CheckpointError,
    MetricUndefinedError,
)

_CLI_REGIMES = {
    "original": REGIME_ORIGINAL,
    "retrain-scratch": REGIME_RETRAIN_SCRATCH,
    "retrain-pretrained": REGIME_RETRAIN_PRETRAINED,
    "fine-tune": REGIME_FINE_TUNE,
    "gradient-ascent-unlearn": REGIME_GRADIENT_ASCENT,
}


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # noqa: D102 - argparse hook
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise _UsageError(message)


def parse_consent_rule(text: str, successor: int) -> ConsentRule:
    """Parse a compact rule string.

    Grammar: ``full`` | ``allow-classes:C[,C...]`` |
    ``allow-label-group:NAME`` | ``per-user-random:P[:SEED]``.
    Class and group rules bind to the given successor column.
    """
    name, _, rest = text.partition(":")
    if name == "full":
        return PerUserRandom(probability=1.0, seed=0)
    if name == "allow-classes":
        if not rest:
            raise ConfigurationError("allow-classes needs a class list, e.g. allow-classes:0,1,2")
        try:
            classes = frozenset(int(c) for c in rest.split(","))
        except ValueError as exc:
            raise ConfigurationError(f"bad class list {rest!r}") from exc
        return AllowClasses(classes=classes, successor=successor)
    if name == "allow-label-group":
        if not rest:
            raise ConfigurationError("allow-label-group needs a group name")
        return AllowLabelGroup(group=rest, successor=successor)
    if name == "per-user-random":
        parts = rest.split(":") if rest else []
        if not parts or not parts[0]:
            raise ConfigurationError("per-user-random needs a probability")
        try:
            probability = float(parts[0])
            seed = int(parts[1]) if len(parts) > 1 else 0
        except ValueError as exc:
            raise ConfigurationError(f"bad per-user-random spec {rest!r}") from exc
        return PerUserRandom(probability=probability, seed=seed)
    raise ConfigurationError(
        f"unknown consent rule {text!r}; expected full, allow-classes:..., "
        f"allow-label-group:..., or per-user-random:..."
    )


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(",") if v != "")
    except ValueError as exc:
        raise ConfigurationError(f"bad integer list {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dissolve-sim", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset pair", add_help=True)
    p.add_argument("--config", required=True, help="generator config JSON file")
    p.add_argument("--out", required=True, help="output directory for train.json / test.json")
    p.add_argument("--num-successors", type=int, default=1)

    p = sub.add_parser("dissolve", help="apply a consent rule and split a dataset")
    p.add_argument("--data", required=True, help="dataset JSON file")
    p.add_argument("--consent-rule", required=True, help="rule string, see parse_consent_rule")
    p.add_argument("--successor", type=int, default=1)
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("train", help="train one regime on a dataset file")
    p.add_argument("--regime", required=True, choices=sorted(_CLI_REGIMES))
    p.add_argument("--data", required=True, help="training dataset (forget set for ascent)")
    p.add_argument("--retain-train", help="consented training data (gradient-ascent-unlearn)")
    p.add_argument("--init", help="init checkpoint (fine-tune / gradient-ascent-unlearn)")
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="checkpoint output path")
    p.add_argument("--trace", help="trace CSV output path")
    p.add_argument("--retain-data", required=True, help="held-out consented eval data")
    p.add_argument("--forget-data", required=True, help="held-out complement eval data")
    p.add_argument("--retain-labels", help="comma-separated label indices (multilabel)")
    p.add_argument("--forget-labels", help="comma-separated label indices (multilabel)")
    p.add_argument("--pretrain-config", help="generator config JSON (retrain-pretrained)")
    p.add_argument("--pretrain-epochs", type=int, help="pretraining epochs (retrain-pretrained)")
    p.add_argument("--hidden-dims", default="32,32")
    p.add_argument("--activation", default="relu", choices=("relu", "tanh"))
    p.add_argument("--batch-size", type=int, default=128)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--eval-every", type=int, default=1)

    p = sub.add_parser("evaluate", help="forget/retain rates for a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--retain-data", required=True)
    p.add_argument("--forget-data", required=True)
    p.add_argument("--report", required=True, help="report JSON output path")
    p.add_argument("--retain-labels", help="comma-separated label indices (multilabel)")
    p.add_argument("--forget-labels", help="comma-separated label indices (multilabel)")

    p = sub.add_parser("run-experiment", help="run a full experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--out-dir", help="overrides DISSOLVE_SIM_OUT and the config output_dir")

    return parser


def _cmd_gen_data(args: argparse.Namespace) -> int:
    config = generator_config_from_obj(jsonio.load_path(args.config))
    train, test = generate(config, num_successors=args.num_successors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_dataset(train, out / "train.json")
    save_dataset(test, out / "test.json")
    print(f"wrote {out / 'train.json'} ({len(train)} records)")
    print(f"wrote {out / 'test.json'} ({len(test)} records)")
    return 0


def _cmd_dissolve(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.data)
    rule = parse_consent_rule(args.consent_rule, args.successor)
    dataset = with_consent(dataset, rule)
    successor_ds = build_cdc_dataset(dataset, args.successor)
    complement = complement_dataset(dataset, successor_ds)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cdc_path = out / f"cdc_s{args.successor}.json"
    comp_path = out / f"complement_s{args.successor}.json"
    save_dataset(successor_as_firm(successor_ds, dataset), cdc_path)
    save_dataset(complement, comp_path)
    print(f"wrote {cdc_path} ({len(successor_ds)} records)")
    print(f"wrote {comp_path} ({len(complement)} records)")
    return 0


def _head_for(dataset) -> SoftmaxCrossEntropy | SigmoidBinaryCrossEntropy:
    space = dataset.label_space
    if space.kind == "multiclass":
        return SoftmaxCrossEntropy(num_classes=space.num_classes)
    return SigmoidBinaryCrossEntropy(num_labels=space.num_labels)


def _eval_suite_from_args(args: argparse.Namespace) -> EvalSuite:
    retain = load_dataset(args.retain_data)
    forget = load_dataset(args.forget_data)
    retain_labels = None if args.retain_labels is None else _parse_int_list(args.retain_labels)
    forget_labels = None if args.forget_labels is None else _parse_int_list(args.forget_labels)
    return EvalSuite.from_datasets(retain, forget, retain_labels, forget_labels)


def _cmd_train(args: argparse.Namespace) -> int:
    data = load_dataset(args.data)
    eval_suite = _eval_suite_from_args(args)
    regime = _CLI_REGIMES[args.regime]
    opts = dict(learning_rate=args.lr, batch_size=args.batch_size, eval_every=args.eval_every)

    if regime in (REGIME_FINE_TUNE, REGIME_GRADIENT_ASCENT):
        if args.init is None:
            raise ConfigurationError(f"--init is required for regime {args.regime}")
        init = load_checkpoint(args.init)
        if regime == REGIME_FINE_TUNE:
            result = run_fine_tune(init, data, args.epochs, args.seed, eval_suite, **opts)
        else:
            if args.retain_train is None:
                raise ConfigurationError("--retain-train is required for gradient-ascent-unlearn")
            retain_train = load_dataset(args.retain_train)
            result = run_gradient_ascent_unlearn(
                init, data, retain_train, args.epochs, args.seed, eval_suite, **opts
            )
    else:
        architecture = ModelArchitecture(
            input_dim=data.spec.total_dim,
            hidden_dims=_parse_int_list(args.hidden_dims),
            activation=args.activation,
            head=_head_for(data),
        )
        if regime == REGIME_ORIGINAL:
            result = run_original(data, architecture, args.epochs, args.seed, eval_suite, **opts)
        elif regime == REGIME_RETRAIN_SCRATCH:
            result = run_retrain_scratch(
                data, architecture, args.epochs, args.seed, eval_suite, **opts
            )
        else:
            if args.pretrain_config is None or args.pretrain_epochs is None:
                raise ConfigurationError(
                    "--pretrain-config and --pretrain-epochs are required for retrain-pretrained"
                )
            pretrain = PretrainSpec(
                generator=generator_config_from_obj(jsonio.load_path(args.pretrain_config)),
                epochs=args.pretrain_epochs,
            )
            result = run_retrain_pretrained(
                data, architecture, pretrain, args.epochs, args.seed, eval_suite, **opts
            )

    save_checkpoint(result.checkpoint, args.out)
    if args.trace:
        result.trace.to_csv(args.trace)
    if result.divergence is not None:
        report_path = Path(args.out).with_suffix(".divergence.json")
        jsonio.dump_path(result.divergence.to_obj(), report_path)
        print(
            f"diverged at epoch {result.divergence.epoch} batch "
            f"{result.divergence.batch_index}; report: {report_path}",
            file=sys.stderr,
        )
        return 2
    forget, retain = eval_suite.rates(result.checkpoint)
    print(f"trained {regime}: forget_rate={forget:.4f} retain_rate={retain:.4f}")
    return 0


def _cmd_evaluate(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.model)
    eval_suite = _eval_suite_from_args(args)
    forget, retain = eval_suite.rates(checkpoint)
    report = {
        "model": str(args.model),
        "regime": checkpoint.provenance.regime,
        "forget_rate": forget,
        "retain_rate": retain,
        "n_forget_eval": eval_suite.n_forget,
        "n_retain_eval": eval_suite.n_retain,
    }
    jsonio.dump_path(report, args.report)
    print(f"forget_rate={forget:.4f} retain_rate={retain:.4f} -> {args.report}")
    return 0


def _cmd_run_experiment(args: argparse.Namespace) -> int:
    config = load_experiment_config(args.config)
    result = run_experiment(config, output_dir=args.out_dir)
    for row in result.summary.rows:
        print(
            f"{row.regime}: forget_rate={row.forget_rate:.4f} "
            f"retain_rate={row.retain_rate:.4f} epochs={row.epochs}"
        )
    print(f"outputs: {result.output_dir}")
    if result.diverged:
        print("one or more regimes diverged; see divergence_*.json", file=sys.stderr)
        return 2
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "dissolve": _cmd_dissolve,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "run-experiment": _cmd_run_experiment,
}


def cli_dispatch(argv: list[str]) -> int:
    """Parse and run; returns the process exit status instead of exiting."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError:
        return 1
    try:
        return _COMMANDS[args.command](args)
    except _CONFIG_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DissolveSimError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def main() -> None:
    sys.exit(cli_dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
