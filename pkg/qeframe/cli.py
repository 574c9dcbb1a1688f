"""`qeframe` command-line entry point.

Every command resolves its options (flags over `--config` file over preset),
writes `run.json` to the output directory before doing any work, and exits with
0 on success, 1 on usage/configuration errors, 2 on data errors and 3 on
numeric failure.
"""

import argparse
import concurrent.futures
import json
import math
import pathlib
import platform
import sys
from typing import Any, Callable, Dict, List, NamedTuple, Optional, Sequence

import numpy as np

from qeframe.data import (
    LANG_PAIR_COLUMN,
    LabelKindEnum,
    QEDataset,
    SyntheticSpec,
    TaskEnum,
    concat_datasets,
    export_tsv,
    generate_synthetic_corpus,
    load_tsv,
    read_tsv_rows,
    write_tsv,
)
from qeframe.dtypes import EvalResult, LearningCurvePoint
from qeframe.encoder import EncoderConfig, PoolingEnum
from qeframe.exc import (
    ConfigurationError,
    InsufficientDataError,
    LabelParseError,
    MissingColumnError,
    NumericError,
    QEFrameException,
    UndefinedCorrelationError,
)
from qeframe.log import LOGGING_LEVELS, get_logger, set_package_level
from qeframe.metrics import (
    evaluate,
    evaluate_per_pair,
    measure_inference_time,
    metrics_from_predictions,
    predict_pairs,
    results_table,
    write_results_tsv,
)
from qeframe.models import (
    CHECKPOINT_FORMAT_VERSION,
    ArchitectureEnum,
    QEModel,
    load_checkpoint,
    save_checkpoint,
)
from qeframe.trainer import (
    GroupingEnum,
    PresetEnum,
    TrainingConfig,
    measure_step_time,
    train,
    train_multipair,
    train_transfer,
)
from qeframe.utils import (
    artifact_name,
    get_rng,
    parse_float_range,
    parse_int_list,
    read_key_value_config,
    validate_searched_entity,
)
from qeframe.vocab import VOCAB_FORMAT_VERSION, Vocabulary, build_vocabulary

log = get_logger("qeframe.cli")

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

TRAINING_KEYS = (
    "batch_size",
    "learning_rate",
    "epochs",
    "warmup_fraction",
    "eval_every_n_steps",
    "early_stop_patience",
    "eval_holdout_fraction",
    "workers",
)
ENCODER_KEYS = ("d_model", "n_heads", "n_layers", "d_ff", "max_seq_len")

_OPTION_TYPES: Dict[str, Callable[[str], Any]] = {
    "seed": int,
    "preset": str,
    "arch": str,
    "pooling": str,
    "min_freq": int,
    "batch_size": int,
    "learning_rate": float,
    "epochs": int,
    "warmup_fraction": float,
    "eval_every_n_steps": int,
    "early_stop_patience": int,
    "eval_holdout_fraction": float,
    "workers": int,
    "d_model": int,
    "n_heads": int,
    "n_layers": int,
    "d_ff": int,
    "max_seq_len": int,
}
_OPTION_DEFAULTS = {"seed": 0, "preset": PresetEnum.DESK.value, "arch": ArchitectureEnum.MONO.value, "min_freq": 1}


class _ArgumentParser(argparse.ArgumentParser):
    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_options(args: argparse.Namespace) -> Dict[str, Any]:
    """
    Merge option sources: explicit flags win over the `--config` file, which
    wins over built-in defaults (the preset supplies training defaults later).

    Raises:
        ConfigurationError: On unreadable config files, bad values or unknown choices.
    """
    file_values = read_key_value_config(args.config) if getattr(args, "config", None) else {}
    ignored = sorted(set(file_values) - set(_OPTION_TYPES))
    if ignored:
        log.debug("config keys not used by this command: %s", ignored)
    options: Dict[str, Any] = {}
    for name, convert in _OPTION_TYPES.items():
        value = getattr(args, name, None)
        if value is None and name in file_values:
            try:
                value = convert(file_values[name])
            except ValueError as e:
                raise ConfigurationError(f"config value for {name}: {e}") from e
        options[name] = value if value is not None else _OPTION_DEFAULTS.get(name)
    validate_searched_entity(options["preset"], [p.value for p in PresetEnum], "preset")
    validate_searched_entity(options["arch"], [a.value for a in ArchitectureEnum], "architecture")
    if options["pooling"] is not None:
        validate_searched_entity(options["pooling"], [p.value for p in PoolingEnum], "pooling")
    return options


def training_config(options: Dict[str, Any]) -> TrainingConfig:
    return TrainingConfig.from_preset(
        options["preset"], seed=options["seed"], **{k: options.get(k) for k in TRAINING_KEYS}
    )


def encoder_config(options: Dict[str, Any], vocabulary: Vocabulary) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=len(vocabulary),
        **{k: options[k] for k in ENCODER_KEYS if options.get(k) is not None},
    )


def _column_map(args: argparse.Namespace) -> Dict[str, str]:
    return {"source": args.src_col, "target": args.tgt_col, "label": args.label_col}


def _load(args: argparse.Namespace, path: str, split: str = "") -> QEDataset:
    return load_tsv(
        path,
        _column_map(args),
        lang_pair=args.lang_pair,
        strict=not args.lenient,
        label_kind=LabelKindEnum(args.label_kind),
        split=split,
    )


def _load_many(args: argparse.Namespace, paths: Sequence[str], split: str) -> QEDataset:
    return concat_datasets([_load(args, p, split) for p in paths], split)


def _corpus_vocabulary(args: argparse.Namespace, options: Dict[str, Any], data: QEDataset) -> Vocabulary:
    if getattr(args, "vocab", None):
        return Vocabulary.load(args.vocab)
    return build_vocabulary((s for r in data for s in (r.source, r.target)), options["min_freq"])


def _new_model(options: Dict[str, Any], vocabulary: Vocabulary) -> QEModel:
    return QEModel.create(
        ArchitectureEnum(options["arch"]),
        vocabulary,
        encoder_config(options, vocabulary),
        PoolingEnum(options["pooling"]) if options["pooling"] else None,
        seed=options["seed"],
    )


def _report_results(results: List[EvalResult], out_dir: pathlib.Path) -> None:
    write_results_tsv(results, out_dir / "results.tsv")
    print(results_table(results).text, end="")


def cmd_build_vocab(args: argparse.Namespace, options: Dict[str, Any], out_dir: pathlib.Path) -> None:
    """Build a vocabulary over the source and target columns of every input file."""
    corpus = []
    for path in args.inputs:
        header, rows = read_tsv_rows(path)
        columns = [args.src_col, args.tgt_col]
        missing = [c for c in columns if c not in header]
        if missing:
            raise MissingColumnError(f"{path}: missing column(s) {missing}")
        indices = [header.index(c) for c in columns]
        corpus.extend(row[i] for _, row in rows for i in indices)
    vocabulary = build_vocabulary(corpus, options["min_freq"])
    vocabulary.save(args.out or out_dir / "vocab.json")


def cmd_synth(args: argparse.Namespace, options: Dict[str, Any], out_dir: pathlib.Path) -> None:
    """Generate a synthetic corpus for one or more language pairs."""
    overrides = {
        "vocab_size": args.vocab_size,
        "n_records": args.n_records,
        "noise_rate_range": parse_float_range(args.noise) if args.noise is not None else None,
        "seed": args.seed,
        "task": TaskEnum(args.task) if args.task else None,
        "zscore": True if args.zscore else None,
    }
    if args.spec:
        spec = SyntheticSpec.from_file(args.spec, **overrides)
    else:
        spec = SyntheticSpec(**{k: v for k, v in overrides.items() if v is not None})
    datasets = [generate_synthetic_corpus(spec, tag) for tag in args.lang_pairs]
    export_tsv(concat_datasets(datasets), args.out or out_dir / "synthetic.tsv")


def cmd_train(args: argparse.Namespace, options: Dict[str, Any], out_dir: pathlib.Path) -> None:
    """Train one model, write its best checkpoint and report, optionally evaluate."""
    data = _load_many(args, args.train, "train")
    model = _new_model(options, _corpus_vocabulary(args, options, data))
    trained, report = train(model, data, training_config(options))
    save_checkpoint(trained, out_dir / "model.qef")
    report.write(out_dir, "report")
    if args.test:
        _report_results(evaluate_per_pair(trained, _load_many(args, args.test, "test")), out_dir)


def cmd_predict(args: argparse.Namespace, options: Dict[str, Any], out_dir: pathlib.Path) -> None:
    """Append a `prediction` column to an input TSV, preserving row order."""
    model = load_checkpoint(args.model)
    header, rows = read_tsv_rows(args.input)
    missing = [c for c in (args.src_col, args.tgt_col) if c not in header]
    if missing:
        raise MissingColumnError(f"{args.input}: missing column(s) {missing}")
    src_i, tgt_i = header.index(args.src_col), header.index(args.tgt_col)
    predictions = predict_pairs(model, [(row[src_i], row[tgt_i]) for _, row in rows])
    write_tsv(
        args.output or out_dir / "predictions.tsv",
        header + ["prediction"],
        (row + [repr(float(p))] for (_, row), p in zip(rows, predictions)),
    )


def _prediction_file_results(args: argparse.Namespace) -> List[EvalResult]:
    header, rows = read_tsv_rows(args.predictions)
    missing = [c for c in (args.label_col, args.prediction_col) if c not in header]
    if missing:
        raise MissingColumnError(f"{args.predictions}: missing column(s) {missing}")
    gold_i, pred_i = header.index(args.label_col), header.index(args.prediction_col)
    tag_i = header.index(LANG_PAIR_COLUMN) if LANG_PAIR_COLUMN in header else None
    groups: Dict[str, List[tuple]] = {}
    for lineno, row in rows:
        try:
            gold, pred = float(row[gold_i]), float(row[pred_i])
        except ValueError as e:
            raise LabelParseError(f"{args.predictions}:{lineno}: {e}") from e
        tag = row[tag_i] if tag_i is not None else (args.lang_pair or "all")
        groups.setdefault(tag, []).append((pred, gold))
    return [
        metrics_from_predictions([p for p, _ in values], [g for _, g in values], tag)
        for tag, values in sorted(groups.items())
    ]


def cmd_evaluate(args: argparse.Namespace, options: Dict[str, Any], out_dir: pathlib.Path) -> None:
    """Score a checkpoint on test files, or score an existing predictions file."""
    if args.predictions:
        results = _prediction_file_results(args)
    elif args.model and args.test:
        results = evaluate_per_pair(load_checkpoint(args.model), _load_many(args, args.test, "test"))
    else:
        raise ConfigurationError("evaluate needs --predictions, or --model together with --test")
    _report_results(results, out_dir)


def cmd_multipair(args: argparse.Namespace, options: Dict[str, Any], out_dir: pathlib.Path) -> None:
    """Train grouped multi-pair models, one checkpoint per group, with per-pair results."""
    data = _load_many(args, args.train, "train")
    datasets = data.by_lang_pair()
    cfg = training_config(options)
    model = _new_model(options, _corpus_vocabulary(args, options, data))
    result = train_multipair(model, datasets, GroupingEnum(args.grouping), cfg)
    for group, trained in result.models.items():
        save_checkpoint(trained, out_dir / artifact_name("model", group, suffix=".qef"))
        result.reports[group].write(out_dir, artifact_name("report", group))
    if not args.test:
        return

    test = _load_many(args, args.test, "test").by_lang_pair()
    group_of = {tag: group for group, tags in result.groups.items() for tag in tags}
    multi, single = [], []
    for tag, subset in test.items():
        if tag not in group_of:
            log.warning("no trained group covers test pair %s; skipping", tag)
            continue
        multi.append(evaluate(result.models[group_of[tag]], subset))
        if args.compare_single:
            single_model, _ = train(model, datasets[tag], cfg)
            single.append(evaluate(single_model, subset))
    write_results_tsv(multi, out_dir / "results.tsv")
    table = results_table(multi, single if args.compare_single else None, ("multi", "single"))
    (out_dir / "comparison.tsv").write_text(table.tsv, encoding="utf-8")
    print(table.text, end="")


def _nested_subset(data: QEDataset, size: int, seed: int) -> QEDataset:
    order = get_rng(seed).permutation(len(data))
    return data.subset(sorted(order[:size]), f"first-{size}")


def cmd_transfer(args: argparse.Namespace, options: Dict[str, Any], out_dir: pathlib.Path) -> None:
    """Fine-tune a base checkpoint on (possibly no) target-pair data."""
    data = _load_many(args, args.train, "train") if args.train else QEDataset(())
    if args.size is not None:
        if args.size > len(data):
            raise InsufficientDataError(f"--size {args.size} exceeds the {len(data)} training records")
        data = _nested_subset(data, args.size, options["seed"])
    model, report = train_transfer(args.base, data, training_config(options))
    save_checkpoint(model, out_dir / "model.qef")
    report.write(out_dir, "report")
    if args.test:
        _report_results(evaluate_per_pair(model, _load_many(args, args.test, "test")), out_dir)


class CurveCell(NamedTuple):
    """One independent (size, mode) learning-curve run."""

    size: int
    mode: str
    base: Optional[str]
    train: QEDataset
    test: QEDataset
    options: Dict[str, Any]
    vocabulary: Vocabulary


def run_curve_cell(cell: CurveCell) -> LearningCurvePoint:
    """Train (or not, at size 0) one learning-curve cell and score it on the test set."""
    cfg = training_config(cell.options)
    if cell.mode == "tl":
        model, _ = train_transfer(cell.base, cell.train, cfg)
    else:
        model, _ = train(_new_model(cell.options, cell.vocabulary), cell.train, cfg)
    try:
        r = evaluate(model, cell.test).pearson_r
    except UndefinedCorrelationError as e:
        log.warning("size %d %s: %s", cell.size, cell.mode, e)
        r = math.nan
    return LearningCurvePoint(cell.size, cell.mode, r)


def plot_learning_curve(points: Sequence[LearningCurvePoint], path: pathlib.Path) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for mode, label in (("tl", "transfer"), ("scratch", "from scratch")):
        series = [(p.size, p.pearson_r) for p in points if p.mode == mode]
        if series:
            ax.plot(*zip(*series), marker="o", label=label)
    ax.set_xlabel("training instances")
    ax.set_ylabel("Pearson r")
    ax.legend()
    fig.savefig(path, dpi=150, bbox_inches="tight")
    plt.close(fig)


def cmd_learning_curve(args: argparse.Namespace, options: Dict[str, Any], out_dir: pathlib.Path) -> None:
    """Transfer vs from-scratch Pearson over nested training subsets of growing size."""
    train_data = _load_many(args, args.train, "train")
    test = _load_many(args, args.test, "test")
    sizes = parse_int_list(args.sizes)
    if sizes != sorted(sizes) or len(set(sizes)) != len(sizes):
        raise ConfigurationError(f"--sizes must be strictly ascending, got {sizes}")
    if sizes and sizes[-1] > len(train_data):
        raise InsufficientDataError(f"size {sizes[-1]} exceeds the {len(train_data)} training records")
    if 0 in sizes and not args.base:
        raise ConfigurationError("size 0 (zero-shot) needs --base")
    vocabulary = load_checkpoint(args.base).vocabulary if args.base else _corpus_vocabulary(args, options, train_data)

    cells = []
    for size in sizes:
        subset = _nested_subset(train_data, size, options["seed"])
        modes = (["tl"] if args.base else []) + (["scratch"] if size else [])
        cells.extend(CurveCell(size, mode, args.base, subset, test, options, vocabulary) for mode in modes)
    if options["workers"] and options["workers"] > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=options["workers"]) as executor:
            points = list(executor.map(run_curve_cell, cells))
    else:
        points = [run_curve_cell(cell) for cell in cells]

    write_tsv(
        out_dir / "curve.tsv",
        ("size", "mode", "pearson"),
        ((str(p.size), p.mode, "nan" if math.isnan(p.pearson_r) else f"{p.pearson_r:.6f}") for p in points),
    )
    if args.plot:
        plot_learning_curve(points, out_dir / "curve.png")


def cmd_benchmark(args: argparse.Namespace, options: Dict[str, Any], out_dir: pathlib.Path) -> None:
    """Seconds per training step and per 1000 predictions, for both architectures."""
    data = _load_many(args, args.train, "train")
    vocabulary = _corpus_vocabulary(args, options, data)
    cfg = training_config(options)
    rows = []
    for arch in ArchitectureEnum:
        model = _new_model({**options, "arch": arch.value, "pooling": None}, vocabulary)
        step = measure_step_time(model, data, cfg, n_steps=args.steps)
        infer = measure_inference_time(model, data, repeats=args.repeats)
        log.info("%s: %.4fs/step, %.4fs/1000 predictions", arch.value, step, infer)
        rows.append((arch.value, f"{step:.6f}", f"{infer:.6f}"))
    write_tsv(out_dir / "benchmark.tsv", ("architecture", "seconds_per_step", "seconds_per_1000_predictions"), rows)


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (default 0)")
    common.add_argument("--preset", choices=[p.value for p in PresetEnum], default=None)
    common.add_argument("--out-dir", default=".", help="directory for run.json and artifacts")
    common.add_argument("--config", default=None, help="flat key=value option file")
    common.add_argument("--log-level", type=str.upper, choices=LOGGING_LEVELS, default="INFO")
    return common


def _add_data_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--src-col", default="src")
    parser.add_argument("--tgt-col", default="tgt")
    parser.add_argument("--label-col", default="score")
    parser.add_argument("--lang-pair", default=None, help="tag for every record; default: the lang_pair column")
    parser.add_argument("--label-kind", choices=[k.value for k in LabelKindEnum], default=LabelKindEnum.HTER.value)
    parser.add_argument("--lenient", action="store_true", help="skip rows with unparseable labels")


def _add_model_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--arch", choices=[a.value for a in ArchitectureEnum], default=None)
    parser.add_argument("--pooling", choices=[p.value for p in PoolingEnum], default=None)
    parser.add_argument("--vocab", default=None, help="vocabulary file; default: built from the training data")
    parser.add_argument("--min-freq", type=int, default=None)
    for key in ENCODER_KEYS:
        parser.add_argument(f"--{key.replace('_', '-')}", type=int, default=None)


def _add_training_options(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--batch-size", type=int, default=None)
    parser.add_argument("--lr", dest="learning_rate", type=float, default=None)
    parser.add_argument("--epochs", type=int, default=None)
    parser.add_argument("--warmup-fraction", type=float, default=None)
    parser.add_argument("--eval-every", dest="eval_every_n_steps", type=int, default=None)
    parser.add_argument("--patience", dest="early_stop_patience", type=int, default=None)
    parser.add_argument("--holdout-fraction", dest="eval_holdout_fraction", type=float, default=None)
    parser.add_argument("--workers", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = _ArgumentParser(prog="qeframe", description="Sentence-level translation quality estimation")
    sub = parser.add_subparsers(dest="command", parser_class=_ArgumentParser)

    p = sub.add_parser("build-vocab", parents=[common], help="build a shared vocabulary")
    p.add_argument("--inputs", nargs="+", required=True)
    p.add_argument("--min-freq", type=int, default=None)
    p.add_argument("--src-col", default="src")
    p.add_argument("--tgt-col", default="tgt")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_build_vocab)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic corpus")
    p.add_argument("--spec", default=None, help="key=value synthetic spec file")
    p.add_argument("--lang-pairs", nargs="+", default=["en-de"])
    p.add_argument("--vocab-size", type=int, default=None)
    p.add_argument("--n-records", type=int, default=None)
    p.add_argument("--noise", default=None, help='noise rate range "lo,hi" or a single rate')
    p.add_argument("--task", choices=[t.value for t in TaskEnum], default=None)
    p.add_argument("--zscore", action="store_true")
    p.add_argument("--out", default=None)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a QE model")
    p.add_argument("--train", nargs="+", required=True)
    p.add_argument("--test", nargs="+", default=None)
    _add_data_options(p)
    _add_model_options(p)
    _add_training_options(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("predict", parents=[common], help="score sentence pairs with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--output", default=None)
    p.add_argument("--src-col", default="src")
    p.add_argument("--tgt-col", default="tgt")
    p.set_defaults(handler=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common], help="Pearson/MSE/MAE/RMSE per language pair")
    p.add_argument("--model", default=None)
    p.add_argument("--test", nargs="+", default=None)
    p.add_argument("--predictions", default=None, help="TSV with gold and prediction columns")
    p.add_argument("--prediction-col", default="prediction")
    _add_data_options(p)
    p.set_defaults(handler=cmd_evaluate)

    p = sub.add_parser("multipair", parents=[common], help="train grouped multi-pair models")
    p.add_argument("--train", nargs="+", required=True)
    p.add_argument("--test", nargs="+", default=None)
    p.add_argument("--grouping", choices=[g.value for g in GroupingEnum], default=GroupingEnum.ALL.value)
    p.add_argument("--compare-single", action="store_true", help="also train single-pair baselines")
    _add_data_options(p)
    _add_model_options(p)
    _add_training_options(p)
    p.set_defaults(handler=cmd_multipair)

    p = sub.add_parser("transfer", parents=[common], help="fine-tune from a base checkpoint")
    p.add_argument("--base", required=True)
    p.add_argument("--train", nargs="+", default=None)
    p.add_argument("--test", nargs="+", default=None)
    p.add_argument("--size", type=int, default=None, help="use a seeded subset of this many records")
    _add_data_options(p)
    _add_training_options(p)
    p.set_defaults(handler=cmd_transfer)

    p = sub.add_parser("learning-curve", parents=[common], help="transfer vs scratch over training sizes")
    p.add_argument("--base", default=None)
    p.add_argument("--train", nargs="+", required=True)
    p.add_argument("--test", nargs="+", required=True)
    p.add_argument("--sizes", required=True, help='comma-separated ascending sizes, e.g. "0,100,200"')
    p.add_argument("--plot", action="store_true", help="also write curve.png")
    _add_data_options(p)
    _add_model_options(p)
    _add_training_options(p)
    p.set_defaults(handler=cmd_learning_curve)

    p = sub.add_parser("benchmark", parents=[common], help="time both architectures")
    p.add_argument("--train", nargs="+", required=True)
    p.add_argument("--steps", type=int, default=5)
    p.add_argument("--repeats", type=int, default=1)
    _add_data_options(p)
    _add_model_options(p)
    _add_training_options(p)
    p.set_defaults(handler=cmd_benchmark)
    return parser


def _write_run_json(out_dir: pathlib.Path, args: argparse.Namespace, argv: Sequence[str], options: Dict[str, Any]) -> None:
    from qeframe import __version__

    payload = {
        "command": args.command,
        "argv": list(argv),
        "arguments": {k: v for k, v in sorted(vars(args).items()) if k != "handler"},
        "options": options,
        "versions": {
            "qeframe": __version__,
            "checkpoint_format": CHECKPOINT_FORMAT_VERSION,
            "vocabulary_format": VOCAB_FORMAT_VERSION,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    with open(out_dir / "run.json", "w", encoding="utf-8", newline="\n") as f:
        json.dump(payload, f, indent=2, sort_keys=True, default=str)
        f.write("\n")


def _fail(error: Exception, code: int) -> int:
    log.error("%s: %s", type(error).__name__, error)
    print(f"qeframe: error: {type(error).__name__}: {error}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    """Run the CLI; returns the process exit code."""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    if not args.command:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    set_package_level(args.log_level)

    try:
        options = resolve_options(args)
        out_dir = pathlib.Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        _write_run_json(out_dir, args, argv, options)
        args.handler(args, options, out_dir)
    except ConfigurationError as e:
        return _fail(e, EXIT_USAGE)
    except NumericError as e:
        return _fail(e, EXIT_NUMERIC)
    except QEFrameException as e:
        return _fail(e, EXIT_DATA)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
