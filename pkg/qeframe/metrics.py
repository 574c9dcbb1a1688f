"""Evaluation: Pearson correlation, error metrics and per-language-pair result tables."""

import time
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from qeframe.data import QEDataset
from qeframe.dtypes import EvalResult
from qeframe.exc import (
    ContractError,
    InsufficientDataError,
    PredictionError,
    QEFrameException,
    UndefinedCorrelationError,
)
from qeframe.log import get_logger
from qeframe.models import PREDICT_BATCH_SIZE, QEModel
from qeframe.utils import PathLike

log = get_logger(__name__)

RESULTS_HEADER = ("lang_pair", "n", "pearson", "mse", "mae", "rmse")
BEST_MARK = "*"


def pearson(x: Sequence[float], y: Sequence[float]) -> float:
    """
    Pearson correlation, two-pass (means first) with float64 accumulation.

    Parameters:
        x (Sequence[float]): First vector.
        y (Sequence[float]): Second vector of the same length.

    Returns:
        float: r in [-1, 1].

    Raises:
        ContractError: If the lengths differ.
        InsufficientDataError: With fewer than two points.
        UndefinedCorrelationError: If either vector is constant.

    Examples:
        >>> round(pearson([1, 2, 3], [5, 7, 9]), 12)
        1.0
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ContractError(f"pearson needs two equal-length vectors, got {x.shape} and {y.shape}")
    if x.size < 2:
        raise InsufficientDataError(f"pearson needs at least 2 points, got {x.size}")
    if np.all(x == x[0]) or np.all(y == y[0]):
        raise UndefinedCorrelationError("Pearson correlation is undefined for a zero-variance vector")
    dx = x - x.mean()
    dy = y - y.mean()
    r = np.sum(dx * dy) / np.sqrt(np.sum(dx * dx) * np.sum(dy * dy))
    return float(np.clip(r, -1.0, 1.0))


def metrics_from_predictions(
    predictions: Sequence[float], labels: Sequence[float], lang_pair: str
) -> EvalResult:
    """All metrics for aligned predictions and gold labels."""
    p = np.asarray(predictions, dtype=np.float64)
    g = np.asarray(labels, dtype=np.float64)
    r = pearson(p, g)
    err = p - g
    mse = float(np.mean(err * err))
    return EvalResult(
        lang_pair=lang_pair,
        n=int(p.size),
        pearson_r=r,
        mse=mse,
        mae=float(np.mean(np.abs(err))),
        rmse=float(np.sqrt(mse)),
    )


def predict_pairs(
    model: QEModel, pairs: Sequence[Tuple[str, str]], batch_size: int = PREDICT_BATCH_SIZE
) -> np.ndarray:
    """
    Label-space predictions for (source, target) pairs, in order.

    Raises:
        PredictionError: Naming the index of the first pair that fails.
    """
    chunks = []
    for start in range(0, len(pairs), batch_size):
        batch = pairs[start : start + batch_size]
        try:
            chunks.append(model.predict_batch(batch, batch_size))
        except QEFrameException as batch_error:
            for offset, pair in enumerate(batch):
                try:
                    model.predict_batch([pair])
                except QEFrameException as e:
                    raise PredictionError(f"record {start + offset}: {e}") from e
            raise PredictionError(f"records {start}-{start + len(batch) - 1}: {batch_error}") from batch_error
    return np.concatenate(chunks) if chunks else np.zeros(0)


def predict_dataset(
    model: QEModel, dataset: QEDataset, batch_size: int = PREDICT_BATCH_SIZE
) -> np.ndarray:
    return predict_pairs(model, dataset.pairs, batch_size)


def _tag_for(dataset: QEDataset) -> str:
    tags = dataset.lang_pairs
    return tags[0] if len(tags) == 1 else "all"


def evaluate(model: QEModel, test: QEDataset) -> EvalResult:
    """
    Predict every test record and score the predictions against the gold labels.

    Parameters:
        model (QEModel): The model.
        test (QEDataset): Non-empty test data.

    Returns:
        EvalResult: Metrics over the whole set, tagged with its pair. A test set
            mixing pairs is pooled into one "all" row; use `evaluate_per_pair`
            for a row per pair.

    Raises:
        InsufficientDataError: If the test set is empty.
        PredictionError: If a record cannot be scored.
        UndefinedCorrelationError: If predictions or labels are constant.
    """
    if len(test) == 0:
        raise InsufficientDataError("cannot evaluate on an empty test set")
    if len(test.lang_pairs) > 1:
        log.info("pooling %d language pairs into one result: %s", len(test.lang_pairs), ", ".join(test.lang_pairs))
    result = metrics_from_predictions(predict_dataset(model, test), test.labels, _tag_for(test))
    log.info("evaluated %s on %d records: pearson %.4f", result.lang_pair, result.n, result.pearson_r)
    return result


def evaluate_per_pair(model: QEModel, test: QEDataset) -> List[EvalResult]:
    """One `EvalResult` per language pair of the test set, ordered by tag."""
    return [evaluate(model, subset) for subset in test.by_lang_pair().values()]


def format_results_tsv(results: Sequence[EvalResult]) -> str:
    """Results as TSV (`lang_pair n pearson mse mae rmse`), 6 decimals, ordered by tag."""
    lines = ["\t".join(RESULTS_HEADER)]
    for r in sorted(results, key=lambda r: r.lang_pair):
        lines.append(
            "\t".join([r.lang_pair, str(r.n)] + [f"{v:.6f}" for v in (r.pearson_r, r.mse, r.mae, r.rmse)])
        )
    return "\n".join(lines) + "\n"


def write_results_tsv(results: Sequence[EvalResult], path: PathLike) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(format_results_tsv(results))


class ResultsTable(NamedTuple):
    text: str
    tsv: str


def results_table(
    results: Sequence[EvalResult],
    baseline: Optional[Sequence[EvalResult]] = None,
    method_names: Tuple[str, str] = ("model", "baseline"),
) -> ResultsTable:
    """
    Render per-pair Pearson scores as an aligned text grid and as TSV.

    Rows are language pairs ordered by tag; columns are the methods. When a
    baseline is given, the best score of each pair is marked with `*`.

    Parameters:
        results (Sequence[EvalResult]): The main method's results.
        baseline (Sequence[EvalResult], optional): A second method to compare against.
        method_names (Tuple[str, str], optional): Column names for the two methods.

    Returns:
        ResultsTable: `text` and `tsv` renderings of the same grid.
    """
    methods: List[Dict[str, EvalResult]] = [{r.lang_pair: r for r in results}]
    if baseline is not None:
        methods.append({r.lang_pair: r for r in baseline})
    header = ["lang_pair", "n"] + list(method_names[: len(methods)])
    rows = []
    for tag in sorted(set().union(*methods)):
        scores = [m[tag].pearson_r if tag in m else None for m in methods]
        present = [s for s in scores if s is not None]
        best = max(present) if len(methods) > 1 and present else None
        n = next(m[tag].n for m in methods if tag in m)
        cells = [
            "-" if s is None else f"{s:.4f}" + (BEST_MARK if s == best else "")
            for s in scores
        ]
        rows.append([tag, str(n)] + cells)

    widths = [max(len(row[i]) for row in [header] + rows) for i in range(len(header))]

    def render(row: List[str]) -> str:
        return "  ".join(
            cell.ljust(widths[i]) if i == 0 else cell.rjust(widths[i]) for i, cell in enumerate(row)
        )

    lines = [render(header), "-" * len(render(header))] + [render(row) for row in rows]
    tsv = "\n".join("\t".join(row) for row in [header] + rows) + "\n"
    return ResultsTable("\n".join(lines) + "\n", tsv)


def measure_inference_time(model: QEModel, dataset: QEDataset, repeats: int = 1) -> float:
    """
    Wall-clock seconds per 1000 predictions over the dataset's pairs.

    Raises:
        InsufficientDataError: If the dataset is empty.
    """
    if len(dataset) == 0:
        raise InsufficientDataError("cannot time inference without data")
    pairs = dataset.pairs
    started = time.perf_counter()
    for _ in range(repeats):
        model.predict_batch(pairs)
    elapsed = time.perf_counter() - started
    return elapsed / repeats / len(pairs) * 1000.0
