import math

import numpy as np
import pytest
from scipy import stats

from qeframe import metrics
from qeframe.data import QEDataset
from qeframe.dtypes import EvalResult, SentencePairRecord
from qeframe.exc import (
    ContractError,
    InsufficientDataError,
    PredictionError,
    UndefinedCorrelationError,
)
from qeframe.metrics import (
    evaluate,
    evaluate_per_pair,
    format_results_tsv,
    measure_inference_time,
    metrics_from_predictions,
    pearson,
    predict_pairs,
    results_table,
    write_results_tsv,
)


def _result(tag, n, r):
    return EvalResult(tag, n, r, 0.0, 0.0, 0.0)


def test_pearson_matches_scipy(rng):
    x, y = rng.normal(size=50), rng.normal(size=50)
    assert pearson(x, y) == pytest.approx(stats.pearsonr(x, y)[0], abs=1e-12)


def test_pearson_invariances(rng):
    x = rng.normal(size=20)
    y = x + rng.normal(scale=0.5, size=20)
    r = pearson(x, y)
    assert pearson(y, x) == pytest.approx(r, abs=1e-12)
    assert pearson(3.0 * x + 7.0, y) == pytest.approx(r, abs=1e-12)
    assert pearson(-x, y) == pytest.approx(-r, abs=1e-12)


@pytest.mark.parametrize(
    "x, y, expected",
    [
        ([1, 2, 3], [2, 4, 6], 1.0),
        ([1, 2, 3], [3, 2, 1], -1.0),
        ([1, 2, 3, 4], [1, 3, 2, 4], 0.8),
    ],
)
def test_pearson_examples(x, y, expected):
    assert pearson(x, y) == pytest.approx(expected)


@pytest.mark.parametrize(
    "x, y, error",
    [
        ([1.0, 2.0], [1.0], ContractError),
        ([1.0], [2.0], InsufficientDataError),
        ([], [], InsufficientDataError),
        ([1.0, 1.0, 1.0], [1.0, 2.0, 3.0], UndefinedCorrelationError),
        ([1.0, 2.0, 3.0], [5.0, 5.0, 5.0], UndefinedCorrelationError),
    ],
)
def test_pearson_errors(x, y, error):
    with pytest.raises(error):
        pearson(x, y)


def test_metrics_from_predictions():
    result = metrics_from_predictions([1.0, 2.0, 4.0], [1.0, 3.0, 2.0], "en-de")
    assert result.n == 3
    assert result.mse == pytest.approx(5 / 3)
    assert result.mae == pytest.approx(1.0)
    assert result.rmse == pytest.approx(math.sqrt(5 / 3))


def test_evaluate_tags(mono_model, tiny_dataset):
    result = evaluate(mono_model, tiny_dataset)
    assert result.lang_pair == "en-de"
    assert result.n == len(tiny_dataset)
    assert -1.0 <= result.pearson_r <= 1.0


def test_evaluate_mixed_pairs_is_all(mocker, mono_model, tiny_dataset):
    mixed = tiny_dataset.with_records(
        r._replace(lang_pair="ro-en") if i % 2 else r for i, r in enumerate(tiny_dataset)
    )
    info = mocker.patch.object(metrics.log, "info")
    assert evaluate(mono_model, mixed).lang_pair == "all"
    assert "pooling" in info.call_args_list[0].args[0]
    assert [r.lang_pair for r in evaluate_per_pair(mono_model, mixed)] == ["en-de", "ro-en"]


def test_evaluate_empty(mono_model):
    with pytest.raises(InsufficientDataError):
        evaluate(mono_model, QEDataset(()))


def test_constant_predictor_is_undefined(siamese_model):
    records = [SentencePairRecord("en1 en2", "en1 en2", float(i), "en-de") for i in range(4)]
    with pytest.raises(UndefinedCorrelationError):
        evaluate(siamese_model, QEDataset(records))


def test_prediction_error_names_record(mocker, mono_model):
    def fail_on_bad(pairs, batch_size=32):
        if any(source == "bad" for source, _ in pairs):
            raise ContractError("boom")
        return np.zeros(len(pairs))

    mocker.patch.object(mono_model, "predict_batch", side_effect=fail_on_bad)
    with pytest.raises(PredictionError, match="record 2"):
        predict_pairs(mono_model, [("a", "b"), ("c", "d"), ("bad", "e")])


def test_format_results_tsv():
    text = format_results_tsv([EvalResult("ro-en", 2, 0.5, 0.25, 0.5, 0.5), EvalResult("en-de", 3, 1.0, 0.0, 0.0, 0.0)])
    assert text == (
        "lang_pair\tn\tpearson\tmse\tmae\trmse\n"
        "en-de\t3\t1.000000\t0.000000\t0.000000\t0.000000\n"
        "ro-en\t2\t0.500000\t0.250000\t0.500000\t0.500000\n"
    )


def test_write_results_tsv(tmp_path):
    results = [EvalResult("en-de", 3, 1.0, 0.0, 0.0, 0.0)]
    write_results_tsv(results, tmp_path / "results.tsv")
    assert (tmp_path / "results.tsv").read_text(encoding="utf-8") == format_results_tsv(results)


def test_results_table_golden():
    table = results_table(
        [_result("en-de", 10, 0.5), _result("ro-en", 20, 0.8)],
        baseline=[_result("en-de", 10, 0.6), _result("ro-en", 20, 0.7)],
        method_names=("multi", "single"),
    )
    assert table.text == (
        "lang_pair   n    multi   single\n"
        "-------------------------------\n"
        "en-de      10   0.5000  0.6000*\n"
        "ro-en      20  0.8000*   0.7000\n"
    )
    assert table.tsv == (
        "lang_pair\tn\tmulti\tsingle\n"
        "en-de\t10\t0.5000\t0.6000*\n"
        "ro-en\t20\t0.8000*\t0.7000\n"
    )


def test_results_table_single_method_has_no_marks():
    table = results_table([_result("en-de", 5, 0.25)])
    assert "*" not in table.text
    assert table.text.splitlines()[0].split() == ["lang_pair", "n", "model"]


def test_results_table_missing_entry():
    table = results_table([_result("en-de", 5, 0.25)], baseline=[_result("ro-en", 6, 0.5)])
    rows = table.tsv.splitlines()
    assert rows[1] == "en-de\t5\t0.2500*\t-"
    assert rows[2] == "ro-en\t6\t-\t0.5000*"


def test_measure_inference_time(mono_model, tiny_dataset):
    assert measure_inference_time(mono_model, tiny_dataset) > 0
    with pytest.raises(InsufficientDataError):
        measure_inference_time(mono_model, QEDataset(()))
