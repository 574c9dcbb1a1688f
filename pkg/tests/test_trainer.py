import json

import numpy as np
import pytest

from qeframe.data import QEDataset, SyntheticSpec, concat_datasets, generate_synthetic_corpus
from qeframe.dtypes import SentencePairRecord
from qeframe.encoder import EncoderConfig
from qeframe.exc import (
    ConfigurationError,
    ContractError,
    InsufficientDataError,
    NumericError,
    UnsupportedGroupingError,
)
from qeframe.models import ArchitectureEnum, QEModel, ScalerKindEnum, save_checkpoint
from qeframe.tensor import Tensor
from qeframe.trainer import (
    AdamState,
    GroupingEnum,
    PresetEnum,
    StopReasonEnum,
    TrainingConfig,
    adam_step,
    lr_at,
    measure_step_time,
    multipair_groups,
    split_train_eval,
    total_training_steps,
    train,
    train_multipair,
    train_transfer,
    warmup_steps,
)
from qeframe.vocab import build_vocabulary


@pytest.fixture
def two_pairs():
    spec = SyntheticSpec(vocab_size=20, n_records=20, min_length=3, max_length=5)
    return {tag: generate_synthetic_corpus(spec, tag) for tag in ("en-de", "ro-en")}


@pytest.fixture
def two_pair_model(two_pairs):
    corpus = concat_datasets(list(two_pairs.values()))
    vocab = build_vocabulary(s for r in corpus for s in (r.source, r.target))
    config = EncoderConfig(vocab_size=len(vocab), d_model=8, n_heads=2, n_layers=1, d_ff=16, max_seq_len=16)
    return QEModel.create(ArchitectureEnum.MONO, vocab, config, seed=0)


def _weights(model):
    return {name: t.data.copy() for name, t in model.parameters().items()}


def test_presets():
    paper = TrainingConfig.from_preset("paper")
    assert paper.learning_rate == 2e-5
    assert paper.deviations_from_paper() == {}
    desk = TrainingConfig.from_preset(PresetEnum.DESK, batch_size=4, epochs=None)
    assert desk.deviations_from_paper() == {"learning_rate": 5e-4, "batch_size": 4}
    assert desk.epochs == 3


@pytest.mark.parametrize(
    "preset, overrides",
    [("laptop", {}), ("desk", {"momentum": 0.9})],
)
def test_from_preset_errors(preset, overrides):
    with pytest.raises(ConfigurationError):
        TrainingConfig.from_preset(preset, **overrides)


@pytest.mark.parametrize(
    "overrides",
    [
        {"warmup_fraction": 0.0},
        {"warmup_fraction": 1.0},
        {"eval_holdout_fraction": 0.5},
        {"early_stop_patience": 0},
        {"batch_size": 0},
        {"learning_rate": -1.0},
        {"seed": -2},
    ],
)
def test_config_validation(overrides):
    with pytest.raises(ConfigurationError):
        TrainingConfig(**overrides)


@pytest.mark.parametrize(
    "total, fraction, expected",
    [(1000, 0.1, 100), (30, 0.1, 3), (7, 0.1, 1), (1, 0.1, 1)],
)
def test_warmup_steps(total, fraction, expected):
    assert warmup_steps(total, TrainingConfig(warmup_fraction=fraction)) == expected


@pytest.mark.parametrize("step, expected", [(0, 0.0), (50, 0.5), (99, 0.99), (100, 1.0), (999, 1.0)])
def test_lr_at(step, expected):
    assert lr_at(step, 1000, TrainingConfig(learning_rate=1.0)) == pytest.approx(expected)


def test_total_training_steps():
    assert total_training_steps(33, TrainingConfig(batch_size=8, epochs=3)) == 15


def test_adam_first_step_moves_by_lr():
    param = Tensor([1.0, -2.0, 0.5], dtype=np.float64)
    adam_step({"p": param}, {"p": np.array([0.5, -3.0, 0.0])}, AdamState(), lr=0.1)
    np.testing.assert_allclose(param.data, [0.9, -1.9, 0.5], atol=1e-7)


def test_adam_matches_scalar_oracle():
    theta, m, v = 0.3, 0.0, 0.0
    grads = [0.2, -0.1, 0.4, 0.05]
    param = Tensor([theta], dtype=np.float64)
    state = AdamState()
    for t, g in enumerate(grads, start=1):
        m = 0.9 * m + (1 - 0.9) * g
        v = 0.999 * v + (1 - 0.999) * g * g
        theta -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        adam_step({"p": param}, {"p": np.array([g])}, state, lr=0.01)
    assert param.data[0] == pytest.approx(theta, rel=1e-12)
    assert state.t == 4


def test_adam_missing_gradient_counts_as_zero():
    param = Tensor([1.0], dtype=np.float64)
    adam_step({"p": param}, {"p": None}, AdamState(), lr=0.1)
    assert param.data[0] == 1.0


def test_adam_errors():
    param = Tensor([1.0, 2.0], dtype=np.float64)
    with pytest.raises(ContractError):
        adam_step({"p": param}, {"p": np.zeros(3)}, AdamState(), lr=0.1)
    with pytest.raises(ContractError):
        adam_step({"p": param}, {"p": np.zeros(2)}, AdamState(), lr=-0.1)


def test_split_is_a_seeded_partition(tiny_dataset):
    cfg = TrainingConfig(seed=3)
    train_set, eval_set = split_train_eval(tiny_dataset, cfg)
    assert (len(train_set), len(eval_set)) == (32, 8)
    assert sorted(train_set.records + eval_set.records) == sorted(tiny_dataset.records)
    assert (train_set.split, eval_set.split) == ("train", "eval")
    again, _ = split_train_eval(tiny_dataset, cfg)
    assert again.records == train_set.records


def test_split_keeps_one_row_each_side():
    records = [SentencePairRecord("a", "b", 0.1 * i, "en-de") for i in range(5)]
    train_rows, eval_rows = split_train_eval(records, TrainingConfig(eval_holdout_fraction=0.01))
    assert (len(train_rows), len(eval_rows)) == (4, 1)


def test_split_needs_five_rows(tiny_dataset):
    with pytest.raises(InsufficientDataError):
        split_train_eval(tiny_dataset.subset(range(4)), TrainingConfig())


def test_train_is_deterministic(mono_model, tiny_dataset, fast_config):
    first, report = train(mono_model, tiny_dataset, fast_config)
    second, again = train(mono_model, tiny_dataset, fast_config)
    for name, data in _weights(first).items():
        np.testing.assert_array_equal(data, second.parameters()[name].data, err_msg=name)
    assert report.summary(include_wall_time=False) == again.summary(include_wall_time=False)
    assert report.history_records() == again.history_records()


def test_train_schedule_and_report(mono_model, tiny_dataset, fast_config):
    model, report = train(mono_model, tiny_dataset, fast_config)
    assert [e.step for e in report.history] == [0, 2, 4, 6, 8]
    assert report.history[0].lr == 0.0
    assert report.stop_reason is StopReasonEnum.COMPLETED
    assert report.total_steps == report.steps_completed == 8
    assert report.best_eval_loss == min(e.eval_loss for e in report.history)
    assert list(report.per_pair_eval_mse) == ["en-de"]
    assert model.metadata["steps_completed"] == 8
    assert model.metadata["language_pairs_seen"] == ["en-de"]


def test_train_leaves_input_model_untouched(mono_model, tiny_dataset, fast_config):
    before = _weights(mono_model)
    train(mono_model, tiny_dataset, fast_config)
    for name, data in before.items():
        np.testing.assert_array_equal(mono_model.parameters()[name].data, data)


def test_early_stop_restores_best(mono_model, tiny_dataset):
    cfg = TrainingConfig(batch_size=4, epochs=2, eval_every_n_steps=2, early_stop_patience=1, learning_rate=0.0)
    model, report = train(mono_model, tiny_dataset, cfg)
    assert report.stop_reason is StopReasonEnum.EARLY_STOPPED
    assert report.steps_completed == 2
    assert report.best_step == 0
    for name, data in _weights(mono_model).items():
        np.testing.assert_array_equal(model.parameters()[name].data, data)


def test_siamese_training_fits_scaler(siamese_model, tiny_dataset, fast_config):
    model, _ = train(siamese_model, tiny_dataset, fast_config)
    assert model.label_scaler.kind is ScalerKindEnum.AFFINE
    assert siamese_model.label_scaler.kind is ScalerKindEnum.IDENTITY


def test_constant_labels_train(siamese_model, tiny_dataset, fast_config):
    constant = tiny_dataset.with_records(r._replace(label=0.5) for r in tiny_dataset)
    model, report = train(siamese_model, constant, fast_config)
    assert model.label_scaler.a == 1.0
    assert np.isfinite(report.best_eval_loss)


def test_non_finite_loss_raises(mono_model, tiny_dataset, fast_config):
    mono_model.head["head.bias"].data[:] = np.nan
    with pytest.raises(NumericError, match="step 1"):
        train(mono_model, tiny_dataset, fast_config)


def test_too_little_data(mono_model, tiny_dataset, fast_config):
    with pytest.raises(InsufficientDataError):
        train(mono_model, tiny_dataset.subset([0, 1]), fast_config)


def test_report_write(tmp_path, mono_model, tiny_dataset, fast_config):
    _, report = train(mono_model, tiny_dataset, fast_config)
    history_path, summary_path = report.write(tmp_path, "run")
    assert len(history_path.read_text().splitlines()) == len(report.history)
    summary = json.loads(summary_path.read_text())
    assert summary["stop_reason"] == "completed"
    assert summary["deviations_from_paper"] == {
        "batch_size": 4,
        "epochs": 1,
        "eval_every_n_steps": 2,
        "learning_rate": 5e-4,
    }
    assert "wall_time" in summary


def test_multipair_groups(two_pairs):
    directional = multipair_groups(two_pairs, GroupingEnum.DIRECTIONAL)
    assert {name: list(group) for name, group in directional.items()} == {
        "en-*": ["en-de"],
        "*-en": ["ro-en"],
    }
    assert list(multipair_groups(two_pairs, "all")["all"]) == ["en-de", "ro-en"]


def test_multipair_group_errors(two_pairs):
    with pytest.raises(InsufficientDataError):
        multipair_groups({}, GroupingEnum.ALL)
    with pytest.raises(UnsupportedGroupingError):
        multipair_groups({"de-fr": two_pairs["en-de"]}, GroupingEnum.DIRECTIONAL)


def test_train_multipair_all(two_pair_model, two_pairs, fast_config):
    result = train_multipair(two_pair_model, two_pairs, GroupingEnum.ALL, fast_config)
    assert list(result.models) == ["all"]
    assert result.groups == {"all": ["en-de", "ro-en"]}
    assert set(result.reports["all"].per_pair_eval_mse) <= {"en-de", "ro-en"}
    assert result.models["all"].metadata["language_pairs_seen"] == ["en-de", "ro-en"]


def test_train_multipair_directional(two_pair_model, two_pairs, fast_config):
    result = train_multipair(two_pair_model, two_pairs, GroupingEnum.DIRECTIONAL, fast_config)
    assert sorted(result.models) == ["*-en", "en-*"]
    assert result.models["en-*"].metadata["language_pairs_seen"] == ["en-de"]


def test_transfer_zero_shot(mono_model, fast_config, tiny_dataset):
    model, report = train_transfer(mono_model, QEDataset(()), fast_config)
    assert report.stop_reason is StopReasonEnum.ZERO_SHOT
    assert model is not mono_model
    pairs = tiny_dataset.pairs[:3]
    np.testing.assert_array_equal(model.predict_batch(pairs), mono_model.predict_batch(pairs))


def test_transfer_from_checkpoint_keeps_scaler(tmp_path, siamese_model, tiny_dataset, fast_config):
    base, _ = train(siamese_model, tiny_dataset, fast_config)
    path = tmp_path / "base.qef"
    save_checkpoint(base, path)
    shifted = tiny_dataset.with_records(r._replace(label=r.label + 5.0) for r in tiny_dataset)
    model, report = train_transfer(path, shifted, fast_config)
    assert model.label_scaler == base.label_scaler
    assert report.stop_reason is StopReasonEnum.COMPLETED
    assert model.metadata["steps_completed"] == 16


def test_measure_step_time(mono_model, tiny_dataset, fast_config):
    assert measure_step_time(mono_model, tiny_dataset, fast_config, n_steps=2) > 0
    with pytest.raises(InsufficientDataError):
        measure_step_time(mono_model, [], fast_config)


def test_patience_running_out_on_the_last_step_is_completion(mono_model, tiny_dataset):
    cfg = TrainingConfig(batch_size=4, epochs=1, eval_every_n_steps=8, early_stop_patience=1, learning_rate=0.0)
    _, report = train(mono_model, tiny_dataset, cfg)
    assert [e.step for e in report.history] == [0, 8]
    assert report.steps_completed == report.total_steps == 8
    assert report.stop_reason is StopReasonEnum.COMPLETED


def test_noise_labels_stop_early(tiny_dataset, tiny_vocab):
    config = EncoderConfig(vocab_size=len(tiny_vocab), d_model=8, n_heads=2, n_layers=1, d_ff=16, max_seq_len=16)
    stopped = 0
    for seed in range(10):
        noise = np.random.Generator(np.random.PCG64(100 + seed)).uniform(size=len(tiny_dataset))
        noisy = tiny_dataset.with_records(r._replace(label=float(y)) for r, y in zip(tiny_dataset, noise))
        model = QEModel.create(ArchitectureEnum.MONO, tiny_vocab, config, seed=seed)
        cfg = TrainingConfig(
            batch_size=4, epochs=3, eval_every_n_steps=1, early_stop_patience=3, learning_rate=1e-2, seed=seed
        )
        _, report = train(model, noisy, cfg)
        stopped += report.stop_reason is StopReasonEnum.EARLY_STOPPED
        assert report.steps_completed <= report.total_steps
    assert stopped >= 8


@pytest.mark.parametrize("grouping", list(GroupingEnum))
def test_multipair_with_one_dataset_equals_train(mono_model, tiny_dataset, fast_config, grouping):
    result = train_multipair(mono_model, {"en-de": tiny_dataset}, grouping, fast_config)
    (name,) = result.models
    single, report = train(mono_model, tiny_dataset, fast_config)
    for param, data in _weights(single).items():
        np.testing.assert_array_equal(result.models[name].parameters()[param].data, data, err_msg=param)
    assert result.reports[name].history_records() == report.history_records()


@pytest.mark.parametrize("total, fraction", [(1000, 0.1), (37, 0.25), (7, 0.1), (50, 0.5)])
def test_lr_at_is_continuous_and_capped(total, fraction):
    cfg = TrainingConfig(learning_rate=2.0, warmup_fraction=fraction)
    warmup = warmup_steps(total, cfg)
    rates = [lr_at(step, total, cfg) for step in range(total + 1)]
    slope = 2.0 / warmup if warmup else 0.0
    assert all(abs(b - a) <= slope + 1e-12 for a, b in zip(rates, rates[1:]))
    assert max(rates) == 2.0
    assert rates[warmup:] == [2.0] * (total + 1 - warmup)
