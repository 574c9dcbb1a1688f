"""Training protocol: Adam with linear warmup, holdout evaluation, early stopping.

Also orchestrates multi-language-pair training and transfer from a checkpoint.
"""

import dataclasses
import enum
import json
import math
import pathlib
import time
from typing import Any, Dict, List, Mapping, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from qeframe.data import QEDataset, concat_datasets, group_directional
from qeframe.dtypes import SentencePairRecord, TrainingEvaluation
from qeframe.exc import (
    ConfigurationError,
    ContractError,
    InsufficientDataError,
    NumericError,
)
from qeframe.log import get_logger
from qeframe.models import ArchitectureEnum, LabelScaler, QEModel, load_checkpoint, mse_loss
from qeframe.tensor import Tensor, no_grad
from qeframe.utils import PathLike, ceil_div, get_rng, is_finite

log = get_logger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
MIN_SPLIT_ROWS = 5


class PresetEnum(str, enum.Enum):
    """Named hyperparameter presets."""

    DESK = "desk"
    PAPER = "paper"


class StopReasonEnum(str, enum.Enum):
    COMPLETED = "completed"
    EARLY_STOPPED = "early_stopped"
    ZERO_SHOT = "zero_shot"


class GroupingEnum(str, enum.Enum):
    """How multi-pair training groups language pairs."""

    DIRECTIONAL = "directional"
    ALL = "all"


_PRESETS: Dict[PresetEnum, Dict[str, Any]] = {
    PresetEnum.PAPER: {
        "batch_size": 8,
        "learning_rate": 2e-5,
        "epochs": 3,
        "warmup_fraction": 0.10,
        "eval_every_n_steps": 50,
        "early_stop_patience": 10,
        "eval_holdout_fraction": 0.20,
    },
}
_PRESETS[PresetEnum.DESK] = {**_PRESETS[PresetEnum.PAPER], "learning_rate": 5e-4}


@dataclasses.dataclass(frozen=True)
class TrainingConfig:
    """Training hyperparameters; defaults are the desk preset."""

    batch_size: int = 8
    learning_rate: float = 5e-4
    epochs: int = 3
    warmup_fraction: float = 0.10
    eval_every_n_steps: int = 50
    early_stop_patience: int = 10
    eval_holdout_fraction: float = 0.20
    seed: int = 0
    preset: PresetEnum = PresetEnum.DESK
    workers: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "preset", PresetEnum(self.preset))
        if not 0 < self.warmup_fraction < 1:
            raise ConfigurationError(f"warmup_fraction must be in (0, 1), got {self.warmup_fraction}")
        if not 0 < self.eval_holdout_fraction < 0.5:
            raise ConfigurationError(
                f"eval_holdout_fraction must be in (0, 0.5), got {self.eval_holdout_fraction}"
            )
        if self.early_stop_patience < 1:
            raise ConfigurationError("early_stop_patience must be >= 1")
        for name in ("batch_size", "epochs", "eval_every_n_steps", "workers"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.seed < 0:
            raise ConfigurationError("seed must be >= 0")

    @classmethod
    def from_preset(cls, preset: Union[PresetEnum, str] = PresetEnum.DESK, **overrides) -> "TrainingConfig":
        """
        Build a config from a named preset; non-None keyword overrides win.

        Parameters:
            preset (PresetEnum): `desk` (lr 5e-4) or `paper` (lr 2e-5).
            **overrides: Field values replacing the preset's.

        Returns:
            TrainingConfig: The resolved configuration.

        Raises:
            ConfigurationError: On an unknown preset or field.
        """
        try:
            preset = PresetEnum(preset)
        except ValueError as e:
            raise ConfigurationError(f"Invalid preset: {preset}. Available: {[p.value for p in PresetEnum]}") from e
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(overrides) - names)
        if unknown:
            raise ConfigurationError(f"unknown training option(s) {unknown}")
        values = {**_PRESETS[preset], "preset": preset}
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def deviations_from_paper(self) -> Dict[str, Any]:
        """Protocol fields whose values differ from the paper preset."""
        return {
            name: getattr(self, name)
            for name, value in _PRESETS[PresetEnum.PAPER].items()
            if getattr(self, name) != value
        }

    def to_dict(self) -> dict:
        payload = dataclasses.asdict(self)
        payload["preset"] = self.preset.value
        return payload


@dataclasses.dataclass
class AdamState:
    """First and second moment estimates per parameter name, plus the step count."""

    m: Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    v: Dict[str, np.ndarray] = dataclasses.field(default_factory=dict)
    t: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def adam_step(
    params: Mapping[str, Tensor],
    grads: Mapping[str, Optional[np.ndarray]],
    state: AdamState,
    lr: float,
) -> None:
    """
    Apply one bias-corrected Adam update in place.

    m <- b1*m + (1-b1)*g; v <- b2*v + (1-b2)*g^2;
    theta <- theta - lr * m_hat / (sqrt(v_hat) + eps). A missing gradient counts as zero.

    Parameters:
        params (Mapping[str, Tensor]): Parameters by name.
        grads (Mapping[str, Optional[np.ndarray]]): Gradients by the same names.
        state (AdamState): Moments and step counter, updated in place.
        lr (float): Learning rate, >= 0.

    Raises:
        ContractError: If a gradient or moment shape differs from its parameter, or lr < 0.
    """
    if lr < 0:
        raise ContractError(f"learning rate must be >= 0, got {lr}")
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, param in params.items():
        grad = grads.get(name)
        grad = np.zeros(param.shape) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise ContractError(f"gradient for {name} has shape {grad.shape}, parameter {param.shape}")
        m = state.m.setdefault(name, np.zeros(param.shape))
        v = state.v.setdefault(name, np.zeros(param.shape))
        if m.shape != param.shape or v.shape != param.shape:
            raise ContractError(f"Adam moments for {name} do not match shape {param.shape}")
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        update = lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
        param.data = (param.data - update).astype(param.dtype)


def warmup_steps(total_steps: int, cfg: TrainingConfig) -> int:
    return math.ceil(round(cfg.warmup_fraction * total_steps, 9))


def lr_at(step: int, total_steps: int, cfg: TrainingConfig) -> float:
    """
    Learning rate for an optimizer step: linear warmup from 0, then constant.

    Examples:
        >>> lr_at(50, 1000, TrainingConfig(learning_rate=1.0))
        0.5
    """
    warmup = warmup_steps(total_steps, cfg)
    if step < warmup:
        return cfg.learning_rate * step / warmup
    return cfg.learning_rate


def total_training_steps(train_size: int, cfg: TrainingConfig) -> int:
    return cfg.epochs * ceil_div(train_size, cfg.batch_size)


def split_train_eval(
    data: Union[QEDataset, Sequence[SentencePairRecord]], cfg: TrainingConfig
) -> Tuple[Any, Any]:
    """
    Shuffle with the config seed and hold out the last fraction for evaluation.

    Parameters:
        data (Union[QEDataset, Sequence[SentencePairRecord]]): At least 5 rows.
        cfg (TrainingConfig): Supplies the seed and the holdout fraction.

    Returns:
        Tuple: (train, eval), datasets if given a dataset, else lists.

    Raises:
        InsufficientDataError: With fewer than 5 rows.
    """
    n = len(data)
    if n < MIN_SPLIT_ROWS:
        raise InsufficientDataError(f"need at least {MIN_SPLIT_ROWS} rows to split, got {n}")
    order = get_rng(cfg.seed).permutation(n)
    n_eval = min(max(1, int(round(n * cfg.eval_holdout_fraction))), n - 1)
    train_idx, eval_idx = order[: n - n_eval], order[n - n_eval :]
    if isinstance(data, QEDataset):
        return data.subset(train_idx, "train"), data.subset(eval_idx, "eval")
    return [data[i] for i in train_idx], [data[i] for i in eval_idx]


def _json_float(value: Optional[float]) -> Optional[float]:
    return value if is_finite(value) else None


@dataclasses.dataclass
class TrainingReport:
    """What happened during a training run, one history entry per evaluation."""

    history: List[TrainingEvaluation] = dataclasses.field(default_factory=list)
    stop_reason: StopReasonEnum = StopReasonEnum.COMPLETED
    best_step: int = 0
    best_eval_loss: Optional[float] = None
    steps_completed: int = 0
    total_steps: int = 0
    wall_time: float = 0.0
    per_pair_eval_mse: Dict[str, float] = dataclasses.field(default_factory=dict)
    config: Dict[str, Any] = dataclasses.field(default_factory=dict)

    def history_records(self) -> List[dict]:
        return [
            {
                "step": e.step,
                "train_loss": _json_float(e.train_loss),
                "eval_loss": _json_float(e.eval_loss),
                "lr": e.lr,
            }
            for e in self.history
        ]

    def summary(self, include_wall_time: bool = True) -> dict:
        """
        Summary fields; `include_wall_time=False` leaves only values fixed by
        (seed, data, config).
        """
        payload = {
            "preset": self.config.get("preset"),
            "deviations_from_paper": self.config.get("deviations_from_paper", {}),
            "stop_reason": self.stop_reason.value,
            "best_step": self.best_step,
            "best_eval_loss": _json_float(self.best_eval_loss),
            "steps_completed": self.steps_completed,
            "total_steps": self.total_steps,
            "n_evaluations": len(self.history),
            "per_pair_eval_mse": {k: _json_float(v) for k, v in sorted(self.per_pair_eval_mse.items())},
            "config": self.config,
        }
        if include_wall_time:
            payload["wall_time"] = self.wall_time
        return payload

    def write(self, directory: PathLike, prefix: str = "report") -> Tuple[pathlib.Path, pathlib.Path]:
        """
        Write `<prefix>.jsonl` (one record per evaluation) and `<prefix>.summary.json`.

        Returns:
            Tuple[pathlib.Path, pathlib.Path]: The two paths written.
        """
        directory = pathlib.Path(directory)
        history_path = directory / f"{prefix}.jsonl"
        summary_path = directory / f"{prefix}.summary.json"
        with open(history_path, "w", encoding="utf-8", newline="\n") as f:
            for record in self.history_records():
                f.write(json.dumps(record, sort_keys=True) + "\n")
        with open(summary_path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.summary(), f, indent=2, sort_keys=True)
            f.write("\n")
        return history_path, summary_path


def _scaled_labels(model: QEModel, dataset: QEDataset) -> np.ndarray:
    return model.label_scaler.apply(dataset.labels)


def _eval_loss(model: QEModel, inputs: Sequence, labels: np.ndarray, batch_size: int) -> float:
    """Holdout MSE in label-scaler space, averaged over records."""
    if not inputs:
        return math.nan
    total = 0.0
    with no_grad():
        for i in range(0, len(inputs), batch_size):
            preds = model.forward(inputs[i : i + batch_size]).data.astype(np.float64)
            total += float(np.sum((preds - labels[i : i + batch_size]) ** 2))
    return total / len(inputs)


def _snapshot(model: QEModel) -> Dict[str, np.ndarray]:
    return {name: t.data.copy() for name, t in model.parameters().items()}


def _restore(model: QEModel, snapshot: Dict[str, np.ndarray]) -> None:
    for name, tensor in model.parameters().items():
        tensor.data = snapshot[name].copy()
        tensor.zero_grad()


def per_pair_mse(model: QEModel, dataset: QEDataset) -> Dict[str, float]:
    """Label-space MSE of the model on each language pair of a dataset."""
    result = {}
    for tag, subset in dataset.by_lang_pair().items():
        preds = model.predict_batch(subset.pairs)
        result[tag] = float(np.mean((preds - subset.labels) ** 2))
    return result


def train(
    model: QEModel,
    data: Union[QEDataset, Sequence[SentencePairRecord]],
    cfg: TrainingConfig,
    refit_scaler: bool = True,
) -> Tuple[QEModel, TrainingReport]:
    """
    Train a copy of `model` and return its best-evaluation snapshot.

    The data is split into train and holdout sets; each epoch visits the
    training set in a seeded shuffled order in batches. Every
    `eval_every_n_steps` optimizer steps (and at step 0 and the final step)
    the holdout MSE is computed; training stops once `early_stop_patience`
    consecutive evaluations fail to beat the best loss strictly.

    Parameters:
        model (QEModel): The starting point; left untouched.
        data (Union[QEDataset, Sequence[SentencePairRecord]]): Training data.
        cfg (TrainingConfig): Hyperparameters.
        refit_scaler (bool, optional): For Siamese models, fit a fresh label
            scaler on the training split. Defaults to True.

    Returns:
        Tuple[QEModel, TrainingReport]: The best model and the run report.

    Raises:
        InsufficientDataError: With fewer than 5 records.
        NumericError: If a batch loss is NaN or infinite (names step, lr and batch).
    """
    started = time.perf_counter()
    if not isinstance(data, QEDataset):
        data = QEDataset(tuple(data))
    train_set, eval_set = split_train_eval(data, cfg)
    model = model.copy()
    if refit_scaler and model.architecture is ArchitectureEnum.SIAMESE:
        model.label_scaler = LabelScaler.fit(train_set.labels)

    train_inputs = model.encode_inputs(train_set.pairs, workers=cfg.workers)
    eval_inputs = model.encode_inputs(eval_set.pairs, workers=cfg.workers)
    train_labels = _scaled_labels(model, train_set)
    eval_labels = _scaled_labels(model, eval_set)

    params = model.parameters()
    steps_per_epoch = ceil_div(len(train_set), cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    config = {**cfg.to_dict(), "deviations_from_paper": cfg.deviations_from_paper()}
    report = TrainingReport(total_steps=total, config=config)
    adam = AdamState()
    log.info(
        "training %s on %d records (%d holdout), %d steps, preset %s",
        model.architecture.value,
        len(train_set),
        len(eval_set),
        total,
        cfg.preset.value,
    )

    step, since_best, window = 0, 0, []

    def evaluate_now() -> bool:
        nonlocal since_best
        eval_loss = _eval_loss(model, eval_inputs, eval_labels, cfg.batch_size)
        train_loss = float(np.mean(window)) if window else math.nan
        window.clear()
        report.history.append(TrainingEvaluation(step, train_loss, eval_loss, lr_at(step, total, cfg)))
        log.info("step %d/%d: train loss %.6f, eval loss %.6f", step, total, train_loss, eval_loss)
        if report.best_eval_loss is None or eval_loss < report.best_eval_loss:
            report.best_eval_loss, report.best_step = eval_loss, step
            best[0] = _snapshot(model)
            since_best = 0
            return False
        since_best += 1
        return since_best >= cfg.early_stop_patience

    best: List[Dict[str, np.ndarray]] = [_snapshot(model)]
    stop = evaluate_now()
    for epoch in range(cfg.epochs):
        if stop:
            break
        order = get_rng(cfg.seed, epoch + 1).permutation(len(train_set))
        log.debug("epoch %d/%d", epoch + 1, cfg.epochs)
        for batch_index in range(steps_per_epoch):
            idx = order[batch_index * cfg.batch_size : (batch_index + 1) * cfg.batch_size]
            lr = lr_at(step, total, cfg)
            model.zero_grad()
            preds = model.forward([train_inputs[i] for i in idx])
            loss = mse_loss(preds, Tensor(train_labels[idx], dtype=preds.dtype))
            loss_value = loss.item()
            if not math.isfinite(loss_value):
                raise NumericError(
                    f"non-finite loss {loss_value} at step {step + 1} (lr {lr:.3e}, epoch {epoch + 1}, batch {batch_index})"
                )
            loss.backward()
            adam_step(params, {name: p.grad for name, p in params.items()}, adam, lr)
            step += 1
            window.append(loss_value)
            log.debug("step %d: loss %.6f, lr %.3e", step, loss_value, lr)
            if step % cfg.eval_every_n_steps == 0 or step == total:
                stop = evaluate_now()
                if stop and step < total:
                    report.stop_reason = StopReasonEnum.EARLY_STOPPED
                    log.info("early stop at step %d, best step %d", step, report.best_step)
                    break

    _restore(model, best[0])
    report.steps_completed = step
    if len(eval_set):
        report.per_pair_eval_mse = per_pair_mse(model, eval_set)
    model.metadata.update(
        {
            "seed": cfg.seed,
            "steps_completed": int(model.metadata.get("steps_completed", 0)) + step,
            "best_eval_loss": _json_float(report.best_eval_loss),
            "language_pairs_seen": sorted(
                set(model.metadata.get("language_pairs_seen", [])) | set(data.lang_pairs)
            ),
        }
    )
    report.wall_time = time.perf_counter() - started
    log.info(
        "finished after %d steps (%s): best eval loss %.6f at step %d",
        step,
        report.stop_reason.value,
        report.best_eval_loss,
        report.best_step,
    )
    return model, report


class MultiPairResult(NamedTuple):
    """Models and reports per training group, plus each group's language pairs."""

    models: Dict[str, QEModel]
    reports: Dict[str, TrainingReport]
    groups: Dict[str, List[str]]


def multipair_groups(
    datasets: Mapping[str, QEDataset], grouping: GroupingEnum
) -> Dict[str, Dict[str, QEDataset]]:
    """
    Group datasets for multi-pair training.

    Directional grouping gives `en-*` and `*-en` groups (empty ones dropped);
    `all` gives a single `all` group.

    Raises:
        InsufficientDataError: If no dataset is given.
        LanguagePairError, UnsupportedGroupingError: See `group_directional`.
    """
    if not datasets:
        raise InsufficientDataError("multi-pair training needs at least one dataset")
    grouping = GroupingEnum(grouping)
    if grouping is GroupingEnum.ALL:
        return {"all": {tag: datasets[tag] for tag in sorted(datasets)}}
    en_source, en_target = group_directional(datasets)
    return {name: group for name, group in (("en-*", en_source), ("*-en", en_target)) if group}


def train_multipair(
    model: QEModel,
    datasets: Mapping[str, QEDataset],
    grouping: GroupingEnum,
    cfg: TrainingConfig,
) -> MultiPairResult:
    """
    Train one model per group on the concatenation of its pairs' data.

    Each report's `per_pair_eval_mse` breaks the holdout loss down by pair.

    Parameters:
        model (QEModel): The starting model, copied for every group.
        datasets (Mapping[str, QEDataset]): Datasets keyed by `xx-yy` tag.
        grouping (GroupingEnum): DIRECTIONAL or ALL.
        cfg (TrainingConfig): Hyperparameters.

    Returns:
        MultiPairResult: Models, reports and pair lists keyed by group name.
    """
    groups = multipair_groups(datasets, grouping)
    models, reports, members = {}, {}, {}
    for name, group in groups.items():
        log.info("training group %s on %s", name, list(group))
        combined = concat_datasets([group[tag] for tag in group], split=name)
        models[name], reports[name] = train(model, combined, cfg)
        members[name] = list(group)
    return MultiPairResult(models, reports, members)


def train_transfer(
    base: Union[QEModel, PathLike],
    data: Union[QEDataset, Sequence[SentencePairRecord]],
    cfg: TrainingConfig,
) -> Tuple[QEModel, TrainingReport]:
    """
    Fine-tune from a base model or checkpoint, keeping its vocabulary and label scaler.

    Empty data is the zero-shot path: the base model comes back unchanged.

    Parameters:
        base (Union[QEModel, PathLike]): A model or a checkpoint path.
        data: Target-pair training data, possibly empty.
        cfg (TrainingConfig): Hyperparameters.

    Returns:
        Tuple[QEModel, TrainingReport]: The fine-tuned model and its report.
    """
    if not isinstance(base, QEModel):
        base = load_checkpoint(base)
    if len(data) == 0:
        log.info("no transfer data: returning the base model (zero-shot)")
        report = TrainingReport(
            stop_reason=StopReasonEnum.ZERO_SHOT,
            config={**cfg.to_dict(), "deviations_from_paper": cfg.deviations_from_paper()},
        )
        return base.copy(), report
    return train(base, data, cfg, refit_scaler=False)


def measure_step_time(
    model: QEModel, data: Union[QEDataset, Sequence[SentencePairRecord]], cfg: TrainingConfig, n_steps: int = 5
) -> float:
    """
    Mean wall-clock seconds of one forward/backward/Adam step on a copy of the model.

    Raises:
        InsufficientDataError: If data is empty.
    """
    if len(data) == 0:
        raise InsufficientDataError("cannot time training steps without data")
    records = list(data)[: cfg.batch_size]
    model = model.copy()
    inputs = model.encode_inputs([(r.source, r.target) for r in records])
    labels = model.label_scaler.apply([r.label for r in records])
    params = model.parameters()
    adam = AdamState()
    started = time.perf_counter()
    for _ in range(n_steps):
        model.zero_grad()
        preds = model.forward(inputs)
        loss = mse_loss(preds, Tensor(labels, dtype=preds.dtype))
        loss.backward()
        adam_step(params, {name: p.grad for name, p in params.items()}, adam, cfg.learning_rate)
    return (time.perf_counter() - started) / n_steps
