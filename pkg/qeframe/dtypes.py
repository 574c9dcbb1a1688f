from typing import NamedTuple, Tuple


class SentencePairRecord(NamedTuple):
    """One (source, translation, quality label) row of a QE dataset."""

    source: str
    target: str
    label: float
    lang_pair: str


class EncodedPair(NamedTuple):
    """Token ids plus side and padding masks, all of length max_seq_len."""

    ids: Tuple[int, ...]
    segment_mask: Tuple[int, ...]
    attention_mask: Tuple[int, ...]


class EvalResult(NamedTuple):
    lang_pair: str
    n: int
    pearson_r: float
    mse: float
    mae: float
    rmse: float


class TrainingEvaluation(NamedTuple):
    """A single evaluation event recorded during training."""

    step: int
    train_loss: float
    eval_loss: float
    lr: float


class LearningCurvePoint(NamedTuple):
    size: int
    mode: str
    pearson_r: float
