__version__ = "0.1.0"

from qeframe.data import (
    LabelKindEnum,
    QEDataset,
    SyntheticSpec,
    TaskEnum,
    generate_synthetic_corpus,
    group_directional,
    load_tsv,
    ter,
    zscore_standardize,
)
from qeframe.dtypes import EncodedPair, EvalResult, SentencePairRecord
from qeframe.encoder import EncoderConfig, PoolingEnum
from qeframe.metrics import evaluate, pearson, results_table
from qeframe.models import (
    ArchitectureEnum,
    LabelScaler,
    QEModel,
    load_checkpoint,
    predict_mono,
    predict_siamese,
    save_checkpoint,
)
from qeframe.trainer import (
    GroupingEnum,
    PresetEnum,
    TrainingConfig,
    train,
    train_multipair,
    train_transfer,
)
from qeframe.vocab import Vocabulary, build_vocabulary

__all__ = [
    "QEModel",
    "ArchitectureEnum",
    "PoolingEnum",
    "EncoderConfig",
    "LabelScaler",
    "Vocabulary",
    "build_vocabulary",
    "QEDataset",
    "SentencePairRecord",
    "EncodedPair",
    "EvalResult",
    "LabelKindEnum",
    "TaskEnum",
    "SyntheticSpec",
    "TrainingConfig",
    "PresetEnum",
    "GroupingEnum",
    "load_tsv",
    "generate_synthetic_corpus",
    "group_directional",
    "zscore_standardize",
    "ter",
    "predict_mono",
    "predict_siamese",
    "save_checkpoint",
    "load_checkpoint",
    "train",
    "train_multipair",
    "train_transfer",
    "evaluate",
    "pearson",
    "results_table",
]
