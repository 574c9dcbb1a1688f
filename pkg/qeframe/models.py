"""The two QE architectures, their label scaling and checkpoint persistence.

Checkpoint byte layout (little-endian throughout)::

    offset 0   4 bytes   magic b"QEF1"
    offset 4   4 bytes   uint32 length N of the JSON header
    offset 8   N bytes   UTF-8 JSON header: format_version, architecture, dtype,
                         encoder_config, pooling, label_scaler, vocabulary,
                         manifest [{name, shape, offset, nbytes}], metadata
    offset 8+N ...       weight blob (float32, or float64 when dtype says so),
                         tensors in manifest order,
                         each flat row-major; manifest offsets are relative
                         to the start of the blob
"""

import concurrent.futures
import copy
import dataclasses
import enum
import json
import pathlib
import struct
from collections import OrderedDict
from functools import partial
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from qeframe.dtypes import EncodedPair
from qeframe.encoder import (
    EncoderConfig,
    EncoderWeights,
    PoolingEnum,
    batch_arrays,
    copy_weights,
    encode_batch,
    expected_shapes,
    init_weights,
    pool,
    trim_padding,
)
from qeframe.exc import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
    DataError,
    InsufficientDataError,
)
from qeframe.log import get_logger
from qeframe.tensor import Tensor, cosine, get_default_dtype, mse, no_grad
from qeframe.utils import get_rng
from qeframe.vocab import Vocabulary, encode_pair, encode_single

log = get_logger(__name__)

CHECKPOINT_MAGIC = b"QEF1"
CHECKPOINT_FORMAT_VERSION = 1
_BLOB_DTYPES = {"float32": "<f4", "float64": "<f8"}
SIAMESE_LABEL_RANGE = (-0.9, 0.9)
PREDICT_BATCH_SIZE = 32

ModelInput = Union[EncodedPair, Tuple[EncodedPair, EncodedPair]]


class ArchitectureEnum(str, enum.Enum):
    """The available QE architectures."""

    MONO = "mono"
    SIAMESE = "siamese"


class ScalerKindEnum(str, enum.Enum):
    IDENTITY = "identity"
    AFFINE = "affine"


DEFAULT_POOLING = {
    ArchitectureEnum.MONO: PoolingEnum.CLS,
    ArchitectureEnum.SIAMESE: PoolingEnum.MEAN,
}


@dataclasses.dataclass(frozen=True)
class LabelScaler:
    """Maps raw labels y to a*y + b for training and back at prediction."""

    kind: ScalerKindEnum = ScalerKindEnum.IDENTITY
    a: float = 1.0
    b: float = 0.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScalerKindEnum(self.kind))
        if self.a == 0:
            raise ConfigurationError("label scaler slope must be non-zero")

    @classmethod
    def identity(cls) -> "LabelScaler":
        return cls()

    @classmethod
    def fit(
        cls, labels: Sequence[float], target_range: Tuple[float, float] = SIAMESE_LABEL_RANGE
    ) -> "LabelScaler":
        """
        Fit the affine map sending [min(labels), max(labels)] onto `target_range`.

        Constant labels get slope 1 and are shifted to 0.

        Raises:
            InsufficientDataError: If labels is empty.
        """
        if len(labels) == 0:
            raise InsufficientDataError("cannot fit a label scaler on no labels")
        low, high = float(np.min(labels)), float(np.max(labels))
        if high == low:
            return cls(ScalerKindEnum.AFFINE, 1.0, -low)
        a = (target_range[1] - target_range[0]) / (high - low)
        return cls(ScalerKindEnum.AFFINE, a, target_range[0] - a * low)

    def apply(self, y):
        return np.asarray(y, dtype=np.float64) * self.a + self.b

    def invert(self, z):
        return (np.asarray(z, dtype=np.float64) - self.b) / self.a

    def to_dict(self) -> dict:
        return {"kind": self.kind.value, "a": self.a, "b": self.b}

    @classmethod
    def from_dict(cls, payload: dict) -> "LabelScaler":
        return cls(ScalerKindEnum(payload["kind"]), float(payload["a"]), float(payload["b"]))


def _encode_one(
    vocabulary: Vocabulary,
    architecture: ArchitectureEnum,
    max_seq_len: int,
    pair: Tuple[str, str],
) -> ModelInput:
    source, target = pair
    if architecture is ArchitectureEnum.MONO:
        return encode_pair(vocabulary, source, target, max_seq_len)
    return (
        encode_single(vocabulary, source, max_seq_len),
        encode_single(vocabulary, target, max_seq_len),
    )


def encode_records(
    vocabulary: Vocabulary,
    architecture: ArchitectureEnum,
    pairs: Sequence[Tuple[str, str]],
    max_seq_len: int,
    workers: int = 1,
) -> List[ModelInput]:
    """
    Tokenise (source, target) pairs into model inputs, preserving order.

    Parameters:
        vocabulary (Vocabulary): The shared vocabulary.
        architecture (ArchitectureEnum): Mono gives one joint encoding per pair,
            Siamese gives a (source, target) tuple of single encodings.
        pairs (Sequence[Tuple[str, str]]): The sentence pairs.
        max_seq_len (int): The encoder's maximum input length.
        workers (int, optional): Thread-pool size. Defaults to 1 (no pool).

    Returns:
        List[ModelInput]: One input per pair.
    """
    encode = partial(_encode_one, vocabulary, ArchitectureEnum(architecture), max_seq_len)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as executor:
            return list(executor.map(encode, pairs))
    return [encode(pair) for pair in pairs]


class QEModel:
    """An encoder plus the head of one of the two QE architectures.

    Mono (cross-encoder): `[CLS] source [SEP] target [SEP]` -> encoder -> pooling
    -> affine head -> score. Siamese: each sentence through the same encoder
    weights -> pooling -> cosine similarity -> score. Raw outputs live in the
    label scaler's space; `predict_*` return inverted, label-space values.
    """

    def __init__(
        self,
        architecture: ArchitectureEnum,
        vocabulary: Vocabulary,
        encoder_weights: EncoderWeights,
        pooling: Optional[PoolingEnum] = None,
        head: Optional[Dict[str, Tensor]] = None,
        label_scaler: Optional[LabelScaler] = None,
        metadata: Optional[Dict[str, Any]] = None,
    ) -> None:
        self.architecture = ArchitectureEnum(architecture)
        self.vocabulary = vocabulary
        self.encoder_weights = encoder_weights
        self.pooling = PoolingEnum(pooling) if pooling else DEFAULT_POOLING[self.architecture]
        self.head: "OrderedDict[str, Tensor]" = OrderedDict(head or {})
        self.label_scaler = label_scaler or LabelScaler.identity()
        self.metadata: Dict[str, Any] = {
            "seed": 0,
            "steps_completed": 0,
            "best_eval_loss": None,
            "language_pairs_seen": [],
        }
        self.metadata.update(metadata or {})
        if len(vocabulary) > self.encoder_config.vocab_size:
            raise ContractError(
                f"vocabulary has {len(vocabulary)} tokens but the encoder only {self.encoder_config.vocab_size}"
            )
        if set(self.head) != set(head_shapes(self.architecture, self.encoder_config)):
            raise ContractError(f"{self.architecture.value} model has head tensors {list(self.head)}")

    @classmethod
    def create(
        cls,
        architecture: ArchitectureEnum,
        vocabulary: Vocabulary,
        encoder_config: Optional[EncoderConfig] = None,
        pooling: Optional[PoolingEnum] = None,
        seed: int = 0,
    ) -> "QEModel":
        """
        Build a freshly initialised model.

        Parameters:
            architecture (ArchitectureEnum): MONO or SIAMESE.
            vocabulary (Vocabulary): The shared vocabulary; fixes vocab_size when
                no encoder config is given.
            encoder_config (EncoderConfig, optional): Defaults to the desk-scale config.
            pooling (PoolingEnum, optional): Defaults to CLS for Mono, MEAN for Siamese.
            seed (int, optional): Initialisation seed. Defaults to 0.

        Returns:
            QEModel: The new model.
        """
        architecture = ArchitectureEnum(architecture)
        config = encoder_config or EncoderConfig(vocab_size=len(vocabulary))
        weights = init_weights(config, seed)
        head = {}
        if architecture is ArchitectureEnum.MONO:
            rng = get_rng(seed + 1)
            dtype = get_default_dtype()
            head = {
                "head.weight": Tensor(
                    rng.normal(0.0, 0.02, size=(config.d_model, 1)),
                    requires_grad=True,
                    dtype=dtype,
                    name="head.weight",
                ),
                "head.bias": Tensor(np.zeros(1), requires_grad=True, dtype=dtype, name="head.bias"),
            }
        return cls(architecture, vocabulary, weights, pooling, head, metadata={"seed": seed})

    @property
    def encoder_config(self) -> EncoderConfig:
        return self.encoder_weights.config

    def parameters(self) -> "OrderedDict[str, Tensor]":
        """Every trainable tensor by name, encoder first, in checkpoint order."""
        params = OrderedDict(self.encoder_weights.items())
        params.update(self.head)
        return params

    def parameter_count(self) -> int:
        return sum(t.size for t in self.parameters().values())

    def zero_grad(self) -> None:
        for tensor in self.parameters().values():
            tensor.zero_grad()

    def copy(self) -> "QEModel":
        """Deep copy: new weight arrays, same configuration."""
        return QEModel(
            self.architecture,
            self.vocabulary,
            copy_weights(self.encoder_weights),
            self.pooling,
            {
                name: Tensor(t.data.copy(), requires_grad=True, dtype=t.dtype, name=name)
                for name, t in self.head.items()
            },
            self.label_scaler,
            copy.deepcopy(self.metadata),
        )

    def encode_inputs(
        self, pairs: Sequence[Tuple[str, str]], workers: int = 1
    ) -> List[ModelInput]:
        return encode_records(
            self.vocabulary, self.architecture, pairs, self.encoder_config.max_seq_len, workers
        )

    def forward(self, inputs: Sequence[ModelInput]) -> Tensor:
        """
        Raw scores (label-scaler space) for a batch of encoded inputs.

        Parameters:
            inputs (Sequence[ModelInput]): Outputs of `encode_inputs`.

        Returns:
            Tensor: Shape (batch,).
        """
        if self.architecture is ArchitectureEnum.MONO:
            ids, segments, attention = trim_padding(*batch_arrays(inputs))
            tokens, cls_vectors = encode_batch(self.encoder_weights, ids, segments, attention)
            pooled = pool(tokens, cls_vectors, attention, self.pooling)
            scores = pooled @ self.head["head.weight"] + self.head["head.bias"]
            return scores.reshape(len(inputs))
        pooled = self.embed([side for pair in inputs for side in pair])
        return cosine(pooled[0::2], pooled[1::2], axis=-1)

    def embed(self, encoded: Sequence[EncodedPair]) -> Tensor:
        """Pooled vectors, shape (n, d_model), for single-sentence encodings."""
        ids, segments, attention = trim_padding(*batch_arrays(encoded))
        tokens, cls_vectors = encode_batch(self.encoder_weights, ids, segments, attention)
        return pool(tokens, cls_vectors, attention, self.pooling)

    def predict_raw(
        self, pairs: Sequence[Tuple[str, str]], batch_size: int = PREDICT_BATCH_SIZE
    ) -> np.ndarray:
        """Scores in label-scaler space, float64, one per pair."""
        if not pairs:
            return np.zeros(0)
        with no_grad():
            if self.architecture is ArchitectureEnum.SIAMESE:
                return self._predict_siamese_cached(pairs, batch_size)
            inputs = self.encode_inputs(pairs)
            chunks = [
                self.forward(inputs[i : i + batch_size]).data
                for i in range(0, len(inputs), batch_size)
            ]
        return np.concatenate(chunks).astype(np.float64)

    def _predict_siamese_cached(
        self, pairs: Sequence[Tuple[str, str]], batch_size: int
    ) -> np.ndarray:
        # Each distinct sentence is encoded once; pairs look their vectors up.
        sentences = list(dict.fromkeys(s for pair in pairs for s in pair))
        max_len = self.encoder_config.max_seq_len
        encoded = [encode_single(self.vocabulary, s, max_len) for s in sentences]
        vectors = np.concatenate(
            [self.embed(encoded[i : i + batch_size]).data for i in range(0, len(encoded), batch_size)]
        )
        index = {s: i for i, s in enumerate(sentences)}
        src = Tensor(vectors[[index[s] for s, _ in pairs]], dtype=vectors.dtype)
        tgt = Tensor(vectors[[index[t] for _, t in pairs]], dtype=vectors.dtype)
        return cosine(src, tgt, axis=-1).data.astype(np.float64)

    def predict_batch(
        self, pairs: Sequence[Tuple[str, str]], batch_size: int = PREDICT_BATCH_SIZE
    ) -> np.ndarray:
        """Label-space predictions for (source, target) pairs."""
        return self.label_scaler.invert(self.predict_raw(pairs, batch_size))

    def __repr__(self) -> str:
        return (
            f"QEModel(architecture={self.architecture.value}, pooling={self.pooling.value}, "
            f"parameters={self.parameter_count()})"
        )


def head_shapes(architecture: ArchitectureEnum, config: EncoderConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    if ArchitectureEnum(architecture) is ArchitectureEnum.MONO:
        return OrderedDict([("head.weight", (config.d_model, 1)), ("head.bias", (1,))])
    return OrderedDict()


def _check_architecture(model: QEModel, expected: ArchitectureEnum) -> None:
    if model.architecture is not expected:
        raise ContractError(
            f"expected a {expected.value} model, got {model.architecture.value}"
        )


def predict_mono(model: QEModel, source: str, target: str) -> float:
    """
    Score a translation with the cross-encoder.

    Raises:
        ContractError: If the model is not a Mono model.
    """
    _check_architecture(model, ArchitectureEnum.MONO)
    return float(model.predict_batch([(source, target)])[0])


def predict_siamese(model: QEModel, source: str, target: str) -> float:
    """
    Score a translation with the Siamese bi-encoder (cosine of pooled vectors).

    Raises:
        ContractError: If the model is not a Siamese model.
        DegenerateInputError: If a pooled vector is zero.
    """
    _check_architecture(model, ArchitectureEnum.SIAMESE)
    return float(model.predict_batch([(source, target)])[0])


def predict(model: QEModel, source: str, target: str) -> float:
    if model.architecture is ArchitectureEnum.MONO:
        return predict_mono(model, source, target)
    return predict_siamese(model, source, target)


def mse_loss(predictions: Tensor, labels: Tensor) -> Tensor:
    """
    Mean squared error between predictions and labels.

    Raises:
        InsufficientDataError: If the batch is empty.
        ContractError: If the lengths differ.
    """
    if predictions.size == 0:
        raise InsufficientDataError("mse_loss needs a batch of at least one prediction")
    if predictions.shape != labels.shape:
        raise ContractError(
            f"predictions {predictions.shape} and labels {labels.shape} differ in shape"
        )
    return mse(predictions, labels)


def save_checkpoint(model: QEModel, path: Union[str, pathlib.Path]) -> None:
    """
    Write the model to a single `QEF1` file (layout in the module docstring).

    Weights are stored little-endian in the model's own precision: float32
    unless the model was built under `default_dtype(np.float64)`.

    Parameters:
        model (QEModel): The model to persist.
        path (Union[str, pathlib.Path]): Output file path.
    """
    dtype = _checkpoint_dtype(model)
    manifest, blobs, offset = [], [], 0
    for name, tensor in model.parameters().items():
        blob = np.ascontiguousarray(tensor.data, dtype=_BLOB_DTYPES[dtype]).tobytes()
        manifest.append(
            {"name": name, "shape": list(tensor.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "architecture": model.architecture.value,
        "dtype": dtype,
        "encoder_config": model.encoder_config.to_dict(),
        "pooling": model.pooling.value,
        "label_scaler": model.label_scaler.to_dict(),
        "vocabulary": model.vocabulary.to_dict(),
        "manifest": manifest,
        "metadata": model.metadata,
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for blob in blobs:
            f.write(blob)
    log.info("saved %s checkpoint (%d parameters, %s) to %s", model.architecture.value, model.parameter_count(), dtype, path)


def _checkpoint_dtype(model: QEModel) -> str:
    dtypes = {np.dtype(t.dtype).name for t in model.parameters().values()}
    return "float64" if "float64" in dtypes else "float32"


def _read_tensors(
    path: Union[str, pathlib.Path],
    manifest: List[Dict[str, Any]],
    expected: Dict[str, Tuple[int, ...]],
    blob: bytes,
    dtype: str,
) -> Dict[str, Tensor]:
    item_size = np.dtype(_BLOB_DTYPES[dtype]).itemsize
    tensors: Dict[str, Tensor] = {}
    for entry in manifest:
        name, shape = entry["name"], tuple(entry["shape"])
        if name not in expected:
            raise CheckpointShapeError(f"{path}: unexpected tensor {name}")
        if shape != expected[name] or entry["nbytes"] != item_size * int(np.prod(shape)):
            raise CheckpointShapeError(
                f"{path}: tensor {name} has shape {list(shape)}, config implies {list(expected[name])}"
            )
        end = entry["offset"] + entry["nbytes"]
        if end > len(blob):
            raise CheckpointTruncatedError(
                f"{path}: weight blob ends at byte {len(blob)}, tensor {name} needs {end}"
            )
        data = np.frombuffer(blob[entry["offset"] : end], dtype=_BLOB_DTYPES[dtype]).reshape(shape)
        tensors[name] = Tensor(data.astype(dtype), requires_grad=True, dtype=dtype, name=name)
    missing = [name for name in expected if name not in tensors]
    if missing:
        raise CheckpointShapeError(f"{path}: manifest lacks tensors {missing}")
    return tensors


def load_checkpoint(path: Union[str, pathlib.Path]) -> QEModel:
    """
    Read a `QEF1` checkpoint, validating every manifest entry against the config.

    Parameters:
        path (Union[str, pathlib.Path]): The checkpoint file.

    Returns:
        QEModel: The restored model, in the precision it was saved with.

    Raises:
        CheckpointVersionError: Unknown magic or format version.
        CheckpointShapeError: A manifest shape disagrees with the config; names the tensor.
        CheckpointTruncatedError: The file ends before the header or weight blob does.
        CheckpointError: Unreadable file, or a header with missing or invalid fields.
    """
    try:
        raw = pathlib.Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if len(raw) < 8:
        raise CheckpointTruncatedError(f"{path}: file too short for a checkpoint header")
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointVersionError(f"{path}: bad magic {raw[:4]!r}, expected {CHECKPOINT_MAGIC!r}")
    (header_len,) = struct.unpack("<I", raw[4:8])
    if len(raw) < 8 + header_len:
        raise CheckpointTruncatedError(f"{path}: header truncated")
    try:
        header = json.loads(raw[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"{path}: corrupt header: {e}") from e
    if not isinstance(header, dict):
        raise CheckpointError(f"{path}: header is not a JSON object")
    if header.get("format_version") != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format_version {header.get('format_version')}, expected {CHECKPOINT_FORMAT_VERSION}"
        )

    try:
        architecture = ArchitectureEnum(header["architecture"])
        dtype = header.get("dtype", "float32")
        if dtype not in _BLOB_DTYPES:
            raise CheckpointError(f"{path}: unsupported weight dtype {dtype!r}")
        config = EncoderConfig.from_dict(header["encoder_config"])
        expected = expected_shapes(config)
        expected.update(head_shapes(architecture, config))
        tensors = _read_tensors(path, header["manifest"], expected, raw[8 + header_len :], dtype)
        weights = EncoderWeights(config, {n: tensors[n] for n in expected_shapes(config)})
        head = {n: tensors[n] for n in head_shapes(architecture, config)}
        model = QEModel(
            architecture,
            Vocabulary.from_dict(header["vocabulary"]),
            weights,
            PoolingEnum(header["pooling"]),
            head,
            LabelScaler.from_dict(header["label_scaler"]),
            header.get("metadata"),
        )
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError, ConfigurationError, ContractError, DataError) as e:
        raise CheckpointError(f"{path}: invalid checkpoint header: {e!r}") from e
    log.info("loaded %s from %s", model, path)
    return model
