"""Pre-norm transformer encoder, the contextual backbone of both QE architectures."""

import dataclasses
import enum
import math
from collections import OrderedDict
from typing import Dict, Iterator, Sequence, Tuple

import numpy as np

from qeframe.dtypes import EncodedPair
from qeframe.exc import ConfigurationError, ContractError, DegenerateInputError
from qeframe.log import get_logger
from qeframe.tensor import (
    Tensor,
    embedding,
    gelu,
    get_default_dtype,
    layer_norm,
    masked_fill,
    softmax,
)
from qeframe.utils import get_rng

log = get_logger(__name__)

MAX_POSITIONS = 512
INIT_STD = 0.02


class PoolingEnum(str, enum.Enum):
    """The available pooling strategies."""

    CLS = "cls"
    MEAN = "mean"
    MAX = "max"


@dataclasses.dataclass(frozen=True)
class EncoderConfig:
    """Encoder hyperparameters; defaults are the desk-scale configuration."""

    vocab_size: int
    d_model: int = 128
    n_heads: int = 4
    n_layers: int = 4
    d_ff: int = 512
    max_seq_len: int = 128
    layer_norm_eps: float = 1e-5

    def __post_init__(self) -> None:
        for field in ("vocab_size", "d_model", "n_heads", "n_layers", "d_ff", "max_seq_len"):
            if int(getattr(self, field)) < 1:
                raise ConfigurationError(f"{field} must be a positive integer")
        if self.d_model % self.n_heads:
            raise ConfigurationError(
                f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})"
            )
        if not 5 <= self.max_seq_len <= MAX_POSITIONS:
            raise ConfigurationError(
                f"max_seq_len must be in [5, {MAX_POSITIONS}], got {self.max_seq_len}"
            )
        if self.layer_norm_eps <= 0:
            raise ConfigurationError("layer_norm_eps must be > 0")

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, payload: dict) -> "EncoderConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in payload.items() if k in names})


def expected_shapes(config: EncoderConfig) -> "OrderedDict[str, Tuple[int, ...]]":
    """Every encoder tensor name mapped to its shape, in serialization order."""
    d, ff = config.d_model, config.d_ff
    shapes: "OrderedDict[str, Tuple[int, ...]]" = OrderedDict(
        [
            ("token_embeddings", (config.vocab_size, d)),
            ("position_embeddings", (config.max_seq_len, d)),
            ("segment_embeddings", (2, d)),
        ]
    )
    for i in range(config.n_layers):
        prefix = f"layers.{i}"
        for proj in ("wq", "wk", "wv", "wo"):
            shapes[f"{prefix}.{proj}"] = (d, d)
        shapes[f"{prefix}.ff1"] = (d, ff)
        shapes[f"{prefix}.ff2"] = (ff, d)
        for norm in ("ln1", "ln2"):
            shapes[f"{prefix}.{norm}.gain"] = (d,)
            shapes[f"{prefix}.{norm}.bias"] = (d,)
    shapes["final_norm.gain"] = (d,)
    shapes["final_norm.bias"] = (d,)
    return shapes


class EncoderWeights:
    """Named encoder tensors, ordered as `expected_shapes` lists them."""

    def __init__(self, config: EncoderConfig, tensors: Dict[str, Tensor]) -> None:
        shapes = expected_shapes(config)
        missing = set(shapes) - set(tensors)
        if missing:
            raise ContractError(f"missing encoder tensors: {sorted(missing)}")
        for name, shape in shapes.items():
            if tensors[name].shape != shape:
                raise ContractError(
                    f"tensor {name} has shape {tensors[name].shape}, expected {shape}"
                )
        self.config = config
        self.tensors: "OrderedDict[str, Tensor]" = OrderedDict(
            (name, tensors[name]) for name in shapes
        )

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self.tensors)

    def items(self):
        return self.tensors.items()

    def parameter_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def init_weights(config: EncoderConfig, seed: int) -> EncoderWeights:
    """
    Initialise encoder weights deterministically.

    Embeddings and projections are drawn from Normal(0, 0.02^2) with numpy's
    PCG64 generator in `expected_shapes` order; layer-norm gains are 1 and
    biases 0.

    Parameters:
        config (EncoderConfig): The encoder configuration.
        seed (int): PRNG seed.

    Returns:
        EncoderWeights: Fresh weights requiring gradients.
    """
    rng = get_rng(seed)
    dtype = get_default_dtype()
    tensors = {}
    for name, shape in expected_shapes(config).items():
        if name.endswith(".gain"):
            data = np.ones(shape)
        elif name.endswith(".bias"):
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = Tensor(data, requires_grad=True, dtype=dtype, name=name)
    log.debug("initialised encoder with seed %d: %s", seed, config)
    return EncoderWeights(config, tensors)


def _masked_value(dtype: np.dtype) -> float:
    # Most negative finite value: exponentiates to exactly 0 after max-subtraction.
    return float(np.finfo(dtype).min)


def _self_attention(
    h: Tensor, weights: EncoderWeights, layer: int, key_pad: np.ndarray
) -> Tensor:
    config = weights.config
    batch, length, d = h.shape
    n_heads, head_dim = config.n_heads, config.head_dim
    prefix = f"layers.{layer}"

    def split_heads(x: Tensor) -> Tensor:
        return x.reshape(batch, length, n_heads, head_dim).transpose(0, 2, 1, 3)

    q = split_heads(h @ weights[f"{prefix}.wq"])
    k = split_heads(h @ weights[f"{prefix}.wk"])
    v = split_heads(h @ weights[f"{prefix}.wv"])
    scores = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(head_dim))
    scores = masked_fill(scores, key_pad, _masked_value(scores.dtype))
    context = softmax(scores, axis=-1) @ v
    context = context.transpose(0, 2, 1, 3).reshape(batch, length, d)
    return context @ weights[f"{prefix}.wo"]


def encode_batch(
    weights: EncoderWeights,
    ids: np.ndarray,
    segment_mask: np.ndarray,
    attention_mask: np.ndarray,
) -> Tuple[Tensor, Tensor]:
    """
    Run the encoder over a batch of encoded inputs.

    Parameters:
        weights (EncoderWeights): The encoder weights.
        ids (np.ndarray): Token ids, shape (batch, length) with length <= max_seq_len.
        segment_mask (np.ndarray): 0 for source side, 1 for target side.
        attention_mask (np.ndarray): 1 for real tokens, 0 for padding.

    Returns:
        Tuple[Tensor, Tensor]: Token vectors (batch, length, d_model) and the
        CLS vectors (batch, d_model).

    Raises:
        ContractError: If an id is not below vocab_size or the input is too long.
    """
    config = weights.config
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim != 2:
        raise ContractError(f"expected (batch, length) ids, got shape {ids.shape}")
    length = ids.shape[1]
    if length > config.max_seq_len:
        raise ContractError(f"input length {length} exceeds max_seq_len {config.max_seq_len}")
    if ids.size and ids.max() >= config.vocab_size:
        raise ContractError(f"token id {ids.max()} >= vocab_size {config.vocab_size}")

    x = (
        embedding(weights["token_embeddings"], ids)
        + embedding(weights["position_embeddings"], np.arange(length))
        + embedding(weights["segment_embeddings"], np.asarray(segment_mask, dtype=np.int64))
    )
    key_pad = (np.asarray(attention_mask) == 0)[:, None, None, :]
    eps = config.layer_norm_eps
    for i in range(config.n_layers):
        prefix = f"layers.{i}"
        h = layer_norm(x, weights[f"{prefix}.ln1.gain"], weights[f"{prefix}.ln1.bias"], eps)
        x = x + _self_attention(h, weights, i, key_pad)
        h = layer_norm(x, weights[f"{prefix}.ln2.gain"], weights[f"{prefix}.ln2.bias"], eps)
        x = x + gelu(h @ weights[f"{prefix}.ff1"]) @ weights[f"{prefix}.ff2"]
    x = layer_norm(x, weights["final_norm.gain"], weights["final_norm.bias"], eps)
    return x, x[:, 0, :]


def encode(weights: EncoderWeights, encoded: EncodedPair) -> Tuple[Tensor, Tensor]:
    """Encode a single input; returns (max_seq_len, d_model) vectors and the CLS vector."""
    token_vectors, cls_vectors = encode_batch(
        weights,
        np.asarray([encoded.ids]),
        np.asarray([encoded.segment_mask]),
        np.asarray([encoded.attention_mask]),
    )
    return token_vectors[0], cls_vectors[0]


def pool(
    token_vectors: Tensor,
    cls_vector: Tensor,
    attention_mask: np.ndarray,
    strategy: PoolingEnum,
) -> Tensor:
    """
    Reduce token vectors to one vector per input.

    Accepts a single input ((length, d) vectors, (length,) mask) or a batch
    ((batch, length, d), (batch, length)). MEAN and MAX only look at
    positions whose attention mask is 1.

    Parameters:
        token_vectors (Tensor): Encoder outputs.
        cls_vector (Tensor): The CLS output(s).
        attention_mask (np.ndarray): 1 for real tokens, 0 for padding.
        strategy (PoolingEnum): CLS, MEAN or MAX.

    Returns:
        Tensor: Shape (d,) or (batch, d).

    Raises:
        DegenerateInputError: If an input has no real position.
    """
    strategy = PoolingEnum(strategy)
    mask = np.asarray(attention_mask).astype(bool)
    counts = mask.sum(axis=-1)
    if np.any(counts == 0):
        raise DegenerateInputError("cannot pool an input whose positions are all padding")
    if strategy is PoolingEnum.CLS:
        return cls_vector
    axis = token_vectors.ndim - 2
    keep = mask[..., None]
    if strategy is PoolingEnum.MEAN:
        summed = (token_vectors * keep.astype(token_vectors.dtype)).sum(axis=axis)
        return summed / np.asarray(counts, dtype=token_vectors.dtype)[..., None]
    filled = masked_fill(token_vectors, ~keep, _masked_value(token_vectors.dtype))
    return filled.max(axis=axis)


def trim_padding(
    ids: np.ndarray, segment_mask: np.ndarray, attention_mask: np.ndarray
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Drop trailing columns that are padding in every row of a batch."""
    length = int(np.asarray(attention_mask).sum(axis=1).max()) if len(ids) else 0
    length = max(length, 1)
    return ids[:, :length], segment_mask[:, :length], attention_mask[:, :length]


def batch_arrays(encoded: Sequence[EncodedPair]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stack encoded inputs into (ids, segment_mask, attention_mask) arrays."""
    return (
        np.asarray([e.ids for e in encoded], dtype=np.int64),
        np.asarray([e.segment_mask for e in encoded], dtype=np.int64),
        np.asarray([e.attention_mask for e in encoded], dtype=np.int64),
    )


def copy_weights(weights: EncoderWeights, requires_grad: bool = True) -> EncoderWeights:
    """Deep copy of the weights (new arrays, no gradients)."""
    return EncoderWeights(
        weights.config,
        {
            name: Tensor(t.data.copy(), requires_grad=requires_grad, dtype=t.dtype, name=name)
            for name, t in weights.items()
        },
    )
