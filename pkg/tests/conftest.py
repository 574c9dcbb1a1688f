import numpy as np
import pytest

from qeframe.data import QEDataset, SyntheticSpec, generate_synthetic_corpus
from qeframe.encoder import EncoderConfig
from qeframe.models import ArchitectureEnum, QEModel
from qeframe.tensor import default_dtype
from qeframe.trainer import TrainingConfig
from qeframe.vocab import Vocabulary, build_vocabulary


def numerical_gradient(f, array: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f() with respect to every entry of `array` (mutated in place)."""
    grad = np.zeros_like(array, dtype=np.float64)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        original = array[idx]
        array[idx] = original + eps
        plus = f()
        array[idx] = original - eps
        minus = f()
        array[idx] = original
        grad[idx] = (plus - minus) / (2 * eps)
    return grad


def numerical_gradient_at(f, array: np.ndarray, flat_indices, eps: float = 1e-6) -> np.ndarray:
    """Central differences of scalar f() at the given flat indices of `array` only."""
    grad = np.zeros(len(flat_indices), dtype=np.float64)
    for position, flat in enumerate(flat_indices):
        idx = np.unravel_index(flat, array.shape)
        original = array[idx]
        array[idx] = original + eps
        plus = f()
        array[idx] = original - eps
        minus = f()
        array[idx] = original
        grad[position] = (plus - minus) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@pytest.fixture
def float64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture
def tiny_spec():
    return SyntheticSpec(
        vocab_size=20,
        n_records=40,
        noise_rate_range=(0.0, 0.6),
        seed=0,
        min_length=3,
        max_length=6,
    )


@pytest.fixture
def tiny_dataset(tiny_spec) -> QEDataset:
    return generate_synthetic_corpus(tiny_spec, "en-de")


@pytest.fixture
def tiny_vocab(tiny_dataset) -> Vocabulary:
    return build_vocabulary(s for r in tiny_dataset for s in (r.source, r.target))


@pytest.fixture
def micro_config(tiny_vocab) -> EncoderConfig:
    return EncoderConfig(
        vocab_size=len(tiny_vocab), d_model=8, n_heads=2, n_layers=2, d_ff=16, max_seq_len=16
    )


@pytest.fixture
def mono_model(tiny_vocab, micro_config) -> QEModel:
    return QEModel.create(ArchitectureEnum.MONO, tiny_vocab, micro_config, seed=0)


@pytest.fixture
def siamese_model(tiny_vocab, micro_config) -> QEModel:
    return QEModel.create(ArchitectureEnum.SIAMESE, tiny_vocab, micro_config, seed=0)


@pytest.fixture
def fast_config() -> TrainingConfig:
    return TrainingConfig(batch_size=4, epochs=1, eval_every_n_steps=2, seed=0)


@pytest.fixture
def write_file(tmp_path):
    def _write(name: str, content, mode: str = "w"):
        path = tmp_path / name
        if isinstance(content, bytes):
            path.write_bytes(content)
        else:
            path.write_text(content, encoding="utf-8", newline="\n")
        return path

    return _write
