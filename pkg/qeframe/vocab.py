"""Shared multilingual word-level vocabulary and sentence-pair encoding."""

import json
import pathlib
from collections import Counter
from typing import Dict, Iterable, List, Sequence, Union

from qeframe.dtypes import EncodedPair
from qeframe.exc import ConfigurationError, ContractError, DataError, EmptyCorpusError
from qeframe.log import get_logger

log = get_logger(__name__)

CLS_TOKEN, SEP_TOKEN, PAD_TOKEN, UNK_TOKEN = "[CLS]", "[SEP]", "[PAD]", "[UNK]"
SPECIAL_TOKENS = (CLS_TOKEN, SEP_TOKEN, PAD_TOKEN, UNK_TOKEN)
CLS_ID, SEP_ID, PAD_ID, UNK_ID = range(len(SPECIAL_TOKENS))

VOCAB_FORMAT_VERSION = 1
MIN_SEQ_LEN = 5


def tokenize(text: str) -> List[str]:
    """Lowercase and split on whitespace."""
    return text.lower().split()


class Vocabulary:
    """Bijective token <-> id map with the four special tokens at ids 0-3.

    Corpus tokens are lowercased by `tokenize`, so they can never collide
    with the upper-case special tokens.
    """

    def __init__(self, tokens: Sequence[str], min_frequency: int = 1) -> None:
        """
        Parameters:
            tokens (Sequence[str]): Corpus tokens in id order, specials excluded.
            min_frequency (int): The cutoff the tokens were selected with.
        """
        self.min_frequency = min_frequency
        self.id_to_token: List[str] = list(SPECIAL_TOKENS) + list(tokens)
        self.token_to_id: Dict[str, int] = {
            token: idx for idx, token in enumerate(self.id_to_token)
        }
        if len(self.token_to_id) != len(self.id_to_token):
            raise DataError("vocabulary tokens must be unique")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_id

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, Vocabulary)
            and self.id_to_token == other.id_to_token
            and self.min_frequency == other.min_frequency
        )

    def __repr__(self) -> str:
        return f"Vocabulary(size={len(self)}, min_frequency={self.min_frequency})"

    def encode(self, text: str) -> List[int]:
        """Token ids of a sentence, unknown tokens mapped to UNK."""
        return [self.token_to_id.get(token, UNK_ID) for token in tokenize(text)]

    def decode(self, ids: Iterable[int]) -> List[str]:
        """Tokens for ids, special tokens (UNK included) dropped."""
        return [self.id_to_token[i] for i in ids if i >= len(SPECIAL_TOKENS)]

    def to_dict(self) -> dict:
        return {
            "version": VOCAB_FORMAT_VERSION,
            "min_frequency": self.min_frequency,
            "tokens": list(self.id_to_token),
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "Vocabulary":
        """
        Rebuild a vocabulary from its JSON form.

        Raises:
            DataError: If the version is unknown or the specials are not first.
        """
        if payload.get("version") != VOCAB_FORMAT_VERSION:
            raise DataError(f"Unsupported vocabulary version: {payload.get('version')}")
        tokens = payload.get("tokens", [])
        if tuple(tokens[: len(SPECIAL_TOKENS)]) != SPECIAL_TOKENS:
            raise DataError("vocabulary file must list the special tokens first")
        return cls(tokens[len(SPECIAL_TOKENS) :], int(payload["min_frequency"]))

    def save(self, path: Union[str, pathlib.Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            json.dump(self.to_dict(), f, ensure_ascii=False, indent=1)
            f.write("\n")
        log.info("wrote vocabulary of %d tokens to %s", len(self), path)

    @classmethod
    def load(cls, path: Union[str, pathlib.Path]) -> "Vocabulary":
        try:
            with open(path, "r", encoding="utf-8") as f:
                payload = json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"Cannot read vocabulary {path}: {e}") from e
        return cls.from_dict(payload)


def build_vocabulary(corpus: Iterable[str], min_frequency: int = 1) -> Vocabulary:
    """
    Build a vocabulary of every token seen at least `min_frequency` times.

    Tokens are ordered by descending frequency, ties broken lexicographically,
    so the same corpus always yields the same ids.

    Parameters:
        corpus (Iterable[str]): Sentences.
        min_frequency (int): Minimum count for a token to be kept.

    Returns:
        Vocabulary: The vocabulary, specials included.

    Raises:
        EmptyCorpusError: If the corpus yields no sentences.
        ConfigurationError: If min_frequency < 1.

    Examples:
        >>> len(build_vocabulary(["a b", "a"], min_frequency=2))
        5
    """
    if min_frequency < 1:
        raise ConfigurationError(f"min_frequency must be >= 1, got {min_frequency}")
    counts: Counter = Counter()
    n_sentences = 0
    for sentence in corpus:
        counts.update(tokenize(sentence))
        n_sentences += 1
    if n_sentences == 0:
        raise EmptyCorpusError("cannot build a vocabulary from an empty corpus")
    kept = sorted(
        (token for token, count in counts.items() if count >= min_frequency),
        key=lambda token: (-counts[token], token),
    )
    log.info(
        "built vocabulary: %d sentences, %d distinct tokens, %d kept (min_frequency=%d)",
        n_sentences,
        len(counts),
        len(kept),
        min_frequency,
    )
    return Vocabulary(kept, min_frequency)


def _check_max_seq_len(max_seq_len: int) -> None:
    if max_seq_len < MIN_SEQ_LEN:
        raise ContractError(f"max_seq_len must be >= {MIN_SEQ_LEN}, got {max_seq_len}")


def _pad(ids: List[int], segments: List[int], max_seq_len: int) -> EncodedPair:
    n_pad = max_seq_len - len(ids)
    return EncodedPair(
        ids=tuple(ids + [PAD_ID] * n_pad),
        segment_mask=tuple(segments + [0] * n_pad),
        attention_mask=tuple([1] * len(ids) + [0] * n_pad),
    )


def encode_pair(
    v: Vocabulary, source: str, target: str, max_seq_len: int
) -> EncodedPair:
    """
    Encode a (source, translation) pair as `[CLS] source [SEP] target [SEP]`.

    Over-length pairs lose tokens from the end of whichever side is currently
    longer (the target on ties), one at a time; both [SEP] tokens are kept.

    Parameters:
        v (Vocabulary): The shared vocabulary.
        source (str): The original sentence.
        target (str): Its translation.
        max_seq_len (int): The padded length, at least 5.

    Returns:
        EncodedPair: ids, segment mask (0 source side, 1 target side) and attention mask.
    """
    _check_max_seq_len(max_seq_len)
    src, tgt = v.encode(source), v.encode(target)
    budget = max_seq_len - 3
    while len(src) + len(tgt) > budget:
        if len(src) > len(tgt):
            src.pop()
        else:
            tgt.pop()
    ids = [CLS_ID] + src + [SEP_ID] + tgt + [SEP_ID]
    segments = [0] * (len(src) + 2) + [1] * (len(tgt) + 1)
    return _pad(ids, segments, max_seq_len)


def encode_single(v: Vocabulary, sentence: str, max_seq_len: int) -> EncodedPair:
    """
    Encode one sentence as `[CLS] tokens [SEP]`, tail-truncated and padded.

    Parameters:
        v (Vocabulary): The shared vocabulary.
        sentence (str): The sentence.
        max_seq_len (int): The padded length, at least 5.

    Returns:
        EncodedPair: With an all-zero segment mask.
    """
    _check_max_seq_len(max_seq_len)
    tokens = v.encode(sentence)[: max_seq_len - 2]
    ids = [CLS_ID] + tokens + [SEP_ID]
    return _pad(ids, [0] * len(ids), max_seq_len)
