"""QE datasets: TSV input/output, label standardisation, TER and synthetic corpora."""

import csv
import dataclasses
import enum
import math
import pathlib
import zlib
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import Levenshtein
import numpy as np

from qeframe.dtypes import SentencePairRecord
from qeframe.exc import (
    ConfigurationError,
    ContractError,
    DataError,
    EmptyFileError,
    EncodingError,
    InsufficientDataError,
    LabelParseError,
    MalformedRowError,
    MissingColumnError,
    UnsupportedGroupingError,
)
from qeframe.log import get_logger
from qeframe.utils import (
    PathLike,
    get_rng,
    parse_float_range,
    parse_lang_pair,
    read_key_value_config,
)

log = get_logger(__name__)

DEFAULT_COLUMN_MAP = {"source": "src", "target": "tgt", "label": "score"}
LANG_PAIR_COLUMN = "lang_pair"
NATIVE_HEADER = ("src", "tgt", "score", LANG_PAIR_COLUMN)

N_WORD_CLASSES = 5
GRAMMAR_SEED = 7919


class LabelKindEnum(str, enum.Enum):
    HTER = "hter"
    DA_RAW = "da_raw"
    DA_Z = "da_z"


class TaskEnum(str, enum.Enum):
    """Synthetic labelling tasks."""

    HTER = "hter"
    DA = "da"


@dataclasses.dataclass(frozen=True)
class QEDataset:
    """An immutable list of records sharing one label kind."""

    records: Tuple[SentencePairRecord, ...]
    label_kind: LabelKindEnum = LabelKindEnum.HTER
    source_path: Optional[str] = None
    split: str = ""

    def __post_init__(self) -> None:
        object.__setattr__(self, "records", tuple(self.records))
        object.__setattr__(self, "label_kind", LabelKindEnum(self.label_kind))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[SentencePairRecord]:
        return iter(self.records)

    def __getitem__(self, index: int) -> SentencePairRecord:
        return self.records[index]

    @property
    def labels(self) -> np.ndarray:
        return np.asarray([r.label for r in self.records], dtype=np.float64)

    @property
    def pairs(self) -> List[Tuple[str, str]]:
        return [(r.source, r.target) for r in self.records]

    @property
    def lang_pairs(self) -> List[str]:
        """Distinct language-pair tags, sorted."""
        return sorted({r.lang_pair for r in self.records})

    def with_records(self, records: Iterable[SentencePairRecord], split: Optional[str] = None) -> "QEDataset":
        return dataclasses.replace(
            self, records=tuple(records), split=self.split if split is None else split
        )

    def subset(self, indices: Sequence[int], split: Optional[str] = None) -> "QEDataset":
        return self.with_records((self.records[i] for i in indices), split)

    def by_lang_pair(self) -> Dict[str, "QEDataset"]:
        """Split into one dataset per language-pair tag, in tag order."""
        groups: Dict[str, List[SentencePairRecord]] = {tag: [] for tag in self.lang_pairs}
        for record in self.records:
            groups[record.lang_pair].append(record)
        return {tag: self.with_records(records) for tag, records in groups.items()}


def concat_datasets(datasets: Sequence[QEDataset], split: str = "") -> QEDataset:
    """
    Concatenate datasets in the given order.

    Raises:
        InsufficientDataError: If no dataset is given.
        DataError: If the label kinds differ.
    """
    if not datasets:
        raise InsufficientDataError("nothing to concatenate")
    kinds = {d.label_kind for d in datasets}
    if len(kinds) > 1:
        raise DataError(f"cannot mix label kinds {sorted(k.value for k in kinds)}")
    records = [r for d in datasets for r in d.records]
    return QEDataset(tuple(records), datasets[0].label_kind, None, split)


def _normalise_lang_pair(tag: str) -> str:
    return "-".join(parse_lang_pair(tag))


def read_tsv_rows(path: PathLike) -> Tuple[List[str], List[Tuple[int, List[str]]]]:
    """
    Read a header-first, tab-separated, unquoted UTF-8 file.

    Parameters:
        path (PathLike): The file.

    Returns:
        Tuple[List[str], List[Tuple[int, List[str]]]]: The header and the data
        rows, each paired with its 1-based line number (the header is line 1).

    Raises:
        DataError: If the file cannot be read.
        EncodingError: If the bytes are not valid UTF-8 (names the line).
        EmptyFileError: If there is no header line.
        MalformedRowError: If a row's column count differs from the header's.
    """
    try:
        raw = pathlib.Path(path).read_bytes()
    except OSError as e:
        raise DataError(f"Cannot read {path}: {e}") from e
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        line = raw[: e.start].count(b"\n") + 1
        raise EncodingError(f"{path}:{line}: malformed UTF-8 ({e.reason})") from e
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines or not lines[0].strip():
        raise EmptyFileError(f"{path}: empty file, expected a header row")

    reader = csv.reader(lines, delimiter="\t", quoting=csv.QUOTE_NONE, strict=True)
    try:
        header = next(reader)
        width = len(header)
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != width:
                raise MalformedRowError(
                    f"{path}:{lineno}: expected {width} tab-separated fields, got {len(row)}"
                )
            rows.append((lineno, row))
    except csv.Error as e:
        raise MalformedRowError(f"{path}:{reader.line_num}: {e}") from e
    return header, rows


def load_tsv(
    path: PathLike,
    column_map: Optional[Mapping[str, str]] = None,
    lang_pair: Optional[str] = None,
    strict: bool = True,
    label_kind: LabelKindEnum = LabelKindEnum.HTER,
    split: str = "",
) -> QEDataset:
    """
    Load a QE dataset from a TSV file.

    Parameters:
        path (PathLike): The file, UTF-8 with a header row.
        column_map (Mapping[str, str], optional): Header names for the
            "source", "target" and "label" fields. Defaults to `src`/`tgt`/`score`.
        lang_pair (str, optional): Tag for every record. When omitted the file
            must have a `lang_pair` column.
        strict (bool, optional): Reject unparseable labels (True) or skip and
            count them (False). Defaults to True.
        label_kind (LabelKindEnum, optional): What the labels mean. Defaults to HTER.
        split (str, optional): Provenance split name, e.g. "train".

    Returns:
        QEDataset: One record per accepted data row, in file order.

    Raises:
        MissingColumnError: If a mapped column is not in the header.
        LabelParseError: On an unparseable or non-finite label in strict mode (names the line).
        LanguagePairError: If a tag is not of the form `xx-yy`.
        EmptyFileError, EncodingError, MalformedRowError: See `read_tsv_rows`.
    """
    column_map = {**DEFAULT_COLUMN_MAP, **(column_map or {})}
    header, rows = read_tsv_rows(path)
    wanted = [column_map["source"], column_map["target"], column_map["label"]]
    if lang_pair is None:
        wanted.append(LANG_PAIR_COLUMN)
    missing = [name for name in wanted if name not in header]
    if missing:
        raise MissingColumnError(f"{path}: missing column(s) {missing}; header is {header}")
    src_i, tgt_i, label_i = (header.index(name) for name in wanted[:3])
    tag_i = header.index(LANG_PAIR_COLUMN) if lang_pair is None else None
    fixed_tag = _normalise_lang_pair(lang_pair) if lang_pair is not None else None

    records, skipped, empty_text = [], 0, 0
    for lineno, row in rows:
        try:
            label = float(row[label_i])
            if not math.isfinite(label):
                raise ValueError("non-finite")
        except ValueError:
            if strict:
                raise LabelParseError(f"{path}:{lineno}: cannot parse label {row[label_i]!r}")
            skipped += 1
            continue
        source, target = row[src_i], row[tgt_i]
        empty_text += not source.strip() or not target.strip()
        tag = fixed_tag if tag_i is None else _normalise_lang_pair(row[tag_i])
        records.append(SentencePairRecord(source, target, label, tag))

    if skipped:
        log.warning("%s: skipped %d row(s) with unparseable labels", path, skipped)
    if empty_text:
        log.warning("%s: %d record(s) have an empty source or target", path, empty_text)
    log.info("loaded %d records from %s", len(records), path)
    return QEDataset(tuple(records), label_kind, str(path), split)


def _check_field(text: str, where: str) -> str:
    if "\t" in text or "\n" in text or "\r" in text:
        raise MalformedRowError(f"{where}: tabs and newlines cannot be written to TSV")
    return text


def write_tsv(path: PathLike, header: Sequence[str], rows: Iterable[Sequence[str]]) -> None:
    """Write a header-first, tab-separated, `\\n`-terminated UTF-8 file."""
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write("\t".join(header) + "\n")
        for i, row in enumerate(rows, start=2):
            f.write("\t".join(_check_field(str(v), f"{path}:{i}") for v in row) + "\n")


def export_tsv(dataset: QEDataset, path: PathLike) -> None:
    """
    Write a dataset in the native `src tgt score lang_pair` layout.

    Labels are written with `repr`, so `load_tsv` reads back the same floats.
    """
    write_tsv(
        path,
        NATIVE_HEADER,
        ((r.source, r.target, repr(float(r.label)), r.lang_pair) for r in dataset),
    )
    log.info("exported %d records to %s", len(dataset), path)


def zscore_standardize(labels: Sequence[float]) -> Tuple[np.ndarray, float, float]:
    """
    Standardise labels with the population standard deviation.

    Parameters:
        labels (Sequence[float]): At least two labels.

    Returns:
        Tuple[np.ndarray, float, float]: (z-scores, mean, std).

    Raises:
        InsufficientDataError: With fewer than two labels or zero variance.

    Examples:
        >>> z, mu, sigma = zscore_standardize([0.0, 100.0])
        >>> z.tolist(), mu, sigma
        ([-1.0, 1.0], 50.0, 50.0)
    """
    y = np.asarray(labels, dtype=np.float64)
    if y.size < 2:
        raise InsufficientDataError(f"z-scoring needs at least 2 labels, got {y.size}")
    mean = float(y.mean())
    std = float(np.sqrt(np.mean((y - mean) ** 2)))
    if std == 0:
        raise InsufficientDataError("cannot standardise constant labels (zero variance)")
    return (y - mean) / std, mean, std


def invert_zscore(z: Sequence[float], mean: float, std: float) -> np.ndarray:
    return np.asarray(z, dtype=np.float64) * std + mean


def levenshtein(a: Sequence[str], b: Sequence[str]) -> int:
    """Word-level edit distance with unit insert, delete and substitute costs."""
    return Levenshtein.distance(list(a), list(b))


def ter(hypothesis: Sequence[str], reference: Sequence[str]) -> float:
    """
    Translation edit rate without block shifts: edits divided by reference length.

    Can exceed 1 when the hypothesis needs more edits than the reference has words.

    Raises:
        ContractError: If the reference is empty.

    Examples:
        >>> ter(["a", "b"], ["a", "c"])
        0.5
    """
    if len(reference) == 0:
        raise ContractError("ter is undefined for an empty reference")
    return levenshtein(hypothesis, reference) / len(reference)


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic QE corpus."""

    vocab_size: int = 200
    n_records: int = 1000
    noise_rate_range: Tuple[float, float] = (0.0, 0.6)
    seed: int = 0
    task: TaskEnum = TaskEnum.HTER
    zscore: bool = False
    min_length: int = 4
    max_length: int = 12

    def __post_init__(self) -> None:
        object.__setattr__(self, "task", TaskEnum(self.task))
        object.__setattr__(self, "noise_rate_range", tuple(float(x) for x in self.noise_rate_range))
        low, high = self.noise_rate_range
        if self.vocab_size < 20:
            raise ConfigurationError(f"vocab_size must be >= 20, got {self.vocab_size}")
        if self.n_records < 1:
            raise ConfigurationError(f"n_records must be >= 1, got {self.n_records}")
        if not 0.0 <= low <= high <= 1.0:
            raise ConfigurationError(f"noise_rate_range must satisfy 0 <= lo <= hi <= 1, got {self.noise_rate_range}")
        if not 1 <= self.min_length <= self.max_length:
            raise ConfigurationError("sentence lengths must satisfy 1 <= min_length <= max_length")
        if self.seed < 0:
            raise ConfigurationError(f"seed must be >= 0, got {self.seed}")
        if self.zscore and self.task is not TaskEnum.DA:
            raise ConfigurationError("zscore only applies to the DA task")

    @property
    def label_kind(self) -> LabelKindEnum:
        if self.task is TaskEnum.HTER:
            return LabelKindEnum.HTER
        return LabelKindEnum.DA_Z if self.zscore else LabelKindEnum.DA_RAW

    @classmethod
    def from_file(cls, path: PathLike, **overrides) -> "SyntheticSpec":
        """
        Read a flat `key=value` spec file; keyword overrides win over file values.

        Raises:
            ConfigurationError: On unknown keys or unparseable values.
        """
        raw = read_key_value_config(path)
        fields = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(raw) - fields)
        if unknown:
            raise ConfigurationError(f"{path}: unknown synthetic spec key(s) {unknown}")
        values = {}
        try:
            for key, value in raw.items():
                if key == "noise_rate_range":
                    values[key] = parse_float_range(value)
                elif key == "task":
                    values[key] = TaskEnum(value.lower())
                elif key == "zscore":
                    values[key] = value.lower() in ("1", "true", "yes")
                else:
                    values[key] = int(value)
        except ValueError as e:
            raise ConfigurationError(f"{path}: {e}") from e
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)

    def to_dict(self) -> dict:
        payload = dataclasses.asdict(self)
        payload["task"] = self.task.value
        payload["noise_rate_range"] = list(self.noise_rate_range)
        return payload


def _class_grammar() -> Tuple[np.ndarray, np.ndarray]:
    """Start and transition probabilities over word classes, shared by every language."""
    rng = get_rng(GRAMMAR_SEED)
    start = rng.dirichlet(np.ones(N_WORD_CLASSES))
    transitions = rng.dirichlet(np.full(N_WORD_CLASSES, 0.5), size=N_WORD_CLASSES)
    return start, transitions


def _class_members(vocab_size: int) -> List[np.ndarray]:
    return [np.arange(c, vocab_size, N_WORD_CLASSES) for c in range(N_WORD_CLASSES)]


def _translation_table(lang_pair: str, vocab_size: int) -> np.ndarray:
    """Class-preserving bijection from source to target word indices, fixed per pair."""
    rng = get_rng(zlib.crc32(lang_pair.encode("utf-8")))
    table = np.empty(vocab_size, dtype=np.int64)
    for members in _class_members(vocab_size):
        table[members] = rng.permutation(members)
    return table


def _corrupt(
    reference: List[str], rate: float, inventory: List[str], rng: np.random.Generator
) -> List[str]:
    out = []
    for token in reference:
        if rng.random() >= rate:
            out.append(token)
            continue
        op = rng.integers(3)
        if op == 0:
            out.append(inventory[rng.integers(len(inventory))])
        elif op == 2:
            out.extend([token, inventory[rng.integers(len(inventory))]])
    return out


def generate_synthetic_corpus(spec: SyntheticSpec, lang_pair: str) -> QEDataset:
    """
    Generate a learnable synthetic QE corpus for one language pair.

    Source sentences follow a Markov grammar over word classes shared by every
    language; source tokens are `<src_lang><index>`. The reference translation
    maps each source word through a fixed class-preserving bijection onto
    `<tgt_lang><index>` tokens, and the emitted translation corrupts the
    reference token by token (substitution, deletion or insertion, equally
    likely) at a noise rate drawn per record from `spec.noise_rate_range`.
    HTER labels are `ter(translation, reference)`; DA labels are
    `100 * (1 - noise_rate)`, z-scored when `spec.zscore` is set.

    Parameters:
        spec (SyntheticSpec): Size, noise, seed and task.
        lang_pair (str): The `xx-yy` tag.

    Returns:
        QEDataset: Exactly `spec.n_records` records, deterministic per (spec, lang_pair).

    Raises:
        LanguagePairError: If the tag is malformed.
        InsufficientDataError: If z-scoring constant DA labels.
    """
    src_lang, tgt_lang = parse_lang_pair(lang_pair)
    tag = f"{src_lang}-{tgt_lang}"
    rng = get_rng(spec.seed, zlib.crc32(tag.encode("utf-8")))
    start, transitions = _class_grammar()
    members = _class_members(spec.vocab_size)
    table = _translation_table(tag, spec.vocab_size)
    inventory = [f"{tgt_lang}{i}" for i in range(spec.vocab_size)]
    low, high = spec.noise_rate_range

    records, rates = [], []
    for _ in range(spec.n_records):
        length = int(rng.integers(spec.min_length, spec.max_length + 1))
        word_class = rng.choice(N_WORD_CLASSES, p=start)
        words = []
        for position in range(length):
            if position:
                word_class = rng.choice(N_WORD_CLASSES, p=transitions[word_class])
            words.append(int(rng.choice(members[word_class])))
        source = [f"{src_lang}{w}" for w in words]
        reference = [f"{tgt_lang}{table[w]}" for w in words]
        rate = float(rng.uniform(low, high)) if high > low else low
        target = _corrupt(reference, rate, inventory, rng)
        if spec.task is TaskEnum.HTER:
            label = ter(target, reference)
        else:
            label = 100.0 * (1.0 - rate)
        rates.append(rate)
        records.append(SentencePairRecord(" ".join(source), " ".join(target), label, tag))

    if spec.zscore:
        z, _, _ = zscore_standardize([r.label for r in records])
        records = [r._replace(label=float(v)) for r, v in zip(records, z)]
    log.info(
        "generated %d %s records for %s (mean noise %.3f)",
        len(records),
        spec.label_kind.value,
        tag,
        float(np.mean(rates)),
    )
    return QEDataset(tuple(records), spec.label_kind, None, f"synthetic-{spec.seed}")


def group_directional(
    datasets: Mapping[str, QEDataset]
) -> Tuple[Dict[str, QEDataset], Dict[str, QEDataset]]:
    """
    Partition datasets into an English-source group and an English-target group.

    Parameters:
        datasets (Mapping[str, QEDataset]): Datasets keyed by `xx-yy` tag.

    Returns:
        Tuple[Dict[str, QEDataset], Dict[str, QEDataset]]: ({en-*}, {*-en}); either may be empty.

    Raises:
        LanguagePairError: If a tag is malformed.
        UnsupportedGroupingError: If a pair involves no English side.

    Examples:
        >>> a = QEDataset(())
        >>> [sorted(g) for g in group_directional({"en-de": a, "ro-en": a})]
        [['en-de'], ['ro-en']]
    """
    en_source, en_target = {}, {}
    for tag in sorted(datasets):
        src, tgt = parse_lang_pair(tag)
        if src == "en":
            en_source[tag] = datasets[tag]
        elif tgt == "en":
            en_target[tag] = datasets[tag]
        else:
            raise UnsupportedGroupingError(
                f"{tag}: directional grouping only covers pairs with English on one side"
            )
    return en_source, en_target
