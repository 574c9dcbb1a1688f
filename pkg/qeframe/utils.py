import math
import pathlib
from typing import Dict, Iterable, List, Tuple, Union

import numpy as np
from slugify import slugify

from qeframe.exc import ConfigurationError, LanguagePairError
from qeframe.log import get_logger

log = get_logger(__name__)

PathLike = Union[str, pathlib.Path]


def get_rng(seed: int, *streams: int) -> np.random.Generator:
    """Get a numpy Generator backed by the PCG64 bit generator.

    PCG64 is the only generator used anywhere in qeframe, so a seed fully
    determines every random draw.

    Args:
        seed: Non-negative integer seed.
        *streams: Extra non-negative integers mixed into the seed, giving
            independent streams for the same seed (e.g. one per language pair).

    Returns:
        A seeded `np.random.Generator`.
    """
    if seed < 0 or any(s < 0 for s in streams):
        raise ConfigurationError(f"Invalid seed: {(seed, *streams)}. Seeds must be >= 0")
    if streams:
        return np.random.Generator(np.random.PCG64([seed, *streams]))
    return np.random.Generator(np.random.PCG64(seed))


def parse_lang_pair(tag: str) -> Tuple[str, str]:
    """
    Split a language-pair tag of the form `xx-yy` into its two languages.

    Parameters:
        tag (str): The language-pair tag, e.g. "en-de".

    Returns:
        Tuple[str, str]: The lowercased (source, target) language codes.

    Raises:
        LanguagePairError: If the tag is not two non-empty alphabetic codes joined by "-".

    Examples:
        >>> parse_lang_pair("Ro-En")
        ('ro', 'en')
    """
    parts = tag.strip().lower().split("-") if isinstance(tag, str) else []
    if len(parts) != 2 or not all(p.isalpha() for p in parts):
        raise LanguagePairError(
            f"Invalid language pair: {tag!r}. Expected a tag like 'en-de'"
        )
    return parts[0], parts[1]


def artifact_name(*parts: str, suffix: str = "") -> str:
    """
    Build a filesystem-safe artifact file name from free-form parts.

    Parameters:
        *parts (str): Name components, e.g. ("model", "en-*").
        suffix (str, optional): File extension including the dot. Defaults to "".

    Returns:
        str: The slugified name, e.g. "model-en-any.qef".

    Examples:
        >>> artifact_name("model", "*-en", suffix=".qef")
        'model-any-en.qef'
    """
    cleaned = [str(p).replace("*", "any") for p in parts if str(p)]
    return slugify("-".join(cleaned)) + suffix


def validate_searched_entity(
    entity: Union[str, int], entities: Iterable, entity_type: str = ""
) -> None:
    """
    Validates the searched entity by checking if it exists in the collection of entities.

    Parameters:
        entity (Union[str, int]): The entity to be validated.
        entities (Iterable): The allowed entities.
        entity_type (str): The type of the entity (optional).

    Raises:
        ConfigurationError: If the entity is not found in the entities.
    """
    entities = list(entities)
    if entity not in entities:
        raise ConfigurationError(
            f"Invalid {entity_type}: {entity}. Available: {entities}"
        )


def read_key_value_config(path: PathLike) -> Dict[str, str]:
    """
    Read a flat `key=value` configuration file.

    Blank lines and lines starting with `#` are ignored; keys are normalised
    to lowercase with dashes turned into underscores, so `batch-size=8` and
    `batch_size=8` are the same entry.

    Parameters:
        path (PathLike): The config file path.

    Returns:
        Dict[str, str]: Raw string values keyed by normalised key.

    Raises:
        ConfigurationError: If the file is missing or a line has no `=`.
    """
    path = pathlib.Path(path)
    if not path.is_file():
        raise ConfigurationError(f"Config file not found: {path}")
    config: Dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(
                    f"{path}:{lineno}: expected `key=value`, got {line!r}"
                )
            key, value = line.split("=", 1)
            config[key.strip().lower().replace("-", "_")] = value.strip()
    log.debug("read %d config entries from %s", len(config), path)
    return config


def parse_float_range(value: str) -> Tuple[float, float]:
    """
    Parse "lo,hi" (or a single number meaning "x,x") into a float range.

    Parameters:
        value (str): The textual range.

    Returns:
        Tuple[float, float]: The (low, high) bounds.

    Raises:
        ConfigurationError: If the text is not one or two numbers, or low > high.
    """
    try:
        bounds = [float(v) for v in str(value).split(",")]
    except ValueError as e:
        raise ConfigurationError(f"Invalid range: {value!r}") from e
    if len(bounds) == 1:
        bounds = bounds * 2
    if len(bounds) != 2 or bounds[0] > bounds[1]:
        raise ConfigurationError(f"Invalid range: {value!r}")
    return bounds[0], bounds[1]


def parse_int_list(value: str) -> List[int]:
    """Parse a comma-separated list of integers, e.g. "0,100,200"."""
    try:
        return [int(v) for v in str(value).split(",") if v.strip()]
    except ValueError as e:
        raise ConfigurationError(f"Invalid integer list: {value!r}") from e


def ceil_div(a: int, b: int) -> int:
    return -(-a // b)


def is_finite(value: float) -> bool:
    return isinstance(value, (int, float, np.floating)) and math.isfinite(value)
