"""Conversion of Salient ImageNet style crowd annotations to the annotation
CSV read by :func:`prompt_explainer.discovery.read_annotations`.

The source is a CSV with one row per (class, feature) judgement. A row either
carries a final label directly or one worker's answer; in the second case the
answers of a (class, feature) pair are reduced by majority vote and ties are
dropped. Column names are configurable because released files differ.
"""
from __future__ import annotations

import csv
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

from .discovery import CORE, SPURIOUS, Annotation

log = logging.getLogger(__name__)

# answers accepted as each label, compared case-insensitively
LABEL_WORDS = {
    CORE: {"core", "main", "main object", "object", "part of the main object", "1"},
    SPURIOUS: {"spurious", "background", "separate object", "not main object", "0"},
}

# ImageNet-1k indices 0..397 are animals
IMAGENET_ANIMATE = range(0, 398)


@dataclass
class ImportConfig:
    class_column: str = "class_index"
    feature_column: str = "feature_index"
    label_column: str = "label"
    class_names: dict[int, str] | None = None
    animate: frozenset[int] | None = None


def normalise_label(answer: str) -> str | None:
    a = answer.strip().lower()
    for label, words in LABEL_WORDS.items():
        if a in words:
            return label
    return None


def load_class_names(path: str | Path) -> dict[int, str]:
    """Class names from JSON: a list, ``{"0": "tench"}``, or the Keras-style
    ``{"0": ["n01440764", "tench"]}``."""
    raw = json.loads(Path(path).read_text())
    if isinstance(raw, list):
        return {i: str(v) for i, v in enumerate(raw)}
    out = {}
    for k, v in raw.items():
        out[int(k)] = str(v[-1] if isinstance(v, list) else v)
    return out


def convert(rows: list[dict[str, str]], cfg: ImportConfig) -> list[Annotation]:
    votes: dict[tuple[int, int], Counter] = defaultdict(Counter)
    for i, row in enumerate(rows):
        try:
            key = (int(row[cfg.class_column]), int(row[cfg.feature_column]))
            answer = row[cfg.label_column]
        except KeyError as exc:
            raise ValueError(f"row {i + 2}: missing column {exc}") from None
        except ValueError as exc:
            raise ValueError(f"row {i + 2}: {exc}") from None
        label = normalise_label(answer)
        if label is None:
            raise ValueError(f"row {i + 2}: unrecognised answer {answer!r}")
        votes[key][label] += 1
    out = []
    for (c, j), count in sorted(votes.items()):
        (top, n), *rest = count.most_common()
        if rest and rest[0][1] == n:
            log.warning("class %d feature %d: tied votes %s, dropped", c, j, dict(count))
            continue
        name = (cfg.class_names or {}).get(c, f"class_{c}")
        animacy = "unknown" if cfg.animate is None else ("animate" if c in cfg.animate else "inanimate")
        out.append(Annotation(c, name, j, top, animacy))
    return out


def convert_file(path: str | Path, cfg: ImportConfig) -> list[Annotation]:
    with open(path, newline="") as fh:
        return convert(list(csv.DictReader(fh)), cfg)
