"""Feature tokens, vocabularies, one-hot sparse vectors and the dataset file format.

An app is described by a set of :class:`FeatureToken` objects. The union of
all tokens seen in training forms a :class:`Vocabulary`, which maps each
token to a column of a binary indicator vector. Vectors are stored sparsely
as the sorted list of their active columns.
"""

from __future__ import annotations

import enum
import functools
import os
from dataclasses import dataclass
from typing import Iterable, Optional, Sequence

import numpy as np

from .errors import DatasetFormatError

__all__ = [
    "FeatureCategory",
    "FeatureToken",
    "Vocabulary",
    "SparseVector",
    "LabeledDataset",
    "build_vocabulary",
    "encode",
    "write_dataset",
    "read_dataset",
    "write_vocabulary",
    "read_vocabulary",
    "write_tokens",
    "read_tokens",
]

SEPARATOR = "::"
NOPERM_TAG = "api_restr_noperm"


class FeatureCategory(enum.Enum):
    """The seven kinds of static features. The value is the rendering tag."""

    COMPONENT = "comp"
    HARDWARE = "hw"
    PERMISSION = "perm"
    INTENT_FILTER = "intent"
    RESTRICTED_API = "api_restr"
    SUSPICIOUS_API = "api_susp"
    USED_PERMISSION = "used_perm"

    @property
    def tag(self) -> str:
        return self.value

    @property
    def code(self) -> int:
        """Small stable integer used in model files and kernels."""
        return _CATEGORY_CODES[self]

    @classmethod
    def from_tag(cls, tag: str) -> "FeatureCategory":
        try:
            return cls(tag)
        except ValueError:
            raise ValueError(f"unknown feature category tag {tag!r}") from None

    @classmethod
    def from_code(cls, code: int) -> "FeatureCategory":
        return _CATEGORIES[code]


_CATEGORIES = tuple(FeatureCategory)
_CATEGORY_CODES = {c: i for i, c in enumerate(_CATEGORIES)}


@functools.total_ordering
@dataclass(frozen=True)
class FeatureToken:
    """A namespaced string feature.

    ``missing_permission`` is only meaningful for restricted APIs: it marks
    the variant emitted when the app calls the API without declaring the
    permissions it needs, rendered with its own ``api_restr_noperm`` tag.
    """

    category: FeatureCategory
    value: str
    missing_permission: bool = False

    def __post_init__(self):
        if not isinstance(self.category, FeatureCategory):
            raise TypeError(f"category must be a FeatureCategory, got {self.category!r}")
        if not self.value:
            raise ValueError("feature value must be non-empty")
        if SEPARATOR in self.value or any(ch.isspace() for ch in self.value):
            raise ValueError(f"invalid feature value {self.value!r}")
        if self.missing_permission and self.category is not FeatureCategory.RESTRICTED_API:
            raise ValueError("missing_permission only applies to restricted APIs")

    @property
    def tag(self) -> str:
        return NOPERM_TAG if self.missing_permission else self.category.tag

    def __str__(self) -> str:
        return f"{self.tag}{SEPARATOR}{self.value}"

    def __lt__(self, other):
        if not isinstance(other, FeatureToken):
            return NotImplemented
        return str(self) < str(other)

    @classmethod
    def parse(cls, text: str) -> "FeatureToken":
        tag, sep, value = text.partition(SEPARATOR)
        if not sep:
            raise ValueError(f"token {text!r} lacks a '{SEPARATOR}' separator")
        if tag == NOPERM_TAG:
            return cls(FeatureCategory.RESTRICTED_API, value, missing_permission=True)
        return cls(FeatureCategory.from_tag(tag), value)


@dataclass(frozen=True)
class SparseVector:
    """Binary vector of length ``dim`` whose ones sit at ``indices``."""

    indices: tuple
    dim: int

    def __post_init__(self):
        indices = tuple(int(i) for i in self.indices)
        object.__setattr__(self, "indices", indices)
        if self.dim < 0:
            raise ValueError("dim must be nonnegative")
        prev = -1
        for i in indices:
            if i <= prev:
                raise ValueError("indices must be strictly increasing")
            prev = i
        if indices and (indices[0] < 0 or indices[-1] >= self.dim):
            raise ValueError(f"index out of range for dim {self.dim}")

    def __len__(self):
        return len(self.indices)

    def to_dense(self) -> np.ndarray:
        x = np.zeros(self.dim)
        x[list(self.indices)] = 1.0
        return x


class Vocabulary:
    """Bijection between tokens and the columns ``0..n-1``.

    Tokens are kept in lexicographic order of their canonical rendering so the
    column layout does not depend on the order in which apps were processed.
    """

    def __init__(self, tokens: Iterable[FeatureToken]):
        ordered = sorted(set(tokens), key=str)
        self.tokens = tuple(ordered)
        self.index = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def __contains__(self, token):
        return token in self.index

    def __iter__(self):
        return iter(self.tokens)

    def __eq__(self, other):
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self.tokens == other.tokens

    def __repr__(self):
        return f"Vocabulary(n={len(self)})"

    def decode(self, indices: Iterable[int]) -> frozenset:
        return frozenset(self.tokens[i] for i in indices)

    def categories(self) -> np.ndarray:
        """Category code of every column, as used by interaction masks."""
        return np.array([t.category.code for t in self.tokens], dtype=np.int64)


@dataclass(frozen=True)
class LabeledDataset:
    """Samples sharing one dimension, labelled +1 (malware) or -1 (clean)."""

    vectors: tuple
    labels: tuple
    dim: int
    family: Optional[tuple] = None

    def __post_init__(self):
        object.__setattr__(self, "vectors", tuple(self.vectors))
        object.__setattr__(self, "labels", tuple(int(y) for y in self.labels))
        if self.family is not None:
            object.__setattr__(self, "family", tuple(self.family))
            if len(self.family) != len(self.vectors):
                raise ValueError("family list length differs from number of samples")
        if len(self.labels) != len(self.vectors):
            raise ValueError("label count differs from number of samples")
        for y in self.labels:
            if y not in (1, -1):
                raise ValueError(f"label must be +1 or -1, got {y}")
        for v in self.vectors:
            if v.dim != self.dim:
                raise ValueError(f"vector dim {v.dim} differs from dataset dim {self.dim}")

    def __len__(self):
        return len(self.vectors)

    @functools.cached_property
    def csr(self) -> tuple:
        """``(indptr, indices)`` arrays in compressed-row layout."""
        lengths = np.fromiter((len(v) for v in self.vectors), dtype=np.int64, count=len(self))
        indptr = np.zeros(len(self) + 1, dtype=np.int64)
        np.cumsum(lengths, out=indptr[1:])
        indices = np.fromiter(
            (i for v in self.vectors for i in v.indices), dtype=np.int64, count=int(indptr[-1])
        )
        return indptr, indices

    @property
    def y(self) -> np.ndarray:
        return np.asarray(self.labels, dtype=np.float64)

    def subset(self, rows: Sequence[int]) -> "LabeledDataset":
        rows = [int(r) for r in rows]
        family = None if self.family is None else [self.family[r] for r in rows]
        return LabeledDataset(
            [self.vectors[r] for r in rows], [self.labels[r] for r in rows], self.dim, family
        )


def build_vocabulary(token_sets: Iterable[Iterable[FeatureToken]]) -> Vocabulary:
    """Vocabulary over the union of all token sets."""
    union = set()
    for tokens in token_sets:
        union.update(tokens)
    if not union:
        raise ValueError("empty feature space")
    return Vocabulary(union)


def encode(tokens: Iterable[FeatureToken], vocab: Vocabulary) -> tuple:
    """One-hot encode ``tokens``.

    Returns ``(vector, dropped)`` where ``dropped`` counts tokens that are not
    in the vocabulary; those are ignored.
    """
    if len(vocab) == 0:
        raise ValueError("vocabulary is empty")
    hits = set()
    dropped = 0
    for tok in set(tokens):
        i = vocab.index.get(tok)
        if i is None:
            dropped += 1
        else:
            hits.add(i)
    return SparseVector(tuple(sorted(hits)), len(vocab)), dropped


# -- file formats ------------------------------------------------------------


def write_dataset(ds: LabeledDataset, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"dim {ds.dim}\n")
        for row, (vec, y) in enumerate(zip(ds.vectors, ds.labels)):
            parts = ["+1" if y == 1 else "-1"]
            if ds.family is not None and ds.family[row] is not None:
                fam = ds.family[row]
                if not fam or any(ch.isspace() for ch in fam):
                    raise ValueError(f"family name {fam!r} cannot be written")
                parts.append(f"fam:{fam}")
            parts.extend(f"{i}:1" for i in vec.indices)
            fh.write(" ".join(parts) + "\n")


def read_dataset(path) -> LabeledDataset:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DatasetFormatError("missing 'dim <n>' header", line=1)
    head = lines[0].split()
    if len(head) != 2 or head[0] != "dim" or not head[1].isdigit():
        raise DatasetFormatError(f"bad header {lines[0]!r}", line=1)
    dim = int(head[1])

    vectors, labels, families = [], [], []
    any_family = False
    for lineno, line in enumerate(lines[1:], start=2):
        parts = line.split()
        if not parts:
            continue
        if parts[0] not in ("+1", "-1", "1"):
            raise DatasetFormatError(f"bad label {parts[0]!r}", line=lineno)
        labels.append(-1 if parts[0] == "-1" else 1)
        fam = None
        indices = []
        for item in parts[1:]:
            if item.startswith("fam:"):
                fam = item[4:]
                if not fam:
                    raise DatasetFormatError("empty family name", line=lineno)
                any_family = True
                continue
            if item.startswith("qid:"):
                continue
            key, sep, val = item.partition(":")
            if not sep or not key.isdigit() or val not in ("1", "1.0"):
                raise DatasetFormatError(f"bad feature entry {item!r}", line=lineno)
            idx = int(key)
            if idx >= dim:
                raise DatasetFormatError(f"index {idx} out of range for dim {dim}", line=lineno)
            if indices and idx <= indices[-1]:
                raise DatasetFormatError("indices not strictly increasing", line=lineno)
            indices.append(idx)
        families.append(fam)
        vectors.append(SparseVector(tuple(indices), dim))
    return LabeledDataset(vectors, labels, dim, families if any_family else None)


def write_vocabulary(vocab: Vocabulary, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok in vocab.tokens:
            fh.write(f"{tok}\n")


def read_vocabulary(path) -> Vocabulary:
    with open(path, encoding="utf-8") as fh:
        tokens = [FeatureToken.parse(line) for line in fh.read().splitlines() if line]
    vocab = Vocabulary(tokens)
    if list(vocab.tokens) != tokens:
        raise DatasetFormatError(f"{os.fspath(path)}: vocabulary file is not sorted or has duplicates")
    return vocab


def write_tokens(tokens: Iterable[FeatureToken], path) -> None:
    """One canonical token per line, sorted."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for tok in sorted(set(tokens), key=str):
            fh.write(f"{tok}\n")


def read_tokens(path) -> frozenset:
    with open(path, encoding="utf-8") as fh:
        return frozenset(FeatureToken.parse(line) for line in fh.read().splitlines() if line)
