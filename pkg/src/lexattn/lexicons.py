"""Word-level lexicon parsing and the compiled per-word feature table.

Each lexicon is a UTF-8 TSV file, one ``word<TAB>v1<TAB>...<TAB>v_dims``
entry per line, ``#`` lines skipped. Compiling several lexicons produces a
table whose vectors concatenate one block per lexicon, in declaration
order; a word absent from a lexicon has exact zeros in that block, and a
word absent from all lexicons looks up to the all-zero vector.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "LexiconFeatureTable",
    "LexiconParseError",
    "LexiconSpec",
    "build_feature_table",
    "lookup",
    "minmax_scale",
    "parse_lexicon",
    "read_table",
    "write_table",
]


class LexiconParseError(ValueError):
    def __init__(self, path, line_no, message):
        super().__init__(f"{path}:{line_no}: {message}")
        self.path = str(path)
        self.line_no = line_no


@dataclass(frozen=True)
class LexiconSpec:
    """One lexicon to load: a unique name, its feature width, and its file."""

    name: str
    dims: int
    source_path: str = ""
    value_kind: str = "scalar"  # binary | scalar | categorical-multi-hot

    def __post_init__(self):
        if not self.name:
            raise ValueError("lexicon name must be non-empty")
        if self.dims < 1:
            raise ValueError(f"lexicon {self.name!r}: dims must be >= 1")


def parse_lexicon(path, spec: LexiconSpec):
    """Parse one lexicon file into ``(word -> float vector, duplicate count)``.

    Duplicate words keep the last occurrence; the number of overwrites is
    returned so callers can warn. Malformed lines raise with the line number.
    """
    entries: dict[str, np.ndarray] = {}
    duplicates = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) != 1 + spec.dims:
                raise LexiconParseError(
                    path, line_no,
                    f"expected word + {spec.dims} values, got {len(fields)} fields")
            word = fields[0]
            try:
                vec = np.array([float(v) for v in fields[1:]], dtype=np.float64)
            except ValueError:
                raise LexiconParseError(path, line_no, "non-numeric value") from None
            if word in entries:
                duplicates += 1
            entries[word] = vec
    return entries, duplicates


@dataclass
class LexiconFeatureTable:
    """Compiled word -> feature vector map with a fixed per-lexicon block layout.

    Immutable after build: stored vectors are marked read-only and lookups on
    missing words return a shared read-only zero vector, so the table is safe
    for concurrent readers.
    """

    layout: list[tuple[str, int, int]]  # (name, offset, dims)
    total_dims: int
    entries: dict[str, np.ndarray]
    members: dict[str, frozenset] | None = None
    _zero: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        running = 0
        for name, offset, dims in self.layout:
            if offset != running:
                raise ValueError(f"non-contiguous layout at {name!r}")
            running += dims
        if running != self.total_dims:
            raise ValueError("layout does not cover total_dims")
        for word, vec in self.entries.items():
            if vec.shape != (self.total_dims,):
                raise ValueError(f"entry {word!r} has wrong width {vec.shape}")
            vec.flags.writeable = False
        zero = np.zeros(self.total_dims)
        zero.flags.writeable = False
        self._zero = zero

    def lookup(self, word: str) -> np.ndarray:
        """Stored vector if present, otherwise the all-zero vector."""
        return self.entries.get(word, self._zero)

    def block(self, name: str) -> tuple[int, int]:
        for lex, offset, dims in self.layout:
            if lex == name:
                return offset, dims
        raise KeyError(name)

    def coverage(self) -> dict[str, int]:
        """Words per lexicon. Only available on tables built in-process."""
        if self.members is None:
            raise ValueError("coverage unavailable: table was loaded from a file")
        return {name: len(words) for name, words in self.members.items()}


def lookup(table: LexiconFeatureTable, word: str) -> np.ndarray:
    return table.lookup(word)


def build_feature_table(parsed) -> LexiconFeatureTable:
    """Merge ``[(LexiconSpec, entries dict), ...]`` into one feature table.

    The vector of each word in the union vocabulary concatenates the
    per-lexicon blocks in the given order, zero where the word is absent.
    """
    names = [spec.name for spec, _ in parsed]
    if len(set(names)) != len(names):
        raise ValueError(f"duplicate lexicon names in {names}")
    layout = []
    offset = 0
    for spec, _ in parsed:
        layout.append((spec.name, offset, spec.dims))
        offset += spec.dims
    total = offset
    entries: dict[str, np.ndarray] = {}
    for (spec, words), (_, off, dims) in zip(parsed, layout):
        for word, vec in words.items():
            if vec.shape != (dims,):
                raise ValueError(
                    f"lexicon {spec.name!r}: entry {word!r} has width "
                    f"{vec.shape[0]}, declared dims {dims}")
            row = entries.get(word)
            if row is None:
                row = entries[word] = np.zeros(total)
            row[off:off + dims] = vec
    members = {spec.name: frozenset(words) for spec, words in parsed}
    return LexiconFeatureTable(layout, total, entries, members)


def minmax_scale(table: LexiconFeatureTable) -> LexiconFeatureTable:
    """Min-max scale each lexicon block to [0, 1] over that lexicon's own words.

    Missing-word zeros are not observations and stay exactly zero; constant
    dimensions collapse to zero.
    """
    if table.members is None:
        raise ValueError("min-max scaling needs per-lexicon membership")
    scaled = {word: vec.copy() for word, vec in table.entries.items()}
    for name, offset, dims in table.layout:
        words = table.members[name]
        if not words:
            continue
        block = np.stack([table.entries[w][offset:offset + dims] for w in sorted(words)])
        lo = block.min(axis=0)
        span = block.max(axis=0) - lo
        for word in words:
            seg = scaled[word][offset:offset + dims]
            out = np.where(span > 0, (seg - lo) / np.where(span > 0, span, 1.0), 0.0)
            scaled[word][offset:offset + dims] = out
    return LexiconFeatureTable(list(table.layout), table.total_dims, scaled,
                               dict(table.members))


_LAYOUT_SENTINEL = "!layout"
_ENTRIES_SENTINEL = "!entries"


def write_table(path, table: LexiconFeatureTable) -> None:
    """Write a compiled table: layout header, then sorted word entries.

    Values are serialized with ``repr`` so a round trip through
    ``read_table`` reproduces every float bit-for-bit.
    """
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(_LAYOUT_SENTINEL + "\n")
        for name, offset, dims in table.layout:
            fh.write(f"{name}\t{offset}\t{dims}\n")
        fh.write(_ENTRIES_SENTINEL + "\n")
        for word in sorted(table.entries):
            values = "\t".join(repr(v) for v in table.entries[word].tolist())
            fh.write(f"{word}\t{values}\n" if values else f"{word}\n")
    os.replace(tmp, path)


def read_table(path) -> LexiconFeatureTable:
    """Read a table written by :func:`write_table`."""
    layout: list[tuple[str, int, int]] = []
    entries: dict[str, np.ndarray] = {}
    section = None
    total = 0
    with open(path, encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, 1):
            line = raw.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            if line == _LAYOUT_SENTINEL:
                section = "layout"
                continue
            if line == _ENTRIES_SENTINEL:
                section = "entries"
                total = sum(d for _, _, d in layout)
                continue
            if section == "layout":
                fields = line.split("\t")
                if len(fields) != 3:
                    raise LexiconParseError(path, line_no, "bad layout line")
                try:
                    layout.append((fields[0], int(fields[1]), int(fields[2])))
                except ValueError:
                    raise LexiconParseError(path, line_no, "bad layout line") from None
            elif section == "entries":
                fields = line.split("\t")
                if len(fields) != 1 + total:
                    raise LexiconParseError(
                        path, line_no,
                        f"expected word + {total} values, got {len(fields)} fields")
                try:
                    entries[fields[0]] = np.array(
                        [float(v) for v in fields[1:]], dtype=np.float64)
                except ValueError:
                    raise LexiconParseError(path, line_no, "non-numeric value") from None
            else:
                raise LexiconParseError(path, line_no, "content before !layout sentinel")
    if section != "entries":
        raise LexiconParseError(path, 0, "missing !layout/!entries sections")
    return LexiconFeatureTable(layout, total, entries, members=None)
