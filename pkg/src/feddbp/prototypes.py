"""Per-class prototype tables and Fisher importance score tables."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .errors import DimensionError, ProtocolError


class PrototypeKind(Enum):
    LOCAL = 0
    GLOBAL = 1
    PERSONALIZED = 2


def _bits_equal(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True, eq=False)
class PrototypeSet:
    """``vectors`` is [C, d_z]; rows where ``present`` is False carry no meaning."""

    vectors: np.ndarray
    present: np.ndarray
    kind: PrototypeKind = PrototypeKind.LOCAL

    def __post_init__(self):
        vec = np.array(self.vectors, dtype=np.float64)
        present = np.array(self.present, dtype=bool)
        if vec.ndim != 2 or present.shape != (vec.shape[0],):
            raise DimensionError(f"prototype table {vec.shape} vs coverage {present.shape}")
        vec[~present] = 0.0
        if not np.all(np.isfinite(vec)):
            raise ProtocolError("prototype table holds non-finite values")
        vec.setflags(write=False)
        present.setflags(write=False)
        object.__setattr__(self, "vectors", vec)
        object.__setattr__(self, "present", present)

    @classmethod
    def from_dict(cls, rows: dict, num_classes: int, d_z: int, kind=PrototypeKind.LOCAL):
        vec = np.zeros((num_classes, d_z))
        present = np.zeros(num_classes, dtype=bool)
        for c, v in rows.items():
            v = np.asarray(v, dtype=np.float64)
            if v.shape != (d_z,):
                raise DimensionError(f"prototype for class {c} has shape {v.shape}, expected ({d_z},)")
            vec[c] = v
            present[c] = True
        return cls(vec, present, kind)

    @property
    def num_classes(self) -> int:
        return self.vectors.shape[0]

    @property
    def d_z(self) -> int:
        return self.vectors.shape[1]

    @property
    def coverage(self) -> frozenset:
        return frozenset(int(c) for c in np.flatnonzero(self.present))

    def __getitem__(self, c: int) -> np.ndarray:
        if not self.present[c]:
            raise ProtocolError(f"no prototype for class {c}")
        return self.vectors[c]

    def __contains__(self, c) -> bool:
        return 0 <= c < self.num_classes and bool(self.present[c])

    def require(self, classes) -> None:
        missing = sorted(int(c) for c in set(int(c) for c in classes) if c not in self)
        if missing:
            raise ProtocolError(f"missing prototypes for classes {missing}")

    def with_kind(self, kind: PrototypeKind) -> "PrototypeSet":
        return PrototypeSet(self.vectors, self.present, kind)

    def __eq__(self, other):
        if not isinstance(other, PrototypeSet):
            return NotImplemented
        return (self.kind == other.kind and _bits_equal(self.present, other.present)
                and _bits_equal(self.vectors, other.vectors))

    def dump_text(self) -> str:
        """One line per present class: ``<class> v0 v1 ...`` with round-trip decimals."""
        lines = []
        for c in np.flatnonzero(self.present):
            lines.append(f"{c} " + " ".join(repr(float(x)) for x in self.vectors[c]))
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def parse_text(cls, text: str, num_classes: int, d_z: int, kind=PrototypeKind.LOCAL):
        rows = {}
        for line in text.splitlines():
            if line.strip():
                head, *vals = line.split()
                rows[int(head)] = [float(v) for v in vals]
        return cls.from_dict(rows, num_classes, d_z, kind)


@dataclass(frozen=True, eq=False)
class ImportanceScores:
    """Per-class, per-channel Fisher scores [C, d_z] with the class sample counts.

    Rows with ``counts[c] == 0`` are absent rather than zero.
    """

    scores: np.ndarray
    counts: np.ndarray

    def __post_init__(self):
        s = np.array(self.scores, dtype=np.float64)
        n = np.array(self.counts, dtype=np.int64)
        if s.ndim != 2 or n.shape != (s.shape[0],):
            raise DimensionError(f"score table {s.shape} vs counts {n.shape}")
        if np.any(s < 0) or not np.all(np.isfinite(s)):
            raise ProtocolError("importance scores must be finite and non-negative")
        s[n == 0] = 0.0
        s.setflags(write=False)
        n.setflags(write=False)
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "counts", n)

    @property
    def present(self) -> np.ndarray:
        return self.counts > 0

    @property
    def coverage(self) -> frozenset:
        return frozenset(int(c) for c in np.flatnonzero(self.present))

    def row(self, c: int) -> np.ndarray:
        if self.counts[c] == 0:
            raise ProtocolError(f"no importance scores for class {c}")
        return self.scores[c]

    def __eq__(self, other):
        if not isinstance(other, ImportanceScores):
            return NotImplemented
        return _bits_equal(self.scores, other.scores) and _bits_equal(self.counts, other.counts)
