"""Shared domain types: feature matrices, class masks, episodes, seeded RNG.

Everything downstream works on unit-normalized rows under cosine similarity,
so the dot product of two rows is their similarity. Episodes are immutable
containers; structural problems (wrong list lengths) fail at construction,
while content problems (bad labels, dimension mismatch, non-finite values)
are reported by :func:`validate_episode` so that invalid data can still be
represented and inspected.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

# Tolerance for the "rows are unit length" check on flagged matrices.
UNIT_NORM_ATOL = 1e-9


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    """An (n, D) float64 matrix of embedded points, one row per point.

    ``normalized`` marks matrices whose rows are unit length; graph and
    scoring operations require the flag because they treat dot products as
    cosine similarities. The underlying array is copied and made read-only.
    """

    data: np.ndarray
    normalized: bool = False

    def __post_init__(self) -> None:
        arr = np.array(self.data, dtype=np.float64, copy=True)
        if arr.ndim != 2:
            raise ValueError(f"feature data must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "data", _readonly(arr))

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]

    def violations(self) -> list[str]:
        out = []
        if self.rows < 1:
            out.append("feature matrix has no rows")
        if self.dim < 1:
            out.append("feature matrix has no columns")
        if not np.all(np.isfinite(self.data)):
            out.append("feature matrix has non-finite entries")
        elif self.normalized and self.data.size:
            norms = np.linalg.norm(self.data, axis=1)
            if not np.all(np.abs(norms - 1.0) <= UNIT_NORM_ATOL):
                out.append("normalized flag set but rows are not unit length")
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (
            self.normalized == other.normalized
            and self.data.shape == other.data.shape
            and bool(np.array_equal(self.data, other.data))
        )


@dataclass(frozen=True, eq=False)
class ClassMask:
    """Per-point integer class ids; 0 is background, 1..C are foreground."""

    labels: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.labels, dtype=np.int64, copy=True)
        if arr.ndim != 1:
            raise ValueError(f"labels must be 1-D, got shape {arr.shape}")
        object.__setattr__(self, "labels", _readonly(arr))

    @property
    def size(self) -> int:
        return self.labels.shape[0]

    def binary(self, class_id: int) -> np.ndarray:
        """Boolean mask of the points carrying ``class_id``."""
        return self.labels == class_id

    def violations(self, n_points: int | None = None, n_way: int | None = None) -> list[str]:
        out = []
        if n_points is not None and self.size != n_points:
            out.append(f"mask length {self.size} does not match point count {n_points}")
        if self.size and self.labels.min() < 0:
            out.append("negative class id in mask")
        if n_way is not None and self.size and self.labels.max() > n_way:
            out.append(f"class id {int(self.labels.max())} exceeds n_way {n_way}")
        return out

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ClassMask):
            return NotImplemented
        return bool(np.array_equal(self.labels, other.labels))


@dataclass(frozen=True)
class LabeledCloud:
    """A point cloud paired with its ground-truth mask."""

    features: FeatureMatrix
    mask: ClassMask


@dataclass(frozen=True)
class Episode:
    """One few-shot task: C x K labeled support clouds plus L query clouds.

    ``support[c][k]`` is the k-th shot for foreground class ``c + 1``; its
    mask mixes that class with background (class 0). Construction enforces
    only the container shape; content is checked by :func:`validate_episode`.
    """

    n_way: int
    n_shot: int
    support: tuple[tuple[LabeledCloud, ...], ...]
    query: tuple[LabeledCloud, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "support", tuple(tuple(row) for row in self.support))
        object.__setattr__(self, "query", tuple(self.query))
        if self.n_way < 1 or self.n_shot < 1:
            raise ValueError("n_way and n_shot must be positive")
        if len(self.support) != self.n_way:
            raise ValueError(f"expected {self.n_way} support classes, got {len(self.support)}")
        for row in self.support:
            if len(row) != self.n_shot:
                raise ValueError(f"expected {self.n_shot} shots per class, got {len(row)}")
        if not self.query:
            raise ValueError("episode has no query clouds")

    @property
    def n_query(self) -> int:
        return len(self.query)

    @property
    def dim(self) -> int:
        return self.support[0][0].features.dim

    def clouds(self) -> Iterable[tuple[str, LabeledCloud]]:
        """All clouds with human-readable location tags, support first."""
        for ci, row in enumerate(self.support):
            for ki, cloud in enumerate(row):
                yield f"support[class {ci + 1}][shot {ki}]", cloud
        for li, cloud in enumerate(self.query):
            yield f"query[{li}]", cloud


@dataclass(frozen=True)
class ValidationReport:
    ok: bool
    violations: tuple[str, ...]


def validate_episode(e: Episode) -> ValidationReport:
    """Check every episode invariant and report violations as data.

    Covers member invariants (finite features, unit rows where flagged),
    mask/feature length agreement, label range, a shared feature dimension
    across all clouds, and at least one point of class c in every class-c
    support cloud.
    """
    out: list[str] = []
    dims = set()
    for tag, cloud in e.clouds():
        for v in cloud.features.violations():
            out.append(f"{tag}: {v}")
        for v in cloud.mask.violations(cloud.features.rows, e.n_way):
            out.append(f"{tag}: {v}")
        dims.add(cloud.features.dim)
    if len(dims) > 1:
        out.append(f"dimension mismatch across clouds: {sorted(dims)}")
    for ci, row in enumerate(e.support):
        for ki, cloud in enumerate(row):
            if not np.any(cloud.mask.binary(ci + 1)):
                out.append(
                    f"support[class {ci + 1}][shot {ki}]: empty foreground support"
                )
    return ValidationReport(ok=not out, violations=tuple(out))


def normalize_rows(f: FeatureMatrix) -> FeatureMatrix:
    """Scale every row to unit Euclidean length.

    Idempotent up to floating-point rounding. A row with zero norm has no
    direction and is rejected.
    """
    norms = np.linalg.norm(f.data, axis=1)
    if np.any(norms == 0.0):
        bad = int(np.flatnonzero(norms == 0.0)[0])
        raise ValueError(f"degenerate point: row {bad} has zero norm")
    return FeatureMatrix(f.data / norms[:, None], normalized=True)


@dataclass(frozen=True)
class SeededRng:
    """Deterministic RNG handle: (master_seed, stream_id) -> generator.

    Each call to :meth:`generator` returns a fresh generator seeded from the
    pair, so the same handle always replays the same stream and distinct
    stream ids give statistically independent streams.
    """

    master_seed: int
    stream_id: int = 0

    def __post_init__(self) -> None:
        for name in ("master_seed", "stream_id"):
            v = getattr(self, name)
            if not 0 <= v < 2**64:
                raise ValueError(f"{name} must be an unsigned 64-bit integer, got {v}")

    def generator(self) -> np.random.Generator:
        return np.random.default_rng([self.master_seed, self.stream_id])

    def stream(self, stream_id: int) -> "SeededRng":
        return SeededRng(self.master_seed, stream_id)


# ---------------------------------------------------------------------------
# Episode concatenation order, shared by the graph and harness modules.
# Support points: class-major (class 1..C), then shot index, then row order.
# Query points: query-cloud order, then row order.
# ---------------------------------------------------------------------------

def support_points(e: Episode) -> tuple[FeatureMatrix, np.ndarray, np.ndarray]:
    """Concatenate all support clouds.

    Returns (features, labels, shot_ids) where ``shot_ids[i]`` is the shot
    index of the cloud that contributed row i. Row order is documented above
    and relied on by hub indices everywhere downstream.
    """
    feats, labels, shots = [], [], []
    normalized = True
    for row in e.support:
        for ki, cloud in enumerate(row):
            feats.append(cloud.features.data)
            labels.append(cloud.mask.labels)
            shots.append(np.full(cloud.features.rows, ki, dtype=np.int64))
            normalized = normalized and cloud.features.normalized
    return (
        FeatureMatrix(np.vstack(feats), normalized=normalized),
        np.concatenate(labels),
        np.concatenate(shots),
    )


def query_points(e: Episode) -> tuple[FeatureMatrix, np.ndarray]:
    """Concatenate all query clouds; returns (features, labels)."""
    feats = [cloud.features.data for cloud in e.query]
    labels = [cloud.mask.labels for cloud in e.query]
    normalized = all(cloud.features.normalized for cloud in e.query)
    return FeatureMatrix(np.vstack(feats), normalized=normalized), np.concatenate(labels)
