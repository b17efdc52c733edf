"""Synthetic episode generation and the on-disk episode format.

Generator
---------
Classes (background included, as class 0) live on the unit sphere as small
bundles of mode directions: each class draws one center direction uniformly
and places its ``modes_per_class`` modes at a fixed angular offset
(:data:`CLASS_MODE_SPREAD`) around that center, so a class is a coherent
region with substructure rather than a union of unrelated caps. Support
points are sampled around the support modes; query points are sampled around
query modes, which are the support modes rotated by ``shift`` radians inside
a random 2-plane. ``noise`` is the angular standard deviation of points
around their mode, so shift=0 makes query and support distributions
identical and growing shift moves the query set away, which is exactly the
regime hub mining is supposed to exploit.

The draw order depends only on the layout fields (n_way, n_shot, n_query,
points_per_cloud, dim, modes_per_class), never on shift or noise values, so
runs that differ only in those knobs stay paired point for point.

File format (version 1)
-----------------------
A JSON object with fields:

- ``schema``: the literal string "hubseg-episode"
- ``version``: integer format version (currently 1)
- ``n_way``, ``n_shot``, ``n_query``, ``dim``: episode layout
- ``support``: list of ``n_way`` lists of ``n_shot`` cloud records
- ``query``: list of ``n_query`` cloud records

A cloud record has ``points`` (row count), ``dim`` (column count),
``normalized`` (bool), ``features`` (row-major list of C99 hex float
strings, exactly points * dim of them) and ``labels`` (list of ints).
Hex encoding makes the round-trip bit-exact for every finite double.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass

import numpy as np

from .core import (
    ClassMask,
    Episode,
    FeatureMatrix,
    LabeledCloud,
    SeededRng,
    validate_episode,
)

SCHEMA_NAME = "hubseg-episode"
SCHEMA_VERSION = 1

# Angular offset (radians) of a class's modes from the class center. Intra-
# class variation should be small next to inter-class distances, which are
# uniform on the sphere.
CLASS_MODE_SPREAD = 0.20


class EpisodeFormatError(ValueError):
    """The file is not a readable episode record."""


class SchemaVersionError(EpisodeFormatError):
    """The file is an episode record from an unsupported format version."""


@dataclass(frozen=True)
class EpisodeConfig:
    """Layout and geometry of one synthetic episode family."""

    n_way: int = 1
    n_shot: int = 1
    n_query: int = 1
    points_per_cloud: int = 128
    dim: int = 16
    modes_per_class: int = 3
    shift: float = 0.0
    noise: float = 0.1
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_way < 1:
            raise ValueError("n_way must be at least 1")
        if self.n_shot < 1:
            raise ValueError("n_shot must be at least 1")
        if self.n_query < 1:
            raise ValueError("n_query must be at least 1")
        if self.points_per_cloud < 2 * (self.n_way + 1):
            raise ValueError(
                "points_per_cloud must be at least 2 * (n_way + 1) so every "
                "cloud can hold some of each class"
            )
        if self.dim < 3:
            raise ValueError("dim must be at least 3")
        if self.modes_per_class < 1:
            raise ValueError("modes_per_class must be at least 1")
        if self.shift < 0:
            raise ValueError("shift must be non-negative")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")


def _unit_rows(g: np.random.Generator, n: int, dim: int) -> np.ndarray:
    m = g.standard_normal((n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def _orthogonal_unit(g: np.random.Generator, modes: np.ndarray) -> np.ndarray:
    """One random unit direction orthogonal to each given unit row."""
    v = g.standard_normal(modes.shape)
    v -= (v * modes).sum(axis=1, keepdims=True) * modes
    norms = np.linalg.norm(v, axis=1)
    # A zero projection is a measure-zero event; fall back to a fixed basis
    # vector so the draw count stays independent of the values drawn.
    for i in np.flatnonzero(norms < 1e-12):
        e = np.zeros(modes.shape[1])
        e[int(np.argmin(np.abs(modes[i])))] = 1.0
        e -= (e @ modes[i]) * modes[i]
        v[i] = e
        norms[i] = np.linalg.norm(e)
    return v / norms[:, None]


def _sample_around(
    g: np.random.Generator, modes: np.ndarray, n: int, noise: float
) -> np.ndarray:
    """n points at N(0, noise) angular distance from randomly chosen modes."""
    pick = g.integers(0, modes.shape[0], size=n)
    theta = g.standard_normal(n) * noise
    chosen = modes[pick]
    w = _orthogonal_unit(g, chosen)
    pts = np.cos(theta)[:, None] * chosen + np.sin(theta)[:, None] * w
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def generate_synthetic_episode(cfg: EpisodeConfig, rng: SeededRng) -> Episode:
    """Sample one episode; deterministic in (cfg, rng).

    Support clouds for class c mix ceil(T/2) class-c points with floor(T/2)
    background points. Query clouds split their T points as evenly as
    possible across classes 0..C, earlier classes taking the remainder.
    """
    g = rng.generator()
    n_cls = cfg.n_way + 1
    t = cfg.points_per_cloud

    centers = _unit_rows(g, n_cls, cfg.dim)
    per_mode_center = np.repeat(centers, cfg.modes_per_class, axis=0)
    spread_tilt = _orthogonal_unit(g, per_mode_center)
    support_modes = (
        np.cos(CLASS_MODE_SPREAD) * per_mode_center
        + np.sin(CLASS_MODE_SPREAD) * spread_tilt
    )
    support_modes /= np.linalg.norm(support_modes, axis=1, keepdims=True)
    tilt = _orthogonal_unit(g, support_modes)
    query_modes = np.cos(cfg.shift) * support_modes + np.sin(cfg.shift) * tilt
    query_modes /= np.linalg.norm(query_modes, axis=1, keepdims=True)

    def modes_of(all_modes: np.ndarray, c: int) -> np.ndarray:
        lo = c * cfg.modes_per_class
        return all_modes[lo : lo + cfg.modes_per_class]

    support: list[list[LabeledCloud]] = []
    for c in range(1, cfg.n_way + 1):
        row = []
        for _ in range(cfg.n_shot):
            n_fg = t - t // 2
            n_bg = t // 2
            fg = _sample_around(g, modes_of(support_modes, c), n_fg, cfg.noise)
            bg = _sample_around(g, modes_of(support_modes, 0), n_bg, cfg.noise)
            feats = FeatureMatrix(np.vstack([fg, bg]), normalized=True)
            labels = np.concatenate([np.full(n_fg, c), np.zeros(n_bg, dtype=np.int64)])
            row.append(LabeledCloud(feats, ClassMask(labels)))
        support.append(row)

    base, rem = divmod(t, n_cls)
    query: list[LabeledCloud] = []
    for _ in range(cfg.n_query):
        parts, labels = [], []
        for c in range(n_cls):
            n_c = base + (1 if c < rem else 0)
            parts.append(_sample_around(g, modes_of(query_modes, c), n_c, cfg.noise))
            labels.append(np.full(n_c, c, dtype=np.int64))
        query.append(
            LabeledCloud(
                FeatureMatrix(np.vstack(parts), normalized=True),
                ClassMask(np.concatenate(labels)),
            )
        )
    return Episode(cfg.n_way, cfg.n_shot, tuple(tuple(r) for r in support), tuple(query))


# ---------------------------------------------------------------------------
# File I/O
# ---------------------------------------------------------------------------

def atomic_write_text(path: str, text: str) -> None:
    """Write a whole file via a temp file and rename, so readers never see
    a partial record."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", text=True)
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _encode_cloud(cloud: LabeledCloud) -> dict:
    return {
        "points": cloud.features.rows,
        "dim": cloud.features.dim,
        "normalized": cloud.features.normalized,
        "features": [v.hex() for v in cloud.features.data.ravel().tolist()],
        "labels": cloud.mask.labels.tolist(),
    }


def _decode_cloud(obj: dict, where: str) -> LabeledCloud:
    try:
        points = int(obj["points"])
        dim = int(obj["dim"])
        normalized = bool(obj["normalized"])
        raw = obj["features"]
        labels = obj["labels"]
    except (KeyError, TypeError, ValueError) as exc:
        raise EpisodeFormatError(f"{where}: missing or malformed cloud field ({exc})") from exc
    if len(raw) != points * dim:
        raise EpisodeFormatError(
            f"{where}: expected {points * dim} feature values, found {len(raw)}"
        )
    try:
        values = np.array([float.fromhex(v) for v in raw], dtype=np.float64)
    except (TypeError, ValueError) as exc:
        raise EpisodeFormatError(f"{where}: invalid hex float ({exc})") from exc
    feats = FeatureMatrix(values.reshape(points, dim), normalized=normalized)
    return LabeledCloud(feats, ClassMask(np.asarray(labels, dtype=np.int64)))


def write_episode(e: Episode, path: str) -> None:
    """Serialize a valid episode; the written record reads back bit-exact."""
    report = validate_episode(e)
    if not report.ok:
        raise ValueError("refusing to write invalid episode: " + "; ".join(report.violations))
    record = {
        "schema": SCHEMA_NAME,
        "version": SCHEMA_VERSION,
        "n_way": e.n_way,
        "n_shot": e.n_shot,
        "n_query": e.n_query,
        "dim": e.dim,
        "support": [[_encode_cloud(c) for c in row] for row in e.support],
        "query": [_encode_cloud(c) for c in e.query],
    }
    atomic_write_text(path, json.dumps(record, indent=1) + "\n")


def read_episode(path: str) -> Episode:
    """Parse an episode record, surfacing malformed input with position info.

    Raises :class:`SchemaVersionError` for recognizable records written by a
    different format version, :class:`EpisodeFormatError` for anything else
    unreadable, and a validation error when the decoded episode violates its
    own invariants (for example clouds with mismatched dimensions).
    """
    with open(path, "r") as f:
        text = f.read()
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise EpisodeFormatError(
            f"parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(obj, dict) or obj.get("schema") != SCHEMA_NAME:
        raise EpisodeFormatError("not an episode record (bad or missing schema field)")
    version = obj.get("version")
    if version != SCHEMA_VERSION:
        raise SchemaVersionError(
            f"episode format version {version!r} is not supported; this reader "
            f"understands version {SCHEMA_VERSION}"
        )
    try:
        n_way = int(obj["n_way"])
        n_shot = int(obj["n_shot"])
        support_rows = obj["support"]
        query_rows = obj["query"]
    except (KeyError, TypeError, ValueError) as exc:
        raise EpisodeFormatError(f"missing or malformed episode field ({exc})") from exc
    support = tuple(
        tuple(_decode_cloud(c, f"support[{ci}][{ki}]") for ki, c in enumerate(row))
        for ci, row in enumerate(support_rows)
    )
    query = tuple(_decode_cloud(c, f"query[{li}]") for li, c in enumerate(query_rows))
    episode = Episode(n_way, n_shot, support, query)
    report = validate_episode(episode)
    if not report.ok:
        raise EpisodeFormatError("episode fails validation: " + "; ".join(report.violations))
    return episode
