"""Speech-to-unit processing.

Turns two continuous feature streams (a coarse contextual stream and a finer
phonetic stream) into one discrete unit sequence:

    quantize both streams -> align by frame-interval ratio -> merge repeats
    -> decorate with CLS/SEP specials

plus the binary/JSONL file formats these stages exchange.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels

# Special ids sit directly above a codebook of size K, in the order below.
# The contextual stream uses CLS/SEP/MASK/PAD, the phonetic stream PAD_PHON;
# both streams reserve the full block so vocab size is always K + N_SPECIALS.
CLS_OFFSET = 0
SEP_OFFSET = 1
MASK_OFFSET = 2
PAD_OFFSET = 3
PAD_PHON_OFFSET = 4
N_SPECIALS = 5


class InvalidInputError(ValueError):
    """Raised when an operation's input violates its preconditions."""


class UnitFileError(ValueError):
    """Raised when a unit file cannot be parsed."""


@dataclass
class FeatureStream:
    """Frame-level continuous representations at a fixed frame interval."""

    frames: np.ndarray
    frame_interval_ms: float
    source_tag: str = ""

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float64)
        if self.frames.ndim != 2 or self.frames.shape[0] < 1 or self.frames.shape[1] < 1:
            raise InvalidInputError("frames must be a (n_frames>=1, dim>=1) matrix")
        if not np.all(np.isfinite(self.frames)):
            raise InvalidInputError("frames contain non-finite values")
        if not (self.frame_interval_ms > 0):
            raise InvalidInputError("frame_interval_ms must be positive")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


@dataclass
class Codebook:
    """K centroid vectors; quantization target and reconstruction source."""

    centroids: np.ndarray

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise InvalidInputError("centroids must be a (K>=1, dim) matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise InvalidInputError("centroids contain non-finite values")

    @property
    def size(self) -> int:
        return self.centroids.shape[0]

    @property
    def dim(self) -> int:
        return self.centroids.shape[1]


@dataclass
class AlignedUnits:
    """Two id sequences normalized so len(phonetic) == ratio_r * len(contextual)."""

    contextual: np.ndarray
    phonetic: np.ndarray
    ratio_r: int

    def __post_init__(self):
        self.contextual = np.asarray(self.contextual, dtype=np.int64)
        self.phonetic = np.asarray(self.phonetic, dtype=np.int64)
        if self.ratio_r < 1:
            raise InvalidInputError("ratio_r must be a positive integer")
        if len(self.phonetic) != self.ratio_r * len(self.contextual):
            raise InvalidInputError("phonetic length must equal ratio_r * contextual length")


@dataclass
class Specials:
    """Resolved special ids for one stream's codebook size."""

    cls: int
    sep: int
    mask: int
    pad: int
    pad_phon: int

    @classmethod
    def for_codebook(cls, k: int) -> "Specials":
        return cls(k + CLS_OFFSET, k + SEP_OFFSET, k + MASK_OFFSET,
                   k + PAD_OFFSET, k + PAD_PHON_OFFSET)


@dataclass
class UnitSequence:
    """Merged contextual units, each owning a group of phonetic units.

    ``ctx_ids`` includes CLS/SEP once finalized; ``phon_groups`` has exactly
    one nonempty group per contextual position. ``k_ctx``/``k_phon`` are the
    codebook sizes, so specials are the ids >= k for the respective stream.
    """

    utt_id: str
    ctx_ids: np.ndarray
    phon_groups: list[np.ndarray]
    k_ctx: int
    k_phon: int

    def __post_init__(self):
        self.ctx_ids = np.asarray(self.ctx_ids, dtype=np.int64)
        self.phon_groups = [np.asarray(g, dtype=np.int64) for g in self.phon_groups]

    @property
    def ctx_specials(self) -> Specials:
        return Specials.for_codebook(self.k_ctx)

    @property
    def phon_specials(self) -> Specials:
        return Specials.for_codebook(self.k_phon)

    @property
    def n_positions(self) -> int:
        return len(self.ctx_ids)

    @property
    def finalized(self) -> bool:
        return (len(self.ctx_ids) >= 2
                and self.ctx_ids[0] == self.ctx_specials.cls
                and self.ctx_ids[-1] == self.ctx_specials.sep)

    def special_mask(self) -> np.ndarray:
        """Boolean mask of contextual positions holding special ids."""
        return self.ctx_ids >= self.k_ctx

    def flat_phonetic(self) -> tuple[np.ndarray, np.ndarray]:
        """Concatenated phonetic ids and (T, 2) [start, end) group spans."""
        spans = np.empty((len(self.phon_groups), 2), dtype=np.int64)
        pos = 0
        for i, g in enumerate(self.phon_groups):
            spans[i, 0] = pos
            pos += len(g)
            spans[i, 1] = pos
        if self.phon_groups:
            flat = np.concatenate(self.phon_groups)
        else:
            flat = np.empty(0, dtype=np.int64)
        return flat, spans

    def validate(self) -> None:
        """Check the structural invariants; raises InvalidInputError."""
        if len(self.ctx_ids) != len(self.phon_groups):
            raise InvalidInputError("one phonetic group per contextual id required")
        sp = self.ctx_specials
        pad_phon = self.phon_specials.pad_phon
        for i, g in enumerate(self.phon_groups):
            if len(g) == 0:
                raise InvalidInputError(f"empty phonetic group at position {i}")
            if np.any(g[1:] == g[:-1]):
                raise InvalidInputError(f"adjacent repeated phonetic ids at position {i}")
            if self.ctx_ids[i] in (sp.cls, sp.sep):
                if len(g) != 1 or g[0] != pad_phon:
                    raise InvalidInputError("CLS/SEP groups must be exactly [PAD_phon]")
        ids = self.ctx_ids
        nonspecial = ids < self.k_ctx
        dup = (ids[1:] == ids[:-1]) & nonspecial[1:] & nonspecial[:-1]
        if np.any(dup):
            raise InvalidInputError("adjacent repeated non-special contextual ids")


# ---------------------------------------------------------------------------
# k-means codebook training
# ---------------------------------------------------------------------------

def _kmeans_plus_plus(frames: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = frames.shape[0]
    centroids = np.empty((k, frames.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = frames[first]
    closest = np.einsum("nd,nd->n", frames - centroids[0], frames - centroids[0])
    for c in range(1, k):
        total = closest.sum()
        if total <= 0.0:
            # all remaining mass on duplicated points; pick uniformly
            idx = int(rng.integers(n))
        else:
            idx = int(np.searchsorted(np.cumsum(closest), rng.random() * total))
            idx = min(idx, n - 1)
        centroids[c] = frames[idx]
        d = np.einsum("nd,nd->n", frames - centroids[c], frames - centroids[c])
        closest = np.minimum(closest, d)
    return centroids


def _lloyd(frames: np.ndarray, centroids: np.ndarray, max_iters: int):
    k = centroids.shape[0]
    ids, sq = kernels.nearest_centroid(frames, centroids)
    inertia = float(sq.sum())
    for _ in range(max_iters):
        counts = np.bincount(ids, minlength=k)
        new_centroids = centroids.copy()
        for d in range(frames.shape[1]):
            sums = np.bincount(ids, weights=frames[:, d], minlength=k)
            nonzero = counts > 0
            new_centroids[nonzero, d] = sums[nonzero] / counts[nonzero]
        new_ids, new_sq = kernels.nearest_centroid(frames, new_centroids)
        centroids = new_centroids
        inertia = float(new_sq.sum())
        if np.array_equal(new_ids, ids):
            ids = new_ids
            break
        ids = new_ids
    return centroids, ids, inertia


def train_codebook(features: Iterable[FeatureStream], k: int, seed: int,
                   max_iters: int = 100, n_init: int = 8) -> Codebook:
    """Train a K-entry codebook with restarted k-means++ / Lloyd iterations.

    Deterministic for a fixed seed; the best of ``n_init`` restarts by final
    inertia is kept.
    """
    streams = list(features)
    if not streams:
        raise InvalidInputError("no feature streams given")
    dim = streams[0].dim
    for s in streams:
        if s.dim != dim:
            raise InvalidInputError("all streams must share the feature dimension")
    frames = np.concatenate([s.frames for s in streams], axis=0)
    if not np.all(np.isfinite(frames)):
        raise InvalidInputError("features contain non-finite values")
    if k < 1:
        raise InvalidInputError("k must be >= 1")
    if frames.shape[0] < k:
        raise InvalidInputError(f"need at least {k} frames to train {k} centroids, "
                                f"got {frames.shape[0]}")

    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = _kmeans_plus_plus(frames, k, rng)
        centroids, _, inertia = _lloyd(frames, init, max_iters)
        if best is None or inertia < best[1]:
            best = (centroids, inertia)
    return Codebook(best[0])


def kmeans_inertia(features: Iterable[FeatureStream], codebook: Codebook) -> float:
    """Sum of squared distances from each frame to its assigned centroid."""
    frames = np.concatenate([s.frames for s in features], axis=0)
    _, sq = kernels.nearest_centroid(frames, codebook.centroids)
    return float(sq.sum())


def quantize(stream: FeatureStream, codebook: Codebook) -> np.ndarray:
    """Map each frame to its nearest centroid index (ties: lowest index)."""
    if stream.dim != codebook.dim:
        raise InvalidInputError(
            f"stream dim {stream.dim} != codebook dim {codebook.dim}")
    ids, _ = kernels.nearest_centroid(stream.frames, codebook.centroids)
    return ids


# ---------------------------------------------------------------------------
# alignment and merging
# ---------------------------------------------------------------------------

def align(ctx_units: Sequence[int], phon_units: Sequence[int],
          ctx_interval_ms: float, phon_interval_ms: float) -> AlignedUnits:
    """Pair the two unit streams by their frame-interval ratio.

    The contextual interval must be an integer multiple r of the phonetic
    one. The phonetic sequence is normalized to exactly r * len(ctx) ids:
    too short -> repeat its final id, too long -> truncate.
    """
    ctx = np.asarray(ctx_units, dtype=np.int64)
    phon = np.asarray(phon_units, dtype=np.int64)
    if len(ctx) == 0 or len(phon) == 0:
        raise InvalidInputError("empty unit sequence")
    if ctx_interval_ms <= 0 or phon_interval_ms <= 0:
        raise InvalidInputError("intervals must be positive")
    ratio = ctx_interval_ms / phon_interval_ms
    r = int(round(ratio))
    if r < 1 or abs(ratio - r) > 1e-6 * r:
        raise InvalidInputError(
            f"contextual/phonetic interval ratio {ratio} is not a positive integer")
    target = r * len(ctx)
    if len(phon) < target:
        phon = np.concatenate([phon, np.full(target - len(phon), phon[-1])])
    elif len(phon) > target:
        phon = phon[:target]
    return AlignedUnits(ctx, phon, r)


def merge(aligned: AlignedUnits) -> UnitSequence:
    """Collapse sequential repetitions.

    Adjacent equal contextual ids merge into a single unit whose phonetic
    group spans all their phonetic ids; within each resulting group adjacent
    equal phonetic ids collapse, but never across group boundaries.
    """
    ctx = aligned.contextual
    phon = aligned.phonetic
    r = aligned.ratio_r
    merged_ctx: list[int] = []
    groups: list[np.ndarray] = []
    i = 0
    while i < len(ctx):
        j = i
        while j + 1 < len(ctx) and ctx[j + 1] == ctx[i]:
            j += 1
        span = phon[i * r:(j + 1) * r]
        keep = np.ones(len(span), dtype=bool)
        keep[1:] = span[1:] != span[:-1]
        merged_ctx.append(int(ctx[i]))
        groups.append(span[keep])
        i = j + 1
    return UnitSequence("", np.asarray(merged_ctx, dtype=np.int64), groups, 0, 0)


def finalize_sequence(seq: UnitSequence, k_ctx: int, k_phon: int,
                      utt_id: str = "") -> UnitSequence:
    """Add CLS/SEP to the contextual ids with [PAD_phon] phonetic groups."""
    ctx_sp = Specials.for_codebook(k_ctx)
    phon_sp = Specials.for_codebook(k_phon)
    if np.any(seq.ctx_ids >= k_ctx):
        raise InvalidInputError("sequence already contains special contextual ids")
    for g in seq.phon_groups:
        if np.any(g >= k_phon):
            raise InvalidInputError("sequence already contains special phonetic ids")
    ctx = np.concatenate([[ctx_sp.cls], seq.ctx_ids, [ctx_sp.sep]])
    pad_group = np.asarray([phon_sp.pad_phon], dtype=np.int64)
    groups = [pad_group] + list(seq.phon_groups) + [pad_group.copy()]
    out = UnitSequence(utt_id or seq.utt_id, ctx, groups, k_ctx, k_phon)
    out.validate()
    return out


def unitize_pair(ctx_stream: FeatureStream, phon_stream: FeatureStream,
                 ctx_codebook: Codebook, phon_codebook: Codebook,
                 utt_id: str = "") -> UnitSequence:
    """Full pipeline: quantize both streams, align, merge, add specials."""
    ctx_units = quantize(ctx_stream, ctx_codebook)
    phon_units = quantize(phon_stream, phon_codebook)
    aligned = align(ctx_units, phon_units,
                    ctx_stream.frame_interval_ms, phon_stream.frame_interval_ms)
    merged = merge(aligned)
    return finalize_sequence(merged, ctx_codebook.size, phon_codebook.size, utt_id)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------
#
# Feature file (little-endian): magic "FEAT", u32 version=1, u32 n_frames,
# u32 dim, f32 frame_interval_ms, then n_frames*dim f32 row-major.
# Codebook file: identical layout with magic "CDBK" (interval field unused,
# written as 0).

_FEAT_MAGIC = b"FEAT"
_CDBK_MAGIC = b"CDBK"
_HEADER = struct.Struct("<4sIIIf")
FILE_VERSION = 1


def _write_matrix(path, magic: bytes, mat: np.ndarray, interval: float) -> None:
    data = np.ascontiguousarray(mat, dtype="<f4")
    with open(path, "wb") as f:
        f.write(_HEADER.pack(magic, FILE_VERSION, mat.shape[0], mat.shape[1],
                             interval))
        f.write(data.tobytes())


def _read_matrix(path, magic: bytes):
    with open(path, "rb") as f:
        raw = f.read(_HEADER.size)
        if len(raw) < _HEADER.size:
            raise UnitFileError(f"{path}: truncated header")
        got_magic, version, n, dim, interval = _HEADER.unpack(raw)
        if got_magic != magic:
            raise UnitFileError(f"{path}: bad magic {got_magic!r}, expected {magic!r}")
        if version != FILE_VERSION:
            raise UnitFileError(f"{path}: unsupported version {version}")
        body = f.read(4 * n * dim)
        if len(body) != 4 * n * dim:
            raise UnitFileError(f"{path}: truncated data section")
        extra = f.read(1)
        if extra:
            raise UnitFileError(f"{path}: trailing bytes after data section")
    mat = np.frombuffer(body, dtype="<f4").reshape(n, dim).astype(np.float64)
    return mat, float(interval)


def write_feature_file(path, stream: FeatureStream) -> None:
    _write_matrix(path, _FEAT_MAGIC, stream.frames, stream.frame_interval_ms)


def read_feature_file(path, source_tag: str = "") -> FeatureStream:
    mat, interval = _read_matrix(path, _FEAT_MAGIC)
    return FeatureStream(mat, interval, source_tag or str(path))


def write_codebook_file(path, codebook: Codebook) -> None:
    _write_matrix(path, _CDBK_MAGIC, codebook.centroids, 0.0)


def read_codebook_file(path) -> Codebook:
    mat, _ = _read_matrix(path, _CDBK_MAGIC)
    return Codebook(mat)


def write_unit_file(path, seqs: Iterable[UnitSequence], k_ctx: int, k_phon: int,
                    ratio: int) -> None:
    """JSON-lines unit file: one header object, then one object per utterance."""
    with open(path, "w", encoding="utf-8") as f:
        header = {"codebook_ctx": int(k_ctx), "codebook_phon": int(k_phon),
                  "ratio": int(ratio)}
        f.write(json.dumps(header) + "\n")
        for seq in seqs:
            rec = {"id": seq.utt_id,
                   "ctx": [int(u) for u in seq.ctx_ids],
                   "phon": [[int(u) for u in g] for g in seq.phon_groups]}
            f.write(json.dumps(rec) + "\n")


def read_unit_file(path) -> tuple[list[UnitSequence], dict]:
    """Parse a unit file; raises UnitFileError with the offending line number."""
    seqs: list[UnitSequence] = []
    with open(path, "r", encoding="utf-8") as f:
        lines = f.readlines()
    if not lines:
        raise UnitFileError(f"{path}: line 1: missing header")
    try:
        header = json.loads(lines[0])
        k_ctx = int(header["codebook_ctx"])
        k_phon = int(header["codebook_phon"])
        ratio = int(header["ratio"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
        raise UnitFileError(f"{path}: line 1: bad header ({e})") from e
    header = {"codebook_ctx": k_ctx, "codebook_phon": k_phon, "ratio": ratio}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            seq = UnitSequence(str(rec["id"]),
                               np.asarray(rec["ctx"], dtype=np.int64),
                               [np.asarray(g, dtype=np.int64) for g in rec["phon"]],
                               k_ctx, k_phon)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise UnitFileError(f"{path}: line {lineno}: {e}") from e
        if len(seq.ctx_ids) != len(seq.phon_groups):
            raise UnitFileError(
                f"{path}: line {lineno}: ctx/phon length mismatch")
        seqs.append(seq)
    return seqs, header
