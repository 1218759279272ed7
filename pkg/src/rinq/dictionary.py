"""Fingerprint dictionaries: parameter grid, generation, SVD compression, matching."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor, ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import container
from .evaluation import QuantitativeMap
from .seqsim import AcquisitionSchedule, ParameterError, ParameterPair, simulate_batch

log = logging.getLogger(__name__)

MAGIC = b"MRFD"

# start, step, stop in ms (stop inclusive)
PUBLISHED_T1_SEGMENTS = ((10, 10, 90), (100, 20, 1000), (1040, 40, 2000), (2050, 100, 4500))
PUBLISHED_T2_SEGMENTS = (
    (2, 2, 98),
    (100, 5, 150),
    (160, 10, 300),
    (350, 50, 800),
    (900, 100, 1600),
    (1800, 200, 3000),
)


class MatchingError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    t1_segments: tuple = PUBLISHED_T1_SEGMENTS
    t2_segments: tuple = PUBLISHED_T2_SEGMENTS
    enforce_t2_le_t1: bool = False

    def to_json(self) -> dict:
        return {
            "t1_segments": [list(s) for s in self.t1_segments],
            "t2_segments": [list(s) for s in self.t2_segments],
            "enforce_t2_le_t1": self.enforce_t2_le_t1,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "GridSpec":
        return cls(
            tuple(tuple(s) for s in doc["t1_segments"]),
            tuple(tuple(s) for s in doc["t2_segments"]),
            bool(doc.get("enforce_t2_le_t1", False)),
        )


def segment_values(segments) -> np.ndarray:
    """Expand ``start:step:stop`` segments (stop inclusive) into sorted values."""
    if not segments:
        raise ParameterError("empty segment list")
    out = []
    prev_stop = -np.inf
    for start, step, stop in segments:
        if step <= 0 or start > stop:
            raise ParameterError(f"invalid segment {start}:{step}:{stop}")
        if start <= prev_stop:
            raise ParameterError("segments must be ascending and non-overlapping")
        count = int(np.floor((stop - start) / step + 1e-9)) + 1
        out.append(start + step * np.arange(count, dtype=np.float64))
        prev_stop = stop
    return np.concatenate(out)


def build_grid(spec: GridSpec = GridSpec()) -> np.ndarray:
    """All (T1, T2) pairs of the grid as an ``(N, 2)`` array, T1-major."""
    t1 = segment_values(spec.t1_segments)
    t2 = segment_values(spec.t2_segments)
    grid = np.stack(np.meshgrid(t1, t2, indexing="ij"), axis=-1).reshape(-1, 2)
    if spec.enforce_t2_le_t1:
        grid = grid[grid[:, 1] <= grid[:, 0]]
    return grid


@dataclass
class CompressionBasis:
    basis: np.ndarray  # (r, n_reps) complex, orthonormal rows
    singular_values: np.ndarray

    @property
    def rank(self) -> int:
        return self.basis.shape[0]

    def energy_fraction(self, rank: int | None = None) -> float:
        r = self.rank if rank is None else rank
        s2 = self.singular_values**2
        return float(s2[:r].sum() / s2.sum())


@dataclass
class Dictionary:
    entries: np.ndarray  # (N, n_reps) complex, unit-norm rows
    params: np.ndarray  # (N, 2): t1_ms, t2_ms
    schedule_fingerprint: str
    grid_spec: dict | None = None
    compression: CompressionBasis | None = None
    compressed: np.ndarray | None = field(default=None, repr=False)
    meta: dict = field(default_factory=dict)

    @property
    def n_entries(self) -> int:
        return self.entries.shape[0]

    @property
    def n_reps(self) -> int:
        return self.entries.shape[1]

    def pair(self, index: int) -> ParameterPair:
        return ParameterPair(float(self.params[index, 0]), float(self.params[index, 1]))

    def save(self, path) -> None:
        header = {
            "kind": "dictionary",
            "grid_spec": self.grid_spec,
            "schedule_fingerprint": self.schedule_fingerprint,
            "n_reps": self.n_reps,
            "N": self.n_entries,
            "dtype": "float32-split-complex",
            "compression_rank": None if self.compression is None else self.compression.rank,
            "meta": self.meta,
        }
        planes = {
            "t1_ms": self.params[:, 0],
            "t2_ms": self.params[:, 1],
            "re": self.entries.real,
            "im": self.entries.imag,
        }
        if self.compression is not None:
            planes["basis_re"] = self.compression.basis.real
            planes["basis_im"] = self.compression.basis.imag
            planes["singular_values"] = self.compression.singular_values
        container.write_container(path, MAGIC, header, planes)

    @classmethod
    def load(cls, path) -> "Dictionary":
        header, planes = container.read_container(path, MAGIC)
        entries = planes["re"].astype(np.float64) + 1j * planes["im"].astype(np.float64)
        entries /= np.linalg.norm(entries, axis=1, keepdims=True)
        d = cls(
            entries,
            np.stack([planes["t1_ms"], planes["t2_ms"]], axis=1).astype(np.float64),
            header["schedule_fingerprint"],
            header.get("grid_spec"),
            meta=header.get("meta", {}),
        )
        if header.get("compression_rank"):
            basis = planes["basis_re"].astype(np.float64) + 1j * planes["basis_im"].astype(np.float64)
            # float32 storage breaks orthonormality at ~1e-7; restore it
            q, r = np.linalg.qr(basis.T)
            basis = (q * np.sign(np.diag(r)).conj()).T
            attach_compression(d, CompressionBasis(basis, planes["singular_values"].astype(np.float64)))
        return d


def _sim_chunk(args):
    t1, t2, schedule, K = args
    return simulate_batch(t1, t2, schedule, K)


def generate_dictionary(
    grid: np.ndarray,
    schedule: AcquisitionSchedule,
    K: int | None = None,
    workers: int = 1,
    grid_spec: GridSpec | None = None,
) -> Dictionary:
    grid = np.asarray(grid, dtype=np.float64).reshape(-1, 2)
    if grid.shape[0] == 0:
        raise ParameterError("empty grid")
    if workers > 1:
        bounds = np.linspace(0, grid.shape[0], workers * 4 + 1).astype(int)
        jobs = [(grid[a:b, 0], grid[a:b, 1], schedule, K) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]
        with ProcessPoolExecutor(workers) as pool:
            entries = np.concatenate(list(pool.map(_sim_chunk, jobs)))
    else:
        entries = simulate_batch(grid[:, 0], grid[:, 1], schedule, K)
    norms = np.linalg.norm(entries, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ParameterError("schedule produces an all-zero fingerprint")
    return Dictionary(
        entries / norms,
        grid.copy(),
        schedule.fingerprint(),
        None if grid_spec is None else grid_spec.to_json(),
    )


def attach_compression(d: Dictionary, basis: CompressionBasis) -> None:
    comp = d.entries @ basis.basis.conj().T
    # renormalise so compressed scores stay comparable across entries
    comp /= np.linalg.norm(comp, axis=1, keepdims=True)
    d.compression = basis
    d.compressed = comp


def compress_svd(d: Dictionary, rank: int = 50) -> tuple[CompressionBasis, np.ndarray]:
    """Truncated SVD in time; attaches the basis to ``d`` and returns it with ``entries @ basis^H``."""
    if not 1 <= rank <= min(d.entries.shape):
        raise ParameterError(f"rank {rank} outside [1, {min(d.entries.shape)}]")
    _, s, vh = np.linalg.svd(d.entries, full_matrices=False)
    basis = CompressionBasis(vh[:rank].copy(), s)
    log.info("SVD rank %d keeps %.8f of dictionary energy", rank, basis.energy_fraction())
    attach_compression(d, basis)
    return basis, d.entries @ basis.basis.conj().T


def project(signal: np.ndarray, basis: CompressionBasis) -> np.ndarray:
    signal = np.asarray(signal)
    if signal.shape[-1] != basis.basis.shape[1]:
        raise ValueError(f"signal length {signal.shape[-1]} != basis length {basis.basis.shape[1]}")
    return signal @ basis.basis.conj().T


def _representation(queries: np.ndarray, d: Dictionary) -> np.ndarray:
    n = queries.shape[-1]
    if n == d.n_reps:
        return d.entries
    if d.compressed is not None and n == d.compression.rank:
        return d.compressed
    raise ValueError(f"query length {n} matches neither the dictionary ({d.n_reps}) nor its compression")


def match_batch(queries: np.ndarray, d: Dictionary, chunk: int = 2048, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Best entry index and normalised correlation for each row of ``queries``.

    Rows with zero norm get index -1 and score nan. ``workers > 1`` spreads
    chunks over threads (the matrix products release the GIL); results do not
    depend on the worker count.
    """
    queries = np.atleast_2d(np.asarray(queries))
    atoms = _representation(queries, d)
    idx = np.full(queries.shape[0], -1, dtype=np.int64)
    score = np.full(queries.shape[0], np.nan)
    norms = np.linalg.norm(queries, axis=1)
    ok = np.flatnonzero(norms > 0)

    def run(lo):
        sel = ok[lo : lo + chunk]
        corr = np.abs(queries[sel].conj() @ atoms.T) / norms[sel, None]
        best = np.argmax(corr, axis=1)
        idx[sel] = best
        score[sel] = np.minimum(corr[np.arange(sel.size), best], 1.0)

    starts = range(0, ok.size, chunk)
    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            list(pool.map(run, starts))
    else:
        for lo in starts:
            run(lo)
    return idx, score


def match_template(signal: np.ndarray, d: Dictionary) -> tuple[int, ParameterPair, float]:
    signal = np.asarray(signal)
    if not np.linalg.norm(signal) > 0:
        raise MatchingError("cannot match a zero-norm signal")
    idx, score = match_batch(signal[None], d)
    return int(idx[0]), d.pair(int(idx[0])), float(score[0])


def match_map(stack, d: Dictionary, mask: np.ndarray | None = None, compressed: bool = False,
              workers: int = 1) -> QuantitativeMap:
    """Per-pixel template matching over ``mask``; unmatchable pixels become invalid."""
    signals = stack.signals
    H, W, n = signals.shape
    mask = np.ones((H, W), bool) if mask is None else np.asarray(mask, bool)
    if mask.shape != (H, W):
        raise ValueError("mask does not match stack dimensions")
    flat = signals.reshape(H * W, n)[mask.ravel()]
    if compressed:
        if d.compression is None:
            raise ValueError("dictionary carries no compression basis")
        flat = project(flat, d.compression)
    idx, _ = match_batch(flat, d, workers=workers)
    t1 = np.zeros(H * W)
    t2 = np.zeros(H * W)
    valid = np.zeros(H * W, bool)
    pos = np.flatnonzero(mask.ravel())
    good = idx >= 0
    t1[pos[good]] = d.params[idx[good], 0]
    t2[pos[good]] = d.params[idx[good], 1]
    valid[pos[good]] = True
    return QuantitativeMap(t1.reshape(H, W), t2.reshape(H, W), valid.reshape(H, W), "matched")
