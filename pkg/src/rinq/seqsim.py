"""Acquisition schedules and FISP fingerprint simulation.

Two independent simulators live here: an extended phase graph (EPG)
propagator, vectorised over many (T1, T2) pairs, and a brute-force
isochromat Bloch simulator used as its oracle.

Conventions
-----------
* ``F+ = Mx + i My``; an RF pulse of flip ``alpha`` and phase ``phi`` is the
  rotation ``Rz(phi) Rx(alpha) Rz(-phi)``.
* Each repetition is: RF pulse, readout at TE, free relaxation to TR,
  then one full cycle of gradient dephasing (EPG shift by one order).
* RF phase alternates 0/180 degrees and samples are demodulated by the
  conjugate pulse phase.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

FA_MIN_DEG = 5.0
FA_MAX_DEG = 74.0
TRUNCATION_TOL = 1e-6


class ParameterError(ValueError):
    """Raised for physically or structurally invalid inputs."""


@dataclass(frozen=True)
class ParameterPair:
    t1_ms: float
    t2_ms: float

    def __post_init__(self):
        if not (self.t1_ms > 0 and self.t2_ms > 0):
            raise ParameterError(f"relaxation times must be positive, got {self}")


@dataclass(frozen=True)
class FaLobes:
    """Sinusoidal flip-angle lobes.

    Repetition ``n`` in lobe ``l`` gets
    ``baseline_deg + amp_l * sin(pi * (n mod lobe_length) / lobe_length)``,
    with each lobe amplitude drawn uniformly from ``[amp_min_deg, amp_max_deg]``.
    """

    lobe_length: int = 250
    baseline_deg: float = FA_MIN_DEG
    amp_min_deg: float = 20.0
    amp_max_deg: float = FA_MAX_DEG - FA_MIN_DEG


@dataclass
class AcquisitionSchedule:
    fa_deg: np.ndarray
    tr_ms: np.ndarray
    te_ms: float = 2.0
    inversion: bool = True
    ti_ms: float = 20.0
    seed: int | None = None

    def __post_init__(self):
        self.fa_deg = np.asarray(self.fa_deg, dtype=np.float64)
        self.tr_ms = np.asarray(self.tr_ms, dtype=np.float64)
        if self.fa_deg.ndim != 1 or self.fa_deg.shape != self.tr_ms.shape:
            raise ParameterError("fa_deg and tr_ms must be 1-D arrays of equal length")
        if self.n_reps < 1:
            raise ParameterError("schedule needs at least one repetition")
        if not 0 < self.te_ms < self.tr_ms.min():
            raise ParameterError(f"te_ms={self.te_ms} must lie in (0, min TR)")

    @property
    def n_reps(self) -> int:
        return int(self.fa_deg.shape[0])

    def fingerprint(self) -> str:
        """Stable hash over the values that determine the simulated signal."""
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.fa_deg, dtype="<f8").tobytes())
        h.update(np.ascontiguousarray(self.tr_ms, dtype="<f8").tobytes())
        h.update(json.dumps([float(self.te_ms), bool(self.inversion), float(self.ti_ms)]).encode())
        return h.hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "fa_deg": self.fa_deg.tolist(),
            "tr_ms": self.tr_ms.tolist(),
            "te_ms": float(self.te_ms),
            "inversion": bool(self.inversion),
            "ti_ms": float(self.ti_ms),
            "n_reps": self.n_reps,
            "seed": self.seed,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "AcquisitionSchedule":
        sched = cls(
            fa_deg=doc["fa_deg"],
            tr_ms=doc["tr_ms"],
            te_ms=doc["te_ms"],
            inversion=doc["inversion"],
            ti_ms=doc.get("ti_ms", 20.0),
            seed=doc.get("seed"),
        )
        if "n_reps" in doc and doc["n_reps"] != sched.n_reps:
            raise ParameterError("n_reps does not match the stored arrays")
        return sched

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json()))

    @classmethod
    def load(cls, path) -> "AcquisitionSchedule":
        return cls.from_json(json.loads(Path(path).read_text()))


def make_schedule(
    n_reps: int = 1000,
    fa_config: FaLobes = FaLobes(),
    tr_min_ms: float = 12.0,
    tr_max_ms: float = 15.0,
    te_ms: float = 2.0,
    inversion: bool = True,
    seed: int = 0,
) -> AcquisitionSchedule:
    if n_reps < 1:
        raise ParameterError("n_reps must be >= 1")
    if not 0 < tr_min_ms <= tr_max_ms:
        raise ParameterError(f"invalid TR range [{tr_min_ms}, {tr_max_ms}]")
    if fa_config.lobe_length < 1 or fa_config.amp_min_deg > fa_config.amp_max_deg:
        raise ParameterError(f"invalid flip-angle lobes {fa_config}")

    rng = np.random.default_rng(seed)
    n_lobes = -(-n_reps // fa_config.lobe_length)
    amps = rng.uniform(fa_config.amp_min_deg, fa_config.amp_max_deg, size=n_lobes)
    n = np.arange(n_reps)
    lobe = n // fa_config.lobe_length
    phase = np.pi * (n % fa_config.lobe_length) / fa_config.lobe_length
    fa = np.clip(fa_config.baseline_deg + amps[lobe] * np.sin(phase), FA_MIN_DEG, FA_MAX_DEG)
    tr = rng.uniform(tr_min_ms, tr_max_ms, size=n_reps)
    return AcquisitionSchedule(fa, tr, te_ms=te_ms, inversion=inversion, seed=seed)


def rf_phase_deg(n_reps: int) -> np.ndarray:
    return np.where(np.arange(n_reps) % 2 == 0, 0.0, 180.0)


# ---------------------------------------------------------------- EPG


@dataclass
class EpgState:
    """EPG configuration states, shape ``(..., K+1)`` per component."""

    f_plus: np.ndarray
    f_minus: np.ndarray
    z: np.ndarray

    @property
    def K(self) -> int:
        return self.f_plus.shape[-1] - 1

    @classmethod
    def equilibrium(cls, K: int, batch: tuple = ()) -> "EpgState":
        if K < 1:
            raise ParameterError("K must be >= 1")
        shape = tuple(batch) + (K + 1,)
        z = np.zeros(shape, dtype=np.complex128)
        z[..., 0] = 1.0
        return cls(np.zeros(shape, np.complex128), np.zeros(shape, np.complex128), z)

    def copy(self) -> "EpgState":
        return EpgState(self.f_plus.copy(), self.f_minus.copy(), self.z.copy())


def rf_matrix(alpha_deg: float, phase_deg: float) -> np.ndarray:
    a = np.deg2rad(alpha_deg)
    p = np.deg2rad(phase_deg)
    c2, s2 = np.cos(a / 2) ** 2, np.sin(a / 2) ** 2
    ca, sa = np.cos(a), np.sin(a)
    e1, e2 = np.exp(1j * p), np.exp(2j * p)
    return np.array(
        [
            [c2, e2 * s2, -1j * e1 * sa],
            [np.conj(e2) * s2, c2, 1j * np.conj(e1) * sa],
            [-0.5j * np.conj(e1) * sa, 0.5j * e1 * sa, ca],
        ]
    )


def epg_rf(state: EpgState, alpha_deg: float, phase_deg: float = 0.0) -> EpgState:
    if not np.isfinite(alpha_deg):
        raise ParameterError("flip angle must be finite")
    R = rf_matrix(alpha_deg, phase_deg)
    fp, fm, z = state.f_plus, state.f_minus, state.z
    return EpgState(
        R[0, 0] * fp + R[0, 1] * fm + R[0, 2] * z,
        R[1, 0] * fp + R[1, 1] * fm + R[1, 2] * z,
        R[2, 0] * fp + R[2, 1] * fm + R[2, 2] * z,
    )


def _decay(t1_ms, t2_ms, dt_ms):
    t1 = np.asarray(t1_ms, dtype=np.float64)
    t2 = np.asarray(t2_ms, dtype=np.float64)
    if np.any(t1 <= 0) or np.any(t2 <= 0):
        raise ParameterError("relaxation times must be positive")
    if dt_ms <= 0:
        raise ParameterError("dt_ms must be positive")
    return np.exp(-dt_ms / t1)[..., None], np.exp(-dt_ms / t2)[..., None]


def epg_relax(state: EpgState, t1_ms, t2_ms, dt_ms: float) -> EpgState:
    """Relaxation without dephasing; ``t1_ms``/``t2_ms`` broadcast over the batch."""
    e1, e2 = _decay(t1_ms, t2_ms, dt_ms)
    z = state.z * e1
    z[..., 0] += 1.0 - e1[..., 0]
    return EpgState(state.f_plus * e2, state.f_minus * e2, z)


def epg_shift(state: EpgState) -> EpgState:
    """One full gradient-spoiler cycle: every F state moves up one order."""
    fp = np.empty_like(state.f_plus)
    fm = np.empty_like(state.f_minus)
    fp[..., 1:] = state.f_plus[..., :-1]
    fm[..., :-1] = state.f_minus[..., 1:]
    fm[..., -1] = 0.0
    fp[..., 0] = np.conj(fm[..., 0])
    return EpgState(fp, fm, state.z.copy())


def epg_relax_shift(state: EpgState, params: ParameterPair, dt_ms: float) -> EpgState:
    return epg_shift(epg_relax(state, params.t1_ms, params.t2_ms, dt_ms))


def default_K(n_reps: int) -> int:
    return max(1, min(n_reps, 100))


def simulate_batch(
    t1_ms, t2_ms, schedule: AcquisitionSchedule, K: int | None = None, chunk: int = 256
) -> np.ndarray:
    """EPG-simulate ``len(t1_ms)`` fingerprints; returns ``(N, n_reps)`` complex.

    Entries are propagated ``chunk`` at a time so the state arrays stay in
    cache; results do not depend on ``chunk``.
    """
    t1 = np.atleast_1d(np.asarray(t1_ms, dtype=np.float64))
    t2 = np.atleast_1d(np.asarray(t2_ms, dtype=np.float64))
    if t1.shape != t2.shape or t1.ndim != 1:
        raise ParameterError("t1_ms and t2_ms must be 1-D and of equal length")
    if np.any(t1 <= 0) or np.any(t2 <= 0):
        raise ParameterError("relaxation times must be positive")
    K = default_K(schedule.n_reps) if K is None else K
    if K < 1:
        raise ParameterError("K must be >= 1")
    out = np.empty((t1.size, schedule.n_reps), dtype=np.complex128)
    peak_tail = 0.0
    for lo in range(0, t1.size, chunk):
        sl = slice(lo, lo + chunk)
        out[sl], tail = _simulate_chunk(t1[sl], t2[sl], schedule, K)
        peak_tail = max(peak_tail, tail)
    if peak_tail > TRUNCATION_TOL:
        log.warning("EPG truncated at K=%d: highest-order state reached %.3g", K, peak_tail)
    return out


def _simulate_chunk(t1, t2, schedule, K):
    # Same arithmetic as epg_rf / epg_relax / epg_shift, fused to keep the
    # per-repetition interpreter overhead small.
    B = t1.size
    fp = np.zeros((B, K + 1), np.complex128)
    fm = np.zeros((B, K + 1), np.complex128)
    z = np.zeros((B, K + 1), np.complex128)
    z[:, 0] = 1.0

    def rf(R):
        nonlocal fp, fm, z
        fp, fm, z = (
            R[0, 0] * fp + R[0, 1] * fm + R[0, 2] * z,
            R[1, 0] * fp + R[1, 1] * fm + R[1, 2] * z,
            R[2, 0] * fp + R[2, 1] * fm + R[2, 2] * z,
        )

    def relax(dt):
        e1 = np.exp(-dt / t1)[:, None]
        e2 = np.exp(-dt / t2)[:, None]
        fp[...] = fp * e2
        fm[...] = fm * e2
        z[...] = z * e1
        z[:, 0] += 1.0 - e1[:, 0]

    def shift():
        fp[:, 1:] = fp[:, :-1].copy()
        fm[:, :-1] = fm[:, 1:].copy()
        fm[:, -1] = 0.0
        fp[:, 0] = np.conj(fm[:, 0])

    if schedule.inversion:
        rf(rf_matrix(180.0, 0.0))
        relax(schedule.ti_ms)
        shift()

    phases = rf_phase_deg(schedule.n_reps)
    demod = np.exp(-1j * np.deg2rad(phases))
    te_decay = np.exp(-schedule.te_ms / t2)
    rotations = [rf_matrix(a, p) for a, p in zip(schedule.fa_deg, phases)]
    out = np.empty((B, schedule.n_reps), dtype=np.complex128)
    tail = np.zeros(B)
    for n in range(schedule.n_reps):
        rf(rotations[n])
        out[:, n] = fp[:, 0] * te_decay * demod[n]
        relax(schedule.tr_ms[n])
        np.maximum(tail, np.abs(fp[:, -1]), out=tail)
        shift()
    return out, float(tail.max(initial=0.0))


def simulate_fingerprint(params: ParameterPair, schedule: AcquisitionSchedule, K: int | None = None) -> np.ndarray:
    return simulate_batch([params.t1_ms], [params.t2_ms], schedule, K)[0]


# ---------------------------------------------------------- isochromats


def _rotate(mx, my, mz, alpha_deg, phase_deg):
    """Apply Rz(phi) Rx(alpha) Rz(-phi) to arrays of magnetisation vectors."""
    a = np.deg2rad(alpha_deg)
    p = np.deg2rad(phase_deg)
    cp, sp = np.cos(p), np.sin(p)
    # into the pulse frame
    x = cp * mx + sp * my
    y = -sp * mx + cp * my
    ca, sa = np.cos(a), np.sin(a)
    y, z = ca * y - sa * mz, sa * y + ca * mz
    return cp * x - sp * y, sp * x + cp * y, z


def isochromat_simulate(params: ParameterPair, schedule: AcquisitionSchedule, n_spins: int = 20000) -> np.ndarray:
    """Bloch simulation of ``n_spins`` isochromats, evenly spread over one dephasing cycle."""
    if n_spins < 100:
        raise ParameterError("n_spins must be >= 100")
    theta = 2 * np.pi * np.arange(n_spins) / n_spins
    cth, sth = np.cos(theta), np.sin(theta)
    mx = np.zeros(n_spins)
    my = np.zeros(n_spins)
    mz = np.ones(n_spins)

    def relax(dt):
        nonlocal mx, my, mz
        e1, e2 = np.exp(-dt / params.t1_ms), np.exp(-dt / params.t2_ms)
        mx, my = mx * e2, my * e2
        mz = mz * e1 + (1.0 - e1)

    def dephase():
        nonlocal mx, my
        mx, my = cth * mx - sth * my, sth * mx + cth * my

    if schedule.inversion:
        mx, my, mz = _rotate(mx, my, mz, 180.0, 0.0)
        relax(schedule.ti_ms)
        dephase()

    phases = rf_phase_deg(schedule.n_reps)
    te_decay = np.exp(-schedule.te_ms / params.t2_ms)
    out = np.empty(schedule.n_reps, dtype=np.complex128)
    for n in range(schedule.n_reps):
        mx, my, mz = _rotate(mx, my, mz, schedule.fa_deg[n], phases[n])
        out[n] = (mx.mean() + 1j * my.mean()) * te_decay * np.exp(-1j * np.deg2rad(phases[n]))
        relax(schedule.tr_ms[n])
        dephase()
    return out
