"""Digital phantoms, per-pixel signal synthesis, and signal-domain corruption.

Undersampling artefacts are emulated in the signal domain: every foreground
pixel receives complex Gaussian noise plus a scaled mean of a few other
pixels' clean signals (a crude stand-in for aliasing).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import container
from .evaluation import QuantitativeMap, read_pgm, write_pgm
from .seqsim import AcquisitionSchedule, ParameterError, ParameterPair, simulate_batch

STACK_MAGIC = b"MRFS"


@dataclass(frozen=True)
class TissueClass:
    name: str
    t1_range_ms: tuple[float, float]
    t2_range_ms: tuple[float, float]


# Configuration values for synthetic data only; not claims about real tissue.
DEFAULT_PRESET = (
    TissueClass("short", (700.0, 1200.0), (60.0, 100.0)),
    TissueClass("medium", (1200.0, 2000.0), (80.0, 200.0)),
    TissueClass("long", (2500.0, 4000.0), (800.0, 2000.0)),
)


@dataclass(frozen=True)
class UniformRanges:
    """Sample each region's (T1, T2) uniformly, keeping T2 below ``t2_max_fraction * T1``."""

    t1_range_ms: tuple[float, float] = (700.0, 4000.0)
    t2_range_ms: tuple[float, float] = (60.0, 2000.0)
    t2_max_fraction: float = 0.5


@dataclass
class Phantom:
    labels: np.ndarray
    region_params: dict[int, ParameterPair]
    seed: int | None = None

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int32)
        missing = set(np.unique(self.labels[self.labels != 0]).tolist()) - set(self.region_params)
        if missing:
            raise ParameterError(f"labels without parameters: {sorted(missing)}")

    @property
    def mask(self) -> np.ndarray:
        return self.labels != 0

    @property
    def shape(self):
        return self.labels.shape

    def save(self, stem) -> None:
        """Write ``<stem>.json`` (region parameters) and ``<stem>.pgm`` (labels)."""
        stem = Path(stem)
        doc = {
            "height": int(self.shape[0]),
            "width": int(self.shape[1]),
            "seed": self.seed,
            "regions": {str(k): [v.t1_ms, v.t2_ms] for k, v in sorted(self.region_params.items())},
        }
        stem.with_suffix(".json").write_text(json.dumps(doc, sort_keys=True, indent=1))
        img = self.labels.astype(np.uint8 if self.labels.max() < 256 else np.uint16)
        write_pgm(stem.with_suffix(".pgm"), img)

    @classmethod
    def load(cls, stem) -> "Phantom":
        stem = Path(stem)
        doc = json.loads(stem.with_suffix(".json").read_text())
        labels = read_pgm(stem.with_suffix(".pgm")).astype(np.int32)
        params = {int(k): ParameterPair(*v) for k, v in doc["regions"].items()}
        return cls(labels, params, doc.get("seed"))


def _sample_params(rng, n_regions, preset):
    out = {}
    for r in range(1, n_regions + 1):
        if isinstance(preset, UniformRanges):
            t1 = rng.uniform(*preset.t1_range_ms)
            hi = min(preset.t2_range_ms[1], preset.t2_max_fraction * t1)
            t2 = rng.uniform(preset.t2_range_ms[0], max(hi, preset.t2_range_ms[0]))
        else:
            tc = preset[rng.integers(len(preset))]
            t1 = rng.uniform(*tc.t1_range_ms)
            t2 = rng.uniform(*tc.t2_range_ms)
        # whole milliseconds keep ground truth exactly representable in float32 files
        out[r] = ParameterPair(float(np.round(t1)), float(np.round(t2)))
    return out


def make_phantom(height: int = 64, width: int = 64, n_regions: int = 6, seed: int = 0, preset=DEFAULT_PRESET) -> Phantom:
    """Elliptical foreground split into seeded Voronoi cells."""
    if height < 8 or width < 8:
        raise ParameterError("phantom needs at least 8x8 pixels")
    if n_regions < 1:
        raise ParameterError("n_regions must be >= 1")
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    cy, cx = (height - 1) / 2, (width - 1) / 2
    ry, rx = 0.45 * height, 0.4 * width
    inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
    ys, xs = np.nonzero(inside)
    pick = rng.choice(ys.size, size=min(n_regions, ys.size), replace=False)
    centres = np.stack([ys[pick], xs[pick]], axis=1).astype(np.float64)
    d2 = (yy[..., None] - centres[:, 0]) ** 2 + (xx[..., None] - centres[:, 1]) ** 2
    labels = np.where(inside, np.argmin(d2, axis=-1) + 1, 0)
    params = _sample_params(rng, centres.shape[0], preset)
    return Phantom(labels, params, seed)


def render_ground_truth(phantom: Phantom) -> QuantitativeMap:
    t1 = np.zeros(phantom.shape)
    t2 = np.zeros(phantom.shape)
    for r, p in phantom.region_params.items():
        sel = phantom.labels == r
        t1[sel] = p.t1_ms
        t2[sel] = p.t2_ms
    return QuantitativeMap(t1, t2, phantom.mask, "ground-truth")


@dataclass
class CorruptionConfig:
    noise_sigma: float = 0.05
    interference_k: int = 8
    interference_scale: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.noise_sigma < 0 or self.interference_k < 0 or self.interference_scale < 0:
            raise ParameterError(f"corruption parameters must be non-negative: {self}")

    def is_identity(self) -> bool:
        return self.noise_sigma == 0 and (self.interference_k == 0 or self.interference_scale == 0)


@dataclass
class SignalStack:
    signals: np.ndarray  # (H, W, n_reps) complex
    mask: np.ndarray
    schedule_fingerprint: str
    corruption: dict | None = None
    meta: dict = field(default_factory=dict)

    @property
    def height(self) -> int:
        return self.signals.shape[0]

    @property
    def width(self) -> int:
        return self.signals.shape[1]

    @property
    def n_reps(self) -> int:
        return self.signals.shape[2]

    def header(self) -> dict:
        return {
            "kind": "signal-stack",
            "H": self.height,
            "W": self.width,
            "n_reps": self.n_reps,
            "schedule_fingerprint": self.schedule_fingerprint,
            "corruption": self.corruption,
            "meta": self.meta,
        }

    def save(self, path) -> None:
        flat = self.signals.reshape(self.height * self.width, self.n_reps)
        container.write_container(
            path, STACK_MAGIC, self.header(), {"re": flat.real, "im": flat.imag, "mask": self.mask}
        )

    @classmethod
    def load(cls, path) -> "SignalStack":
        h, planes = container.read_container(path, STACK_MAGIC)
        sig = (planes["re"].astype(np.float64) + 1j * planes["im"].astype(np.float64)).reshape(
            h["H"], h["W"], h["n_reps"]
        )
        return cls(sig, planes["mask"] > 0.5, h["schedule_fingerprint"], h.get("corruption"), h.get("meta", {}))


def synthesize_signals(phantom: Phantom, schedule: AcquisitionSchedule, K: int | None = None) -> SignalStack:
    """Noiseless per-pixel fingerprints, simulated once per distinct region."""
    regions = sorted(phantom.region_params)
    sig = np.zeros(phantom.shape + (schedule.n_reps,), dtype=np.complex128)
    if regions:
        t1 = [phantom.region_params[r].t1_ms for r in regions]
        t2 = [phantom.region_params[r].t2_ms for r in regions]
        sims = simulate_batch(t1, t2, schedule, K)
        for r, s in zip(regions, sims):
            sig[phantom.labels == r] = s
    return SignalStack(sig, phantom.mask.copy(), schedule.fingerprint())


def corrupt(stack: SignalStack, config: CorruptionConfig) -> SignalStack:
    """Add noise and cross-pixel interference to each foreground pixel.

    Noise std (complex, i.e. ``E|n|^2 = sigma^2``) is ``noise_sigma`` times the
    mean foreground magnitude. Each pixel draws its own random stream from
    ``(seed, pixel index)``, so results are independent of iteration order.
    """
    if config.is_identity():
        # an identity pass must leave the stack (and its file hash) untouched
        return SignalStack(stack.signals.copy(), stack.mask.copy(), stack.schedule_fingerprint, stack.corruption, dict(stack.meta))
    H, W, n = stack.signals.shape
    flat = stack.signals.reshape(H * W, n)
    fg = np.flatnonzero(stack.mask.ravel())
    noisy = flat.copy()
    if fg.size:
        sigma = config.noise_sigma * float(np.abs(flat[fg]).mean())
        k = min(config.interference_k, fg.size - 1)
        for pix in fg:
            rng = np.random.default_rng([config.seed, int(pix)])
            if sigma > 0:
                noise = rng.standard_normal(n) + 1j * rng.standard_normal(n)
                noisy[pix] += sigma / np.sqrt(2.0) * noise
            if k > 0 and config.interference_scale > 0:
                others = fg[fg != pix]
                picks = others[rng.choice(others.size, size=k, replace=False)]
                noisy[pix] += config.interference_scale * flat[picks].mean(axis=0)
    return SignalStack(noisy.reshape(H, W, n), stack.mask.copy(), stack.schedule_fingerprint, asdict(config), dict(stack.meta))
