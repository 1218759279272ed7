"""Sample extraction, dataset splits, training with best-epoch selection, inference."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import container
from .evaluation import QuantitativeMap
from .models import ConfigError, ModelConfig, Network
from .ndnn import Adam, Tape, mse_loss
from .ndnn.tensor import ShapeError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RNQC"


class NumericError(RuntimeError):
    pass


# ------------------------------------------------------------------ splits


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    mode: str
    seed: int

    def __post_init__(self):
        a, b, c = set(self.train), set(self.validation), set(self.test)
        if a & b or a & c or b & c:
            raise ConfigError("split sets overlap")

    def to_json(self) -> dict:
        return asdict(self)


def split_dataset(stack_ids, mode: str = "random_slice", ratios=(8, 2, 2), groups: dict | None = None,
                  holdout: tuple | None = None, seed: int = 0) -> DatasetSplit:
    """Partition stack ids into train/validation/test.

    ``random_slice`` shuffles ids and cuts them by ``ratios`` (scaled to the id
    count when they do not sum to it). ``leave_one_out`` reserves every stack of
    one group for validation and of another for test; ``holdout`` names the
    (validation, test) groups, otherwise they are drawn with ``seed``.
    """
    ids = list(stack_ids)
    rng = np.random.default_rng(seed)
    if mode == "random_slice":
        if len(ratios) != 3 or min(ratios) < 0:
            raise ConfigError(f"bad ratios {ratios}")
        n = len(ids)
        if sum(ratios) == n:
            counts = [int(r) for r in ratios]
        else:
            counts = [int(math.floor(r / sum(ratios) * n)) for r in ratios]
            # every non-empty share keeps at least one stack
            counts = [max(c, 1) if r > 0 else 0 for r, c in zip(ratios, counts)]
            counts[0] = n - counts[1] - counts[2]
        if any(c < 0 or (r > 0 and c == 0) for r, c in zip(ratios, counts)) or n < 3:
            raise ConfigError(f"{n} stacks are too few for ratios {ratios}")
        order = [ids[i] for i in rng.permutation(n)]
        a, b = counts[0], counts[0] + counts[1]
        return DatasetSplit(order[:a], order[a:b], order[b:], mode, seed)
    if mode == "leave_one_out":
        groups = groups or {i: i for i in ids}
        names = sorted({groups[i] for i in ids}, key=str)
        if len(names) < 3:
            raise ConfigError("leave-one-out needs at least three groups")
        if holdout is None:
            pick = rng.choice(len(names), size=2, replace=False)
            holdout = (names[pick[0]], names[pick[1]])
        val_g, test_g = holdout
        if val_g == test_g:
            raise ConfigError("validation and test groups must differ")
        train = [i for i in ids if groups[i] not in (val_g, test_g)]
        val = [i for i in ids if groups[i] == val_g]
        test = [i for i in ids if groups[i] == test_g]
        return DatasetSplit(train, val, test, mode, seed)
    raise ConfigError(f"unknown split mode {mode!r}")


# ---------------------------------------------------------------- samples


@dataclass
class SampleSet:
    """Network inputs ``x`` (float32, ``[N, *input_shape]``), targets ``y`` in ms, and pixel coords."""

    x: np.ndarray
    y: np.ndarray
    coords: np.ndarray
    source: list = field(default_factory=list)

    def __len__(self):
        return self.x.shape[0]

    @staticmethod
    def concat(sets: list["SampleSet"]) -> "SampleSet":
        return SampleSet(
            np.concatenate([s.x for s in sets]),
            np.concatenate([s.y for s in sets]),
            np.concatenate([s.coords for s in sets]),
            [src for s in sets for src in s.source],
        )


def normalized_channels(signals: np.ndarray, channels: int) -> np.ndarray:
    """Scale each pixel to unit RMS (L2 norm ``sqrt(n)``), then emit ``[..., n, 1]``
    magnitudes or ``[..., n, 2]`` real/imaginary planes."""
    norms = np.linalg.norm(signals, axis=-1, keepdims=True) / np.sqrt(signals.shape[-1])
    unit = np.divide(signals, norms, out=np.zeros_like(signals), where=norms > 0)
    if channels == 1:
        return np.abs(unit)[..., None]
    if channels == 2:
        return np.stack([unit.real, unit.imag], axis=-1)
    raise ConfigError("channels must be 1 or 2")


def _neighbourhoods(planes: np.ndarray, rows, cols, patch: int, border: str) -> np.ndarray:
    r = patch // 2
    if border == "replicate":
        padded = np.pad(planes, ((r, r), (r, r)) + ((0, 0),) * (planes.ndim - 2), mode="edge")
        offset = r
    elif border == "discard":
        padded, offset = planes, 0
    else:
        raise ConfigError(f"unknown border policy {border!r}")
    out = np.empty((len(rows), patch, patch) + planes.shape[2:], dtype=planes.dtype)
    for dy in range(patch):
        for dx in range(patch):
            out[:, dy, dx] = padded[rows + offset + dy - r, cols + offset + dx - r]
    return out


def extract_samples(stack, gt: QuantitativeMap | None, patch: int = 1, channels: int = 2,
                    border: str = "discard", mask: np.ndarray | None = None, source=None) -> SampleSet:
    """One sample per foreground (and, with ``gt``, ground-truth-valid) pixel.

    ``border="discard"`` drops pixels whose neighbourhood leaves the image;
    ``"replicate"`` edge-pads instead.
    """
    H, W, n = stack.signals.shape
    if gt is not None and gt.shape != (H, W):
        raise ShapeError(f"ground truth {gt.shape} does not match stack {(H, W)}")
    if patch not in (1, 3):
        raise ConfigError("patch must be 1 or 3")
    keep = np.asarray(stack.mask if mask is None else mask, bool).copy()
    if gt is not None:
        keep &= gt.valid
    if patch > 1 and border == "discard":
        r = patch // 2
        inner = np.zeros_like(keep)
        inner[r : H - r, r : W - r] = True
        keep &= inner
    rows, cols = np.nonzero(keep)
    planes = normalized_channels(stack.signals, channels).astype(np.float32)
    if patch == 1:
        x = planes[rows, cols]
    else:
        x = _neighbourhoods(planes, rows, cols, patch, border)
    y = np.zeros((rows.size, 2))
    if gt is not None:
        y = np.stack([gt.t1_ms[rows, cols], gt.t2_ms[rows, cols]], axis=1)
    return SampleSet(x, y, np.stack([rows, cols], axis=1), [source] * rows.size)


# --------------------------------------------------------------- training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 128
    beta1: float = 0.9
    beta2: float = 0.999
    epochs: int = 100
    seed: int = 0
    clip_norm: float | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be positive")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalisation)")


# learning rate and batch size per compared configuration
TRAIN_PRESETS = {
    "cnn1-mag": dict(learning_rate=5e-5, batch_size=128),
    "rnn1-mag": dict(learning_rate=5e-5, batch_size=128),
    "cnn1-complex": dict(learning_rate=5e-5, batch_size=128),
    "rnn1-complex": dict(learning_rate=1e-3, batch_size=128),
    "rnn3-complex": dict(learning_rate=1e-4, batch_size=32),
}


@dataclass
class Checkpoint:
    model_config: dict
    arrays: dict
    epoch: int
    validation_root_mse_ms: float
    seed: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.validation_root_mse_ms):
            raise NumericError("checkpoint validation loss is not finite")

    def network(self) -> Network:
        net = Network(ModelConfig.from_json(self.model_config), self.seed)
        net.load_arrays(self.arrays)
        return net

    def save(self, path) -> None:
        header = {
            "kind": "checkpoint",
            "model_config": self.model_config,
            "epoch": self.epoch,
            "validation_root_mse_ms": self.validation_root_mse_ms,
            "seed": self.seed,
            "meta": self.meta,
        }
        container.write_container(path, CHECKPOINT_MAGIC, header, self.arrays)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        h, planes = container.read_container(path, CHECKPOINT_MAGIC)
        arrays = {k: v.astype(np.float64) for k, v in planes.items()}
        return cls(h["model_config"], arrays, h["epoch"], h["validation_root_mse_ms"], h["seed"], h.get("meta", {}))


def snapshot(net: Network, epoch: int, val: float, meta: dict | None = None) -> Checkpoint:
    arrays = {k: np.array(v, dtype=np.float64) for k, v in net.named_arrays()}
    return Checkpoint(net.cfg.to_json(), arrays, epoch, float(val), net.seed, dict(meta or {}))


def predict(net: Network, x: np.ndarray, chunk: int = 256) -> np.ndarray:
    out = [net(np.asarray(x[i : i + chunk], dtype=np.float64), train=False).data for i in range(0, len(x), chunk)]
    return np.concatenate(out) if out else np.zeros((0, 2))


def validate(net: Network, samples: SampleSet) -> float:
    """Root of the mean squared error over samples and both targets, in ms."""
    if len(samples) == 0:
        raise ConfigError("validation set is empty")
    err = predict(net, samples.x) - samples.y
    return float(np.sqrt(np.mean(err**2)))


def fit_target_scaling(net: Network, y: np.ndarray) -> None:
    net.target_offset = y.mean(axis=0)
    net.target_scale = np.maximum(y.std(axis=0), 1.0)


def train(net: Network, train_set: SampleSet, val_set: SampleSet, config: TrainConfig, meta: dict | None = None):
    """Mini-batch ADAM on the MSE loss; returns the best-validation checkpoint and history.

    History rows are ``(epoch, train_mse_ms2, val_root_mse_ms)``; epoch 0 is
    the untrained model.
    """
    if len(train_set) < 2 or len(val_set) == 0:
        raise ConfigError("need at least two training samples and one validation sample")
    fit_target_scaling(net, train_set.y)
    opt = Adam(net.parameters(), config.learning_rate, config.beta1, config.beta2, clip_norm=config.clip_norm)
    rng = np.random.default_rng(config.seed)
    val = validate(net, val_set)
    history = [(0, float("nan"), val)]
    best = snapshot(net, 0, val, meta)
    log.info("epoch 0: val root-MSE %.2f ms", val)
    bs = config.batch_size
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(train_set))
        losses = []
        for bi, lo in enumerate(range(0, len(order), bs)):
            idx = order[lo : lo + bs]
            if idx.size < 2:
                continue
            opt.zero_grad()
            with Tape() as tape:
                pred = net(train_set.x[idx].astype(np.float64), train=True)
                loss = mse_loss(pred, train_set.y[idx])
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericError(f"non-finite loss at epoch {epoch}, batch {bi}")
            tape.backward(loss)
            opt.step()
            losses.append(value * idx.size)
        train_loss = float(np.sum(losses) / len(order))
        val = validate(net, val_set)
        if not np.isfinite(val):
            raise NumericError(f"non-finite validation loss after epoch {epoch}")
        history.append((epoch, train_loss, val))
        log.info("epoch %d: train MSE %.1f ms^2, val root-MSE %.2f ms", epoch, train_loss, val)
        if val < best.validation_root_mse_ms:
            best = snapshot(net, epoch, val, meta)
    return best, history


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "train_mse_ms2", "val_root_mse_ms"])
        for e, t, v in history:
            w.writerow([e, repr(t), repr(v)])


def infer_map(net: Network, stack, mask: np.ndarray | None = None) -> QuantitativeMap:
    """Predict every foreground pixel; patch models see edge-replicated neighbourhoods."""
    cfg = net.cfg
    if stack.n_reps != cfg.n_reps:
        raise ConfigError(f"stack has {stack.n_reps} repetitions, model expects {cfg.n_reps}")
    m = np.asarray(stack.mask if mask is None else mask, bool)
    samples = extract_samples(stack, None, cfg.patch, cfg.channels, "replicate", mask=m)
    pred = predict(net, samples.x)
    H, W = m.shape
    t1 = np.zeros((H, W))
    t2 = np.zeros((H, W))
    valid = np.zeros((H, W), bool)
    r, c = samples.coords[:, 0], samples.coords[:, 1]
    t1[r, c], t2[r, c] = pred[:, 0], pred[:, 1]
    valid[r, c] = True
    return QuantitativeMap(t1, t2, valid, "predicted")
