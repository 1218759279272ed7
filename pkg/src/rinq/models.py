"""Network architectures: RNN1 (single pixel), RNN3 (3x3 patch + quantile), CNN1.

A :class:`ModelConfig` is a pure description (one :class:`LayerSpec` per row
of the architecture tables); :class:`Network` instantiates it with seeded
weights. Per-sample inputs are ``(n_reps, channels)`` for single-pixel models
and ``(3, 3, n_reps, channels)`` for patch models.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import ndnn
from .ndnn import ops
from .quantile import quantile_forward

N_SEGMENTS = 30


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # input | segment | lstm | fc | flatten | reshape | conv | avgpool | quantile
    label: str
    size: int = 0  # hidden units / output features / filters
    k: int = 0
    stride: int = 1
    shape: tuple = ()
    activation: str | None = None
    bn: bool = False
    order: str = "act_bn"  # act_bn: act then BN, bn_act: BN then act
    q: float = 0.5


@dataclass(frozen=True)
class ModelConfig:
    name: str
    layers: tuple
    patch: int  # 1 or 3
    channels: int
    n_reps: int

    @property
    def input_shape(self) -> tuple:
        if self.patch == 1:
            return (self.n_reps, self.channels)
        return (self.patch, self.patch, self.n_reps, self.channels)

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, doc: dict) -> "ModelConfig":
        layers = tuple(LayerSpec(**{**l, "shape": tuple(l["shape"])}) for l in doc["layers"])
        return cls(doc["name"], layers, doc["patch"], doc["channels"], doc["n_reps"])


def _check_segments(n_reps: int) -> None:
    if n_reps % N_SEGMENTS:
        raise ConfigError(f"n_reps={n_reps} is not divisible into {N_SEGMENTS} segments")


def _rnn_tail(fc, bn=True):
    rows = [
        LayerSpec("fc", "FC1", fc[0], activation="relu", bn=bn),
        LayerSpec("fc", "FC2", fc[1], activation="relu", bn=bn),
        LayerSpec("flatten", "Flatten"),
        LayerSpec("fc", "FC3", fc[2], activation="relu", bn=bn),
    ]
    return rows


def build_rnn1(channels: int = 2, n_reps: int = 3000, lstm_hidden: int = 1000, fc=(500, 250, 360)) -> ModelConfig:
    if channels not in (1, 2):
        raise ConfigError("channels must be 1 (magnitude) or 2 (real/imaginary)")
    _check_segments(n_reps)
    layers = [
        LayerSpec("input", "Input"),
        LayerSpec("segment", "Reshape", N_SEGMENTS),
        LayerSpec("lstm", "LSTM", lstm_hidden, activation="relu", bn=True),
        *_rnn_tail(fc),
        LayerSpec("fc", "FC4", 2),
    ]
    name = "rnn1-complex" if channels == 2 else "rnn1-mag"
    return ModelConfig(name, tuple(layers), 1, channels, n_reps)


def build_rnn3(n_reps: int = 3000, lstm_hidden: int = 500, fc=(500, 250, 360), q: float = 0.5) -> ModelConfig:
    _check_segments(n_reps)
    if fc[2] % 9:
        raise ConfigError("FC3 width must split evenly over the 3x3 positions")
    layers = [
        LayerSpec("input", "Input"),
        LayerSpec("segment", "Reshape1", N_SEGMENTS),
        LayerSpec("lstm", "LSTM", lstm_hidden, activation="relu", bn=True),
        *_rnn_tail(fc),
        LayerSpec("reshape", "Reshape2", shape=(3, 3, fc[2] // 9)),
        LayerSpec("fc", "FC4", 2),
        LayerSpec("quantile", "Quantile", q=q),
    ]
    return ModelConfig("rnn3-complex", tuple(layers), 3, 2, n_reps)


def build_cnn1(
    channels: int = 2,
    n_reps: int = 3000,
    filters=(30, 60, 120, 240),
    fc=(1000, 500, 300),
) -> ModelConfig:
    if channels not in (1, 2):
        raise ConfigError("channels must be 1 (magnitude) or 2 (real/imaginary)")
    if n_reps < 15:
        raise ConfigError("n_reps too short for the convolution chain")
    kernels = ((15, 5), (10, 3), (5, 2), (3, 2))
    layers = [LayerSpec("input", "Input")]
    for i, ((k, s), f) in enumerate(zip(kernels, filters), 1):
        layers.append(LayerSpec("conv", f"Conv{i}+BN", f, k=k, stride=s, activation="relu", bn=True, order="bn_act"))
    layers.append(LayerSpec("avgpool", "AvgPool", k=3, stride=2))
    layers.append(LayerSpec("flatten", "Flatten"))
    for i, u in enumerate(fc, 1):
        layers.append(LayerSpec("fc", f"FC{i}+BN", u, activation="relu", bn=True, order="bn_act"))
    layers.append(LayerSpec("fc", "FC4", 2))
    name = "cnn1-complex" if channels == 2 else "cnn1-mag"
    return ModelConfig(name, tuple(layers), 1, channels, n_reps)


# desk-scale widths keep the published layer structure at roughly 1/40 of its size
DESK_SIZES = {
    "rnn1": dict(lstm_hidden=128, fc=(64, 32, 72)),
    "rnn3": dict(lstm_hidden=64, fc=(64, 32, 72)),
    "cnn1": dict(filters=(8, 16, 32, 64), fc=(256, 128, 64)),
}

PRESETS = {
    "rnn1-mag": ("rnn1", dict(channels=1)),
    "rnn1-complex": ("rnn1", dict(channels=2)),
    "rnn3-complex": ("rnn3", {}),
    "cnn1-mag": ("cnn1", dict(channels=1)),
    "cnn1-complex": ("cnn1", dict(channels=2)),
}

BUILDERS = {"rnn1": build_rnn1, "rnn3": build_rnn3, "cnn1": build_cnn1}


def build_preset(name: str, n_reps: int, size: str = "full") -> ModelConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown model preset {name!r}; choose from {sorted(PRESETS)}")
    family, kw = PRESETS[name]
    if size == "desk":
        kw = {**kw, **DESK_SIZES[family]}
    elif size != "full":
        raise ConfigError(f"unknown model size {size!r}")
    return BUILDERS[family](n_reps=n_reps, **kw)


# -------------------------------------------------------- shape arithmetic


def _layer_out(spec: LayerSpec, shape: tuple, cfg: ModelConfig) -> tuple:
    kind = spec.kind
    if kind == "input":
        return shape
    if kind == "segment":
        total = int(np.prod(shape))
        if total % spec.size:
            raise ConfigError(f"{spec.label}: {total} values do not split into {spec.size} segments")
        return (spec.size, total // spec.size)
    if kind == "lstm":
        if len(shape) != 2:
            raise ConfigError(f"{spec.label}: expects a (steps, features) input, got {shape}")
        return (shape[0], spec.size)
    if kind == "fc":
        return shape[:-1] + (spec.size,)
    if kind == "flatten":
        return (int(np.prod(shape)),)
    if kind == "reshape":
        if int(np.prod(shape)) != int(np.prod(spec.shape)):
            raise ConfigError(f"{spec.label}: cannot reshape {shape} to {spec.shape}")
        return tuple(spec.shape)
    if kind == "conv":
        if len(shape) != 2 or shape[0] < spec.k:
            raise ConfigError(f"{spec.label}: input {shape} too short for kernel {spec.k}")
        return ((shape[0] - spec.k) // spec.stride + 1, spec.size)
    if kind == "avgpool":
        if len(shape) != 2 or shape[0] < spec.k:
            raise ConfigError(f"{spec.label}: input {shape} too short for window {spec.k}")
        return ((shape[0] - spec.k) // spec.stride + 1, shape[1])
    if kind == "quantile":
        if len(shape) != 3:
            raise ConfigError(f"{spec.label}: expects (3, 3, C), got {shape}")
        return (shape[-1],)
    raise ConfigError(f"unknown layer kind {kind!r}")


def shape_trace(cfg: ModelConfig, input_shape: tuple | None = None) -> list[tuple[str, tuple]]:
    shape = tuple(cfg.input_shape if input_shape is None else input_shape)
    if input_shape is not None and tuple(input_shape) != cfg.input_shape:
        raise ConfigError(f"input {tuple(input_shape)} does not match model signature {cfg.input_shape}")
    rows = []
    for spec in cfg.layers:
        shape = _layer_out(spec, shape, cfg)
        rows.append((spec.label, shape))
    if shape != (2,):
        raise ConfigError(f"model output {shape} is not (2,)")
    return rows


def layer_param_count(spec: LayerSpec, in_shape: tuple) -> int:
    n = 0
    if spec.kind == "lstm":
        n = ops.lstm_param_count(in_shape[-1], spec.size)
    elif spec.kind == "fc":
        n = in_shape[-1] * spec.size + spec.size
    elif spec.kind == "conv":
        n = spec.k * in_shape[-1] * spec.size + spec.size
    if spec.bn:
        n += 2 * spec.size
    return n


def count_params(cfg: ModelConfig) -> int:
    shape = cfg.input_shape
    total = 0
    for spec in cfg.layers:
        total += layer_param_count(spec, shape)
        shape = _layer_out(spec, shape, cfg)
    return total


def format_shape(shape) -> str:
    return "(" + ", ".join(str(d) for d in shape) + ")"


def describe(cfg: ModelConfig) -> str:
    rows = [(label, format_shape(shape)) for label, shape in shape_trace(cfg)]
    width = max(len(l) for l, _ in rows)
    lines = [f"{cfg.name}  (input {format_shape(cfg.input_shape)})", f"{'Layer':<{width}}  Output shape"]
    for label, shape in rows:
        lines.append(f"{label:<{width}}  {shape}")
    n = count_params(cfg)
    lines.append(f"Number of parameters: {n:,} ({n / 1e6:.1f} M)")
    return "\n".join(lines)


# ------------------------------------------------------------- instances


class Network:
    """Seeded instance of a :class:`ModelConfig`.

    Predictions pass through a fixed per-channel affine map
    ``y * target_scale + target_offset`` so the output layer works at unit
    scale while losses stay in milliseconds.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.target_scale = np.ones(2)
        self.target_offset = np.zeros(2)
        self.blocks = []  # (spec, core layer or None, bn or None)
        shape = cfg.input_shape
        for spec in cfg.layers:
            core = None
            if spec.kind == "lstm":
                core = ndnn.LSTM(shape[-1], spec.size, rng)
            elif spec.kind == "fc":
                core = ndnn.Linear(shape[-1], spec.size, rng)
            elif spec.kind == "conv":
                core = ndnn.Conv1d(spec.k, shape[-1], spec.size, spec.stride, rng)
            bn = ndnn.BatchNorm(spec.size) if spec.bn else None
            self.blocks.append((spec, core, bn))
            shape = _layer_out(spec, shape, cfg)

    def parameters(self) -> list:
        out = []
        for _, core, bn in self.blocks:
            if core is not None:
                out += core.parameters()
            if bn is not None:
                out += bn.parameters()
        return out

    def buffers(self) -> list:
        return [b for _, _, bn in self.blocks if bn is not None for b in bn.buffers()]

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        """Every persistent array in a fixed order (checkpoint manifest order)."""
        out = []
        for i, (spec, core, bn) in enumerate(self.blocks):
            if core is not None:
                out += [(f"{i}.{spec.label}.{p.name}", p.data) for p in core.parameters()]
            if bn is not None:
                out += [
                    (f"{i}.{spec.label}.bn.gamma", bn.gamma.data),
                    (f"{i}.{spec.label}.bn.beta", bn.beta.data),
                    (f"{i}.{spec.label}.bn.running_mean", bn.state.running_mean),
                    (f"{i}.{spec.label}.bn.running_var", bn.state.running_var),
                ]
        out += [("target_scale", self.target_scale), ("target_offset", self.target_offset)]
        return out

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        for i, (spec, core, bn) in enumerate(self.blocks):
            if core is not None:
                for p in core.parameters():
                    p.data[...] = arrays[f"{i}.{spec.label}.{p.name}"]
            if bn is not None:
                bn.gamma.data[...] = arrays[f"{i}.{spec.label}.bn.gamma"]
                bn.beta.data[...] = arrays[f"{i}.{spec.label}.bn.beta"]
                bn.state.running_mean = np.array(arrays[f"{i}.{spec.label}.bn.running_mean"], np.float64)
                bn.state.running_var = np.array(arrays[f"{i}.{spec.label}.bn.running_var"], np.float64)
        self.target_scale = np.array(arrays["target_scale"], np.float64)
        self.target_offset = np.array(arrays["target_offset"], np.float64)

    def _segment(self, x, n_segments):
        B = x.shape[0]
        n, C = self.cfg.n_reps, self.cfg.channels
        P = self.cfg.patch**2
        L = n // n_segments
        # per segment: [pixel][channel][time], i.e. all real parts then all imaginary parts
        x = ops.reshape(x, (B, P, n_segments, L, C))
        x = ops.transpose(x, (0, 2, 1, 4, 3))
        return ops.reshape(x, (B, n_segments, P * C * L))

    def forward(self, x, train: bool = False):
        """``x``: Tensor or array ``[batch, *input_shape]``; returns ``[batch, 2]`` in ms."""
        x = ndnn.tensor.as_tensor(x)
        if x.shape[1:] != self.cfg.input_shape:
            raise ConfigError(f"input {x.shape[1:]} does not match model signature {self.cfg.input_shape}")
        for spec, core, bn in self.blocks:
            kind = spec.kind
            if kind == "segment":
                x = self._segment(x, spec.size)
            elif kind == "flatten":
                x = ops.flatten(x, 1)
            elif kind == "reshape":
                x = ops.reshape(x, (x.shape[0],) + tuple(spec.shape))
            elif kind == "avgpool":
                x = ops.avg_pool1d(x, spec.k, spec.stride)
            elif kind == "quantile":
                x, _ = quantile_forward(x, spec.q)
            elif core is not None:
                x = core(x, train)
            if core is not None:
                if spec.order == "bn_act":
                    x = bn(x, train) if bn else x
                    x = ops.relu(x) if spec.activation == "relu" else x
                else:
                    x = ops.relu(x) if spec.activation == "relu" else x
                    x = bn(x, train) if bn else x
        return ops.affine(x, self.target_scale, self.target_offset)

    __call__ = forward
