"""Attention-RNN keyword classifier: time convolutions, two BiLSTMs, middle-frame
query attention and a three-layer dense head."""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .audio_io import AudioClip
from .autodiff import BatchNormState, LstmWeights, Tensor
from .dsp import SpectrogramConfig, log_mel
from .errors import ConfigError, ShapeError

PARAMS_VERSION = 1


@dataclass(frozen=True)
class AttRnnConfig:
    n_classes: int = 12
    n_mels: int = 80
    conv1_filters: int = 10
    conv1_kt: int = 5
    conv2_filters: int = 1
    conv2_kt: int = 5
    lstm_hidden: int = 64
    lstm_layers: int = 2
    query_dim: int = 128
    dense_sizes: tuple[int, ...] = (64, 32)
    bn_momentum: float = 0.9
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "dense_sizes", tuple(self.dense_sizes))
        if self.query_dim != 2 * self.lstm_hidden:
            raise ConfigError(
                f"query_dim {self.query_dim} must equal 2 * lstm_hidden ({2 * self.lstm_hidden})")
        if self.conv2_filters != 1:
            raise ConfigError("conv2_filters must be 1: its channel axis is squeezed before the LSTM")
        if self.conv1_kt % 2 == 0 or self.conv2_kt % 2 == 0:
            raise ConfigError("time kernel extents must be odd")
        if self.n_classes < 2 or self.lstm_layers < 1:
            raise ConfigError("need n_classes >= 2 and at least one LSTM layer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dense_sizes"] = list(self.dense_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> AttRnnConfig:
        return cls(**d)


def _dense_layers(cfg: AttRnnConfig) -> list[tuple[str, int, int]]:
    sizes = [cfg.query_dim, *cfg.dense_sizes, cfg.n_classes]
    names = [f"dense{i + 1}" for i in range(len(cfg.dense_sizes))] + ["out"]
    return [(n, sizes[i], sizes[i + 1]) for i, n in enumerate(names)]


def param_shapes(cfg: AttRnnConfig) -> dict[str, tuple[int, ...]]:
    """Ordered name -> shape map of every trainable array."""
    h = cfg.lstm_hidden
    shapes: dict[str, tuple[int, ...]] = {
        "conv1/kernel": (cfg.conv1_kt, 1, 1, cfg.conv1_filters),
        "conv1/bias": (cfg.conv1_filters,),
        "bn1/gamma": (cfg.conv1_filters,),
        "bn1/beta": (cfg.conv1_filters,),
        "conv2/kernel": (cfg.conv2_kt, 1, cfg.conv1_filters, cfg.conv2_filters),
        "conv2/bias": (cfg.conv2_filters,),
        "bn2/gamma": (cfg.conv2_filters,),
        "bn2/beta": (cfg.conv2_filters,),
    }
    n_in = cfg.n_mels
    for layer in range(1, cfg.lstm_layers + 1):
        for d in ("fwd", "bwd"):
            shapes[f"lstm{layer}_{d}/W"] = (n_in, 4 * h)
            shapes[f"lstm{layer}_{d}/U"] = (h, 4 * h)
            shapes[f"lstm{layer}_{d}/b"] = (4 * h,)
        n_in = 2 * h
    shapes["query/W"] = (2 * h, cfg.query_dim)
    shapes["query/b"] = (cfg.query_dim,)
    for name, fan_in, fan_out in _dense_layers(cfg):
        shapes[f"{name}/W"] = (fan_in, fan_out)
        shapes[f"{name}/b"] = (fan_out,)
    return shapes


def count_params(cfg: AttRnnConfig) -> tuple[int, dict[str, int]]:
    """Analytic trainable-parameter count, total and per layer."""
    h = cfg.lstm_hidden
    c1, c2 = cfg.conv1_filters, cfg.conv2_filters
    layers = {
        "conv1": cfg.conv1_kt * 1 * c1 + c1,
        "bn1": 2 * c1,
        "conv2": cfg.conv2_kt * c1 * c2 + c2,
        "bn2": 2 * c2,
    }
    n_in = cfg.n_mels
    for layer in range(1, cfg.lstm_layers + 1):
        layers[f"bilstm{layer}"] = 2 * 4 * h * (n_in + h + 1)
        n_in = 2 * h
    layers["query"] = 2 * h * cfg.query_dim + cfg.query_dim
    for name, fan_in, fan_out in _dense_layers(cfg):
        layers[name] = fan_in * fan_out + fan_out
    return sum(layers.values()), layers


@dataclass(eq=False)
class AttRnnParams:
    config: AttRnnConfig
    tensors: dict[str, Tensor]
    bn: dict[str, BatchNormState]
    version: int = PARAMS_VERSION

    def __post_init__(self):
        expected = param_shapes(self.config)
        if list(self.tensors) != list(expected):
            missing = set(expected) ^ set(self.tensors)
            raise ShapeError(f"parameter names do not match config: {sorted(missing)}")
        for name, shape in expected.items():
            if self.tensors[name].shape != shape:
                raise ShapeError(f"{name}: shape {self.tensors[name].shape}, expected {shape}")

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    @property
    def dtype(self):
        return self.tensors["conv1/kernel"].dtype

    def trainable(self) -> dict[str, Tensor]:
        return self.tensors

    def n_trainable(self) -> int:
        return sum(t.data.size for t in self.tensors.values())

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for name, st in self.bn.items():
            out[f"{name}/running_mean"] = st.running_mean
            out[f"{name}/running_var"] = st.running_var
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        """Every stored array (trainable and running statistics) by name."""
        out = {name: t.data for name, t in self.tensors.items()}
        out.update(self.buffers())
        return out

    def lstm(self, layer: int, direction: str) -> LstmWeights:
        p = f"lstm{layer}_{direction}/"
        return LstmWeights(self.tensors[p + "W"], self.tensors[p + "U"], self.tensors[p + "b"])

    def copy(self, dtype=None) -> AttRnnParams:
        dtype = dtype or self.dtype
        tensors = {n: Tensor(t.data.astype(dtype, copy=True), requires_grad=t.requires_grad, name=n)
                   for n, t in self.tensors.items()}
        bn = {n: BatchNormState(s.running_mean.astype(dtype, copy=True),
                                s.running_var.astype(dtype, copy=True), s.momentum, s.eps)
              for n, s in self.bn.items()}
        return AttRnnParams(self.config, tensors, bn, self.version)

    @classmethod
    def from_arrays(cls, cfg: AttRnnConfig, arrays: dict[str, np.ndarray]) -> AttRnnParams:
        tensors = {n: Tensor(np.array(arrays[n]), requires_grad=True, name=n) for n in param_shapes(cfg)}
        bn = {}
        for name in ("bn1", "bn2"):
            bn[name] = BatchNormState(np.array(arrays[f"{name}/running_mean"]),
                                      np.array(arrays[f"{name}/running_var"]),
                                      cfg.bn_momentum, cfg.bn_eps)
        return cls(cfg, tensors, bn)


def glorot_bound(fan_in: int, fan_out: int) -> float:
    return float(np.sqrt(6.0 / (fan_in + fan_out)))


def _orthogonal(rng: np.random.Generator, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def init_params(cfg: AttRnnConfig, seed: int = 0, dtype=np.float32) -> AttRnnParams:
    """Seeded initialization.

    Kernels are Glorot-uniform, each gate block of a recurrent matrix is an
    orthogonal square matrix, biases are zero except the LSTM forget gate (1),
    and batch-norm scales start at one.
    """
    rng = np.random.default_rng(seed)
    h = cfg.lstm_hidden
    arrays = {}
    for name, shape in param_shapes(cfg).items():
        kind = name.split("/")[1]
        if kind == "kernel":
            kt, kf, cin, cout = shape
            bound = glorot_bound(kt * kf * cin, kt * kf * cout)
            arr = rng.uniform(-bound, bound, shape)
        elif kind == "W":
            arr = rng.uniform(-1, 1, shape) * glorot_bound(*shape)
        elif kind == "U":
            arr = np.concatenate([_orthogonal(rng, h) for _ in range(4)], axis=1)
        elif kind == "gamma":
            arr = np.ones(shape)
        elif kind == "b" and name.startswith("lstm"):
            arr = np.zeros(shape)
            arr[h:2 * h] = 1.0
        else:
            arr = np.zeros(shape)
        arrays[name] = arr.astype(dtype)
    for name, ch in (("bn1", cfg.conv1_filters), ("bn2", cfg.conv2_filters)):
        arrays[f"{name}/running_mean"] = np.zeros(ch, dtype=dtype)
        arrays[f"{name}/running_var"] = np.ones(ch, dtype=dtype)
    return AttRnnParams.from_arrays(cfg, arrays)


@dataclass
class AttentionTrace:
    weights: np.ndarray
    query_frame_index: int
    predicted_class: int
    logits: np.ndarray
    probabilities: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.probabilities is None:
            z = self.logits.astype(np.float64)
            e = np.exp(z - z.max())
            self.probabilities = e / e.sum()


@contextmanager
def _layer(name: str):
    try:
        yield
    except ShapeError as exc:
        raise ShapeError(f"[{name}] {exc}") from exc


def attend(lstm_out: Tensor, query_w: Tensor, query_b: Tensor) -> tuple[Tensor, Tensor]:
    """Dot-product attention queried by a projection of the middle frame.

    lstm_out: [..., T, 2H]. Returns (context [..., 2H], weights [..., T]).
    """
    steps = lstm_out.shape[-2]
    if steps < 1:
        raise ShapeError("attend: empty sequence")
    mid = ad.take(lstm_out, steps // 2, axis=-2)
    query = ad.add(ad.matmul(mid, query_w), query_b)
    weights = ad.softmax(ad.dot_scores(lstm_out, query))
    return ad.mean_weighted(lstm_out, weights), weights


def argmax_lowest(x: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class
    return np.argmax(x, axis=-1)


def forward_features(params: AttRnnParams, mel, mode: str = "infer") -> tuple[Tensor, Tensor]:
    """Run the network on log-mel features [B, T, n_mels] (or [T, n_mels]).

    Returns (logits, attention weights) with matching leading axes.
    """
    cfg = params.config
    x = mel if isinstance(mel, Tensor) else Tensor(np.asarray(mel, dtype=params.dtype))
    single = x.ndim == 2
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 3 or x.shape[-1] != cfg.n_mels:
        raise ShapeError(f"[input] expected [B, T, {cfg.n_mels}] features, got {x.shape}")
    bsz, steps, n_mels = x.shape
    p = params.tensors

    with _layer("conv1"):
        h = ad.reshape(x, (bsz, steps, n_mels, 1))
        h = ad.conv_time(h, p["conv1/kernel"], p["conv1/bias"])
    with _layer("bn1"):
        h = ad.relu(ad.batch_norm(h, p["bn1/gamma"], p["bn1/beta"], params.bn["bn1"], mode))
    with _layer("conv2"):
        h = ad.conv_time(h, p["conv2/kernel"], p["conv2/bias"])
    with _layer("bn2"):
        h = ad.relu(ad.batch_norm(h, p["bn2/gamma"], p["bn2/beta"], params.bn["bn2"], mode))
        h = ad.reshape(h, (bsz, steps, n_mels))
    for layer in range(1, cfg.lstm_layers + 1):
        with _layer(f"bilstm{layer}"):
            h = ad.bilstm(h, params.lstm(layer, "fwd"), params.lstm(layer, "bwd"))
    with _layer("attention"):
        h, weights = attend(h, p["query/W"], p["query/b"])
    dense = _dense_layers(cfg)
    for i, (name, _, _) in enumerate(dense):
        with _layer(name):
            h = ad.add(ad.matmul(h, p[f"{name}/W"]), p[f"{name}/b"])
            if i < len(dense) - 1:
                h = ad.relu(h)
    if single:
        h = ad.reshape(h, h.shape[1:])
        weights = ad.reshape(weights, weights.shape[1:])
    return h, weights


def forward(clip: AudioClip, params: AttRnnParams, mode: str = "infer",
            spec_cfg: SpectrogramConfig = SpectrogramConfig()) -> tuple[Tensor, AttentionTrace]:
    """Classify one clip; returns (logits [n_classes], attention trace)."""
    if spec_cfg.n_mels != params.config.n_mels:
        raise ConfigError(f"frontend has {spec_cfg.n_mels} mel bands, model expects {params.config.n_mels}")
    mel = log_mel(clip, spec_cfg)
    logits, weights = forward_features(params, mel.values, mode)
    trace = AttentionTrace(
        weights=weights.data.astype(np.float64),
        query_frame_index=mel.values.shape[0] // 2,
        predicted_class=int(argmax_lowest(logits.data)),
        logits=logits.data.copy(),
    )
    return logits, trace


def predict_features(params: AttRnnParams, features: np.ndarray, batch_size: int = 64
                     ) -> tuple[np.ndarray, np.ndarray]:
    """Infer-mode logits and attention weights for [N, T, n_mels] features."""
    logits, weights = [], []
    for start in range(0, len(features), batch_size):
        lg, w = forward_features(params, features[start:start + batch_size], "infer")
        logits.append(lg.data)
        weights.append(w.data)
    if not logits:
        return np.zeros((0, params.config.n_classes)), np.zeros((0, 0))
    return np.concatenate(logits), np.concatenate(weights)
