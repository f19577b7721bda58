"""Adam training loop with step-decay schedule, early stopping and binary checkpoints."""

from __future__ import annotations

import io
import json
import logging
import struct
import zlib
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Union

import numpy as np

from . import autodiff as ad
from .audio_io import AudioClip, DatasetManifest, TaskDataset, TaskSpec, fit_length, read_wav
from ._files import atomic_write
from .dsp import SpectrogramConfig, log_mel
from .errors import CheckpointError, ConfigError, NumericError
from .model import AttRnnConfig, AttRnnParams, argmax_lowest, forward_features, init_params, predict_features

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 0.001
    decay_factor: float = 0.4
    decay_every: int = 10
    batch_size: int = 64
    max_epochs: int = 40
    patience: int = 10
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7

    def __post_init__(self):
        positive = (self.lr0, self.decay_factor, self.decay_every, self.batch_size,
                    self.max_epochs, self.patience, self.eps)
        if any(v <= 0 for v in positive):
            raise ConfigError("training hyperparameters must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("Adam betas must lie in [0, 1)")


def lr_at(epoch: int, cfg: TrainConfig = TrainConfig()) -> float:
    """Step decay: ``lr0 * decay_factor ** (epoch // decay_every)``."""
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return cfg.lr0 * cfg.decay_factor ** (epoch // cfg.decay_every)


# -- Adam ----------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({n: np.zeros_like(p) for n, p in params.items()},
                   {n: np.zeros_like(p) for n, p in params.items()}, 0)

    def copy(self) -> AdamState:
        return AdamState({n: a.copy() for n, a in self.m.items()},
                         {n: a.copy() for n, a in self.v.items()}, self.t)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState,
              lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-7
              ) -> tuple[dict[str, np.ndarray], AdamState]:
    """Bias-corrected Adam update, applied to ``params`` in place.

    The gradients are screened for NaN before anything is modified.
    """
    for name, g in grads.items():
        if not np.isfinite(g).all():
            raise NumericError(f"non-finite gradient for {name} at Adam step {state.t + 1}")
    if not state.m:
        fresh = AdamState.zeros_like(params)
        state.m, state.v = fresh.m, fresh.v
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m, v = state.m[name], state.v[name]
        if m.shape != p.shape or g.shape != p.shape:
            raise ConfigError(f"Adam shape mismatch for {name}: {p.shape} / {g.shape} / {m.shape}")
        dt = p.dtype.type
        m *= dt(beta1)
        m += dt(1 - beta1) * g
        v *= dt(beta2)
        v += dt(1 - beta2) * (g * g)
        m_hat = m / dt(c1)
        v_hat = v / dt(c2)
        p -= dt(lr) * m_hat / (np.sqrt(v_hat) + dt(eps))
    return params, state


# -- early stopping --------------------------------------------------------------

class EarlyStopping:
    """Tracks the best validation score; ties do not count as improvement."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = -1
        self.bad_epochs = 0

    def update(self, epoch: int, score: float) -> tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if score > self.best:
            self.best, self.best_epoch, self.bad_epochs = score, epoch, 0
            return True, False
        self.bad_epochs += 1
        return False, self.bad_epochs >= self.patience


# -- checkpoints ---------------------------------------------------------------

MAGIC = b"ATTRNNKW"
FORMAT_VERSION = 1


@dataclass(eq=False)
class Checkpoint:
    params: AttRnnParams
    train_config: TrainConfig = field(default_factory=TrainConfig)
    spec_config: SpectrogramConfig = field(default_factory=SpectrogramConfig)
    labels: tuple[str, ...] = ()
    task: str = ""
    epoch: int = -1
    best_val_accuracy: float = float("nan")
    adam: AdamState | None = None

    @property
    def model_config(self) -> AttRnnConfig:
        return self.params.config


def _header(ck: Checkpoint) -> dict:
    return {
        "model_config": ck.model_config.to_dict(),
        "train_config": asdict(ck.train_config),
        "spec_config": asdict(ck.spec_config),
        "labels": list(ck.labels),
        "task": ck.task,
        "epoch": ck.epoch,
        "best_val_accuracy": ck.best_val_accuracy,
        "adam_t": ck.adam.t if ck.adam else None,
        "params_version": ck.params.version,
    }


def checkpoint_bytes(ck: Checkpoint) -> bytes:
    """Serialize: magic, version byte, JSON header, length-prefixed float32 LE records, CRC32."""
    records = [(f"param/{n}", a) for n, a in ck.params.arrays().items()]
    if ck.adam is not None:
        records += [(f"adam_m/{n}", a) for n, a in ck.adam.m.items()]
        records += [(f"adam_v/{n}", a) for n, a in ck.adam.v.items()]
    head = json.dumps(_header(ck), sort_keys=True).encode("utf-8")

    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<B", FORMAT_VERSION))
    buf.write(struct.pack("<I", len(head)))
    buf.write(head)
    buf.write(struct.pack("<I", len(records)))
    for name, arr in records:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    body = buf.getvalue()
    return body + struct.pack("<I", zlib.crc32(body))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.pos} (needed {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def checkpoint_from_bytes(data: bytes) -> Checkpoint:
    r = _Reader(data)
    magic = r.take(len(MAGIC))
    version = r.unpack("<B")[0] if len(data) > len(MAGIC) else None
    if magic != MAGIC or version != FORMAT_VERSION:
        raise CheckpointError(
            f"bad checkpoint header: expected {MAGIC!r} v{FORMAT_VERSION}, found {magic!r} v{version}")
    if len(data) < len(MAGIC) + 1 + 4 + 4:
        raise CheckpointError("checkpoint truncated")
    stored_crc = struct.unpack("<I", data[-4:])[0]
    try:
        (hlen,) = r.unpack("<I")
        header = json.loads(r.take(hlen).decode("utf-8"))
        (count,) = r.unpack("<I")
        arrays: dict[str, np.ndarray] = {}
        for _ in range(count):
            (nlen,) = r.unpack("<H")
            name = r.take(nlen).decode("utf-8")
            (ndim,) = r.unpack("<B")
            shape = r.unpack(f"<{ndim}I")
            size = int(np.prod(shape, dtype=np.int64))
            arrays[name] = np.frombuffer(r.take(4 * size), dtype="<f4").astype(np.float32).reshape(shape)
    except (UnicodeDecodeError, json.JSONDecodeError, struct.error) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    if r.pos != len(data) - 4:
        raise CheckpointError(f"checkpoint length mismatch: records end at {r.pos}, file has {len(data)} bytes")
    if zlib.crc32(data[:-4]) != stored_crc:
        raise CheckpointError("checkpoint checksum mismatch")

    try:
        mcfg = AttRnnConfig.from_dict(header["model_config"])
        params = AttRnnParams.from_arrays(
            mcfg, {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
        adam = None
        if header["adam_t"] is not None:
            adam = AdamState(
                {k[len("adam_m/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_m/")},
                {k[len("adam_v/"):]: v.copy() for k, v in arrays.items() if k.startswith("adam_v/")},
                header["adam_t"])
        return Checkpoint(
            params=params,
            train_config=TrainConfig(**header["train_config"]),
            spec_config=SpectrogramConfig(**header["spec_config"]),
            labels=tuple(header["labels"]),
            task=header["task"],
            epoch=header["epoch"],
            best_val_accuracy=header["best_val_accuracy"],
            adam=adam,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint content invalid: {exc}") from exc


def save_checkpoint(path: str | Path, ck: Checkpoint) -> None:
    atomic_write(path, checkpoint_bytes(ck))


def load_checkpoint(path: str | Path) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_bytes(data)


# -- training loop ---------------------------------------------------------------

@dataclass
class FeatureSet:
    features: np.ndarray  # [N, T, n_mels]
    labels: np.ndarray    # [N]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.features) != len(self.labels):
            raise ConfigError("features and labels differ in length")

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def from_clips(cls, examples: list[tuple[AudioClip, int]], spec_cfg: SpectrogramConfig,
                   dtype=np.float32) -> FeatureSet:
        feats = np.stack([log_mel(c, spec_cfg).values for c, _ in examples]).astype(dtype)
        return cls(feats, np.array([y for _, y in examples]))


@dataclass
class HistoryRow:
    epoch: int
    lr: float
    train_loss: float
    val_accuracy: float
    steps: int


def history_csv(history: list[HistoryRow]) -> str:
    lines = ["epoch,lr,train_loss,val_accuracy"]
    lines += [f"{h.epoch},{h.lr!r},{h.train_loss!r},{h.val_accuracy!r}" for h in history]
    return "\n".join(lines) + "\n"


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[HistoryRow]
    steps: int
    stopped_early: bool


class TrainingAborted(NumericError):
    def __init__(self, message: str, last_good: Checkpoint):
        super().__init__(message)
        self.last_good = last_good


def accuracy(params: AttRnnParams, data: FeatureSet, batch_size: int = 64) -> float:
    if len(data) == 0:
        return 0.0
    logits, _ = predict_features(params, data.features, batch_size)
    return int((argmax_lowest(logits) == data.labels).sum()) / len(data)


Source = Union[FeatureSet, Callable[[int], FeatureSet]]


def fit(train_data: Source, val_data: Source | None, model_cfg: AttRnnConfig,
        train_cfg: TrainConfig = TrainConfig(), spec_cfg: SpectrogramConfig = SpectrogramConfig(),
        *, labels: tuple[str, ...] = (), task: str = "",
        params: AttRnnParams | None = None,
        val_score: Callable[[AttRnnParams, int], float] | None = None,
        on_step: Callable[[int, float], None] | None = None,
        abort_path: str | Path | None = None) -> TrainResult:
    """Train from scratch (or from ``params``) and return the best checkpoint.

    ``train_data``/``val_data`` are fixed feature sets or callables of the
    epoch index. ``val_score`` replaces validation accuracy when given.
    """
    if params is None:
        params = init_params(model_cfg, train_cfg.seed)
    tensors = params.trainable()
    state = AdamState.zeros_like({n: t.data for n, t in tensors.items()})
    stopper = EarlyStopping(train_cfg.patience)
    history: list[HistoryRow] = []
    best: Checkpoint | None = None
    steps = 0
    stopped_early = False

    def snapshot(epoch: int, score: float) -> Checkpoint:
        return Checkpoint(params.copy(), train_cfg, spec_cfg, tuple(labels), task, epoch, score, state.copy())

    last_good = snapshot(-1, float("nan"))
    for epoch in range(train_cfg.max_epochs):
        data = train_data(epoch) if callable(train_data) else train_data
        if len(data) == 0:
            raise ConfigError("empty training set")
        lr = lr_at(epoch, train_cfg)
        rng = np.random.default_rng([train_cfg.seed, epoch])
        order = rng.permutation(len(data))
        loss_sum = 0.0
        for start in range(0, len(order), train_cfg.batch_size):
            idx = order[start:start + train_cfg.batch_size]
            for t in tensors.values():
                t.grad = None
            try:
                with ad.Tape() as tape:
                    logits, _ = forward_features(params, data.features[idx], "train")
                    loss = ad.cross_entropy(logits, data.labels[idx])
                if not np.isfinite(loss.data):
                    raise NumericError(f"non-finite loss {float(loss.data)}")
                tape.backward(loss)
                grads = {n: t.grad if t.grad is not None else np.zeros_like(t.data)
                         for n, t in tensors.items()}
                adam_step({n: t.data for n, t in tensors.items()}, grads, state, lr,
                          train_cfg.beta1, train_cfg.beta2, train_cfg.eps)
            except NumericError as exc:
                if abort_path is not None:
                    save_checkpoint(abort_path, last_good)
                raise TrainingAborted(f"epoch {epoch} step {steps + 1}: {exc}", last_good) from exc
            steps += 1
            loss_sum += float(loss.data) * len(idx)
            if on_step is not None:
                on_step(steps, float(loss.data))
        train_loss = loss_sum / len(data)

        if val_score is not None:
            score = float(val_score(params, epoch))
        else:
            vdata = val_data(epoch) if callable(val_data) else val_data
            score = accuracy(params, vdata)
        history.append(HistoryRow(epoch, lr, train_loss, score, steps))
        log.info("epoch %d lr %.3g loss %.4f val_acc %.4f", epoch, lr, train_loss, score)

        improved, stop = stopper.update(epoch, score)
        last_good = snapshot(epoch, score)
        if improved:
            best = last_good
        if stop:
            stopped_early = True
            break

    if best is None:
        raise NumericError("no epoch produced a comparable validation score")
    return TrainResult(best, history, steps, stopped_early)


def train(manifest: DatasetManifest, task: TaskSpec, model_cfg: AttRnnConfig | None = None,
          train_cfg: TrainConfig = TrainConfig(), spec_cfg: SpectrogramConfig = SpectrogramConfig(),
          val_split: str = "validation", cache_features: bool = True, **kw) -> TrainResult:
    """Train on a dataset manifest for one task."""
    model_cfg = model_cfg or AttRnnConfig(n_classes=task.n_classes, n_mels=spec_cfg.n_mels)
    if model_cfg.n_classes != task.n_classes:
        raise ConfigError(f"model has {model_cfg.n_classes} classes, task {task.name} needs {task.n_classes}")
    train_set = TaskDataset(manifest, "train", task, spec_cfg.raw_len, train_cfg.seed)
    val_set = TaskDataset(manifest, val_split, task, spec_cfg.raw_len, train_cfg.seed)
    cache: dict = {}

    def materialize(ds: TaskDataset, epoch: int) -> FeatureSet:
        feats, ys = [], []
        for path, y in ds.examples(epoch):
            f = cache.get(path)
            if f is None:
                clip = fit_length(read_wav(manifest.root / path), spec_cfg.raw_len)
                f = log_mel(clip, spec_cfg).values.astype(np.float32)
                if cache_features:
                    cache[path] = f
            feats.append(f)
            ys.append(y)
        for k, clip in enumerate(ds.silence_clips()):
            key = (ds.split_name, "silence", k)
            if key not in cache:
                cache[key] = log_mel(clip, spec_cfg).values.astype(np.float32)
            feats.append(cache[key])
            ys.append(task.silence_index)
        if not feats:
            raise ConfigError(f"split {ds.split_name!r} has no examples for task {task.name}")
        return FeatureSet(np.stack(feats), np.array(ys))

    return fit(lambda e: materialize(train_set, e),
               (lambda e: materialize(val_set, 0)),
               model_cfg, train_cfg, spec_cfg, labels=task.target_labels, task=task.name, **kw)


def repeat_runs(manifest: DatasetManifest, task: TaskSpec, seeds, train_cfg: TrainConfig = TrainConfig(),
                **kw) -> dict:
    """Train once per seed; returns per-run best validation accuracy, mean and std."""
    accs = [train(manifest, task, train_cfg=replace(train_cfg, seed=s), **kw).best.best_val_accuracy
            for s in seeds]
    return {"seeds": list(seeds), "val_accuracy": accs,
            "mean": float(np.mean(accs)), "std": float(np.std(accs))}
