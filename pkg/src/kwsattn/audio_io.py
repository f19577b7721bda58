"""WAV decoding, clip length normalization, dataset manifests and task label maps."""

from __future__ import annotations

import csv
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import ConfigError, DecodeError, ManifestError, SkipSample, UnsupportedFormat

RAW_LEN = 16000
SAMPLE_RATE = 16000
NOISE_DIR = "_background_noise_"
SILENCE = "_silence_"
UNKNOWN = "_unknown_"

WAVE_FORMAT_PCM = 1

# Speech Commands V2 vocabulary; V1 lacks backward, follow, forward, learn, visual.
ALL_WORDS = (
    "backward", "bed", "bird", "cat", "dog", "down", "eight", "five", "follow",
    "forward", "four", "go", "happy", "house", "learn", "left", "marvin", "nine",
    "no", "off", "on", "one", "right", "seven", "sheila", "six", "stop", "three",
    "tree", "two", "up", "visual", "wow", "yes", "zero",
)
CMD10 = ("yes", "no", "up", "down", "left", "right", "on", "off", "stop", "go")
DIGITS = ("zero", "one", "two", "three", "four", "five", "six", "seven", "eight", "nine")


@dataclass(frozen=True, eq=False)
class AudioClip:
    samples: np.ndarray
    sample_rate_hz: int = SAMPLE_RATE
    label: str = ""
    speaker_hash_key: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float32)
        if samples.ndim != 1:
            raise ValueError(f"clip samples must be 1-D, got shape {samples.shape}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        if self.sample_rate_hz <= 0:
            raise ValueError("sample_rate_hz must be positive")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz


@dataclass(frozen=True)
class TaskSpec:
    name: str
    target_labels: tuple[str, ...]
    has_unknown: bool
    has_silence: bool

    @property
    def n_classes(self) -> int:
        return len(self.target_labels)

    @property
    def commands(self) -> tuple[str, ...]:
        return tuple(lb for lb in self.target_labels if lb not in (UNKNOWN, SILENCE, "other"))

    @property
    def unknown_index(self) -> int | None:
        for name in (UNKNOWN, "other"):
            if name in self.target_labels and self.has_unknown:
                return self.target_labels.index(name)
        return None

    @property
    def silence_index(self) -> int | None:
        if not self.has_silence:
            return None
        if SILENCE in self.target_labels:
            return self.target_labels.index(SILENCE)
        # word35: silence clips are the only members of the catch-all class
        return self.target_labels.index(UNKNOWN)


TASKS: dict[str, TaskSpec] = {
    "cmd12": TaskSpec("cmd12", tuple(sorted(CMD10)) + (UNKNOWN, SILENCE), True, True),
    "cmd20": TaskSpec("cmd20", tuple(sorted(CMD10 + DIGITS)) + (UNKNOWN,), True, False),
    "word35": TaskSpec("word35", tuple(sorted(ALL_WORDS)) + (UNKNOWN,), False, True),
    "left_right": TaskSpec("left_right", ("left", "right", "other"), True, False),
}


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ConfigError(f"unknown task {name!r}; choose from {sorted(TASKS)}") from None


def resolve_label(raw_word: str, task: TaskSpec) -> int:
    """Map a dataset word (or the silence pseudo-word) to a class index.

    Raises SkipSample when the task has no class for the word.
    """
    if raw_word == SILENCE:
        idx = task.silence_index
        if idx is None:
            raise SkipSample(f"task {task.name} has no silence class")
        return idx
    if raw_word in task.commands:
        return task.target_labels.index(raw_word)
    idx = task.unknown_index
    if idx is None:
        raise SkipSample(f"word {raw_word!r} is not part of task {task.name}")
    return idx


# -- WAV ---------------------------------------------------------------------

def _iter_chunks(data: bytes, start: int):
    pos = start
    while pos + 8 <= len(data):
        cid, size = struct.unpack_from("<4sI", data, pos)
        body = data[pos + 8:pos + 8 + size]
        if len(body) < size:
            raise DecodeError(f"chunk {cid!r} truncated: declared {size} bytes, have {len(body)}")
        yield cid, body
        pos += 8 + size + (size & 1)


def decode_wav(data: bytes, label: str = "", speaker_hash_key: str = "") -> AudioClip:
    """Decode a mono 16-bit PCM RIFF/WAVE byte string."""
    if len(data) < 12:
        raise DecodeError("file too short for a RIFF header")
    riff, _, wave = struct.unpack_from("<4sI4s", data, 0)
    if riff != b"RIFF" or wave != b"WAVE":
        raise DecodeError("missing RIFF/WAVE magic")

    fmt = None
    pcm = None
    for cid, body in _iter_chunks(data, 12):
        if cid == b"fmt ":
            if len(body) < 16:
                raise DecodeError("fmt chunk shorter than 16 bytes")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif cid == b"data":
            pcm = body
    if fmt is None:
        raise DecodeError("no fmt chunk")
    if pcm is None:
        raise DecodeError("no data chunk")

    tag, channels, rate, _, block_align, bits = fmt
    if tag != WAVE_FORMAT_PCM:
        raise UnsupportedFormat(f"format tag {tag} is not PCM")
    if channels != 1:
        raise UnsupportedFormat(f"{channels} channels; only mono is supported")
    if bits != 16:
        raise UnsupportedFormat(f"{bits}-bit samples; only 16-bit is supported")
    if rate == 0:
        raise DecodeError("sample rate is zero")
    if len(pcm) % 2:
        pcm = pcm[:-1]

    ints = np.frombuffer(pcm, dtype="<i2")
    samples = ints.astype(np.float32) / np.float32(32768.0)
    return AudioClip(samples, int(rate), label, speaker_hash_key)


def encode_wav(samples: np.ndarray, sample_rate_hz: int = SAMPLE_RATE) -> bytes:
    """Encode float samples in [-1, 1] (or raw int16) as mono PCM16 WAV bytes."""
    samples = np.asarray(samples)
    if samples.dtype != np.int16:
        samples = np.clip(np.round(samples * 32768.0), -32768, 32767).astype(np.int16)
    payload = samples.astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(payload), b"WAVE",
        b"fmt ", 16, WAVE_FORMAT_PCM, 1, sample_rate_hz, sample_rate_hz * 2, 2, 16,
        b"data", len(payload),
    )
    return header + payload


def read_wav(path: str | Path, label: str = "") -> AudioClip:
    path = Path(path)
    return decode_wav(path.read_bytes(), label=label, speaker_hash_key=path.stem)


def fit_length(clip: AudioClip, raw_len: int = RAW_LEN) -> AudioClip:
    """Zero-pad symmetrically or center-crop to exactly ``raw_len`` samples."""
    n = len(clip)
    if n == raw_len:
        return clip
    if n < raw_len:
        left = (raw_len - n) // 2
        out = np.zeros(raw_len, dtype=np.float32)
        out[left:left + n] = clip.samples
    else:
        start = (n - raw_len) // 2
        out = clip.samples[start:start + raw_len]
    return AudioClip(out, clip.sample_rate_hz, clip.label, clip.speaker_hash_key)


# -- manifests -----------------------------------------------------------------

SPLITS = ("train", "validation", "test")


@dataclass
class DatasetManifest:
    root: Path
    entries: list[tuple[str, str, str]]
    noise_files: list[str] = field(default_factory=list)

    def split(self, name: str) -> list[tuple[str, str]]:
        if name == "all":
            return [(p, lb) for p, lb, _ in self.entries]
        if name not in SPLITS:
            raise ManifestError(f"unknown split {name!r}")
        return [(p, lb) for p, lb, s in self.entries if s == name]

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["path", "label", "split"])
        writer.writerows(self.entries)
        return buf.getvalue()


def _read_list(path: Path) -> set[str]:
    if not path.is_file():
        raise ManifestError(f"list file not found: {path}")
    text = path.read_text(encoding="utf-8")
    return {line.strip().replace("\\", "/") for line in text.splitlines() if line.strip()}


def build_manifest(root, validation_list=None, test_list=None) -> DatasetManifest:
    """Assign every word WAV under ``root`` to a split using the published lists."""
    root = Path(root)
    validation_list = Path(validation_list) if validation_list else root / "validation_list.txt"
    test_list = Path(test_list) if test_list else root / "testing_list.txt"
    val_set = _read_list(validation_list)
    test_set = _read_list(test_list)
    if not root.is_dir():
        raise ManifestError(f"dataset root not found: {root}")

    entries = []
    noise = []
    for word_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        wavs = sorted(word_dir.glob("*.wav"))
        if word_dir.name == NOISE_DIR:
            noise = [w.relative_to(root).as_posix() for w in wavs]
            continue
        for wav in wavs:
            rel = wav.relative_to(root).as_posix()
            if rel in test_set:
                split = "test"
            elif rel in val_set:
                split = "validation"
            else:
                split = "train"
            entries.append((rel, word_dir.name, split))

    for name in SPLITS:
        if not any(s == name for _, _, s in entries):
            raise ManifestError(f"split {name!r} is empty under {root}")
    return DatasetManifest(root, entries, noise)


# -- per-epoch example sampling -----------------------------------------------

class TaskDataset:
    """Materializes (clip, class index) examples of one split for one task.

    Unknown-word clips are downsampled to the mean per-command count and
    silence clips are cut from the background-noise recordings, also at the
    mean per-command count. The training split redraws its unknown subset
    every epoch; evaluation splits draw once with a fixed seed.
    """

    def __init__(self, manifest: DatasetManifest, split: str, task: TaskSpec,
                 raw_len: int = RAW_LEN, seed: int = 0):
        self.manifest = manifest
        self.split_name = split
        self.task = task
        self.raw_len = raw_len
        self.seed = seed

        self.known: list[tuple[str, int]] = []
        self.unknown: list[tuple[str, int]] = []
        unk = task.unknown_index
        for path, word in manifest.split(split):
            try:
                idx = resolve_label(word, task)
            except SkipSample:
                continue
            if idx == unk and word not in task.commands:
                self.unknown.append((path, idx))
            else:
                self.known.append((path, idx))

        counts = np.bincount([i for _, i in self.known], minlength=task.n_classes)
        present = [counts[task.target_labels.index(c)] for c in task.commands]
        self.per_class = int(round(float(np.mean(present)))) if present else 0
        self._noise: list[np.ndarray] | None = None

    def _noise_clips(self) -> list[np.ndarray]:
        if self._noise is None:
            self._noise = [read_wav(self.manifest.root / p).samples for p in self.manifest.noise_files]
        return self._noise

    def silence_clips(self) -> list[AudioClip]:
        if self.task.silence_index is None or self.per_class == 0:
            return []
        sources = [n for n in self._noise_clips() if len(n) >= self.raw_len]
        split_salt = SPLITS.index(self.split_name) if self.split_name in SPLITS else 3
        rng = np.random.default_rng([self.seed, 7919, split_salt])
        out = []
        for k in range(self.per_class):
            if sources:
                src = sources[int(rng.integers(len(sources)))]
                start = int(rng.integers(len(src) - self.raw_len + 1))
                gain = float(rng.uniform(0.0, 1.0))
                samples = src[start:start + self.raw_len] * gain
            else:
                samples = np.zeros(self.raw_len, dtype=np.float32)
            out.append(AudioClip(samples, SAMPLE_RATE, SILENCE, f"silence{k}"))
        return out

    def examples(self, epoch: int = 0) -> list[tuple[str | None, int]]:
        """Return (relative path, class) pairs; path None marks a silence slot."""
        chosen = list(self.known)
        if self.unknown:
            draw_seed = epoch if self.split_name == "train" else 0
            rng = np.random.default_rng([self.seed, draw_seed])
            k = min(self.per_class, len(self.unknown))
            pick = np.sort(rng.choice(len(self.unknown), size=k, replace=False))
            chosen += [self.unknown[i] for i in pick]
        return chosen

    def load(self, epoch: int = 0) -> list[tuple[AudioClip, int]]:
        out = [(fit_length(read_wav(self.manifest.root / p), self.raw_len), i)
               for p, i in self.examples(epoch)]
        sil = self.task.silence_index
        out += [(c, sil) for c in self.silence_clips()]
        return out


def load_examples(root: str | Path, items: Iterable[tuple[str, int]], raw_len: int = RAW_LEN
                  ) -> list[tuple[AudioClip, int]]:
    root = Path(root)
    return [(fit_length(read_wav(root / p), raw_len), i) for p, i in items]
