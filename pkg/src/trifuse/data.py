"""Synthetic tri-modal datasets and the on-disk feature format.

A dataset is one ``ModalityBatch`` (token sequences, audio/vision feature
sequences, scalar labels) plus a train/val/test ``DatasetSplit``.  The
synthetic generator plants a recoverable sentiment signal: audio and vision
rows carry the label along a fixed direction under Gaussian noise, and the
text stream emits sentiment-indicator tokens whose frequency rises
monotonically with the label.

On disk a dataset is a JSON manifest next to raw little-endian binary arrays
(row-major, float64 features, int32 tokens); the round trip is bit-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import RngState

SUMMARY_ID = 0
UNK_ID = 1
_N_RESERVED = 2

MODALITIES = ("text", "audio", "vision")

MANIFEST_NAME = "manifest.json"


@dataclass
class Sample:
    """One utterance: token ids, per-step audio/vision features, label."""

    text: np.ndarray
    audio: np.ndarray
    vision: np.ndarray
    label: float


@dataclass
class ModalityBatch:
    """A batch of utterances with per-dataset fixed sequence lengths."""

    text: np.ndarray      # (B, T_l) int32 token ids
    audio: np.ndarray     # (B, T_a, f_a) float64
    vision: np.ndarray    # (B, T_v, f_v) float64
    labels: np.ndarray    # (B,) float64

    def __post_init__(self):
        self.text = np.asarray(self.text, dtype=np.int32)
        self.audio = np.asarray(self.audio, dtype=np.float64)
        self.vision = np.asarray(self.vision, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)

    def __len__(self) -> int:
        return self.text.shape[0]

    def sample(self, i: int) -> Sample:
        return Sample(self.text[i], self.audio[i], self.vision[i], float(self.labels[i]))

    def lengths(self) -> tuple[int, int, int]:
        return self.text.shape[1], self.audio.shape[1], self.vision.shape[1]

    def validate(self, vocab_size: int | None = None) -> None:
        n = len(self)
        if not (self.audio.shape[0] == self.vision.shape[0] == self.labels.shape[0] == n):
            raise ValueError("modalities disagree on the number of samples")
        for name, arr in (("audio", self.audio), ("vision", self.vision),
                          ("labels", self.labels)):
            if not np.isfinite(arr).all():
                raise ValueError(f"non-finite values in {name}")
        if self.text.min() < 0:
            raise ValueError("negative token id")
        if vocab_size is not None and self.text.max() >= vocab_size:
            raise ValueError("token id outside the vocabulary")


@dataclass
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray

    def __post_init__(self):
        self.train = np.asarray(self.train, dtype=np.int64)
        self.val = np.asarray(self.val, dtype=np.int64)
        self.test = np.asarray(self.test, dtype=np.int64)

    def check(self, n: int) -> None:
        parts = [self.train, self.val, self.test]
        all_idx = np.concatenate(parts)
        if len(set(all_idx.tolist())) != all_idx.size:
            raise ValueError("splits overlap")
        if sorted(all_idx.tolist()) != list(range(n)):
            raise ValueError("splits do not cover the dataset")


@dataclass
class SyntheticSpec:
    """Knobs for the synthetic generator.

    ``signal_weights`` apportions the label signal over (text, audio,
    vision) and must sum to one; ``snr`` is the planted signal-to-noise
    ratio.  The label is planted at ``signal_events`` random timestamps
    whose relative positions are shared between audio and vision, so a
    masked event in one modality stays recoverable from the other; the
    amplitude is scaled so the time-mean feature keeps the nominal snr.
    Defaults keep deliberately unequal sequence lengths.
    """

    n_samples: int = 1000
    t_text: int = 20
    t_audio: int = 40
    t_vision: int = 32
    f_audio: int = 5
    f_vision: int = 5
    vocab_size: int = 1000
    snr: float = 10.0
    signal_weights: tuple[float, float, float] = (1 / 3, 1 / 3, 1 / 3)
    signal_events: int = 4
    split_fractions: tuple[float, float] = (0.6, 0.2)   # train, val; rest is test
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_samples, self.t_text, self.t_audio, self.t_vision,
               self.f_audio, self.f_vision) < 1:
            raise ValueError("sizes must be positive")
        if self.vocab_size < _N_RESERVED + 3:
            raise ValueError("vocabulary too small for reserved and indicator ids")
        w = np.asarray(self.signal_weights, dtype=np.float64)
        if w.min() < 0 or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError("signal weights must be nonnegative and sum to 1")
        if self.snr <= 0:
            raise ValueError("snr must be positive")
        if not 1 <= self.signal_events <= min(self.t_audio, self.t_vision):
            raise ValueError("signal_events must fit in the feature sequences")


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def generate_synthetic(spec: SyntheticSpec) -> tuple[ModalityBatch, DatasetSplit]:
    """Draw a dataset with labels uniform on [-3, 3]; bit-identical per seed."""
    spec.validate()
    rng = RngState(spec.seed)
    n = spec.n_samples
    w_text, w_audio, w_vision = spec.signal_weights

    labels = rng.uniform((n,)) * 6.0 - 3.0
    # event times as fractions of the sequence, shared by audio and vision so
    # the modalities are mutually redundant about when the signal occurred
    event_fracs = rng.uniform((n, spec.signal_events))

    def feature_block(t, f, weight):
        # unit direction carrying the label at the event rows; the amplitude
        # is scaled so the time-mean feature has per-dimension signal
        # variance snr * weight (labels have variance 3)
        direction = rng.normal((f,))
        direction /= np.linalg.norm(direction)
        amplitude = (np.sqrt(spec.snr * weight / 3.0) * t / spec.signal_events)
        block = rng.normal((n, t, f))
        rows = np.rint(event_fracs * (t - 1)).astype(np.int64)
        for i in range(n):
            np.add.at(block[i], rows[i], amplitude * labels[i] * direction)
        return block

    audio = feature_block(spec.t_audio, spec.f_audio, w_audio)
    vision = feature_block(spec.t_vision, spec.f_vision, w_vision)

    # text: position 0 is the summary token; the rest mixes indicator tokens
    # (positive or negative band) with filler.  The positive fraction follows
    # a logistic curve in a noisy copy of the label, so indicator frequency
    # is monotone in the label up to snr-controlled jitter.
    usable = spec.vocab_size - _N_RESERVED
    band = max(1, usable // 4)
    pos_lo, pos_hi = _N_RESERVED, _N_RESERVED + band
    neg_lo, neg_hi = pos_hi, pos_hi + band
    fill_lo = neg_hi

    slots = spec.t_text - 1
    strength = min(1.0, 3.0 * w_text) * spec.snr / (spec.snr + 1.0)
    n_indicator = int(round(slots * strength))
    label_jitter = rng.normal((n,), scale=np.sqrt(1.5 / spec.snr))

    text = np.empty((n, spec.t_text), dtype=np.int32)
    text[:, 0] = SUMMARY_ID
    for i in range(n):
        noisy = labels[i] + label_jitter[i]
        n_pos = int(round(n_indicator * _sigmoid(1.6 * noisy)))
        tokens = np.empty(slots, dtype=np.int32)
        tokens[:n_pos] = rng.integers(pos_lo, pos_hi, (n_pos,))
        tokens[n_pos:n_indicator] = rng.integers(neg_lo, neg_hi, (n_indicator - n_pos,))
        if fill_lo < spec.vocab_size:
            tokens[n_indicator:] = rng.integers(fill_lo, spec.vocab_size,
                                                (slots - n_indicator,))
        else:
            tokens[n_indicator:] = UNK_ID
        text[i, 1:] = tokens[rng.permutation(slots)]

    batch = ModalityBatch(text, audio, vision, labels)
    split = _make_split(n, spec.split_fractions, rng)
    return batch, split


def indicator_band(spec: SyntheticSpec) -> tuple[int, int]:
    """Token-id range [lo, hi) of the positive-sentiment indicator band."""
    usable = spec.vocab_size - _N_RESERVED
    band = max(1, usable // 4)
    return _N_RESERVED, _N_RESERVED + band


def _make_split(n: int, fractions, rng: RngState) -> DatasetSplit:
    order = rng.permutation(n)
    n_train = int(n * fractions[0])
    n_val = int(n * fractions[1])
    return DatasetSplit(order[:n_train], order[n_train:n_train + n_val],
                        order[n_train + n_val:])


# ---------------------------------------------------------------------------
# on-disk format

_DTYPES = {"float64": "<f8", "int32": "<i4"}


def save_dataset(path, batch: ModalityBatch, split: DatasetSplit,
                 extra: dict | None = None) -> None:
    """Write manifest.json plus one raw binary file per array."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    arrays = {
        "text": (batch.text, "int32"),
        "audio": (batch.audio, "float64"),
        "vision": (batch.vision, "float64"),
        "labels": (batch.labels, "float64"),
    }
    manifest = {
        "format_version": 1,
        "n_samples": len(batch),
        "arrays": {},
        "splits": {"train": split.train.tolist(), "val": split.val.tolist(),
                   "test": split.test.tolist()},
        "label_stats": {
            "mean": float(batch.labels.mean()),
            "std": float(batch.labels.std()),
            "min": float(batch.labels.min()),
            "max": float(batch.labels.max()),
        },
    }
    if extra:
        manifest["extra"] = extra
    for name, (arr, dtype) in arrays.items():
        fname = f"{name}.bin"
        (root / fname).write_bytes(np.ascontiguousarray(arr.astype(_DTYPES[dtype])).tobytes())
        manifest["arrays"][name] = {"file": fname, "dtype": dtype,
                                    "shape": list(arr.shape)}
    (root / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_features(path) -> tuple[ModalityBatch, DatasetSplit]:
    """Load a dataset directory, validating shapes and finiteness."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest in {root}")
    manifest = json.loads(manifest_path.read_text())

    arrays = {}
    for name in ("text", "audio", "vision", "labels"):
        if name not in manifest.get("arrays", {}):
            raise ValueError(f"manifest missing array entry '{name}'")
        entry = manifest["arrays"][name]
        fpath = root / entry["file"]
        if not fpath.exists():
            raise FileNotFoundError(f"missing modality file {fpath}")
        dtype = _DTYPES[entry["dtype"]]
        raw = np.frombuffer(fpath.read_bytes(), dtype=dtype)
        shape = tuple(entry["shape"])
        expected = int(np.prod(shape))
        if raw.size != expected:
            raise ValueError(
                f"{fpath.name}: expected shape {shape} "
                f"({expected} elements), found {raw.size} elements")
        arrays[name] = raw.reshape(shape).astype(entry["dtype"])

    batch = ModalityBatch(arrays["text"], arrays["audio"], arrays["vision"],
                          arrays["labels"])
    batch.validate()
    splits = manifest["splits"]
    split = DatasetSplit(splits["train"], splits["val"], splits["test"])
    split.check(len(batch))
    return batch, split
