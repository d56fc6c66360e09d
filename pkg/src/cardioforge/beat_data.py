"""Heartbeat records, CSV ingestion, segmentation and synthetic corpora."""
from __future__ import annotations

import csv
import io
from collections import Counter
from dataclasses import dataclass, field
from importlib import resources
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import constants as C
from .errors import DataError

SOURCES = ("real", "gan", "simulator")
SPLITS = ("train", "test")
CSV_HEADER = ["label", "record_id"] + [f"s{i}" for i in range(C.BEAT_LEN)]


@dataclass(frozen=True, eq=False)
class Heartbeat:
    samples: np.ndarray
    label: str
    source: str = "real"
    record_id: str = ""

    def __post_init__(self):
        s = np.array(self.samples, dtype=np.float64)
        if s.shape != (C.BEAT_LEN,):
            raise DataError(f"heartbeat needs {C.BEAT_LEN} samples, got shape {s.shape}")
        if not np.all(np.isfinite(s)):
            raise DataError("heartbeat samples must be finite")
        if self.label not in C.CLASSES:
            raise DataError(f"unknown heartbeat label {self.label!r}")
        if self.source not in SOURCES:
            raise DataError(f"unknown source {self.source!r}")
        s.flags.writeable = False
        object.__setattr__(self, "samples", s)
        object.__setattr__(self, "record_id", str(self.record_id))

    def __eq__(self, other):
        if not isinstance(other, Heartbeat):
            return NotImplemented
        return (
            self.label == other.label
            and self.source == other.source
            and self.record_id == other.record_id
            and np.array_equal(self.samples, other.samples)
        )

    __hash__ = None


@dataclass(frozen=True)
class BeatDataset:
    beats: tuple[Heartbeat, ...]
    split: str = "train"
    class_counts: dict = field(init=False)

    def __post_init__(self):
        if self.split not in SPLITS:
            raise DataError(f"unknown split {self.split!r}")
        beats = tuple(self.beats)
        object.__setattr__(self, "beats", beats)
        counts = Counter(b.label for b in beats)
        object.__setattr__(self, "class_counts", {c: counts.get(c, 0) for c in C.CLASSES})

    def __len__(self):
        return len(self.beats)

    @property
    def record_ids(self) -> set[str]:
        return {b.record_id for b in self.beats}

    def samples(self) -> np.ndarray:
        if not self.beats:
            return np.zeros((0, C.BEAT_LEN))
        return np.stack([b.samples for b in self.beats])

    def labels(self) -> list[str]:
        return [b.label for b in self.beats]

    def of_class(self, label: str) -> "BeatDataset":
        return BeatDataset(tuple(b for b in self.beats if b.label == label), self.split)


def check_disjoint(train: BeatDataset, test: BeatDataset) -> None:
    """Patients may not appear in both splits."""
    if train.split != "train" or test.split != "test":
        raise DataError(f"expected (train, test) splits, got ({train.split}, {test.split})")
    shared = train.record_ids & test.record_ids
    if shared:
        raise DataError(f"records present in both train and test: {sorted(shared)[:10]}")


# --- segmentation --------------------------------------------------------------

def segment(signal, r_peaks, before: int = C.R_PEAK_INDEX, after: int = C.BEAT_LEN - C.R_PEAK_INDEX):
    """Cut windows ``[r - before, r + after)`` around each R peak.

    Peaks too close to either end of the signal are skipped. Returns
    ``(windows, kept_peaks, n_skipped)`` with windows shaped [n, before + after].
    """
    signal = np.asarray(signal, dtype=np.float64)
    kept, windows = [], []
    for r in r_peaks:
        r = int(r)
        if r - before < 0 or r + after > len(signal):
            continue
        kept.append(r)
        windows.append(signal[r - before : r + after])
    width = before + after
    out = np.stack(windows) if windows else np.zeros((0, width))
    return out, kept, len(r_peaks) - len(kept)


def beats_from_signal(signal, r_peaks, labels, record_id: str) -> list[Heartbeat]:
    """Segment a record and attach per-peak labels; unknown symbols are rejected."""
    if len(labels) != len(r_peaks):
        raise DataError("need one label per R peak")
    lab = dict(zip((int(r) for r in r_peaks), labels))
    windows, kept, _ = segment(signal, r_peaks)
    return [Heartbeat(w, lab[r], "real", record_id) for w, r in zip(windows, kept)]


# --- standardization -------------------------------------------------------------

@dataclass(frozen=True)
class Stats:
    mean: float
    std: float

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(f"{self.mean:.17g},{self.std:.17g}\n")

    @classmethod
    def load(cls, path) -> "Stats":
        with open(path, encoding="utf-8") as fh:
            text = fh.read().strip()
        try:
            m, s = (float(v) for v in text.split(","))
        except ValueError:
            raise DataError(f"bad stats file {path}: {text!r}") from None
        if not s > 0:
            raise DataError("stats std must be positive")
        return cls(m, s)


def _as_beats(data) -> tuple[list[Heartbeat] | None, np.ndarray]:
    if isinstance(data, BeatDataset):
        return list(data.beats), data.samples()
    data = list(data) if not isinstance(data, np.ndarray) else data
    if len(data) and isinstance(data[0], Heartbeat):
        return data, np.stack([b.samples for b in data])
    return None, np.atleast_2d(np.asarray(data, dtype=np.float64))


def standardize(beats, stats: Stats | None = None):
    """Shift and scale by a single (mean, std) pair.

    Without ``stats`` the pair is computed from ``beats``, which must then be
    a training split. Returns ``(standardized, stats)`` in the input's form.
    """
    hb, x = _as_beats(beats)
    if stats is None:
        if isinstance(beats, BeatDataset) and beats.split != "train":
            raise DataError("standardization stats must come from the train split")
        if x.size == 0:
            raise DataError("cannot compute stats from an empty set")
        std = float(x.std())
        if not std > 0:
            raise DataError("zero standard deviation; cannot standardize")
        stats = Stats(float(x.mean()), std)
    y = (x - stats.mean) / stats.std
    if hb is None:
        return y, stats
    out = [Heartbeat(row, b.label, b.source, b.record_id) for row, b in zip(y, hb)]
    if isinstance(beats, BeatDataset):
        return BeatDataset(tuple(out), beats.split), stats
    return out, stats


# --- CSV -----------------------------------------------------------------------

def format_csv(beats: Iterable[Heartbeat]) -> str:
    buf = io.StringIO()
    buf.write(",".join(CSV_HEADER) + "\n")
    for b in beats:
        vals = ",".join(format(float(v), ".17g") for v in b.samples)
        buf.write(f"{b.label},{b.record_id},{vals}\n")
    return buf.getvalue()


def save_csv(dataset, path) -> None:
    beats = dataset.beats if isinstance(dataset, BeatDataset) else dataset
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(format_csv(beats))


def load_csv(path, split: str = "train", source: str = "real") -> BeatDataset:
    beats = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("missing header", line=1)
        if header != CSV_HEADER:
            raise DataError("header must be label,record_id,s0,...,s215", line=1)
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(CSV_HEADER):
                raise DataError(f"expected {len(CSV_HEADER)} fields, got {len(row)}", line=lineno)
            label, rid = row[0], row[1]
            if label not in C.CLASSES:
                raise DataError(f"unknown label {label!r}", line=lineno)
            try:
                samples = np.array([float(v) for v in row[2:]])
            except ValueError as exc:
                raise DataError(str(exc), line=lineno) from None
            if not np.all(np.isfinite(samples)):
                raise DataError("non-finite sample", line=lineno)
            beats.append(Heartbeat(samples, label, source, rid))
    return BeatDataset(tuple(beats), split)


def load_splits(train_path, test_path) -> tuple[BeatDataset, BeatDataset]:
    train = load_csv(train_path, "train")
    test = load_csv(test_path, "test")
    check_disjoint(train, test)
    return train, test


def load_split_manifest(path=None) -> dict[str, list[str]]:
    """Read ``NAME: id id ...`` lines; defaults to the bundled DS1/DS2 lists."""
    if path is None:
        text = resources.files("cardioforge.data").joinpath("mitbih_ds1_ds2.txt").read_text()
    else:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    out = {}
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        name, _, ids = line.partition(":")
        out[name.strip()] = ids.split()
    return out


def split_by_manifest(dataset: BeatDataset, train_records, test_records):
    train_records, test_records = set(train_records), set(test_records)
    if train_records & test_records:
        raise DataError("manifest lists a record in both splits")
    train = BeatDataset(tuple(b for b in dataset.beats if b.record_id in train_records), "train")
    test = BeatDataset(tuple(b for b in dataset.beats if b.record_id in test_records), "test")
    return train, test


# --- synthetic corpus --------------------------------------------------------------

@dataclass
class CorpusSpec:
    """Recipe for a desk-scale labelled corpus drawn from the simulator."""

    dists: Mapping[str, object]
    train_counts: Mapping[str, int]
    test_counts: Mapping[str, int] = field(default_factory=dict)
    noise_sigma: float = 0.05
    sample_noise: float = 0.0
    beats_per_record: int = 50
    seed: int = 0


def _class_presets() -> dict[str, np.ndarray]:
    d = np.array(C.DEFAULT_THETA + C.DEFAULT_A + C.DEFAULT_B)
    presets = {"N": d.copy()}
    s = d.copy()
    # Premature atrial origin: early, small, narrow P.
    s[0] = -1.35
    s[5] = 0.45
    s[10] = 0.15
    presets["S"] = s
    v = d.copy()
    # Ventricular origin: no P, wide low QRS, inverted T.
    v[5] = 0.05
    v[6:9] = (-2.0, 18.0, -9.0)
    v[11:14] = (0.2, 0.22, 0.2)
    v[9] = -1.5
    v[14] = 0.5
    presets["V"] = v
    presets["F"] = 0.5 * (d + v)
    return presets


def default_class_distributions(rel_sd: float = 0.05, theta_sd: float = 0.02) -> dict:
    """Per-class parameter distributions used for synthetic corpora."""
    from .param_estimation import EtaDistribution

    out = {}
    for label, mean in _class_presets().items():
        sd = rel_sd * np.abs(mean)
        sd[0:5] = theta_sd
        out[label] = EtaDistribution(label, mean, sd ** 2, 1)
    return out


def make_synthetic_corpus(spec: CorpusSpec) -> tuple[BeatDataset, BeatDataset]:
    """Simulate a (train, test) pair with disjoint pseudo-record ids."""
    from .param_estimation import simulator_only_generate

    out = {}
    for split, counts in (("train", spec.train_counts), ("test", spec.test_counts)):
        beats: list[Heartbeat] = []
        for label in C.CLASSES:
            n = int(counts.get(label, 0))
            if n == 0:
                continue
            if label not in spec.dists:
                raise DataError(f"no distribution for class {label}")
            child = np.random.default_rng([spec.seed, SPLITS.index(split), C.CLASSES.index(label)])
            raw = simulator_only_generate(spec.dists[label], n, spec.noise_sigma, child)
            for i, b in enumerate(raw):
                rid = f"{split}-{label}-{i // spec.beats_per_record:03d}"
                s = b.samples
                if spec.sample_noise > 0:
                    s = s + spec.sample_noise * child.standard_normal(s.shape)
                beats.append(Heartbeat(s, label, "real", rid))
        out[split] = BeatDataset(tuple(beats), split)
    check_disjoint(out["train"], out["test"])
    return out["train"], out["test"]
