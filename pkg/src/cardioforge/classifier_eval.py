"""Residual 1-D conv heartbeat classifier, two-phase augmented training and PR evaluation."""
from __future__ import annotations

import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import constants as C
from .beat_data import BeatDataset, Heartbeat, Stats
from .engine import Adam, Module, Tensor, backward, no_grad
from .engine import functional as F
from .engine.checkpoint import load_checkpoint, save_checkpoint
from .engine.nn import Conv1d, Linear
from .errors import ConfigError, DataError, TrainingDiverged
from .sim_gan import _coerce, _width, read_kv

log = logging.getLogger(__name__)

AUGMENTATION_GRID = (0.1, 0.3, 0.5, 0.8, 1.0, 1.5, 2.0)
# Recall operating points used for the summary table, per arrhythmia class.
REFERENCE_RECALL = {"S": 0.41, "V": 0.91, "F": 0.60}
REGIME_NAMES = ("none", "vgan", "dcgan", "refine_gan", "simulator", "sim_vgan", "sim_dcgan")


def parse_augmentation(text: str | Mapping | None) -> dict[str, float]:
    """``"S:1,F:0.5"`` -> ``{"S": 1.0, "F": 0.5}``; multiples must come from the grid."""
    if not text:
        return {}
    if isinstance(text, Mapping):
        items = list(text.items())
    else:
        items = []
        for part in str(text).split(","):
            part = part.strip()
            if not part:
                continue
            label, sep, mult = part.partition(":")
            if not sep:
                raise ConfigError(f"augmentation entry {part!r} must look like CLASS:MULTIPLE")
            try:
                items.append((label.strip(), float(mult)))
            except ValueError:
                raise ConfigError(f"augmentation multiple {mult!r} is not a number") from None
    out = {}
    for label, mult in items:
        if label not in C.CLASSES:
            raise ConfigError(f"augmentation for unknown class {label!r}")
        if not any(math.isclose(float(mult), g) for g in AUGMENTATION_GRID):
            raise ConfigError(f"augmentation multiple {mult} not in {AUGMENTATION_GRID}")
        out[label] = float(mult)
    return out


def format_augmentation(aug: Mapping[str, float]) -> str:
    return ",".join(f"{k}:{v:g}" for k, v in aug.items())


@dataclass
class ClassifierConfig:
    n_blocks: int = 5
    kernels_per_conv: int = 32
    kernel_size: int = 5
    fc_width: int = 32
    n_classes: int = len(C.CLASSES)
    scale: float = 1.0
    lr: float = 1e-3
    epochs_phase1: int = 50
    epochs_phase2: int = 10
    batch_size: int = 32
    seed: int = 0
    patience: int = 5
    min_improvement: float = 1e-4
    augmentation: str = ""

    def __post_init__(self):
        if self.n_classes != len(C.CLASSES):
            raise ConfigError(f"n_classes must be {len(C.CLASSES)}")
        if self.n_blocks < 0 or self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError("need n_blocks >= 0 and an odd kernel_size")
        if self.scale <= 0 or self.lr <= 0 or self.batch_size < 1:
            raise ConfigError("scale, lr and batch_size must be positive")
        if self.epochs_phase1 < 0 or self.epochs_phase2 < 0 or self.patience < 1:
            raise ConfigError("epoch budgets must be >= 0 and patience >= 1")
        if not isinstance(self.augmentation, str):
            self.augmentation = format_augmentation(parse_augmentation(self.augmentation))
        parse_augmentation(self.augmentation)

    @property
    def augmentation_multiples(self) -> dict[str, float]:
        return parse_augmentation(self.augmentation)

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict) -> "ClassifierConfig":
        return cls(**_coerce(cls, values))

    @classmethod
    def from_file(cls, path, **overrides) -> "ClassifierConfig":
        values = read_kv(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)


def augmentation_counts(config: ClassifierConfig, base: BeatDataset) -> dict[str, int]:
    """Number of synthetic beats to add per class: multiple times the class size."""
    return {c: int(round(m * base.class_counts[c])) for c, m in config.augmentation_multiples.items()}


# --- network -------------------------------------------------------------------

class ResidualBlock(Module):
    """conv-relu-conv, identity skip, relu, then max-pool 2/2."""

    def __init__(self, channels: int, kernel: int, rng):
        pad = kernel // 2
        self.conv1 = Conv1d(channels, channels, kernel, rng, padding=pad, init_std=None)
        self.conv2 = Conv1d(channels, channels, kernel, rng, padding=pad, init_std=None)

    def forward(self, h: Tensor) -> Tensor:
        y = F.relu(self.conv1(h))
        y = self.conv2(y)
        return F.max_pool1d(F.relu(y + h), 2, 2)


class Classifier(Module):
    def __init__(self, config: ClassifierConfig, rng=None):
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        ch = _width(config.kernels_per_conv, config.scale)
        fc = _width(config.fc_width, config.scale)
        self.stem = Conv1d(1, ch, config.kernel_size, rng, padding=config.kernel_size // 2, init_std=None)
        self.blocks = [ResidualBlock(ch, config.kernel_size, rng) for _ in range(config.n_blocks)]
        length = C.BEAT_LEN
        for _ in range(config.n_blocks):
            length //= 2
        self.flat = ch * length
        self.fc1 = Linear(self.flat, fc, rng, init_std=None)
        self.fc2 = Linear(fc, fc, rng, init_std=None)
        self.out = Linear(fc, config.n_classes, rng, init_std=None)

    def logits(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim == 2:
            x = x.reshape(x.shape[0], 1, x.shape[1])
        h = F.relu(self.stem(x))
        for block in self.blocks:
            h = block(h)
        h = h.reshape(h.shape[0], self.flat)
        h = F.relu(self.fc1(h))
        h = F.relu(self.fc2(h))
        return self.out(h)

    def forward(self, x) -> Tensor:
        return F.softmax(self.logits(x), axis=1)


def build_classifier(config: ClassifierConfig, rng=None) -> Classifier:
    return Classifier(config, rng)


# --- training ------------------------------------------------------------------

EPOCH_COLUMNS = ("phase", "epoch", "loss", "accuracy", "n_beats")


@dataclass
class EpochEntry:
    phase: int
    epoch: int
    loss: float
    accuracy: float
    n_beats: int


@dataclass
class ClassifierLog:
    entries: list[EpochEntry] = field(default_factory=list)
    stopped_early: bool = False

    def __len__(self):
        return len(self.entries)

    def phase(self, p: int) -> list[EpochEntry]:
        return [e for e in self.entries if e.phase == p]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(EPOCH_COLUMNS) + "\n")
        for e in self.entries:
            buf.write(f"{e.phase},{e.epoch},{e.loss:.17g},{e.accuracy:.17g},{e.n_beats}\n")
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


@dataclass
class ClassifierModel:
    config: ClassifierConfig
    network: Classifier
    stats: Stats | None = None  # applied to inputs before the network when set

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        save_checkpoint(self.network.state_dict(), os.path.join(directory, "classifier.ckpt"))
        with open(os.path.join(directory, "classifier_config.txt"), "w", encoding="utf-8") as fh:
            fh.write(self.config.to_text())
        if self.stats is not None:
            self.stats.save(os.path.join(directory, "stats.txt"))

    @classmethod
    def load(cls, directory) -> "ClassifierModel":
        config = ClassifierConfig.from_file(os.path.join(directory, "classifier_config.txt"))
        net = build_classifier(config)
        net.load_state_dict(load_checkpoint(os.path.join(directory, "classifier.ckpt")))
        stats_path = os.path.join(directory, "stats.txt")
        stats = Stats.load(stats_path) if os.path.exists(stats_path) else None
        return cls(config, net.eval(), stats)

    def predict_proba(self, beats, batch_size: int = 256) -> np.ndarray:
        x = beats if isinstance(beats, np.ndarray) else _xy(beats)[0]
        if self.stats is not None:
            x = (x - self.stats.mean) / self.stats.std
        return predict_proba(self.network, x, batch_size)


def _xy(beats) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(beats, BeatDataset):
        beats = beats.beats
    beats = list(beats)
    if not beats:
        return np.zeros((0, C.BEAT_LEN)), np.zeros(0, dtype=np.int64)
    x = np.stack([b.samples for b in beats])
    y = np.array([C.CLASSES.index(b.label) for b in beats], dtype=np.int64)
    return x, y


def predict_proba(network: Classifier, beats, batch_size: int = 256) -> np.ndarray:
    """Class probabilities [n, 4] in inference mode."""
    x = beats if isinstance(beats, np.ndarray) else _xy(beats)[0]
    out = []
    with no_grad():
        for i in range(0, len(x), batch_size):
            out.append(network(Tensor(x[i : i + batch_size])).data)
    return np.concatenate(out) if out else np.zeros((0, len(C.CLASSES)))


def _check_synth(synth) -> list[Heartbeat]:
    if synth is None:
        return []
    if isinstance(synth, BeatDataset):
        if synth.split != "train":
            raise DataError("synthetic beats come from a test split; refusing to train on them")
        return list(synth.beats)
    synth = list(synth)
    for b in synth:
        if not isinstance(b, Heartbeat):
            raise DataError("synthetic beats must be Heartbeat records")
    return synth


def train_classifier(config: ClassifierConfig, base: BeatDataset, synth=None,
                     diag_dir=None) -> tuple[ClassifierModel, ClassifierLog]:
    """Phase 1 on ``base`` until converged or out of budget, then phase 2 on base plus synth."""
    if not isinstance(base, BeatDataset) or base.split != "train":
        raise DataError("classifier training needs a train-split BeatDataset")
    if len(base) == 0:
        raise DataError("no training beats")
    extra = _check_synth(synth)
    if extra:
        test_ids = {b.record_id for b in extra if b.source == "real"} - base.record_ids
        if test_ids:
            raise DataError(f"synthetic set contains real beats from foreign records: {sorted(test_ids)[:5]}")

    seeds = np.random.SeedSequence(config.seed).spawn(2)
    init_rng, order_rng = (np.random.default_rng(s) for s in seeds)
    net = build_classifier(config, init_rng)
    model = ClassifierModel(config, net)
    opt = Adam(net.parameters(), config.lr)
    clog = ClassifierLog()

    def run_epoch(x, y, phase, epoch):
        net.train()
        order = order_rng.permutation(len(x))
        total, correct = 0.0, 0
        for i in range(0, len(x), config.batch_size):
            idx = order[i : i + config.batch_size]
            opt.zero_grad()
            logits = net.logits(Tensor(x[idx]))
            loss = F.cross_entropy(logits, y[idx])
            value = loss.item()
            if not math.isfinite(value):
                path = None
                if diag_dir is not None:
                    path = os.path.join(diag_dir, "diverged")
                    model.save(path)
                raise TrainingDiverged(f"non-finite classifier loss {value} in phase {phase} epoch {epoch}", path)
            backward(loss)
            opt.step()
            total += value * len(idx)
            correct += int((logits.data.argmax(axis=1) == y[idx]).sum())
        entry = EpochEntry(phase, epoch, total / len(x), correct / len(x), len(x))
        clog.entries.append(entry)
        log.debug("phase %d epoch %d loss=%.5g acc=%.4f", phase, epoch, entry.loss, entry.accuracy)
        return entry.loss

    x, y = _xy(base)
    best, since = math.inf, 0
    for epoch in range(1, config.epochs_phase1 + 1):
        loss = run_epoch(x, y, 1, epoch)
        if loss < best - config.min_improvement:
            best, since = loss, 0
        else:
            since += 1
        if since >= config.patience:
            clog.stopped_early = True
            break

    if extra:
        xs, ys = _xy(extra)
        xa, ya = np.concatenate([x, xs]), np.concatenate([y, ys])
        for epoch in range(1, config.epochs_phase2 + 1):
            run_epoch(xa, ya, 2, epoch)
    net.eval()
    return model, clog


def accuracy(model: ClassifierModel, beats) -> float:
    x, y = _xy(beats)
    if len(y) == 0:
        return float("nan")
    return float((model.predict_proba(x).argmax(axis=1) == y).mean())


# --- precision-recall --------------------------------------------------------------

@dataclass(frozen=True)
class PrCurve:
    class_label: str
    points: tuple[tuple[float, float], ...]  # (recall, precision), highest threshold first
    thresholds: tuple[float, ...]
    auprc: float

    @property
    def recall(self) -> np.ndarray:
        return np.array([p[0] for p in self.points])

    @property
    def precision(self) -> np.ndarray:
        return np.array([p[1] for p in self.points])

    def at_recall(self, target: float) -> tuple[float, float, float]:
        """(threshold, recall, precision) at the first point whose recall reaches ``target``."""
        for tau, (r, p) in zip(self.thresholds, self.points):
            if r >= target:
                return tau, r, p
        tau, (r, p) = self.thresholds[-1], self.points[-1]
        return tau, r, p

    def to_csv(self) -> str:
        rows = ["threshold,recall,precision"]
        rows += [f"{t:.17g},{r:.17g},{p:.17g}" for t, (r, p) in zip(self.thresholds, self.points)]
        return "\n".join(rows) + "\n"


def pr_curve(scores, truth, class_label: str = "") -> PrCurve:
    """One-vs-rest curve; a beat is called positive when its score is >= the threshold.

    Thresholds are all distinct scores in descending order. Area is the step sum
    of (R_k - R_{k-1}) * P_k, so points past full recall add nothing to it.
    """
    scores = np.asarray(scores, dtype=np.float64).ravel()
    truth = np.asarray(truth).ravel()
    if scores.shape != truth.shape:
        raise DataError(f"scores ({scores.size}) and truth ({truth.size}) differ in length")
    if not np.all(np.isfinite(scores)):
        raise DataError("scores must be finite")
    pos = truth.astype(bool)
    n_pos = int(pos.sum())
    if n_pos == 0:
        raise DataError("precision-recall needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    s, t = scores[order], pos[order].astype(np.int64)
    tp = np.cumsum(t)
    fp = np.cumsum(1 - t)
    # last index of each run of equal scores
    ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
    points, thresholds = [], []
    auprc, prev_r = 0.0, 0.0
    for i in ends:
        r = int(tp[i]) / n_pos
        p = int(tp[i]) / (int(tp[i]) + int(fp[i]))
        points.append((r, p))
        thresholds.append(float(s[i]))
        auprc += (r - prev_r) * p
        prev_r = r
    return PrCurve(class_label, tuple(points), tuple(thresholds), auprc)


# --- regime comparison --------------------------------------------------------------

@dataclass
class EvalReport:
    curves: dict[str, dict[str, PrCurve]]
    absent: list[str]
    classes: tuple[str, ...]

    def n_curves(self) -> int:
        return sum(len(v) for v in self.curves.values())

    def summary_rows(self) -> list[tuple[str, str, float, float, float, float]]:
        """(regime, class, target recall, achieved recall, precision, auprc)."""
        rows = []
        for regime, per_class in self.curves.items():
            for label, curve in per_class.items():
                target = REFERENCE_RECALL.get(label, 0.5)
                _, r, p = curve.at_recall(target)
                rows.append((regime, label, target, r, p, curve.auprc))
        return rows

    def summary_text(self) -> str:
        lines = [f"{'regime':<12} {'class':<5} {'target_re':>9} {'Re':>7} {'Pr':>7} {'auprc':>7}"]
        for regime, label, target, r, p, a in self.summary_rows():
            lines.append(f"{regime:<12} {label:<5} {target:>9.2f} {r:>7.4f} {p:>7.4f} {a:>7.4f}")
        for regime in self.absent:
            lines.append(f"{regime:<12} absent")
        return "\n".join(lines) + "\n"

    def save(self, directory) -> list[str]:
        os.makedirs(directory, exist_ok=True)
        written = []
        for regime, per_class in self.curves.items():
            for label, curve in per_class.items():
                path = os.path.join(directory, f"pr_{regime}_{label}.csv")
                with open(path, "w", encoding="utf-8", newline="") as fh:
                    fh.write(curve.to_csv())
                written.append(path)
        path = os.path.join(directory, "summary.txt")
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.summary_text())
        written.append(path)
        return written


def curves_from_scores(probs: np.ndarray, labels: Sequence[str], classes: Sequence[str]) -> dict[str, PrCurve]:
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    out = {}
    for c in classes:
        truth = labels == c
        if not truth.any():
            continue
        out[c] = pr_curve(probs[:, C.CLASSES.index(c)], truth, c)
    return out


def evaluate_regimes(models: Mapping[str, ClassifierModel | np.ndarray | None], test: BeatDataset,
                     classes: Sequence[str] = ("S", "V", "F"),
                     regimes: Sequence[str] | None = None) -> EvalReport:
    """Per-class curves for each regime on the test split.

    ``models`` maps regime name to a trained model, to precomputed [n, 4]
    probabilities, or to None. Regimes listed in ``regimes`` but missing or
    None are reported as absent.
    """
    if test.split != "test":
        raise DataError("evaluation must run on the test split")
    names = list(regimes) if regimes is not None else list(models)
    labels = test.labels()
    curves, absent = {}, []
    for name in names:
        m = models.get(name)
        if m is None:
            absent.append(name)
            continue
        probs = m if isinstance(m, np.ndarray) else m.predict_proba(test)
        if probs.shape != (len(test), len(C.CLASSES)):
            raise DataError(f"scores for {name} have shape {probs.shape}, expected ({len(test)}, {len(C.CLASSES)})")
        curves[name] = curves_from_scores(probs, labels, classes)
    return EvalReport(curves, absent, tuple(classes))
