"""Class-specific GANs for heartbeats, with optional simulator (Euler) loss.

Regimes:

* ``vgan`` / ``dcgan``: fully connected or (de)convolutional networks, cross-entropy only.
* ``sim_vgan`` / ``sim_dcgan``: as above plus ``lambda_eul`` times the Euler loss.
* ``refine_gan``: DCGAN whose generator input is a simulator beat instead of noise.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Sequence

import numpy as np

from . import constants as C
from .beat_data import BeatDataset, Heartbeat
from .engine import Adam, Module, Tensor, backward, no_grad
from .engine import functional as F
from .engine.checkpoint import load_checkpoint, save_checkpoint
from .engine.nn import BatchNorm1d, Conv1d, ConvTranspose1d, Linear
from .engine.tensor import custom
from .errors import ConfigError, DataError, TrainingDiverged
from .euler_loss import euler_loss, sim_distance_batch
from .param_estimation import (
    EtaDistribution,
    load_distributions,
    save_distributions,
    simulator_only_generate,
)

log = logging.getLogger(__name__)

REGIMES = ("vgan", "dcgan", "sim_vgan", "sim_dcgan", "refine_gan")
SIM_REGIMES = ("sim_vgan", "sim_dcgan")


@dataclass
class GanConfig:
    regime: str = "sim_dcgan"
    noise_dim: int = 100
    beat_len: int = C.BEAT_LEN
    scale: float = 1.0
    lr: float = 2e-4
    beta1: float = 0.5
    g_steps_per_iter: int = 2
    d_steps_per_iter: int = 1
    batch_size: int = 32
    iterations: int = 3000
    lambda_eul: float = 1.0
    n_eta_samples: int = 1
    seed: int = 0
    d_batchnorm_first: bool = False
    probe_size: int = 16
    refine_noise_sigma: float = 0.05

    def __post_init__(self):
        if self.regime not in REGIMES:
            raise ConfigError(f"unknown regime {self.regime!r}; expected one of {REGIMES}")
        if self.noise_dim < 1 or self.batch_size < 2 or self.iterations < 0:
            raise ConfigError("need noise_dim >= 1, batch_size >= 2, iterations >= 0")
        if self.beat_len != C.BEAT_LEN:
            raise ConfigError(f"beat_len must be {C.BEAT_LEN}")
        if self.scale <= 0 or self.n_eta_samples < 1:
            raise ConfigError("scale and n_eta_samples must be positive")

    @property
    def is_sim(self) -> bool:
        return self.regime in SIM_REGIMES

    @property
    def conv(self) -> bool:
        return self.regime not in ("vgan", "sim_vgan")

    @property
    def input_dim(self) -> int:
        return self.beat_len if self.regime == "refine_gan" else self.noise_dim

    def to_text(self) -> str:
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_mapping(cls, values: dict) -> "GanConfig":
        return cls(**_coerce(cls, values))

    @classmethod
    def from_file(cls, path, **overrides) -> "GanConfig":
        values = read_kv(path)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(values)


def read_kv(path) -> dict[str, str]:
    """Flat ``key = value`` text; ``#`` starts a comment."""
    out = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ConfigError(f"{path}:{lineno}: expected key = value")
            out[key.strip()] = value.strip()
    return out


def _coerce(cls, values: dict) -> dict:
    types = {f.name: f.type for f in fields(cls) if f.init}
    out = {}
    for key, raw in values.items():
        if key not in types:
            raise ConfigError(f"unknown config key {key!r} for {cls.__name__}")
        kind = types[key]
        if not isinstance(raw, str):
            out[key] = raw
        elif kind in ("bool", bool):
            if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ConfigError(f"{key}: not a boolean: {raw!r}")
            out[key] = raw.lower() in ("true", "1", "yes")
        elif kind in ("int", int):
            out[key] = int(raw)
        elif kind in ("float", float):
            out[key] = float(raw)
        else:
            out[key] = raw
    return out


def _width(base: int, scale: float) -> int:
    return max(1, int(round(base * scale)))


# --- networks ------------------------------------------------------------------

# Narrowest hidden layer of the convolutional generator. Halving per layer
# leaves 2 channels at scale 1/4, which trains far more slowly than the
# full-size ladder.
GEN_MIN_CHANNELS = 16


class DCGenerator(Module):
    """FC to [c, 4], then six transposed convolutions 4→7→14→27→54→108→216."""

    # (kernel, stride, padding, crop-to length)
    LADDER = ((4, 1, 0, 7), (4, 2, 1, 14), (4, 2, 1, 27), (4, 2, 1, 54), (4, 2, 1, 108), (4, 2, 1, 216))

    def __init__(self, config: GanConfig, rng: np.random.Generator):
        c0 = _width(256, config.scale)
        self.c0 = c0
        self.fc = Linear(config.input_dim, c0 * 4, rng)
        self.bn0 = BatchNorm1d(c0)
        chans = [c0]
        for i in range(1, 6):
            chans.append(min(c0, max(GEN_MIN_CHANNELS, c0 >> i)))
        chans.append(1)
        self.deconvs = [
            ConvTranspose1d(chans[i], chans[i + 1], k, rng, stride=s, padding=p)
            for i, (k, s, p, _) in enumerate(self.LADDER)
        ]
        self.bns = [BatchNorm1d(chans[i + 1]) for i in range(5)]

    def forward(self, m: Tensor) -> Tensor:
        h = self.fc(m).reshape(m.shape[0], self.c0, 4)
        h = F.relu(self.bn0(h))
        for i, layer in enumerate(self.deconvs):
            h = F.crop(layer(h), self.LADDER[i][3])
            if i < 5:
                h = F.relu(self.bns[i](h))
        return h.reshape(m.shape[0], C.BEAT_LEN)


class FCGenerator(Module):
    def __init__(self, config: GanConfig, rng: np.random.Generator):
        w = _width(512, config.scale)
        self.fc1 = Linear(config.input_dim, w, rng)
        self.bn1 = BatchNorm1d(w)
        self.fc2 = Linear(w, w, rng)
        self.bn2 = BatchNorm1d(w)
        self.fc3 = Linear(w, C.BEAT_LEN, rng)

    def forward(self, m: Tensor) -> Tensor:
        h = F.relu(self.bn1(self.fc1(m)))
        h = F.relu(self.bn2(self.fc2(h)))
        return self.fc3(h)


class Discriminator(Module):
    """``forward`` gives P(real); losses use ``logits`` for numerical safety."""

    def probability(self, h: Tensor) -> Tensor:
        return F.sigmoid(self.logits(h))

    def forward(self, h: Tensor) -> Tensor:
        return self.probability(h)


class DCDiscriminator(Discriminator):
    STRIDES = (1, 2, 2, 2, 2, 1)

    def __init__(self, config: GanConfig, rng: np.random.Generator):
        c = _width(16, config.scale)
        chans = [1] + [c * 2 ** i for i in range(6)]
        self.convs = [
            Conv1d(chans[i], chans[i + 1], 5, rng, stride=s, padding=2)
            for i, s in enumerate(self.STRIDES)
        ]
        first = 0 if config.d_batchnorm_first else 1
        self.bns = [BatchNorm1d(chans[i + 1]) if i >= first else None for i in range(6)]
        length = C.BEAT_LEN
        for s in self.STRIDES:
            length = (length + 4 - 5) // s + 1
        self.flat = chans[-1] * length
        self.fc = Linear(self.flat, 1, rng)

    def logits(self, h: Tensor) -> Tensor:
        x = h.reshape(h.shape[0], 1, h.shape[-1])
        for conv, bn in zip(self.convs, self.bns):
            x = conv(x)
            if bn is not None:
                x = bn(x)
            x = F.leaky_relu(x, 0.2)
        return self.fc(x.reshape(h.shape[0], self.flat))


class FCDiscriminator(Discriminator):
    def __init__(self, config: GanConfig, rng: np.random.Generator):
        w = _width(512, config.scale)
        self.fc1 = Linear(C.BEAT_LEN, w, rng)
        self.bn1 = BatchNorm1d(w) if config.d_batchnorm_first else None
        self.fc2 = Linear(w, w, rng)
        self.bn2 = BatchNorm1d(w)
        self.fc3 = Linear(w, 1, rng)

    def logits(self, h: Tensor) -> Tensor:
        x = self.fc1(h)
        if self.bn1 is not None:
            x = self.bn1(x)
        x = F.leaky_relu(x, 0.2)
        x = F.leaky_relu(self.bn2(self.fc2(x)), 0.2)
        return self.fc3(x)


def build_generator(config: GanConfig, rng=None) -> Module:
    rng = np.random.default_rng(config.seed if rng is None else rng)
    return DCGenerator(config, rng) if config.conv else FCGenerator(config, rng)


def build_discriminator(config: GanConfig, rng=None) -> Discriminator:
    rng = np.random.default_rng(config.seed if rng is None else rng)
    return DCDiscriminator(config, rng) if config.conv else FCDiscriminator(config, rng)


# --- losses ------------------------------------------------------------------

def d_loss(real, fake, D: Discriminator) -> Tensor:
    """-E log D(real) - E log(1 - D(fake))."""
    real = real if isinstance(real, Tensor) else Tensor(real)
    fake = fake if isinstance(fake, Tensor) else Tensor(fake)
    return F.binary_cross_entropy_logits(D.logits(real), 1) + F.binary_cross_entropy_logits(D.logits(fake), 0)


def euler_term(fake: Tensor, eta_dist: EtaDistribution, n_eta_samples: int = 1, rng=None) -> Tensor:
    """Euler loss as a graph node whose gradient flows back into ``fake``."""
    value, grad = euler_loss(fake.data, eta_dist, n_eta_samples, rng)
    return custom(value, (fake,), lambda g: (g * grad,))


@dataclass
class GLossParts:
    total: Tensor
    ce: float
    eul: float | None


def g_loss(fake: Tensor, D: Discriminator, regime: str, eta_dist: EtaDistribution | None = None,
           lambda_eul: float = 1.0, n_eta_samples: int = 1, rng=None) -> GLossParts:
    """Generator loss: cross-entropy, plus the weighted Euler loss in sim regimes."""
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}")
    ce = F.binary_cross_entropy_logits(D.logits(fake), 1)
    if regime not in SIM_REGIMES:
        return GLossParts(ce, ce.item(), None)
    if eta_dist is None:
        raise ConfigError(f"regime {regime} needs an eta distribution")
    eul = euler_term(fake, eta_dist, n_eta_samples, rng)
    return GLossParts(ce + lambda_eul * eul, ce.item(), eul.item())


# --- training ------------------------------------------------------------------

LOG_COLUMNS = ("iter", "loss_d", "loss_g_ce", "loss_g_eul", "probe_sim_dist")


@dataclass
class LogEntry:
    iter: int
    loss_d: float
    loss_g_ce: float
    loss_g_eul: float | None
    probe_sim_dist: float | None
    loss_g: float
    d_steps: int
    g_steps: int


@dataclass
class TrainingLog:
    entries: list[LogEntry] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)

    def column(self, name: str) -> list:
        return [getattr(e, name) for e in self.entries]

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(LOG_COLUMNS) + "\n")
        for e in self.entries:
            vals = [getattr(e, c) for c in LOG_COLUMNS]
            buf.write(",".join("" if v is None else (str(v) if isinstance(v, int) else f"{v:.17g}") for v in vals) + "\n")
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv())


@dataclass
class GanModel:
    config: GanConfig
    generator: Module
    discriminator: Discriminator
    class_label: str
    eta_dist: EtaDistribution | None = None

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        save_checkpoint(self.generator.state_dict(), os.path.join(directory, "generator.ckpt"))
        save_checkpoint(self.discriminator.state_dict(), os.path.join(directory, "discriminator.ckpt"))
        with open(os.path.join(directory, "gan_config.txt"), "w", encoding="utf-8") as fh:
            fh.write(f"# class_label = {self.class_label}\n")
            fh.write(self.config.to_text())
        with open(os.path.join(directory, "class_label.txt"), "w", encoding="utf-8") as fh:
            fh.write(self.class_label + "\n")
        if self.eta_dist is not None:
            save_distributions([self.eta_dist], os.path.join(directory, "eta_dist.txt"))

    @classmethod
    def load(cls, directory) -> "GanModel":
        config = GanConfig.from_file(os.path.join(directory, "gan_config.txt"))
        with open(os.path.join(directory, "class_label.txt"), encoding="utf-8") as fh:
            label = fh.read().strip()
        dist = None
        dist_path = os.path.join(directory, "eta_dist.txt")
        if os.path.exists(dist_path):
            dist = load_distributions(dist_path)[label]
        G, D = build_generator(config), build_discriminator(config)
        G.load_state_dict(load_checkpoint(os.path.join(directory, "generator.ckpt")))
        D.load_state_dict(load_checkpoint(os.path.join(directory, "discriminator.ckpt")))
        return cls(config, G.eval(), D.eval(), label, dist)


def refine_gan_input(eta_dist: EtaDistribution, batch_size: int, rng_seed=None,
                     noise_sigma: float = 0.05) -> np.ndarray:
    """Simulator beats, stacked [batch_size, 216], used as RefineGAN generator input."""
    beats = simulator_only_generate(eta_dist, batch_size, noise_sigma, rng_seed)
    return np.stack([b.samples for b in beats]) if beats else np.zeros((0, C.BEAT_LEN))


def _generator_input(config: GanConfig, n: int, rng: np.random.Generator, eta_dist) -> np.ndarray:
    if config.regime == "refine_gan":
        return refine_gan_input(eta_dist, n, rng, config.refine_noise_sigma)
    return rng.standard_normal((n, config.noise_dim))


def _beats_array(real_beats) -> tuple[np.ndarray, str]:
    if isinstance(real_beats, BeatDataset):
        real_beats = real_beats.beats
    real_beats = list(real_beats)
    if real_beats and isinstance(real_beats[0], Heartbeat):
        labels = {b.label for b in real_beats}
        if len(labels) != 1:
            raise DataError(f"GAN training needs beats of one class, got {sorted(labels)}")
        return np.stack([b.samples for b in real_beats]), labels.pop()
    arr = np.asarray(real_beats, dtype=np.float64)
    return arr, ""


def _probe_distance(G: Module, probe_in: np.ndarray, eta_dist: EtaDistribution) -> float:
    G.eval()
    with no_grad():
        out = G(Tensor(probe_in)).data
    G.train()
    etas = np.tile(eta_dist.mean_params.eta, (len(out), 1))
    values, _ = sim_distance_batch(out, etas)
    return float(values.mean())


def train(config: GanConfig, real_beats, eta_dist: EtaDistribution | None = None,
          class_label: str | None = None, diag_dir=None) -> tuple[GanModel, TrainingLog]:
    """Alternate one discriminator step with two generator steps per iteration."""
    data, label = _beats_array(real_beats)
    label = class_label or label or (eta_dist.class_label if eta_dist is not None else "N")
    if config.regime in SIM_REGIMES + ("refine_gan",) and eta_dist is None:
        raise ConfigError(f"regime {config.regime} needs an eta distribution")
    if config.iterations > 0 and len(data) == 0:
        raise DataError("no training beats")

    seeds = np.random.SeedSequence(config.seed).spawn(5)
    init_rng, data_rng, noise_rng, eta_rng, probe_rng = (np.random.default_rng(s) for s in seeds)
    G = build_generator(config, init_rng)
    D = build_discriminator(config, init_rng)
    model = GanModel(config, G, D, label, eta_dist)
    tlog = TrainingLog()
    if config.iterations == 0:
        return model, tlog

    opt_g = Adam(G.parameters(), config.lr, config.beta1)
    opt_d = Adam(D.parameters(), config.lr, config.beta1)
    probe_in = _generator_input(config, config.probe_size, probe_rng, eta_dist) if config.is_sim else None
    B = config.batch_size
    d_steps = g_steps = 0

    def abort(what, value):
        path = None
        if diag_dir is not None:
            path = os.path.join(diag_dir, "diverged")
            model.save(path)
        raise TrainingDiverged(f"non-finite {what}={value} at iteration {it}", path)

    for it in range(1, config.iterations + 1):
        for _ in range(config.d_steps_per_iter):
            real = data[data_rng.integers(0, len(data), B)]
            with no_grad():
                fake = G(Tensor(_generator_input(config, B, noise_rng, eta_dist))).data
            opt_d.zero_grad()
            ld = d_loss(real, fake, D)
            if not math.isfinite(ld.item()):
                abort("loss_d", ld.item())
            backward(ld)
            opt_d.step()
            d_steps += 1
        for _ in range(config.g_steps_per_iter):
            opt_g.zero_grad()
            fake = G(Tensor(_generator_input(config, B, noise_rng, eta_dist)))
            parts = g_loss(fake, D, config.regime, eta_dist, config.lambda_eul, config.n_eta_samples, eta_rng)
            if not math.isfinite(parts.total.item()):
                abort("loss_g", parts.total.item())
            backward(parts.total)
            opt_g.step()
            g_steps += 1
        D.zero_grad()
        probe = _probe_distance(G, probe_in, eta_dist) if config.is_sim else None
        tlog.entries.append(
            LogEntry(it, ld.item(), parts.ce, parts.eul, probe, parts.total.item(), d_steps, g_steps)
        )
        if it % 100 == 0:
            log.info("iter %d loss_d=%.4g loss_g=%.4g probe=%s", it, ld.item(), parts.total.item(), probe)
    G.eval()
    D.eval()
    return model, tlog


def generate(model: GanModel, n: int, rng_seed=None) -> list[Heartbeat]:
    """``n`` beats from the trained generator (inference-mode batch norm)."""
    if n <= 0:
        return []
    rng = np.random.default_rng(rng_seed)
    G = model.generator
    G.eval()
    with no_grad():
        out = G(Tensor(_generator_input(model.config, n, rng, model.eta_dist))).data
    return [Heartbeat(row, model.class_label, "gan", "gan") for row in out]
