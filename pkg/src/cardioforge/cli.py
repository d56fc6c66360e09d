"""``cardioforge`` command line: one subcommand per pipeline stage.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Exit status is 0 on success, 1 when a computation fails and 2 on bad input.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import tempfile
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import __version__
from . import constants as C
from .beat_data import (
    BeatDataset,
    CorpusSpec,
    Stats,
    default_class_distributions,
    load_csv,
    make_synthetic_corpus,
    save_csv,
    standardize,
)
from .classifier_eval import (
    ClassifierConfig,
    ClassifierModel,
    augmentation_counts,
    evaluate_regimes,
    train_classifier,
)
from .dynamical_model import DEFAULT_PARAMS
from .errors import CardioForgeError, ConfigError, DataError, DomainError
from .param_estimation import (
    EtaDistribution,
    build_distribution,
    fit_eta,
    load_distributions,
    save_distributions,
    save_fits_csv,
    simulator_only_generate,
)
from . import sim_gan

log = logging.getLogger("cardioforge")

SEED_ENV = "CARDIOFORGE_SEED"
EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


@dataclass
class RunManifest:
    command: str
    config: str | None
    seed: int | None
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)
    version: str = __version__
    duration_s: float = 0.0

    def write(self, out_dir) -> str:
        """Atomic write of ``manifest.json`` (temp file + rename)."""
        path = os.path.join(out_dir, "manifest.json")
        fd, tmp = tempfile.mkstemp(prefix=".manifest-", dir=out_dir)
        with os.fdopen(fd, "w", encoding="utf-8") as fh:
            json.dump(asdict(self), fh, indent=2, sort_keys=True)
            fh.write("\n")
        os.replace(tmp, path)
        return path


def resolve_seed(value) -> int:
    if value is not None:
        return int(value)
    env = os.environ.get(SEED_ENV)
    if env is None or env.strip() == "":
        return 0
    try:
        return int(env)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None


def _parse_counts(text: str | None) -> dict[str, int]:
    out = {}
    for part in (text or "").split(","):
        part = part.strip()
        if not part:
            continue
        label, sep, n = part.partition(":")
        if not sep or label not in C.CLASSES:
            raise ConfigError(f"bad class count {part!r}; expected e.g. N:400,S:20")
        out[label] = int(n)
    return out


def _pick_dist(dists: dict[str, EtaDistribution], label: str | None, path) -> EtaDistribution:
    if label is None:
        if len(dists) != 1:
            raise ConfigError(f"{path} holds classes {sorted(dists)}; choose one with --class")
        return next(iter(dists.values()))
    if label not in dists:
        raise DataError(f"{path} has no distribution for class {label}")
    return dists[label]


def _single_label(ds: BeatDataset, label: str | None) -> BeatDataset:
    if label is not None:
        return ds.of_class(label)
    present = [c for c, n in ds.class_counts.items() if n]
    if len(present) != 1:
        raise ConfigError(f"beats hold classes {present}; choose one with --class")
    return ds


# --- commands ---------------------------------------------------------------------

def cmd_simulate(args, man: RunManifest) -> None:
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    if args.eta_file:
        dist = _pick_dist(load_distributions(args.eta_file), args.label, args.eta_file)
        man.inputs["eta_file"] = args.eta_file
    else:
        dist = EtaDistribution.point(DEFAULT_PARAMS, args.label or "N")
    beats = simulator_only_generate(dist, args.count, args.noise, man.seed)
    path = os.path.join(args.out, "beats.csv")
    save_csv(beats, path)
    man.outputs.append(path)


def cmd_fit(args, man: RunManifest) -> None:
    ds = _single_label(load_csv(args.beats), args.label)
    if len(ds) == 0:
        raise DataError("no beats of the requested class")
    beats = ds.beats[: args.max_beats] if args.max_beats else ds.beats
    label = beats[0].label
    fits = [fit_eta(b.samples, budget=args.budget, restarts=args.restarts, seed=man.seed + i)
            for i, b in enumerate(beats)]
    dist = build_distribution(fits, label)
    fits_path = os.path.join(args.out, "fits.csv")
    dist_path = os.path.join(args.out, "eta_dist.txt")
    save_fits_csv(fits, fits_path, [b.record_id for b in beats])
    save_distributions([dist], dist_path)
    man.inputs["beats"] = args.beats
    man.outputs += [fits_path, dist_path]


def cmd_gan_train(args, man: RunManifest) -> None:
    overrides = {"seed": man.seed, "iterations": args.iterations, "scale": args.scale, "regime": args.regime}
    if args.config:
        config = sim_gan.GanConfig.from_file(args.config, **overrides)
    else:
        config = sim_gan.GanConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})
    ds = _single_label(load_csv(args.beats), args.label)
    label = ds.beats[0].label if len(ds) else args.label
    dist = None
    if args.eta_dist:
        dist = _pick_dist(load_distributions(args.eta_dist), label, args.eta_dist)
        man.inputs["eta_dist"] = args.eta_dist
    model, tlog = sim_gan.train(config, ds, dist, label, diag_dir=args.out)
    model_dir = os.path.join(args.out, "model")
    model.save(model_dir)
    log_path = os.path.join(args.out, "training_log.csv")
    tlog.save(log_path)
    man.inputs["beats"] = args.beats
    man.outputs += [model_dir, log_path]


def cmd_gan_generate(args, man: RunManifest) -> None:
    if args.count < 0:
        raise ConfigError("--count must be >= 0")
    if not os.path.isdir(args.model):
        raise DataError(f"model directory {args.model} not found")
    model = sim_gan.GanModel.load(args.model)
    beats = sim_gan.generate(model, args.count, man.seed)
    path = os.path.join(args.out, "beats.csv")
    save_csv(beats, path)
    man.inputs["model"] = args.model
    man.outputs.append(path)


def cmd_classify(args, man: RunManifest) -> None:
    overrides = {
        "seed": man.seed, "epochs_phase1": args.epochs_phase1, "epochs_phase2": args.epochs_phase2,
        "scale": args.scale, "augmentation": args.augmentation,
    }
    if args.config:
        config = ClassifierConfig.from_file(args.config, **overrides)
    else:
        config = ClassifierConfig.from_mapping({k: v for k, v in overrides.items() if v is not None})
    train = load_csv(args.train, "train")
    synth = []
    for path in args.synth or []:
        synth += load_csv(path, "train", "gan").beats
    stats = None
    if args.standardize:
        train, stats = standardize(train)
        if synth:
            synth, _ = standardize(synth, stats)
    if synth and config.augmentation_multiples:
        # keep the first k synthetic beats of each class, k = multiple * class size
        counts = augmentation_counts(config, train)
        picked = []
        for c in C.CLASSES:
            pool = [b for b in synth if b.label == c]
            if c in counts:
                if len(pool) < counts[c]:
                    raise DataError(f"need {counts[c]} synthetic {c} beats, got {len(pool)}")
                picked += pool[: counts[c]]
        synth = picked
    model, clog = train_classifier(config, train, synth, diag_dir=args.out)
    model.stats = stats
    model_dir = os.path.join(args.out, "model")
    model.save(model_dir)
    log_path = os.path.join(args.out, "training_log.csv")
    clog.save(log_path)
    man.inputs.update(train=args.train, synth=list(args.synth or []))
    man.outputs += [model_dir, log_path]


def _named(items) -> dict[str, str]:
    out = {}
    for item in items or []:
        name, sep, path = item.partition("=")
        if not sep:
            name, path = os.path.basename(os.path.normpath(item)), item
        if name in out:
            raise ConfigError(f"regime name {name!r} given twice")
        out[name] = path
    return out


def _load_scores(path, n: int) -> np.ndarray:
    try:
        arr = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from None
    if arr.shape != (n, len(C.CLASSES)):
        raise DataError(f"{path}: expected {n} rows of {len(C.CLASSES)} scores, got shape {arr.shape}")
    return arr


def cmd_eval(args, man: RunManifest) -> None:
    test = load_csv(args.test, "test")
    models = {name: ClassifierModel.load(p) if os.path.isdir(p) else None for name, p in _named(args.model).items()}
    for name, p in _named(args.scores).items():
        if name in models:
            raise ConfigError(f"regime name {name!r} given twice")
        models[name] = _load_scores(p, len(test)) if os.path.exists(p) else None
    if not models:
        raise ConfigError("give at least one --model or --scores")
    classes = args.classes.split(",") if args.classes else ("S", "V", "F")
    for c in classes:
        if c not in C.CLASSES:
            raise ConfigError(f"unknown class {c!r}")
    report = evaluate_regimes(models, test, classes)
    man.inputs.update(test=args.test, model=list(args.model or []), scores=list(args.scores or []))
    man.outputs += report.save(args.out)
    sys.stdout.write(report.summary_text())


def cmd_standardize(args, man: RunManifest) -> None:
    train = load_csv(args.train, "train")
    if args.stats:
        stats = Stats.load(args.stats)
        train, _ = standardize(train, stats)
    else:
        train, stats = standardize(train)
    outs = {"train.csv": train}
    if args.test:
        outs["test.csv"], _ = standardize(load_csv(args.test, "test"), stats)
    for name, ds in outs.items():
        path = os.path.join(args.out, name)
        save_csv(ds, path)
        man.outputs.append(path)
    stats_path = os.path.join(args.out, "stats.txt")
    stats.save(stats_path)
    man.outputs.append(stats_path)
    man.inputs.update(train=args.train, test=args.test, stats=args.stats)


def cmd_make_corpus(args, man: RunManifest) -> None:
    spec = CorpusSpec(
        default_class_distributions(), _parse_counts(args.train_counts), _parse_counts(args.test_counts),
        noise_sigma=args.noise, sample_noise=args.sample_noise, seed=man.seed,
    )
    train, test = make_synthetic_corpus(spec)
    for name, ds in (("train.csv", train), ("test.csv", test)):
        path = os.path.join(args.out, name)
        save_csv(ds, path)
        man.outputs.append(path)


# --- parser -----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cardioforge", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        sp = sub.add_parser(name, help=help_text)
        sp.add_argument("--out", required=True, help="output directory (created if missing)")
        sp.add_argument("--seed", type=int, default=None, help=f"defaults to ${SEED_ENV}, else 0")
        sp.set_defaults(func=func)
        return sp

    sp = add("simulate", cmd_simulate, "simulate beats from a parameter distribution")
    sp.add_argument("--eta-file", help="distribution file (class,component_name,mean,var)")
    sp.add_argument("--class", dest="label", choices=C.CLASSES)
    sp.add_argument("--count", type=int, required=True)
    sp.add_argument("--noise", type=float, default=0.05, help="relative parameter jitter")

    sp = add("fit", cmd_fit, "fit simulator parameters to beats of one class")
    sp.add_argument("--beats", required=True)
    sp.add_argument("--class", dest="label", choices=C.CLASSES)
    sp.add_argument("--budget", type=int, default=2000)
    sp.add_argument("--restarts", type=int, default=3)
    sp.add_argument("--max-beats", type=int, default=0, help="fit only the first N beats (0 = all)")

    sp = add("gan-train", cmd_gan_train, "train a class-specific GAN")
    sp.add_argument("--config")
    sp.add_argument("--beats", required=True)
    sp.add_argument("--eta-dist")
    sp.add_argument("--class", dest="label", choices=C.CLASSES)
    sp.add_argument("--regime", choices=sim_gan.REGIMES)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--scale", type=float)

    sp = add("gan-generate", cmd_gan_generate, "sample beats from a trained GAN")
    sp.add_argument("--model", required=True)
    sp.add_argument("--count", type=int, required=True)

    sp = add("classify", cmd_classify, "train the classifier, optionally with synthetic beats")
    sp.add_argument("--config")
    sp.add_argument("--train", required=True)
    sp.add_argument("--synth", action="append", help="synthetic beat CSV (repeatable)")
    sp.add_argument("--augmentation", help="per-class multiples, e.g. S:1,F:0.5")
    sp.add_argument("--epochs-phase1", type=int)
    sp.add_argument("--epochs-phase2", type=int)
    sp.add_argument("--scale", type=float)
    sp.add_argument("--standardize", action="store_true", help="standardize with train-split stats")

    sp = add("eval", cmd_eval, "precision-recall curves on the test split")
    sp.add_argument("--test", required=True)
    sp.add_argument("--model", action="append", help="[NAME=]classifier model dir (repeatable)")
    sp.add_argument("--scores", action="append", help="[NAME=]CSV of per-class probabilities (repeatable)")
    sp.add_argument("--classes", help="comma list, default S,V,F")

    sp = add("standardize", cmd_standardize, "standardize splits with train statistics")
    sp.add_argument("--train", required=True)
    sp.add_argument("--test")
    sp.add_argument("--stats", help="reuse an existing stats file")

    sp = add("make-corpus", cmd_make_corpus, "simulate a labelled train/test corpus")
    sp.add_argument("--train-counts", required=True, help="e.g. N:400,S:20")
    sp.add_argument("--test-counts", default="")
    sp.add_argument("--noise", type=float, default=0.05)
    sp.add_argument("--sample-noise", type=float, default=0.0)
    return p


INPUT_ERRORS = (DataError, ConfigError, DomainError, FileNotFoundError, IsADirectoryError, KeyError)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    start = time.perf_counter()
    try:
        seed = resolve_seed(args.seed)
        os.makedirs(args.out, exist_ok=True)
        man = RunManifest(args.command, getattr(args, "config", None), seed)
        args.func(args, man)
    except INPUT_ERRORS as exc:
        print(f"cardioforge {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CardioForgeError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"cardioforge {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAILED
    man.duration_s = round(time.perf_counter() - start, 3)
    man.outputs = [os.path.relpath(o, args.out) for o in man.outputs]
    man.write(args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
