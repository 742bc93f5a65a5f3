"""Command-line front end: sample, train, simulate, portrait, verify.

Every command is driven by a JSON config (all keys optional, published
hyperparameters as defaults) plus a few overriding flags, and is fully
reproducible from config + seed.  The resolved config is embedded in every
artifact the command writes.

Exit codes: 0 success, 1 validation/config error, 2 numerical failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import sim, systems, training, verify
from .diffcore import GradientError
from .models import Hyper, StableDynamicsModel
from .systems import DomainError


class ConfigError(ValueError):
    pass


EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_NUMERICAL = 2
EXIT_VERIFY = 3

_HYPER_KEYS = {"alpha", "beta", "lambda", "eps_pd", "eps_proj", "d",
               "u_lim", "x_lb", "x_ub", "v_cap"}
_MODEL_KEYS = {"mode", "widths", "depth"}
_TRAIN_KEYS = {"lr", "batch_size", "epochs", "clip_norm", "holdout",
               "determinism", "dataset", "resume_from"}
_SAMPLE_KEYS = {"n"}
_SIM_KEYS = {"k", "T", "h", "checkpoint"}
_PORTRAIT_KEYS = {"resolution", "checkpoint"}
_VERIFY_KEYS = {"checkpoint", "dataset", "n_samples", "r", "rollouts",
                "ablate_projection", "checks"}
_TOP_KEYS = {"name", "system", "seed", "hyper", "model", "train", "sample",
             "simulate", "portrait", "verify"}
_ALL_CHECKS = ("decrease", "decay", "quad", "certificate")


def _check_keys(section, allowed, where):
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"unknown config key(s) in {where}: {sorted(unknown)}")


def load_config(path=None, overrides=None):
    """Parse, validate, and default-fill a run config."""
    raw = {}
    if path is not None:
        try:
            with open(path) as fh:
                raw = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    _check_keys(raw, _TOP_KEYS, "config root")
    for key, allowed in (("hyper", _HYPER_KEYS), ("model", _MODEL_KEYS),
                         ("train", _TRAIN_KEYS), ("sample", _SAMPLE_KEYS),
                         ("simulate", _SIM_KEYS), ("portrait", _PORTRAIT_KEYS),
                         ("verify", _VERIFY_KEYS)):
        section = raw.get(key, {})
        if not isinstance(section, dict):
            raise ConfigError(f"config section {key!r} must be an object")
        _check_keys(section, allowed, f"section {key!r}")
        raw[key] = section
    for key, value in (overrides or {}).items():
        if value is not None:
            raw[key] = value

    cfg = {
        "name": raw.get("name", "run"),
        "system": raw.get("system", "vdp"),
        "seed": int(raw.get("seed", 0)),
        "hyper": raw["hyper"],
        "model": {"mode": raw["model"].get("mode", "general"),
                  "widths": raw["model"].get("widths"),
                  "depth": int(raw["model"].get("depth", 3))},
        "train": {"lr": raw["train"].get("lr", 1e-4),
                  "batch_size": int(raw["train"].get("batch_size", 256)),
                  "epochs": int(raw["train"].get("epochs", 200)),
                  "clip_norm": raw["train"].get("clip_norm", 1.0),
                  "holdout": raw["train"].get("holdout", 0.1),
                  "determinism": bool(raw["train"].get("determinism", True)),
                  "dataset": raw["train"].get("dataset"),
                  "resume_from": raw["train"].get("resume_from")},
        "sample": {"n": int(raw["sample"].get("n", 100000))},
        "simulate": {"k": int(raw["simulate"].get("k", 5)),
                     "T": float(raw["simulate"].get("T", 10.0)),
                     "h": float(raw["simulate"].get("h", 1e-3)),
                     "checkpoint": raw["simulate"].get("checkpoint")},
        "portrait": {"resolution": int(raw["portrait"].get("resolution", 41)),
                     "checkpoint": raw["portrait"].get("checkpoint")},
        "verify": {"checkpoint": raw["verify"].get("checkpoint"),
                   "dataset": raw["verify"].get("dataset"),
                   "n_samples": int(raw["verify"].get("n_samples", 100000)),
                   "r": raw["verify"].get("r"),
                   "rollouts": int(raw["verify"].get("rollouts", 5)),
                   "ablate_projection": bool(raw["verify"].get("ablate_projection", False)),
                   "checks": list(raw["verify"].get("checks", _ALL_CHECKS))},
    }
    if cfg["system"] not in systems.system_names():
        raise ConfigError(f"unknown system {cfg['system']!r}")
    for check in cfg["verify"]["checks"]:
        if check not in _ALL_CHECKS:
            raise ConfigError(f"unknown verify check {check!r}")
    return cfg


def resolve_hyper(cfg):
    system = systems.get_system(cfg["system"])
    section = dict(cfg["hyper"])
    try:
        return Hyper(
            u_lim=section.get("u_lim", system.u_lim),
            x_lb=section.get("x_lb", system.x_lb),
            x_ub=section.get("x_ub", system.x_ub),
            alpha=section.get("alpha", 1.0),
            beta=section.get("beta"),
            lam=section.get("lambda", 0.0),
            eps_pd=section.get("eps_pd", 0.5),
            eps_proj=section.get("eps_proj", 1e-3),
            d=section.get("d", 0.005),
            v_cap=section.get("v_cap", 10.0),
        )
    except ValueError as exc:
        raise ConfigError(f"invalid hyperparameters: {exc}") from exc


def _sub_seed(seed, label):
    labels = {"dataset": 1, "model": 2, "train": 3, "simulate": 4, "verify": 5}
    return np.random.SeedSequence([int(seed), labels[label]])


def _embed(cfg):
    """Config as embedded in artifacts (paths dropped to keep runs comparable)."""
    return json.dumps(cfg, sort_keys=True)


def _outdir(args, cfg):
    out = Path(args.out) if args.out else Path("runs") / cfg["name"]
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "config.json", "w") as fh:
        json.dump(cfg, fh, indent=2)
        fh.write("\n")
    return out


def _load_or_init_model(cfg, hyper, checkpoint):
    if checkpoint:
        return training.load_checkpoint(checkpoint)
    seed = _sub_seed(cfg["seed"], "model")
    return StableDynamicsModel.initialize(
        hyper, seed=seed, mode=cfg["model"]["mode"],
        widths=cfg["model"]["widths"], depth=cfg["model"]["depth"])


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_sample(args):
    cfg = load_config(args.config, {"seed": args.seed, "system": args.system})
    hyper = resolve_hyper(cfg)
    system = systems.get_system(cfg["system"])
    out = _outdir(args, cfg)
    seed = int(_sub_seed(cfg["seed"], "dataset").generate_state(1)[0])
    dataset = training.sample_dataset(system, hyper, cfg["sample"]["n"], seed)
    training.export_dataset_csv(dataset, out / "dataset.csv",
                                meta_path=out / "dataset.meta.json",
                                comment="# config: " + _embed(cfg))
    print(f"wrote {len(dataset)} samples to {out / 'dataset.csv'}")
    return EXIT_OK


def cmd_train(args):
    cfg = load_config(args.config, {"seed": args.seed, "system": args.system})
    hyper = resolve_hyper(cfg)
    system = systems.get_system(cfg["system"])
    out = _outdir(args, cfg)
    tc = cfg["train"]

    if tc["dataset"]:
        dataset = training.import_dataset_csv(tc["dataset"])
    else:
        seed = int(_sub_seed(cfg["seed"], "dataset").generate_state(1)[0])
        dataset = training.sample_dataset(system, hyper, cfg["sample"]["n"], seed)

    model = _load_or_init_model(cfg, hyper, tc["resume_from"])
    config = training.TrainConfig(
        lr=tc["lr"], batch_size=tc["batch_size"], epochs=tc["epochs"],
        clip_norm=tc["clip_norm"], holdout=tc["holdout"],
        determinism=tc["determinism"],
        seed=int(_sub_seed(cfg["seed"], "train").generate_state(1)[0]))
    result = training.train(model, dataset, config)

    training.save_checkpoint(model, out / "checkpoint.json")
    losses_path = out / "losses.csv"
    offset = 0
    existing = ""
    if tc["resume_from"] and losses_path.exists():
        existing = losses_path.read_text()
        rows = [ln for ln in existing.splitlines() if ln and not ln.startswith(("#", "epoch"))]
        offset = len(rows)
    with open(losses_path, "w") as fh:
        if existing:
            fh.write(existing)
        else:
            fh.write("# config: " + _embed(cfg) + "\n")
            fh.write("epoch,train_loss,holdout_loss\n")
        for i, (tr, ho) in enumerate(zip(result.train_losses, result.holdout_losses)):
            fh.write(f"{offset + i},{tr:.17g},{ho:.17g}\n")
    final = result.train_losses[-1] if result.train_losses else result.initial_loss
    print(f"trained {config.epochs} epochs; loss {result.initial_loss:.4g} -> {final:.4g}")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_simulate(args):
    cfg = load_config(args.config, {"seed": args.seed, "system": args.system})
    hyper = resolve_hyper(cfg)
    system = systems.get_system(cfg["system"])
    sc = cfg["simulate"]
    if not sc["checkpoint"]:
        raise ConfigError("simulate requires simulate.checkpoint in the config")
    model = training.load_checkpoint(sc["checkpoint"])
    out = _outdir(args, cfg)

    rng = np.random.default_rng(_sub_seed(cfg["seed"], "simulate"))
    starts = rng.uniform(model.hyper.x_lb, model.hyper.x_ub, size=(sc["k"], model.n))
    comment = "# config: " + _embed(cfg)
    for name, plant in (("true", system), ("learned", model)):
        trajs = sim.rollout_many(plant, model, starts, T=sc["T"], h=sc["h"])
        for i, traj in enumerate(trajs):
            traj.to_csv(out / f"traj_{name}_{i}.csv", comment=comment)
    print(f"wrote {2 * sc['k']} trajectories to {out}")
    return EXIT_OK


def cmd_portrait(args):
    cfg = load_config(args.config, {"seed": args.seed, "system": args.system})
    hyper = resolve_hyper(cfg)
    pc = cfg["portrait"]
    model = _load_or_init_model(cfg, hyper, pc["checkpoint"])
    out = _outdir(args, cfg)
    comment = "# config: " + _embed(cfg)
    for kind in ("fhat", "fstar", "gv", "v"):
        grid = sim.export_field(model, kind, pc["resolution"])
        grid.to_csv(out / f"field_{kind}.csv", comment=comment)
    print(f"wrote 4 field grids at resolution {pc['resolution']} to {out}")
    return EXIT_OK


def cmd_verify(args):
    cfg = load_config(args.config, {"seed": args.seed, "system": args.system})
    if args.ablate_projection:
        cfg["verify"]["ablate_projection"] = True
    hyper = resolve_hyper(cfg)
    system = systems.get_system(cfg["system"])
    vc = cfg["verify"]
    model = _load_or_init_model(cfg, hyper, vc["checkpoint"])
    out = _outdir(args, cfg)
    seed_root = _sub_seed(cfg["seed"], "verify")
    seeds = seed_root.generate_state(4)
    ablate = vc["ablate_projection"]
    report = {"config": cfg, "checks": {}, "passed": True}

    if "decrease" in vc["checks"]:
        dec = verify.check_decrease(model, vc["n_samples"], int(seeds[0]),
                                    ablate_projection=ablate)
        ok = dec.max_residual <= 1e-9
        report["checks"]["decrease"] = {"report": json.loads(dec.to_json()), "passed": ok}
        report["passed"] &= ok

    if "decay" in vc["checks"]:
        rng = np.random.default_rng(int(seeds[1]))
        starts = rng.uniform(hyper.x_lb, hyper.x_ub, size=(vc["rollouts"], model.n))
        worst = None
        ok = True
        for traj in sim.rollout_many(model, model, starts):
            rep = verify.decay_bound_check(traj, hyper)
            ok &= rep.passed
            if worst is None or rep.worst_v_ratio > worst["worst_v_ratio"]:
                worst = json.loads(rep.to_json())
        report["checks"]["decay"] = {"report": worst, "passed": bool(ok),
                                     "rollouts": vc["rollouts"]}
        report["passed"] &= ok

    if "quad" in vc["checks"]:
        r1 = 0.1 * float(np.linalg.norm(hyper.x_ub))
        r2 = float(np.linalg.norm(hyper.x_ub))
        quad = verify.estimate_quadratic_ratio(model, r1, r2, vc["n_samples"],
                                               int(seeds[2]))
        ok = quad.M >= quad.c1
        report["checks"]["quad"] = {"report": json.loads(quad.to_json()), "passed": ok}
        report["passed"] &= ok

    if "certificate" in vc["checks"]:
        if vc["dataset"]:
            dataset = training.import_dataset_csv(vc["dataset"])
            r = vc["r"] if vc["r"] is not None else verify.default_radius(hyper)
            cert = verify.certificate(model, system, dataset, r,
                                      vc["n_samples"], int(seeds[3]))
            # completion is the gate; whether the bound holds is reported only
            report["checks"]["certificate"] = {"report": json.loads(cert.to_json()),
                                               "passed": True}
        else:
            report["checks"]["certificate"] = {"report": None, "passed": True,
                                               "skipped": "no dataset configured"}

    with open(out / "verify.json", "w") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    for name, entry in report["checks"].items():
        status = "pass" if entry["passed"] else "FAIL"
        print(f"verify {name}: {status}")
    print(f"report: {out / 'verify.json'}")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="stabledyn",
        description="Learn dynamics models with built-in closed-loop stability, "
                    "then simulate and audit them.",
        exit_on_error=False)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("sample", cmd_sample), ("train", cmd_train),
                     ("simulate", cmd_simulate), ("portrait", cmd_portrait),
                     ("verify", cmd_verify)):
        p = sub.add_parser(name, exit_on_error=False)
        p.add_argument("--config", default=None, help="JSON config file")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--system", default=None,
                       choices=systems.system_names(), help="benchmark system")
        if name == "verify":
            p.add_argument("--ablate-projection", action="store_true",
                           help="negative control: audit the raw nominal model")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    try:
        args = build_parser().parse_args(argv)
    except argparse.ArgumentError as exc:
        print(f"argument error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SystemExit as exc:  # --help or argparse-internal exits
        return int(exc.code or 0)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (training.CheckpointError, OSError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (training.TrainingDivergedError, GradientError, DomainError,
            FloatingPointError, sim.DimensionError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
