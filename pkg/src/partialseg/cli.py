"""Command-line entry point: generate, train, evaluate, sweep, gradcheck.

Every artifact carries provenance (config hash, seed, data manifest hash) in
``#`` header lines for CSV files and a ``provenance`` object for JSON files.
Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 check failure.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from partialseg import __version__
from partialseg.checkpoint import load_checkpoint, save_checkpoint
from partialseg.errors import MissingCheckpoint, PartialSegError
from partialseg.experiment import (
    TABLE4_RATIOS,
    FeatureCache,
    cell_dice,
    cell_hd,
    evaluate_network,
    mean_dice,
    mean_hd,
    network_plan,
    network_roster,
    output_space,
    train_network,
    with_ratio,
)
from partialseg.gradcheck import LOSS_NAMES, run_suite
from partialseg.metrics import write_metric_rows
from partialseg.synthdata import PhantomSpec, generate, load, manifest_hash, sensitivity_split
from partialseg.trainer import Session, TrainConfig, load_model, save_model

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CHECK = 0, 1, 2, 3

SENSITIVITY_SPLITS = (24, 19, 14, 9, 4)  # fully labeled samples kept; the rest become single-label


class UsageError(Exception):
    pass


@dataclass
class ExperimentConfig:
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    networks: list[str] = field(default_factory=lambda: ["F", "All"])
    ratios: list[str] = field(default_factory=lambda: list(TABLE4_RATIOS))
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: dict = field(default_factory=dict)
    preset: str | None = None

    def __post_init__(self):
        if not self.seeds:
            raise UsageError("seeds must be non-empty")
        if self.preset not in (None, "sensitivity"):
            raise UsageError(f"unknown preset {self.preset!r}")
        for r in self.ratios:
            try:
                with_ratio(self.train, r)
            except ValueError as exc:
                raise UsageError(f"bad ratio {r!r}: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "seeds": list(self.seeds),
            "networks": list(self.networks),
            "ratios": list(self.ratios),
            "train": self.train.to_dict(),
            "phantom": dict(self.phantom),
            "preset": self.preset,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {"seeds", "networks", "ratios", "train", "phantom", "preset"}
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        d = dict(d)
        if "train" in d:
            try:
                d["train"] = TrainConfig.from_dict(d["train"])
            except (TypeError, ValueError) as exc:
                raise UsageError(f"bad train config: {exc}") from exc
        return cls(**d)


def config_hash(obj: dict) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def provenance(cfg_dict: dict, seed, data_dir=None) -> dict:
    out = {"config_hash": config_hash(cfg_dict), "seed": seed, "partialseg_version": __version__}
    if data_dir is not None:
        out["data_manifest"] = manifest_hash(data_dir)[:16]
    return out


def header_lines(prov: dict) -> list[str]:
    fmt = lambda v: ",".join(map(str, v)) if isinstance(v, (list, tuple)) else v
    return [f"{k}={fmt(v)}" for k, v in prov.items()]


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _threads() -> int:
    raw = os.environ.get("PARTIALSEG_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"PARTIALSEG_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("PARTIALSEG_THREADS must be >= 1")
    return n


def _run_jobs(fn, jobs: list[tuple]) -> list:
    """Run independent jobs, in worker processes when allowed. Results come
    back in job order so downstream merges stay deterministic."""
    workers = min(_threads(), len(jobs))
    if workers <= 1:
        return [fn(*j) for j in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, *zip(*jobs)))


def _load_suite(data_dir, n_full: int | None):
    suite = load(data_dir)
    return sensitivity_split(suite, n_full) if n_full is not None else suite


# generate -------------------------------------------------------------------------


def cmd_generate(args, cfg: ExperimentConfig) -> int:
    phantom = dict(cfg.phantom)
    if args.size is not None:
        phantom["image_size"] = args.size
    phantom["seed"] = args.seed if args.seed is not None else phantom.get("seed", 0)
    spec = PhantomSpec.from_dict({**PhantomSpec().to_dict(), **phantom})
    if spec.image_size < 16:
        raise UsageError("--size must be at least 16")
    generate(spec, None, args.out)
    print(f"wrote {args.out} (manifest {manifest_hash(args.out)[:16]})")
    return EXIT_OK


# train ----------------------------------------------------------------------------


def _run_dir(out, tag, network, seed) -> Path:
    return Path(out) / tag / network / f"seed{seed}"


def _train_job(data_dir, out, tag, n_full, seed, networks, cfg_dict, resume, paranoid, prov) -> list[str]:
    suite = _load_suite(data_dir, n_full)
    cache = FeatureCache(suite)
    train_cfg = replace(TrainConfig.from_dict(cfg_dict["train"]), seed=seed)
    if paranoid:
        train_cfg = replace(train_cfg, paranoid_every=paranoid)
    lines = header_lines({**prov, "seed": seed})
    stage1_of_f = None
    done = []
    # F first: its finished session is exactly All's stage 1 for the same seed
    for network in sorted(networks, key=lambda n: (n != "F", n != "All")):
        run = _run_dir(out, tag, network, seed)
        run.mkdir(parents=True, exist_ok=True)
        model_path, session_path = run / "model.ckpt", run / "session.ckpt"
        if resume and model_path.exists():
            session = Session.load(session_path)[0] if network == "F" and session_path.exists() else None
            stage1_of_f = session if session is not None and session.cfg == train_cfg else stage1_of_f
            done.append(f"{run} (already complete)")
            continue
        session = None
        if resume and session_path.exists():
            session, _ = Session.load(session_path)
            if session.cfg != train_cfg:
                raise UsageError(f"{session_path} was written with a different config")
        plan = network_plan(suite, network)
        space, to_global = output_space(suite, plan)

        def checkpoint(s, path=session_path):
            s.save(path)

        s = train_network(
            suite, network, train_cfg, cache,
            stage1=stage1_of_f if session is None else None,
            on_epoch=checkpoint,
            session=session,
            dump_path=run / "diverged.ckpt",
        )
        s.save(session_path)
        if network == "F":
            stage1_of_f = s
        s.log.write_csv(run / "trainlog.csv", lines + [f"network={network}"])
        extra = {"network": network, "seed": seed, "n_full": n_full, "to_global": to_global.tolist(), "provenance": prov}
        save_model(model_path, s.model, cache.extractor, space.names, extra)
        done.append(str(run))
    return done


def _tags(cfg: ExperimentConfig) -> list[tuple[str, int | None]]:
    if cfg.preset == "sensitivity":
        return [(f"nfull{n}", n) for n in SENSITIVITY_SPLITS]
    return [("", None)]


def _expand_networks(names: list[str], data_dir) -> list[str]:
    suite = load(data_dir)
    out = []
    for n in names:
        out.extend(network_roster(suite) if n == "roster" else [n])
    for n in out:
        try:
            network_plan(suite, n)
        except (KeyError, ValueError) as exc:
            raise UsageError(f"unknown network {n!r}: {exc}") from exc
    return list(dict.fromkeys(out))


def cmd_train(args, cfg: ExperimentConfig) -> int:
    networks = _expand_networks(cfg.networks, args.data)
    cfg_dict = cfg.to_dict()
    prov = provenance(cfg_dict, cfg.seeds, args.data)
    jobs = [
        (args.data, args.out, tag, n_full, seed, networks, cfg_dict, args.resume, args.paranoid, prov)
        for tag, n_full in _tags(cfg)
        for seed in cfg.seeds
    ]
    for done in _run_jobs(_train_job, jobs):
        for line in done:
            print(f"trained {line}")
    return EXIT_OK


# evaluate -------------------------------------------------------------------------


def save_oracle(path, network: str = "All", seed: int = 0, n_full: int | None = None) -> None:
    """A checkpoint whose predictions are the ground truth itself."""
    save_checkpoint(path, {"kind": "oracle", "network": network, "seed": seed, "n_full": n_full}, {})


def _mean_std(values) -> dict:
    v = np.asarray(values, dtype=float)
    v = v[np.isfinite(v)]
    if v.size == 0:
        return {"mean": None, "std": None, "n": 0, "text": "n/a"}
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    return {"mean": float(v.mean()), "std": std, "n": int(v.size), "text": f"{v.mean():.3f}±{std:.3f}"}


def _cell_key(suite, ds, c) -> str:
    return f"{ds}/{suite.space.names[c]}"


def cmd_evaluate(args, cfg: ExperimentConfig) -> int:
    runs = sorted(Path(args.runs).rglob("model.ckpt"))
    if not runs:
        raise MissingCheckpoint(f"no model.ckpt under {args.runs}")
    suites: dict = {}
    rows, per_run = [], []
    for path in runs:
        header, _ = load_checkpoint(path)
        n_full = header.get("n_full")
        if n_full not in suites:
            suite = _load_suite(args.data, n_full)
            suites[n_full] = (suite, FeatureCache(suite))
        suite, cache = suites[n_full]
        network, seed = header["network"], header["seed"]
        if header.get("kind") == "oracle":
            reports = evaluate_network(suite, network, None, cache, predictor=lambda s: s.gt_full)
        else:
            model, _, _ = load_model(path)
            reports = evaluate_network(suite, network, model, cache)
        label = network if n_full is None else f"{network}@nfull{n_full}"
        for ds in sorted(reports):
            for r in reports[ds].rows:
                rows.append({"network": label, "seed": seed, **r})
        per_run.append((label, seed, suite, reports))

    cfg_dict = cfg.to_dict()
    seeds = sorted({s for _, s, _, _ in per_run})
    prov = provenance(cfg_dict, seeds, args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_metric_rows(out / "metrics.csv", rows, header_lines(prov), leading=("network", "seed"))

    networks: dict = {}
    for label, seed, suite, reports in per_run:
        entry = networks.setdefault(label, {"seeds": [], "dice": [], "hd": [], "cells": {}})
        entry["seeds"].append(seed)
        entry["dice"].append(mean_dice(reports))
        entry["hd"].append(mean_hd(reports))
        hd_cells = cell_hd(reports)
        for (ds, c), v in cell_dice(reports).items():
            cell = entry["cells"].setdefault(_cell_key(suite, ds, c), {"dice": [], "hd": []})
            cell["dice"].append(v)
            cell["hd"].append(hd_cells.get((ds, c), float("nan")))
    summary = {"provenance": prov, "networks": {}}
    for label, e in sorted(networks.items()):
        summary["networks"][label] = {
            "seeds": e["seeds"],
            "mean_dice": _mean_std(e["dice"]),
            "mean_hd": _mean_std(e["hd"]),
            "cells": {k: {"dice": _mean_std(v["dice"]), "hd": _mean_std(v["hd"])} for k, v in sorted(e["cells"].items())},
        }
    if "F" in summary["networks"] and "All" in summary["networks"]:
        f, a = summary["networks"]["F"]["cells"], summary["networks"]["All"]["cells"]
        deltas = {}
        for k in sorted(set(f) & set(a)):
            fd, ad = f[k]["dice"]["mean"], a[k]["dice"]["mean"]
            deltas[k] = {"F": fd, "All": ad, "delta": ad - fd}
        summary["all_vs_f"] = {
            "cells": deltas,
            "mean_dice_delta": summary["networks"]["All"]["mean_dice"]["mean"] - summary["networks"]["F"]["mean_dice"]["mean"],
        }
    _write_json(out / "summary.json", summary)
    for label, s in summary["networks"].items():
        print(f"{label:>14}  dice {s['mean_dice']['text']}  hd {s['mean_hd']['text']}")
    return EXIT_OK


# sweep ----------------------------------------------------------------------------


def _sweep_job(data_dir, seed, ratios, cfg_dict) -> list[dict]:
    suite = load(data_dir)
    cache = FeatureCache(suite)
    train_cfg = replace(TrainConfig.from_dict(cfg_dict["train"]), seed=seed)
    stage1 = train_network(suite, "F", train_cfg, cache)
    rows = []
    for ratio in ratios:
        s = train_network(suite, "All", with_ratio(train_cfg, ratio), cache, stage1=copy.deepcopy(stage1))
        reports = evaluate_network(suite, "All", s.model, cache)
        rows.append({"ratio": ratio, "seed": seed, "mean_dice": mean_dice(reports), "mean_hd": mean_hd(reports)})
    return rows


def cmd_sweep(args, cfg: ExperimentConfig) -> int:
    cfg_dict = cfg.to_dict()
    prov = provenance(cfg_dict, cfg.seeds, args.data)
    jobs = [(args.data, seed, cfg.ratios, cfg_dict) for seed in cfg.seeds]
    results = [r for rows in _run_jobs(_sweep_job, jobs) for r in rows]
    results.sort(key=lambda r: (cfg.ratios.index(r["ratio"]), r["seed"]))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "sweep.csv", "w") as fh:
        for line in header_lines(prov):
            fh.write(f"# {line}\n")
        fh.write("ratio,seed,mean_dice,mean_hd\n")
        for r in results:
            fh.write(f"{r['ratio']},{r['seed']},{r['mean_dice']:.6f},{r['mean_hd']:.6f}\n")
    summary = {"provenance": prov, "ratios": {}}
    for ratio in cfg.ratios:
        mine = [r for r in results if r["ratio"] == ratio]
        summary["ratios"][ratio] = {
            "mean_dice": _mean_std([r["mean_dice"] for r in mine]),
            "mean_hd": _mean_std([r["mean_hd"] for r in mine]),
        }
    _write_json(out / "sweep_summary.json", summary)
    for ratio, s in summary["ratios"].items():
        print(f"{ratio:>5}  dice {s['mean_dice']['text']}  hd {s['mean_hd']['text']}")
    return EXIT_OK


# gradcheck ------------------------------------------------------------------------


def cmd_gradcheck(args, cfg: ExperimentConfig) -> int:
    names = LOSS_NAMES if args.losses is None else [n.strip() for n in args.losses.split(",") if n.strip()]
    unknown = sorted(set(names) - set(LOSS_NAMES))
    if unknown:
        raise UsageError(f"unknown losses {unknown}; choose from {', '.join(LOSS_NAMES)}")
    if args.trials < 1:
        raise UsageError("--trials must be positive")
    seed = args.seed if args.seed is not None else 0
    results = run_suite(names, trials=args.trials, seed=seed)
    doc = {
        "provenance": provenance({"losses": list(names), "trials": args.trials}, seed),
        "reports": results,
        "passed": all(r["passed"] for r in results.values()),
    }
    text = json.dumps(doc, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK if doc["passed"] else EXIT_CHECK


# parser ---------------------------------------------------------------------------


def _seed_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="partialseg", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config; flags override its values")
    common.add_argument("--seed", type=int, help="single seed (overrides --seeds and the config)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[common], help="write the synthetic dataset suite")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, help="image side length in pixels")

    p = sub.add_parser("train", parents=[common], help="train networks, one run per (network, seed)")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--networks", help="comma-separated: F, F+P1, P1, All, or 'roster' for all of them")
    p.add_argument("--seeds", type=_seed_list)
    p.add_argument("--ratio", help="marginal:exclusion loss weight ratio, e.g. 1:2")
    p.add_argument("--preset", choices=["sensitivity"])
    p.add_argument("--resume", action="store_true", help="continue interrupted runs from their last epoch")
    p.add_argument("--paranoid", type=int, nargs="?", const=50, default=0, metavar="K",
                   help="spot-check gradients every K batches (default K=50)")

    p = sub.add_parser("evaluate", parents=[common], help="score trained runs on the test splits")
    p.add_argument("--data", required=True)
    p.add_argument("--runs", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("sweep", parents=[common], help="train All once per loss-weight ratio per seed")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", help="comma-separated m:e ratios (default: the nine-ratio grid)")
    p.add_argument("--seeds", type=_seed_list)

    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference check of every loss")
    p.add_argument("--losses", help=f"comma-separated subset of {','.join(LOSS_NAMES)}")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--out", help="also write the JSON report here")
    return parser


def resolve_config(args) -> ExperimentConfig:
    raw = {}
    if args.config:
        try:
            raw = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
    cfg = ExperimentConfig.from_dict(raw)
    if getattr(args, "seeds", None):
        cfg.seeds = args.seeds
    if args.seed is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "networks", None):
        cfg.networks = [n.strip() for n in args.networks.split(",") if n.strip()]
    if getattr(args, "ratios", None):
        cfg.ratios = [r.strip() for r in args.ratios.split(",") if r.strip()]
    if getattr(args, "ratio", None):
        try:
            cfg.train = with_ratio(cfg.train, args.ratio)
        except ValueError as exc:
            raise UsageError(f"bad --ratio {args.ratio!r}: {exc}") from exc
    if getattr(args, "preset", None):
        cfg.preset = args.preset
    cfg.__post_init__()
    return cfg


COMMANDS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with 2 on usage errors
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        parser.error(str(exc))
    except (PartialSegError, OSError, ValueError) as exc:
        print(f"partialseg: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
