"""Command-line entry points.

Every command takes an optional JSON config (keys are RunConfig fields) whose
values are overridden by explicit flags.  Outputs go to --out, or to a
directory under $PHYSGUIDE_OUT (default ./runs) named after the command.
Exit codes: 0 success, 2 validation error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import __version__

OUT_ENV = "PHYSGUIDE_OUT"
EXIT_OK, EXIT_INVALID, EXIT_FAILED = 0, 2, 3


class ConfigError(ValueError):
    """Validation failure; the message names the offending field."""


def _exists(path: str) -> bool:
    # checkpoints are addressed by stem: <stem>.json + <stem>.bin
    p = Path(path)
    return p.exists() or p.with_suffix(".json").exists()


@dataclass
class RunConfig:
    dataset: str | None = None
    denoiser: str | None = None
    policy: str | None = None
    classifier: str | None = None
    motions: str | None = None
    out: str | None = None
    seed: int = 0
    # datagen
    counts: dict = field(default_factory=lambda: {"stand": 300, "walk": 300, "hop": 300})
    H: int = 60
    # training
    epochs: int | None = None
    batch_size: int = 128
    lr: float | None = None
    hidden: list | None = None
    n_envs: int = 64
    # sampling
    schedule: str = "none"
    B: int = 64
    seeds: list = field(default_factory=lambda: [0, 1, 2])
    T: int = 50
    eta: float = 0.0
    guidance: float = 2.5
    projection_mode: str = "mean"
    # projection and comparison
    steps: int = 1
    max_steps: int = 4
    variants: list | None = None
    counts_sweep: list | None = None
    force_log: bool = False
    sim: dict = field(default_factory=dict)

    def validate(self, command: str) -> None:
        needs = {
            "train-denoiser": ["dataset"], "train-policy": ["dataset"], "train-classifier": ["dataset"],
            "sample": ["denoiser"], "project": ["policy", "motions"], "evaluate": ["motions", "dataset"],
            "sweep": ["denoiser", "policy", "dataset"], "compare": ["denoiser", "policy", "dataset"],
        }.get(command, [])
        for name in needs:
            value = getattr(self, name)
            if value is None:
                raise ConfigError(f"{name}: required for {command}")
            if not _exists(value):
                raise ConfigError(f"{name}: path {value} does not exist")
        for name in ("classifier",) + (("policy",) if command == "sample" else ()):
            value = getattr(self, name)
            if value is not None and not _exists(value):
                raise ConfigError(f"{name}: path {value} does not exist")
        if command == "sample" and self.schedule not in ("", "none") and self.policy is None:
            raise ConfigError("policy: required when the schedule projects")
        for name in ("B", "T", "H"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        if self.steps < 0 or self.max_steps < 0:
            raise ConfigError("steps: must be >= 0")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta: must lie in [0, 1]")
        if self.projection_mode not in ("mean", "stochastic"):
            raise ConfigError("projection_mode: must be 'mean' or 'stochastic'")
        if not self.seeds:
            raise ConfigError("seeds: need at least one seed")
        try:
            from .diffusion import ProjectionSchedule

            ProjectionSchedule.parse(self.schedule).resolve(self.T)
            for v in self.variants or []:
                ProjectionSchedule.parse(v).resolve(self.T)
        except ValueError as err:
            raise ConfigError(f"schedule: {err}") from err


def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as err:
        raise ConfigError(f"config: cannot read {path}: {err}") from err
    known = {f.name for f in fields(RunConfig)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"config: unknown field(s) {', '.join(unknown)}")
    return data


def _parse_counts(text: str) -> dict:
    try:
        return {k: int(v) for k, v in (item.split("=") for item in text.split(","))}
    except ValueError as err:
        raise argparse.ArgumentTypeError("counts look like stand=10,walk=10,hop=10") from err


def _int_list(text: str) -> list:
    return [int(v) for v in text.split(",") if v.strip()]


def _str_list(text: str) -> list:
    return [v.strip() for v in text.split(";") if v.strip()]


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="physguide", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON file of RunConfig fields")
    common.add_argument("--out")
    common.add_argument("--seed", type=int)
    common.add_argument("--dataset")
    common.add_argument("--denoiser")
    common.add_argument("--policy")
    common.add_argument("--classifier")
    common.add_argument("--motions")
    sampling = argparse.ArgumentParser(add_help=False)
    sampling.add_argument("--schedule")
    sampling.add_argument("--B", type=int)
    sampling.add_argument("--T", type=int)
    sampling.add_argument("--eta", type=float)
    sampling.add_argument("--guidance", type=float)
    sampling.add_argument("--seeds", type=_int_list)
    sampling.add_argument("--projection-mode", dest="projection_mode", choices=["mean", "stochastic"])
    training = argparse.ArgumentParser(add_help=False)
    training.add_argument("--epochs", type=int)
    training.add_argument("--lr", type=float)
    training.add_argument("--batch-size", dest="batch_size", type=int)
    training.add_argument("--hidden", type=_int_list)
    training.add_argument("--n-envs", dest="n_envs", type=int)

    sub.add_parser("datagen", parents=[common], help="write a synthetic gait dataset").add_argument(
        "--counts", type=_parse_counts)
    sub.choices["datagen"].add_argument("--H", type=int)
    for name, text in [("train-denoiser", "train the motion denoiser"),
                       ("train-policy", "train the imitation policy"),
                       ("train-classifier", "train the action classifier")]:
        sub.add_parser(name, parents=[common, training], help=text)
    sub.add_parser("sample", parents=[common, sampling], help="sample motions (pure DDIM with schedule none)")
    proj = sub.add_parser("project", parents=[common], help="apply the projection k times to saved motions")
    proj.add_argument("--steps", type=int)
    proj.add_argument("--projection-mode", dest="projection_mode", choices=["mean", "stochastic"])
    proj.add_argument("--force-log", dest="force_log", action="store_const", const=True)
    sub.add_parser("evaluate", parents=[common], help="metrics report for saved motions")
    sw = sub.add_parser("sweep", parents=[common, sampling], help="schedule table and projection-count curve")
    sw.add_argument("--variants", type=_str_list, help="';'-separated schedule specs")
    sw.add_argument("--counts-sweep", dest="counts_sweep", type=_int_list)
    cmp_ = sub.add_parser("compare", parents=[common, sampling], help="in-loop versus post-processing")
    cmp_.add_argument("--max-steps", dest="max_steps", type=int)
    return p


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = _load_config(args.config)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    try:
        cfg = RunConfig(**values)
    except TypeError as err:
        raise ConfigError(f"config: {err}") from err
    if cfg.out is None:
        cfg.out = str(Path(os.environ.get(OUT_ENV, "runs")) / args.command)
    return cfg


# output helpers

def write_manifest(out: Path, command: str, cfg: RunConfig, seconds: float, extra: dict | None = None) -> None:
    doc = {"command": command, "version": __version__, "seed": cfg.seed, "config": asdict(cfg),
           "wall_time_s": round(seconds, 3), **(extra or {})}
    (out / "run_manifest.json").write_text(json.dumps(doc, indent=1, sort_keys=True))


def write_csv(path: Path, rows: list[dict]) -> None:
    if not rows:
        path.write_text("")
        return
    cols = list(rows[0])
    for r in rows[1:]:
        cols += [c for c in r if c not in cols]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        w.writerows(rows)


def format_table(rows: list[dict], cols: list[str]) -> str:
    def cell(v):
        if isinstance(v, float):
            return f"{v:.4g}"
        return str(v)

    body = [[cell(r.get(c, "")) for c in cols] for r in rows]
    widths = [max(len(c), *(len(b[i]) for b in body)) if body else len(c) for i, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(b, widths)) for b in body]
    return "\n".join(lines)


def save_motions(out: Path, motions, meta: dict) -> None:
    from .motion import write_motion

    out.mkdir(parents=True, exist_ok=True)
    files = []
    for i, m in enumerate(motions):
        name = f"motion_{i:05d}.json"
        write_motion(m, out / name)
        files.append({"file": name, "label": m.condition.label})
    (out / "manifest.json").write_text(json.dumps({"format_version": 1, **meta, "files": files},
                                                  indent=1, sort_keys=True))


# commands

def cmd_datagen(cfg: RunConfig, out: Path) -> dict:
    from .datagen import build_dataset

    ds = build_dataset(out, cfg.counts, H=cfg.H, seed=cfg.seed)
    print(f"wrote {len(ds)} motions to {out}")
    return {"motions": len(ds)}


def cmd_train_denoiser(cfg: RunConfig, out: Path) -> dict:
    from .denoiser import TrainConfig, train_denoiser
    from .motion import load_dataset

    tc = {"seed": cfg.seed, "batch_size": cfg.batch_size}
    if cfg.epochs is not None:
        tc["epochs"] = cfg.epochs
    if cfg.lr is not None:
        tc["lr"] = cfg.lr
    if cfg.hidden is not None:
        tc["hidden"] = tuple(cfg.hidden)
    den = train_denoiser(load_dataset(cfg.dataset), TrainConfig(**tc))
    den.save(out / "denoiser")
    write_csv(out / "loss.csv", [{"epoch": i, "loss": l} for i, l in enumerate(den.loss_history)])
    final = den.loss_history[-1] if den.loss_history else float("nan")
    print(f"final training loss {final:.4g}")
    return {"final_loss": final}


def cmd_train_policy(cfg: RunConfig, out: Path) -> dict:
    from .imitation import PPOConfig, train_policy
    from .motion import load_dataset
    from .sim import SimConfig

    pc = {"n_envs": cfg.n_envs}
    if cfg.epochs is not None:
        pc["epochs"] = cfg.epochs
    if cfg.lr is not None:
        pc["lr"] = cfg.lr
    pol = train_policy(load_dataset(cfg.dataset), SimConfig.from_dict(cfg.sim) if cfg.sim else SimConfig(),
                       PPOConfig(**pc), seed=cfg.seed)
    pol.save(out / "policy")
    cols = ["epoch", "mean_reward", "r_p", "r_v", "r_j", "r_q", "episode_length"]
    write_csv(out / "training_log.csv", [{c: h[c] for c in cols} for h in pol.history])
    if pol.history:
        print(format_table(pol.history[-1:], cols))
    return {"epochs": len(pol.history)}


def cmd_train_classifier(cfg: RunConfig, out: Path) -> dict:
    from .metrics import eval_accuracy, train_classifier
    from .motion import load_dataset

    ds = load_dataset(cfg.dataset)
    kw = {} if cfg.epochs is None else {"epochs": cfg.epochs}
    clf = train_classifier(ds.motions, ds.labels, seed=cfg.seed, **kw)
    clf.save(out / "classifier")
    acc = eval_accuracy(clf, ds.motions, ds.labels)
    print(f"training accuracy {acc:.3f}")
    return {"train_accuracy": acc}


def _eval_config(cfg: RunConfig):
    from .experiments import EvalConfig

    return EvalConfig(cfg.B, tuple(cfg.seeds), cfg.T, cfg.eta, cfg.guidance, None, cfg.projection_mode)


def _models(cfg: RunConfig):
    from .denoiser import Denoiser
    from .imitation import Policy

    den = Denoiser.load(cfg.denoiser)
    pol = Policy.load(cfg.policy) if cfg.policy else None
    return den, pol


def cmd_sample(cfg: RunConfig, out: Path) -> dict:
    from .experiments import sample

    den, pol = _models(cfg)
    run = sample(den, pol, cfg.schedule, cfg.seed, _eval_config(cfg))
    save_motions(out / "motions", run.motions, {"schedule": run.schedule, "seed": cfg.seed,
                                                  "projected_steps": run.projected_steps})
    print(f"sampled {len(run.motions)} motions, schedule {run.schedule}, "
          f"projected steps {run.projected_steps}, failures {run.projection_failures}")
    return {"projected_steps": run.projected_steps, "projection_failures": run.projection_failures}


def cmd_project(cfg: RunConfig, out: Path) -> dict:
    from .imitation import Policy, project_motions
    from .motion import load_dataset

    pol = Policy.load(cfg.policy)
    motions = load_dataset(cfg.motions).motions
    failures, force_rows = 0, []
    for k in range(cfg.steps):
        last = k == cfg.steps - 1
        res = project_motions(pol, motions, cfg.projection_mode, cfg.seed + k, record_forces=last and cfg.force_log)
        motions, failures = res.motions, failures + int(res.failed.sum())
        if res.forces is not None:
            for frame, per_motion in enumerate(res.forces, start=1):
                for i, contacts in enumerate(per_motion):
                    for cid, (fx, fn) in enumerate(contacts):
                        force_rows.append({"motion": i, "frame": frame, "contact_id": cid,
                                           "N": float(fn), "f_x": float(fx)})
    save_motions(out / "motions", motions, {"projection_steps": cfg.steps, "seed": cfg.seed})
    if cfg.force_log:
        write_csv(out / "forces.csv", force_rows)
    print(f"projected {len(motions)} motions {cfg.steps} time(s), {failures} failure(s)")
    return {"projection_failures": failures}


def _reference(cfg: RunConfig):
    from .experiments import Reference
    from .metrics import ActionClassifier
    from .motion import load_dataset

    clf = ActionClassifier.load(cfg.classifier) if cfg.classifier else None
    return Reference.from_motions(load_dataset(cfg.dataset).motions, clf)


def cmd_evaluate(cfg: RunConfig, out: Path) -> dict:
    from .experiments import evaluate_motions, per_motion_rows
    from .motion import load_dataset

    motions = load_dataset(cfg.motions).motions
    summary = evaluate_motions(motions, _reference(cfg))
    rows = per_motion_rows(motions)
    agg = {}
    for k in ("penetrate", "float", "skate", "phys_err"):
        vals = np.array([r[k] for r in rows])
        agg[k] = {"mean": float(vals.mean()), "std": float(vals.std())}
    report = {"run_id": out.name, "seed": cfg.seed, "per_motion": rows, "aggregate": agg,
              "fid_proxy": summary["fid"], "accuracy": summary["accuracy"], "config": asdict(cfg)}
    (out / "report.json").write_text(json.dumps(report, indent=1, sort_keys=True))
    write_csv(out / "per_motion.csv", rows)
    print(format_table([summary], ["penetrate", "float", "skate", "phys_err", "fid", "accuracy"]))
    return {"phys_err": summary["phys_err"], "fid": summary["fid"]}


def _emit_sweep(out: Path, name: str, report, cols: list[str]) -> None:
    write_csv(out / f"{name}.csv", report.rows + report.aggregate)
    (out / f"{name}.json").write_text(json.dumps({"rows": report.rows, "aggregate": report.aggregate,
                                                  "complete": report.complete, "error": report.error},
                                                 indent=1, sort_keys=True))
    print(format_table(report.rows + report.aggregate, cols))
    if not report.complete:
        raise RuntimeError(f"{name} aborted: {report.error}")


def cmd_sweep(cfg: RunConfig, out: Path) -> dict:
    from .experiments import TABLE_VARIANTS, projection_count_curve, sweep_schedules

    den, pol = _models(cfg)
    ref, ecfg = _reference(cfg), _eval_config(cfg)
    table = sweep_schedules(den, pol, ref, cfg.variants or TABLE_VARIANTS, ecfg)
    _emit_sweep(out, "schedules", table, ["schedule", "seed", "phys_err", "fid", "accuracy"])
    curve = projection_count_curve(den, pol, ref, cfg.counts_sweep, ecfg)
    _emit_sweep(out, "counts", curve, ["count", "seed", "phys_err", "fid", "accuracy"])
    return {}


def cmd_compare(cfg: RunConfig, out: Path) -> dict:
    from .experiments import compare_postproc

    den, pol = _models(cfg)
    rep = compare_postproc(den, pol, _reference(cfg), cfg.max_steps, _eval_config(cfg))
    _emit_sweep(out, "postproc", rep, ["method", "k", "seed", "phys_err", "fid", "accuracy"])
    return {}


COMMANDS = {
    "datagen": cmd_datagen, "train-denoiser": cmd_train_denoiser, "train-policy": cmd_train_policy,
    "train-classifier": cmd_train_classifier, "sample": cmd_sample, "project": cmd_project,
    "evaluate": cmd_evaluate, "sweep": cmd_sweep, "compare": cmd_compare,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        cfg.validate(args.command)
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    out = Path(cfg.out)
    t0 = time.perf_counter()
    try:
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](cfg, out)
    except Exception as err:  # noqa: BLE001 - reported as a runtime failure
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAILED
    write_manifest(out, args.command, cfg, time.perf_counter() - t0, extra)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
