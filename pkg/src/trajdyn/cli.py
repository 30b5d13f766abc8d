"""Command-line runner: ``trajdyn <subcommand> --config cfg.yaml [--seed N] [--out DIR]``.

Exit codes: 0 ok, 2 configuration error, 3 numeric failure, 4 I/O failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import platform
import sys
from pathlib import Path

EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 2, 3, 4
SUBCOMMANDS = ("gen-data", "train", "eval-horizon", "eval-reward", "sweep-sample", "eval-datatype",
               "iterate", "mpc", "report")

log = logging.getLogger("trajdyn")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="trajdyn", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, default=None, help="YAML experiment config")
    common.add_argument("--seed", type=int, default=None, help="override the master seed")
    common.add_argument("--out", type=str, default=None, help="run directory")
    common.add_argument("--threads", type=int, default=None, help="BLAS threads (default from config)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="simulate train/val trajectories")
    t = sub.add_parser("train", parents=[common], help="train one model kind on the train set")
    t.add_argument("--kind", required=True, choices=["D", "P", "DE", "PE", "T", "TP", "TE", "TPE"])
    h = sub.add_parser("eval-horizon", parents=[common], help="per-step error curves, epoch sweep, uncertainty")
    h.add_argument("--kinds", nargs="+", default=None)
    h.add_argument("--epoch-sweep", action="store_true")
    h.add_argument("--uncertainty", action="store_true")
    sub.add_parser("eval-reward", parents=[common], help="five-way reward prediction table")
    sub.add_parser("sweep-sample", parents=[common], help="sample-efficiency grid")
    sub.add_parser("eval-datatype", parents=[common], help="stable/unstable/periodic generalization matrix")
    sub.add_parser("iterate", parents=[common], help="iterative learning: trajectory optimization vs GP-EI")
    sub.add_parser("mpc", parents=[common], help="MPC with one-step and trajectory-based models")
    sub.add_parser("report", parents=[common], help="collect run outputs into summary.json")
    return p


def _fmt(v):
    if isinstance(v, float):
        return repr(v)
    return v


def write_rows(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(float(x)) if hasattr(x, "dtype") else _fmt(x) for x in r])


class Run:
    def __init__(self, cfg, out: Path):
        self.cfg, self.out = cfg, out
        self.out.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.out / name

    def require(self, name: str) -> Path:
        p = self.path(name)
        if not p.exists():
            raise FileNotFoundError(f"missing artifact {p}; run the producing subcommand first")
        return p

    def manifest(self, command: str, outputs) -> None:
        import numpy
        import scipy

        from . import __version__, kernels

        m = {
            "command": command,
            "config_digest": self.cfg.digest(),
            "seed": self.cfg.seed,
            "outputs": sorted(str(o) for o in outputs),
            "versions": {"trajdyn": __version__, "python": platform.python_version(),
                         "numpy": numpy.__version__, "scipy": scipy.__version__},
            "kernel_backend": kernels.BACKEND,
        }
        self.path(f"manifest_{command}.json").write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        (self.out / "config.yaml").write_text(_dump(self.cfg))


def _dump(cfg):
    from .config import dump_config

    return dump_config(cfg)


def _env_name(cfg):
    return cfg.env.id


# --------------------------------------------------------------------------- commands


def cmd_gen_data(run: Run, args):
    from .data import save_trajectories
    from .experiments import datasets, setup

    st = setup(run.cfg)
    train, val = datasets(run.cfg, st)
    for name, trajs in (("train.trj", train), ("val.trj", val)):
        save_trajectories(run.path(name), trajs, st.env.env_id, st.env.spec.dt, st.recipe.box,
                          {"recipe": st.recipe.name, "seed": run.cfg.seed})
    return ["train.trj", "val.trj"]


def _load(run: Run, name: str):
    from .data import load_trajectories

    return load_trajectories(run.require(name))[0]


def cmd_train(run: Run, args):
    from .experiments import setup, train_kind
    from .models import save_model

    st = setup(run.cfg)
    model = train_kind(run.cfg, st, args.kind, _load(run, "train.trj"))
    name = f"model_{args.kind}.ckpt"
    save_model(run.path(name), model)
    hist = model.history
    rows = [(k, e + 1, tl, hist[k]["val"][e] if e < len(hist[k]["val"]) else "")
            for k in range(len(hist)) for e, tl in enumerate(hist[k]["train"])]
    write_rows(run.path(f"train_{args.kind}.csv"), ["member", "epoch", "train_loss", "val_loss"], rows)
    return [name, f"train_{args.kind}.csv"]


def cmd_eval_horizon(run: Run, args):
    from .evaluation import write_curves
    from .experiments import run_epoch_sweep, run_horizon, run_uncertainty, setup
    from .models import load_model

    cfg = run.cfg
    kinds = args.kinds or cfg.eval.kinds
    models = {k: load_model(run.require(f"model_{k}.ckpt")) for k in kinds}
    val = _load(run, "val.trj")
    outputs = []
    name = f"fig5_{_env_name(cfg)}.csv"
    write_curves(run.path(name), run_horizon(cfg, models, val))
    outputs.append(name)
    if args.epoch_sweep:
        st = setup(cfg)
        sweep = run_epoch_sweep(cfg, st, _load(run, "train.trj"), val)
        write_rows(run.path("table3.csv"), ["epochs", "mean_step_error"], sorted(sweep.items()))
        outputs.append("table3.csv")
    if args.uncertainty:
        prob = {k: load_model(run.require(f"model_{k}.ckpt")) for k in cfg.eval.uncertainty_kinds}
        prof = run_uncertainty(cfg, prob, val)
        H = len(next(iter(prof.values())))
        write_rows(run.path(f"fig2_{_env_name(cfg)}.csv"), ["h"] + [f"sigma_{k}" for k in prof],
                   [[h + 1] + [float(prof[k][h]) for k in prof] for h in range(H)])
        outputs.append(f"fig2_{_env_name(cfg)}.csv")
    return outputs


def cmd_eval_reward(run: Run, args):
    from .experiments import run_reward, setup
    from .models import load_model

    st = setup(run.cfg)
    T = load_model(run.require("model_T.ckpt")) if run.path("model_T.ckpt").exists() else None
    D = load_model(run.require("model_D.ckpt")) if run.path("model_D.ckpt").exists() else None
    report, direct_gp = run_reward(run.cfg, st, _load(run, "train.trj"), T, D)
    report.write(run.path("table1.csv"))
    run.path("table1_gp.json").write_text(json.dumps(direct_gp.model.hyperparameters(), indent=2,
                                                     sort_keys=True, default=float) + "\n")
    return ["table1.csv", "table1_gp.json"]


def cmd_sweep_sample(run: Run, args):
    from .evaluation import grid_medians
    from .experiments import run_sample

    rows = run_sample(run.cfg)
    name = f"fig6_{run.cfg.sample.env}.csv"
    write_rows(run.path(name), ["kind", "L", "N", "seed", "cumulative_error"], rows)
    med = grid_medians(rows)
    write_rows(run.path(f"fig6_{run.cfg.sample.env}_median.csv"), ["kind", "L", "N", "median_cumulative_error"],
               [(k, L, N, v) for (k, L, N), v in sorted(med.items())])
    return [name, f"fig6_{run.cfg.sample.env}_median.csv"]


def cmd_eval_datatype(run: Run, args):
    from .experiments import run_datatype

    mat = run_datatype(run.cfg)
    rows = []
    for (tr, te, kind), c in mat.items():
        for r in c.rows(kind):
            rows.append([tr, te] + r)
    write_rows(run.path("fig10.csv"), ["train", "test", "model", "h", "median", "p65", "p95", "n", "train_length"],
               rows)
    return ["fig10.csv"]


def cmd_iterate(run: Run, args):
    import numpy as np

    from .experiments import run_iterate, trials_needed

    rows = run_iterate(run.cfg)
    write_rows(run.path("fig7.csv"), ["method", "seed", "trial", "reward_per_step", "normalized",
                                      "normalized_best"], rows)
    thr = run.cfg.iterate.threshold
    summ = [(m, float(np.median(trials_needed(rows, m, thr)))) for m in ("trajectory_cmaes", "bayes_opt")]
    write_rows(run.path("fig7_summary.csv"), ["method", "median_trials_to_threshold"], summ)
    return ["fig7.csv", "fig7_summary.csv"]


def cmd_mpc(run: Run, args):
    from .experiments import mpc_means, run_mpc, setup
    from .models import load_model

    st = setup(run.cfg)
    rows = run_mpc(run.cfg, st, load_model(run.require("model_D.ckpt")), load_model(run.require("model_T.ckpt")))
    write_rows(run.path("fig8.csv"), ["method", "trial", "mean_reward_per_step"], rows)
    write_rows(run.path("fig8_summary.csv"), ["method", "mean"], sorted(mpc_means(rows).items()))
    return ["fig8.csv", "fig8_summary.csv"]


def cmd_report(run: Run, args):
    import hashlib

    files = sorted(p.name for p in run.out.glob("*.csv"))
    summary = {
        "config_digest": run.cfg.digest(),
        "seed": run.cfg.seed,
        "config": run.cfg.to_dict(),
        "outputs": {f: hashlib.sha256(run.path(f).read_bytes()).hexdigest() for f in files},
        "manifests": sorted(p.name for p in run.out.glob("manifest_*.json")),
    }
    for f in ("table1.csv", "fig7_summary.csv", "fig8_summary.csv", "table3.csv"):
        if run.path(f).exists():
            with open(run.path(f)) as fh:
                summary[f] = list(csv.reader(fh))
    run.path("summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return ["summary.json"]


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "eval-horizon": cmd_eval_horizon,
            "eval-reward": cmd_eval_reward, "sweep-sample": cmd_sweep_sample, "eval-datatype": cmd_eval_datatype,
            "iterate": cmd_iterate, "mpc": cmd_mpc, "report": cmd_report}


def _set_threads(n: int) -> None:
    # takes effect because numpy is first imported after this point
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    from .config import ConfigError, ExperimentConfig, load_config

    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig()
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        if args.threads is not None:
            cfg.threads = args.threads
        if cfg.threads < 1:
            raise ConfigError("threads must be >= 1")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    _set_threads(cfg.threads)

    import numpy as np

    from .control import CareConvergenceError
    from .gp import GpFitError
    from .nn import TrainingDivergedError
    from .storage import FormatError

    try:
        run = Run(cfg, Path(cfg.out))
        outputs = COMMANDS[args.command](run, args)
        run.manifest(args.command + (f"-{args.kind}" if args.command == "train" else ""), outputs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDivergedError, CareConvergenceError, GpFitError, FloatingPointError,
            np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (TypeError, ValueError) as exc:
        # bad values that survive schema checks (e.g. a wrong-length Q) are config problems
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    for o in outputs:
        print(run.path(o))
    return 0


if __name__ == "__main__":
    sys.exit(main())
