"""Command-line entry point: generate / solve / train / certify / bench.

Every run creates the output directory, resolves its configuration
(defaults < --config JSON file < explicit flags) and writes a manifest.json
sufficient to re-run the command bit-identically. CSV outputs are
deterministic by default (wall-clock columns stay zero unless --timings).
"""

from __future__ import annotations

import argparse
import json
import platform
import sys
from pathlib import Path

import numpy as np

from . import __version__, bench, classical, datagen, theory
from .funcs import function_ids, get_function
from .nlista.model import load_checkpoint, save_checkpoint
from .nlista.train import TrainConfig, train_progressive


class UserError(Exception):
    """Invalid user input; rendered as a clean message, never a stack dump."""


def _write_manifest(out_dir: Path, subcommand: str, resolved: dict) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": resolved,
        "versions": {
            "nlreg": __version__,
            "numpy": np.__version__,
            "python": platform.python_version(),
        },
    }
    with open(out_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _resolve(args, defaults: dict) -> dict:
    """defaults < config file < explicit CLI flags."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise UserError(f"config file not found: {path}")
        try:
            file_cfg = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise UserError(f"malformed config file {path}: {e}") from None
        unknown = set(file_cfg) - set(defaults)
        if unknown:
            raise UserError(f"unknown config keys in {path}: {', '.join(sorted(unknown))}")
        merged.update(file_cfg)
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            merged[key] = val
    return merged


def _out_dir(args, default_name: str) -> Path:
    out = Path(args.out) if args.out else Path(default_name)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _gen_config(cfg: dict) -> datagen.GenerationConfig:
    try:
        return datagen.GenerationConfig(
            m=cfg["m"], n=cfg["n"], nonzero_prob=cfg["p"], snr_db=cfg["snr_db"],
            cond_number=cfg["cond"], seed=cfg["seed"], batch=cfg["batch"])
    except ValueError as e:
        raise UserError(str(e)) from None


def _function(fid: str):
    try:
        return get_function(fid)
    except KeyError as e:
        raise UserError(e.args[0]) from None


def _cmd_generate(args) -> int:
    defaults = {"m": 250, "n": 500, "p": 0.1, "snr_db": None, "cond": None,
                "seed": 0, "batch": 1, "f": "2x+cos(x)"}
    cfg = _resolve(args, defaults)
    out = _out_dir(args, "out-generate")
    f = _function(cfg["f"])
    instances = datagen.generate_batch(_gen_config(cfg), f)
    datagen.save_instances(out / "instances", instances)
    _write_manifest(out, "generate", cfg)
    print(f"wrote {len(instances)} instance(s) to {out}/instances.bin")
    return 0


def _cmd_solve(args) -> int:
    defaults = {"solver": "sparsa", "f": "2x+cos(x)", "lam": None, "T": 16,
                "instances": None, "m": 250, "n": 500, "p": 0.1,
                "snr_db": None, "cond": None, "seed": 0, "batch": 1,
                "timings": False}
    cfg = _resolve(args, defaults)
    sid = cfg["solver"]
    if sid not in classical.SOLVERS:
        raise UserError(f"unknown solver {sid!r}; have {', '.join(classical.SOLVERS)}")
    f = _function(cfg["f"])
    if cfg["instances"]:
        try:
            instances = datagen.load_instances(cfg["instances"])
        except (FileNotFoundError, ValueError) as e:
            raise UserError(str(e)) from None
    else:
        instances = datagen.generate_batch(_gen_config(cfg), f)
    lam = cfg["lam"]
    if lam is None:
        lam = classical.default_lambda(sid, cfg["f"])
    if lam is None:
        raise UserError(f"no default lambda for ({sid}, {cfg['f']}); pass --lambda")
    out = _out_dir(args, "out-solve")
    config = classical.ClassicalConfig(lam=lam, T=cfg["T"])
    err_sq = np.zeros(cfg["T"] + 1)
    truth_sq = 0.0
    for k, problem in enumerate(instances):
        trace = classical.SOLVERS[sid](problem, f, config)
        classical.write_trace_csv(out / f"trace_{k:04d}.csv", trace, problem, f,
                                  include_timings=cfg["timings"])
        diff = trace.iterates - problem.x_star[None, :]
        err_sq += np.sum(diff * diff, axis=1)
        truth_sq += float(problem.x_star @ problem.x_star)
    with open(out / "aggregate.csv", "w", newline="") as fh:
        fh.write("t,nmse_db\n")
        for t in range(cfg["T"] + 1):
            ratio = err_sq[t] / truth_sq
            val = 10 * np.log10(ratio) if ratio > 0 else float("-inf")
            fh.write(f"{t},{bench.format_metric(float(val))}\n")
    cfg["lam"] = lam
    _write_manifest(out, "solve", cfg)
    print(f"solved {len(instances)} instance(s) with {sid}; results in {out}")
    return 0


def _cmd_train(args) -> int:
    defaults = {"f": "2x+cos(x)", "layers": 16, "m": 250, "n": 500, "p": 0.1,
                "snr_db": None, "cond": None, "seed": 0, "update_f": None,
                "batch_size": 64, "patience": 4000, "max_steps": 20000,
                "val_size": 1000, "eval_every": 100, "lr": None,
                "checkpoint": None, "batch": 1}
    cfg = _resolve(args, defaults)
    f = _function(cfg["f"])
    if cfg["update_f"]:
        _function(cfg["update_f"])
    out = _out_dir(args, "out-train")
    data_cfg = _gen_config(cfg)
    lr_schedule = tuple(cfg["lr"]) if cfg["lr"] else (1e-3, 1e-4, 2e-5)
    try:
        tcfg = TrainConfig(batch_size=cfg["batch_size"], lr_schedule=lr_schedule,
                           patience=cfg["patience"], max_steps_per_stage=cfg["max_steps"],
                           val_size=cfg["val_size"], seed=cfg["seed"],
                           eval_every=cfg["eval_every"])
    except ValueError as e:
        raise UserError(str(e)) from None
    model = None
    if cfg["checkpoint"]:
        try:
            model = load_checkpoint(cfg["checkpoint"])
        except (FileNotFoundError, ValueError) as e:
            raise UserError(str(e)) from None
    ckpt_path = out / "model.ckpt"
    meta = {"data_f_id": cfg["f"], "seed": cfg["seed"], "snr_db": cfg["snr_db"],
            "cond": cfg["cond"], "nonzero_prob": cfg["p"]}

    def on_stage(mdl, stage, best_val, steps, secs):
        save_checkpoint(mdl, ckpt_path, meta=meta)
        print(f"stage {stage:2d}/{cfg['layers']}: val_loss {best_val:.6g} "
              f"({steps} steps, {secs:.1f}s)", flush=True)

    model = train_progressive(data_cfg, f, tcfg, model=model,
                              n_layers=cfg["layers"], update_f_id=cfg["update_f"],
                              stage_callback=on_stage)
    save_checkpoint(model, ckpt_path, meta=meta)
    with open(out / "train_log.csv", "w", newline="") as fh:
        fh.write("step,stage,lr,val_loss\n")
        for step, stage, lr, vloss in model.train_log:
            fh.write(f"{step},{stage},{lr:.12g},{vloss:.12g}\n")
    _write_manifest(out, "train", cfg)
    print(f"checkpoint written to {ckpt_path}")
    return 0


def _cmd_certify(args) -> int:
    defaults = {"m": 10, "n": 20, "s": 2, "f": "2x+cos(x)", "T": 20,
                "seed": 0, "snr_db": None, "batch": 1, "p": 0.1, "cond": None}
    cfg = _resolve(args, defaults)
    f = _function(cfg["f"])
    out = _out_dir(args, "out-certify")
    gen = _gen_config(cfg)
    try:
        problem = datagen.generate_instance(gen, f, exact_support_size=cfg["s"])
    except ValueError as e:
        raise UserError(str(e)) from None
    try:
        cert = theory.certified_run(problem, f, cfg["T"])
    except ValueError as e:
        raise UserError(f"certification failed: {e}") from None
    cert.write_csv(out / "certificate.csv")
    cert.write_summary(out / "certificate_summary.json")
    _write_manifest(out, "certify", cfg)
    status = "holds" if (cert.support_ok_all()
                         and bool(np.all(cert.errors() <= cert.bounds()))) else "VIOLATED"
    print(f"certificate for s={cert.s}, q={cert.q:.4f}, regime_ok={cert.regime_ok}: "
          f"{status}; final err {cert.rows[-1].err_l2:.3e} (files in {out})")
    return 0


def _cmd_bench(args) -> int:
    defaults = {"spec": "fig2a", "test_size": None, "T": None, "solvers": None,
                "checkpoint": None, "seed": None}
    cfg = _resolve(args, defaults)
    name = cfg["spec"]
    if name.endswith(".json") or "/" in name:
        path = Path(name)
        if not path.exists():
            raise UserError(f"spec file not found: {path}")
        raw = json.loads(path.read_text())
        raw["solvers"] = tuple(raw.get("solvers", ()))
        try:
            specs = [bench.ExperimentSpec(**raw)]
        except (TypeError, ValueError) as e:
            raise UserError(f"invalid spec file {path}: {e}") from None
    else:
        try:
            specs = bench.canonical_specs(name)
        except KeyError as e:
            raise UserError(e.args[0]) from None
    checkpoints = {}
    for item in cfg["checkpoint"] or ():
        if "=" not in item:
            raise UserError(f"--checkpoint wants solver=path, got {item!r}")
        sid, _, path = item.partition("=")
        checkpoints[sid] = path
    solvers = tuple(cfg["solvers"].split(",")) if cfg["solvers"] else None
    out = _out_dir(args, "out-bench")
    for spec in specs:
        try:
            spec = bench.with_overrides(spec, test_size=cfg["test_size"], T=cfg["T"],
                                        solvers=solvers, seed=cfg["seed"],
                                        checkpoints=checkpoints or None)
            result = bench.run_experiment(spec)
        except (FileNotFoundError, ValueError) as e:
            raise UserError(str(e)) from None
        bench.write_csv(out / f"{spec.name}_results.csv", bench.results_csv_rows(result))
        bench.write_csv(out / f"{spec.name}_summary.csv", bench.summary_csv_rows(result))
        bench.write_csv(out / f"{spec.name}_curves.csv",
                        bench.emit_plot_data(result, "per_iteration_curves"))
        finals = ", ".join(f"{sid} {v:.1f} dB" for sid, v in result.final().items())
        print(f"{spec.name}: {finals}")
    cfg["checkpoint"] = sorted(f"{k}={v}" for k, v in checkpoints.items())
    _write_manifest(out, "bench", cfg)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nlreg",
        description="Sparse nonlinear regression: solvers, unrolled training, "
                    "convergence certificates, benchmarks.")
    parser.add_argument("--version", action="version", version=f"nlreg {__version__}")
    sub = parser.add_subparsers(dest="subcommand")

    def common(p):
        p.add_argument("--out", help="output directory (created if absent)")
        p.add_argument("--config", help="JSON config file; flags override it")
        p.add_argument("--seed", type=int)

    p = sub.add_parser("generate", help="synthesize and store problem instances")
    common(p)
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=float, help="nonzero probability")
    p.add_argument("--snr-db", dest="snr_db", type=float)
    p.add_argument("--cond", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--f", choices=function_ids())

    p = sub.add_parser("solve", help="run one classical solver")
    common(p)
    p.add_argument("--solver", choices=tuple(classical.SOLVERS))
    p.add_argument("--f", choices=function_ids())
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--T", type=int)
    p.add_argument("--instances", help="stem of a stored instance container")
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--snr-db", dest="snr_db", type=float)
    p.add_argument("--cond", type=float)
    p.add_argument("--batch", type=int)
    p.add_argument("--timings", action="store_true", default=None,
                   help="record real wall times (makes CSVs nondeterministic)")

    p = sub.add_parser("train", help="progressively train the unrolled network")
    common(p)
    p.add_argument("--f", choices=function_ids())
    p.add_argument("--layers", type=int)
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--snr-db", dest="snr_db", type=float)
    p.add_argument("--cond", type=float)
    p.add_argument("--update-f", dest="update_f", choices=function_ids(),
                   help="nonlinearity inside the update (identity = LISTA variant)")
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--val-size", dest="val_size", type=int)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--lr", type=float, nargs="+")
    p.add_argument("--checkpoint", help="resume from this checkpoint")

    p = sub.add_parser("certify", help="emit a convergence certificate")
    common(p)
    p.add_argument("--m", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--s", type=int, help="exact support size of x*")
    p.add_argument("--f", choices=function_ids())
    p.add_argument("--T", type=int)
    p.add_argument("--snr-db", dest="snr_db", type=float)

    p = sub.add_parser("bench", help="run a canonical or custom experiment spec")
    common(p)
    p.add_argument("--spec", help="fig2a|fig2b|fig2c|table1 or a JSON spec path")
    p.add_argument("--test-size", dest="test_size", type=int)
    p.add_argument("--T", type=int)
    p.add_argument("--solvers", help="comma-separated solver ids")
    p.add_argument("--checkpoint", action="append",
                   help="solver=path mapping for learned solvers (repeatable)")
    return parser


_COMMANDS = {
    "generate": _cmd_generate,
    "solve": _cmd_solve,
    "train": _cmd_train,
    "certify": _cmd_certify,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.subcommand:
        parser.print_usage(sys.stderr)
        return 2
    try:
        return _COMMANDS[args.subcommand](args)
    except UserError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
