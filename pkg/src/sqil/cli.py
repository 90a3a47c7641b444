"""Command-line front end over the full pipeline.

Every subcommand reads an optional JSON config file and applies explicit
flags on top of it; unknown config keys are rejected. Runs that produce
an output artifact write the fully resolved configuration next to it as
<out>.config.json. Errors exit with a one-line category prefix on
stderr: usage (2), numeric (3), io (4).
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .envs import generate_dataset, make_env
from .errors import NumericError, UsageError
from .evaluation import discrepancy_timeline, saliency_divergence, success_rate
from .formats import (
    file_sha256,
    read_checkpoint,
    read_dataset,
    read_sis,
    svg_line_plot,
    write_checkpoint,
    write_dataset,
    write_qmodel,
    write_sis,
    write_timeline_csv,
)
from .qkernels import bench, export_quantized
from .quant import FakeQuantPolicy, QuantSpec
from .saliency import PerturbationSpec, compute_sis_table, threshold
from .training import (
    TrainConfig,
    default_perturbations,
    make_ptq,
    train_bc_fp,
    train_sqil,
)

EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

QUANT_KEYS = ("bits", "granularity", "scheme", "targets")
_QS = QuantSpec()
QUANT_DEFAULTS = {
    "bits": _QS.bits,
    "granularity": _QS.granularity,
    "scheme": _QS.scheme,
    "targets": _QS.targets,
}
_TC = TrainConfig()
TRAIN_DEFAULTS = {
    "data": None,
    "out": None,
    "hidden": "64,64",
    "lr": _TC.lr,
    "epochs": _TC.epochs,
    "batch_size": _TC.batch_size,
    "seed": _TC.seed,
    "beta": _TC.beta,
    "p": _TC.p,
    "k_f": _TC.k_f,
    "discrepancy": _TC.discrepancy,
    "traj_mean_weighting": False,
    "action_sigma": _TC.action_sigma,
    "log": None,
    "checkpoint_every": 0,
    "checkpoint_path": None,
    **QUANT_DEFAULTS,
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse failures become usage errors
        raise UsageError(message)


def _resolve(ns: argparse.Namespace, defaults: dict) -> dict:
    """defaults <- config file <- explicit flags, unknown keys rejected."""
    cfg = dict(defaults)
    path = getattr(ns, "config", None)
    if path:
        try:
            with open(path) as fh:
                loaded = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise UsageError(f"config {path} must hold a JSON object")
        unknown = sorted(set(loaded) - set(defaults))
        if unknown:
            raise UsageError(f"unknown config keys: {', '.join(unknown)}")
        cfg.update(loaded)
    for key in defaults:
        v = getattr(ns, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _write_resolved(cfg: dict, out_path: str) -> None:
    with open(out_path + ".config.json", "w") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _require(cfg: dict, *keys: str) -> None:
    for k in keys:
        if cfg[k] is None:
            raise UsageError(f"missing required option --{k.replace('_', '-')}")


def _hidden_tuple(value) -> tuple[int, ...]:
    if isinstance(value, str):
        parts = [p for p in value.split(",") if p]
    else:
        parts = list(value)
    try:
        return tuple(int(p) for p in parts)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad hidden layer list {value!r}") from exc


def _quant_spec(cfg: dict) -> QuantSpec:
    return QuantSpec(
        bits=int(cfg["bits"]),
        granularity=cfg["granularity"],
        scheme=cfg["scheme"],
        targets=cfg["targets"],
    )


def _train_config(cfg: dict, arm: str) -> TrainConfig:
    return TrainConfig(
        arm=arm,
        hidden=_hidden_tuple(cfg["hidden"]),
        lr=float(cfg["lr"]),
        epochs=int(cfg["epochs"]),
        batch_size=int(cfg["batch_size"]),
        seed=int(cfg["seed"]),
        beta=float(cfg["beta"]),
        p=float(cfg["p"]),
        k_f=int(cfg["k_f"]),
        discrepancy=cfg["discrepancy"],
        quant=_quant_spec(cfg),
        traj_mean_weighting=bool(cfg["traj_mean_weighting"]),
        action_sigma=float(cfg["action_sigma"]),
        log_path=cfg["log"],
        checkpoint_every=int(cfg["checkpoint_every"]),
        checkpoint_path=cfg["checkpoint_path"],
    )


def _load_fp(path: str):
    policy = read_checkpoint(path)
    if isinstance(policy, FakeQuantPolicy):
        raise UsageError(f"{path} holds a quantized policy; a float policy is required")
    return policy


def _add_config_flag(p: _Parser) -> None:
    p.add_argument("--config", help="JSON config file; flags override its values")


def _add_train_flags(p: _Parser, with_quant: bool) -> None:
    _add_config_flag(p)
    p.add_argument("--data", help="dataset file")
    p.add_argument("--out", help="checkpoint to write")
    p.add_argument("--hidden", help="hidden widths, e.g. 64,64")
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--beta", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--k-f", dest="k_f", type=int)
    p.add_argument("--discrepancy", choices=("l2", "kl"))
    p.add_argument(
        "--traj-mean",
        dest="traj_mean_weighting",
        action="store_const",
        const=True,
        help="weight samples by 1/|trajectory|",
    )
    p.add_argument("--action-sigma", dest="action_sigma", type=float)
    p.add_argument("--log", help="per-step loss CSV")
    p.add_argument("--checkpoint-every", dest="checkpoint_every", type=int)
    p.add_argument("--checkpoint-path", dest="checkpoint_path")
    if with_quant:
        p.add_argument("--bits", type=int)
        p.add_argument("--granularity", choices=("per-tensor", "per-channel"))
        p.add_argument("--scheme", choices=("rtn", "lsq"))
        p.add_argument("--targets", choices=("weights", "weights+activations"))


# ------------------------------------------------------------- subcommands


def cmd_gen_data(ns) -> int:
    defaults = {"env": "pickplace", "obs_mode": "vector", "episodes": 80, "seed": 0, "out": None}
    cfg = _resolve(ns, defaults)
    _require(cfg, "out")
    env = make_env(cfg["env"], cfg["obs_mode"])
    ds = generate_dataset(env, int(cfg["episodes"]), int(cfg["seed"]))
    write_dataset(cfg["out"], ds)
    _write_resolved(cfg, cfg["out"])
    print(
        f"dataset={cfg['out']} episodes={len(ds.trajectories)} "
        f"steps={ds.n_steps} sha256={file_sha256(cfg['out'])}"
    )
    return 0


def cmd_train_fp(ns) -> int:
    cfg = _resolve(ns, TRAIN_DEFAULTS)
    _require(cfg, "data", "out")
    ds = read_dataset(cfg["data"])
    policy = train_bc_fp(ds, _train_config(cfg, "fp"))
    write_checkpoint(cfg["out"], policy)
    _write_resolved(cfg, cfg["out"])
    print(f"checkpoint={cfg['out']} arm=fp sha256={file_sha256(cfg['out'])}")
    return 0


def cmd_ptq(ns) -> int:
    defaults = {**TRAIN_DEFAULTS, "policy": None, "qmod": None}
    cfg = _resolve(ns, defaults)
    _require(cfg, "data", "policy", "out")
    ds = read_dataset(cfg["data"])
    fp = _load_fp(cfg["policy"])
    fq = make_ptq(fp, ds, _train_config(cfg, "ptq"))
    write_checkpoint(cfg["out"], fq)
    _write_resolved(cfg, cfg["out"])
    if cfg["qmod"]:
        write_qmodel(cfg["qmod"], export_quantized(fq))
    print(f"checkpoint={cfg['out']} arm=ptq sha256={file_sha256(cfg['out'])}")
    return 0


def cmd_train_q(ns) -> int:
    defaults = {**TRAIN_DEFAULTS, "policy": None, "sis": None, "qmod": None}
    cfg = _resolve(ns, defaults)
    _require(cfg, "data", "policy", "out")
    arm = ns.arm
    ds = read_dataset(cfg["data"])
    fp = _load_fp(cfg["policy"])
    table = None
    if cfg["sis"]:
        table = read_sis(cfg["sis"])
    elif arm in ("qrd", "sqil"):
        print(f"warning: no SIS cache given; computing the table before {arm}", file=sys.stderr)
    fq = train_sqil(fp, ds, _train_config(cfg, arm), sis_table=table)
    write_checkpoint(cfg["out"], fq)
    _write_resolved(cfg, cfg["out"])
    if cfg["qmod"]:
        write_qmodel(cfg["qmod"], export_quantized(fq))
    print(f"checkpoint={cfg['out']} arm={arm} sha256={file_sha256(cfg['out'])}")
    return 0


def cmd_sis(ns) -> int:
    defaults = {
        "data": None,
        "policy": None,
        "out": None,
        "k_f": 4,
        "p": 0.2,
        "beta": 2.0,
        "noise_sigma": 0.1,
        "grid": 8,
        "blur_radius": 3.0,
        "pert_seed": 0,
    }
    cfg = _resolve(ns, defaults)
    _require(cfg, "data", "policy", "out")
    ds = read_dataset(cfg["data"])
    policy = read_checkpoint(cfg["policy"])
    mode = "image32" if ds.obs_mode == "image32" else "vector"
    spec = PerturbationSpec(
        mode=mode,
        noise_sigma=float(cfg["noise_sigma"]),
        grid=int(cfg["grid"]),
        blur_radius=float(cfg["blur_radius"]),
        seed=int(cfg["pert_seed"]),
    )
    table = compute_sis_table(policy, ds, spec, int(cfg["k_f"]))
    table.beta = float(cfg["beta"])
    T = threshold(table, float(cfg["p"]))
    write_sis(cfg["out"], table)
    _write_resolved(cfg, cfg["out"])
    print(
        f"sis={cfg['out']} steps={table.n_steps} threshold={T!r} "
        f"flagged_fraction={table.flagged_fraction!r} sha256={file_sha256(cfg['out'])}"
    )
    return 0


def cmd_eval(ns) -> int:
    defaults = {
        "env": "pickplace",
        "obs_mode": "vector",
        "policy": None,
        "arm": "policy",
        "episodes": 500,
        "rounds": 3,
        "seed": 0,
        "out": None,
    }
    cfg = _resolve(ns, defaults)
    _require(cfg, "policy")
    env = make_env(cfg["env"], cfg["obs_mode"])
    policy = read_checkpoint(cfg["policy"])
    rep = success_rate(
        policy,
        env,
        episodes=int(cfg["episodes"]),
        rounds=int(cfg["rounds"]),
        seed=int(cfg["seed"]),
        arm=cfg["arm"],
    )
    text = json.dumps(
        {
            "arm": rep.arm,
            "episodes": rep.episodes,
            "rounds": rep.rounds,
            "success_rate": rep.success_rate,
            "success_std": rep.success_std,
            "mean_length": rep.mean_length,
            "mean_return": rep.mean_return,
        },
        sort_keys=True,
    )
    print(text)
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            fh.write(text + "\n")
        _write_resolved(cfg, cfg["out"])
    return 0


def cmd_discrepancy(ns) -> int:
    defaults = {
        "env": "pickplace",
        "obs_mode": "vector",
        "policy": None,
        "fp": None,
        "seed": 0,
        "out": None,
        "plots": False,
    }
    cfg = _resolve(ns, defaults)
    _require(cfg, "policy", "fp", "out")
    env = make_env(cfg["env"], cfg["obs_mode"])
    policy_q = read_checkpoint(cfg["policy"])
    policy_fp = _load_fp(cfg["fp"])
    tl = discrepancy_timeline(policy_q, policy_fp, env, int(cfg["seed"]))
    write_timeline_csv(cfg["out"], tl)
    _write_resolved(cfg, cfg["out"])
    if cfg["plots"]:
        svg_line_plot(
            cfg["out"] + ".svg",
            {"L2": tl.values},
            title="action discrepancy",
            x_label="t",
            y_label="L2",
        )
    mx = float(tl.values.max()) if tl.values.size else 0.0
    md = float(np.median(tl.values)) if tl.values.size else 0.0
    print(f"timeline={cfg['out']} steps={tl.values.size} success={tl.success} "
          f"max={mx!r} median={md!r}")
    return 0


def cmd_saliency_div(ns) -> int:
    defaults = {
        "data": None,
        "policy": None,
        "fp": None,
        "states": 256,
        "noise_sigma": 0.1,
        "grid": 8,
        "blur_radius": 3.0,
        "pert_seed": 0,
    }
    cfg = _resolve(ns, defaults)
    _require(cfg, "data", "policy", "fp")
    ds = read_dataset(cfg["data"])
    policy_q = read_checkpoint(cfg["policy"])
    policy_fp = _load_fp(cfg["fp"])
    mode = "image32" if ds.obs_mode == "image32" else "vector"
    spec = PerturbationSpec(
        mode=mode,
        noise_sigma=float(cfg["noise_sigma"]),
        grid=int(cfg["grid"]),
        blur_radius=float(cfg["blur_radius"]),
        seed=int(cfg["pert_seed"]),
    )
    div = saliency_divergence(policy_q, policy_fp, ds, spec, n_states=int(cfg["states"]))
    print(f"saliency_divergence={div!r} states={min(int(cfg['states']), ds.n_steps)}")
    return 0


def cmd_bench_kernels(ns) -> int:
    defaults = {"sizes": "64,128,256", "repeats": 25, "parallel": False, "seed": 0}
    cfg = _resolve(ns, defaults)
    sizes = _hidden_tuple(cfg["sizes"])
    rep = bench(sizes, int(cfg["repeats"]), parallel=bool(cfg["parallel"]), seed=int(cfg["seed"]))
    print(f"{'size':>6} {'repeats':>8} {'i8_ns':>12} {'f32_ns':>12} {'speedup':>8} {'GB/s':>8}")
    for size, i8_ns, f32_ns, speedup, gbps in rep.rows():
        print(f"{size:>6} {rep.repeats:>8} {i8_ns:>12.0f} {f32_ns:>12.0f} "
              f"{speedup:>8.2f} {gbps:>8.2f}")
    return 0


def cmd_report(ns) -> int:
    defaults = {
        "run_dir": ".",
        "arms": "fp,ptq,qat,sqil",
        "data": None,
        "env": "pickplace",
        "obs_mode": "vector",
        "episodes": 100,
        "rounds": 1,
        "seed": 0,
        "disc_seeds": 10,
        "states": 64,
        "pert_seed": 0,
        "out": None,
    }
    cfg = _resolve(ns, defaults)
    run_dir = cfg["run_dir"].rstrip("/")
    data_path = cfg["data"] or f"{run_dir}/data.bin"
    ds = read_dataset(data_path)
    env = make_env(cfg["env"], cfg["obs_mode"])
    fp = _load_fp(f"{run_dir}/fp.ckpt")
    spec = default_perturbations(ds, seed=int(cfg["pert_seed"]))
    arms = [a for a in cfg["arms"].split(",") if a]
    lines = [
        f"{'arm':<6} {'success%':>9} {'std':>6} {'len':>6} "
        f"{'disc_max':>9} {'disc_med':>9} {'sal_div':>9}"
    ]
    for arm in arms:
        policy = fp if arm == "fp" else read_checkpoint(f"{run_dir}/{arm}.ckpt")
        rep = success_rate(
            policy,
            env,
            episodes=int(cfg["episodes"]),
            rounds=int(cfg["rounds"]),
            seed=int(cfg["seed"]),
            arm=arm,
        )
        if arm == "fp":
            mx = md = div = 0.0
        else:
            gaps = np.concatenate(
                [
                    discrepancy_timeline(policy, fp, env, int(cfg["seed"]) + s).values
                    for s in range(int(cfg["disc_seeds"]))
                ]
            )
            mx = float(gaps.max())
            md = float(np.median(gaps))
            div = saliency_divergence(policy, fp, ds, spec, n_states=int(cfg["states"]))
        lines.append(
            f"{arm:<6} {rep.success_rate:>9.2f} {rep.success_std:>6.2f} "
            f"{rep.mean_length:>6.1f} {mx:>9.4f} {md:>9.4f} {div:>9.4f}"
        )
    text = "\n".join(lines)
    print(text)
    if cfg["out"]:
        with open(cfg["out"], "w") as fh:
            fh.write(text + "\n")
        _write_resolved(cfg, cfg["out"])
    return 0


# ------------------------------------------------------------------ driver


def build_parser() -> _Parser:
    root = _Parser(prog="sqil", description=__doc__)
    sub = root.add_subparsers(dest="command", metavar="command")

    p = sub.add_parser("gen-data", help="generate an expert dataset file")
    _add_config_flag(p)
    p.add_argument("--env", choices=("pickplace", "lane"))
    p.add_argument("--obs-mode", dest="obs_mode", choices=("vector", "image32"))
    p.add_argument("--episodes", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-fp", help="behavior-clone the float policy")
    _add_train_flags(p, with_quant=False)
    p.set_defaults(func=cmd_train_fp)

    p = sub.add_parser("ptq", help="post-training quantization of a float policy")
    _add_train_flags(p, with_quant=True)
    p.add_argument("--policy", help="float checkpoint to quantize")
    p.add_argument("--qmod", help="also export the packed integer model here")
    p.set_defaults(func=cmd_ptq)

    p = sub.add_parser("train", help="train a quantized arm")
    p.add_argument("arm", choices=("qat", "qrd", "sqil"))
    _add_train_flags(p, with_quant=True)
    p.add_argument("--policy", help="float teacher checkpoint")
    p.add_argument("--sis", help="SIS cache file (computed on the fly if absent)")
    p.add_argument("--qmod", help="also export the packed integer model here")
    p.set_defaults(func=cmd_train_q)

    p = sub.add_parser("sis", help="compute and threshold a SIS table")
    _add_config_flag(p)
    p.add_argument("--data")
    p.add_argument("--policy")
    p.add_argument("--out")
    p.add_argument("--k-f", dest="k_f", type=int)
    p.add_argument("--p", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--grid", type=int)
    p.add_argument("--blur-radius", dest="blur_radius", type=float)
    p.add_argument("--pert-seed", dest="pert_seed", type=int)
    p.set_defaults(func=cmd_sis)

    p = sub.add_parser("eval", help="success rate of one checkpoint")
    _add_config_flag(p)
    p.add_argument("--env", choices=("pickplace", "lane"))
    p.add_argument("--obs-mode", dest="obs_mode", choices=("vector", "image32"))
    p.add_argument("--policy")
    p.add_argument("--arm")
    p.add_argument("--episodes", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("discrepancy", help="per-timestep action gap CSV")
    _add_config_flag(p)
    p.add_argument("--env", choices=("pickplace", "lane"))
    p.add_argument("--obs-mode", dest="obs_mode", choices=("vector", "image32"))
    p.add_argument("--policy", help="quantized checkpoint")
    p.add_argument("--fp", help="float teacher checkpoint")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--plots", action="store_const", const=True)
    p.set_defaults(func=cmd_discrepancy)

    p = sub.add_parser("saliency-div", help="mean saliency divergence vs the teacher")
    _add_config_flag(p)
    p.add_argument("--data")
    p.add_argument("--policy")
    p.add_argument("--fp")
    p.add_argument("--states", type=int)
    p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
    p.add_argument("--grid", type=int)
    p.add_argument("--blur-radius", dest="blur_radius", type=float)
    p.add_argument("--pert-seed", dest="pert_seed", type=int)
    p.set_defaults(func=cmd_saliency_div)

    p = sub.add_parser("bench-kernels", help="integer GEMM latency table")
    _add_config_flag(p)
    p.add_argument("--sizes", help="square sizes, e.g. 64,128,256")
    p.add_argument("--repeats", type=int)
    p.add_argument("--parallel", action="store_const", const=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_bench_kernels)

    p = sub.add_parser("report", help="arm-by-metric summary table")
    _add_config_flag(p)
    p.add_argument("--run-dir", dest="run_dir")
    p.add_argument("--arms", help="comma-separated arm list, e.g. fp,ptq,qat,sqil")
    p.add_argument("--data")
    p.add_argument("--env", choices=("pickplace", "lane"))
    p.add_argument("--obs-mode", dest="obs_mode", choices=("vector", "image32"))
    p.add_argument("--episodes", type=int)
    p.add_argument("--rounds", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--disc-seeds", dest="disc_seeds", type=int)
    p.add_argument("--states", type=int)
    p.add_argument("--pert-seed", dest="pert_seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    return root


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
        if not getattr(ns, "func", None):
            raise UsageError("no subcommand given (see sqil --help)")
        return ns.func(ns)
    except UsageError as exc:
        print(f"usage: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"io: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
