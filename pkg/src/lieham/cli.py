"""``lieham`` command line: generate, train, eval and track.

Every command writes its outputs and a ``manifest.json`` under ``--out``.
Options may also come from a YAML file given with ``--config``; flags on the
command line win. Exit codes: 0 success, 2 configuration error, 3 numerical
divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import io
from .control import (DEFAULT_GAINS, ControlError, Gains, TrackingController, pendulum_stabilize,
                      simulate_closed_loop, to_gauge, tracking_errors)
from .dynamics import build_model, model_spec
from .envs import CollectionPlan, Reference, default_plan, make_env, reference_duration, rot_z
from .evaluation import architecture_metrics
from .odeint import IntegrationError, embed_se3, write_rollout_csv
from .training import TrainConfig, TrainingDiverged, train

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_IO = 0, 2, 3, 4

DATASET, LOSS, METRICS, TRACKING, MANIFEST = ("dataset.jsonl", "loss.csv", "metrics.json",
                                              "tracking.csv", "manifest.json")
CHECKPOINT, ROLLOUT = "checkpoint.npz", "rollout.csv"


class ConfigError(ValueError):
    pass


# ------------------------------------------------------------ parser

def _parser() -> tuple[argparse.ArgumentParser, dict]:
    ap = argparse.ArgumentParser(prog="lieham", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    subs = {}

    def add(name, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML file with option values")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        subs[name] = p
        return p

    g = add("generate", "collect a trajectory dataset from a simulated env")
    g.add_argument("--env", choices=["pendulum", "se2", "quadrotor"])
    g.add_argument("--plan", choices=["random", "waypoint"], help="excitation (default per env)")
    g.add_argument("--segments", type=int)
    g.add_argument("--steps", type=int, help="samples per segment after the first")
    g.add_argument("--dt", type=float)
    g.add_argument("--runs", type=int, help="closed-loop episodes for the waypoint plan")
    g.add_argument("--noise", type=float)
    g.add_argument("--no-dissipation", action="store_true", help="drop friction/drag from the env")
    g.add_argument("--env-params", type=json.loads, default={}, help="JSON object of env constructor args")

    t = add("train", "fit a model to a dataset")
    t.add_argument("--dataset")
    t.add_argument("--preset", help="layer preset, e.g. pendulum_desk")
    t.add_argument("--arch", choices=["structured", "unstructured", "blackbox"], default="structured")
    t.add_argument("--iters", type=int, default=2000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--lr-decay", type=float, default=1.0, help="total decay factor over the run")
    t.add_argument("--substeps", type=int, default=1)
    t.add_argument("--grad-mode", choices=["backprop", "adjoint"], default="backprop")
    t.add_argument("--batch-size", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--dissipation", action="store_true", help="learn a dissipation matrix")
    t.add_argument("--init-checkpoint", help="start from a saved model")
    t.add_argument("--checkpoint-every", type=int, default=0)
    t.add_argument("--log-every", type=int, default=0)

    e = add("eval", "comparison metrics and a free rollout for a checkpoint")
    e.add_argument("--checkpoint")
    e.add_argument("--env", choices=["pendulum", "se2", "quadrotor"])
    e.add_argument("--arch", choices=["structured", "unstructured", "blackbox"])
    e.add_argument("--dataset", help="dataset for the training-loss metric")
    e.add_argument("--duration", type=float, default=50.0)
    e.add_argument("--dt", type=float, default=0.05)
    e.add_argument("--horizon", type=float, default=2.0)
    e.add_argument("--substeps", type=int, default=1)
    e.add_argument("--tests", type=int, default=32, help="initial states for the prediction error")
    e.add_argument("--env-params", type=json.loads, default={})

    k = add("track", "closed-loop tracking with the learned and the nominal model")
    k.add_argument("--checkpoint")
    k.add_argument("--env", choices=["pendulum", "se2", "quadrotor"])
    k.add_argument("--reference", default=None, help="reference kind (default per env)")
    k.add_argument("--ref-params", type=json.loads, default={})
    k.add_argument("--gains", default="default", help="'default' (built-in per-env gains) or a YAML gains file")
    k.add_argument("--duration", type=float)
    k.add_argument("--dt", type=float, default=1 / 240, help="control period")
    k.add_argument("--substeps", type=int, default=4)
    k.add_argument("--no-baseline", action="store_true")
    k.add_argument("--force-rate", choices=["reference", "model"], default="reference")
    k.add_argument("--dataset", help="training data; its states fix the learned model's scale")
    k.add_argument("--env-params", type=json.loads, default={})
    return ap, subs


def parse_args(argv) -> argparse.Namespace:
    ap, subs = _parser()
    args = ap.parse_args(argv)
    if args.config:
        cfg = io.load_config(args.config)
        p = subs[args.command]
        known = {a.dest for a in p._actions}
        bad = sorted(set(k.replace("-", "_") for k in cfg) - known)
        if bad:
            raise ConfigError(f"unknown keys in {args.config}: {bad}")
        p.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
        args = ap.parse_args(argv)
    if not args.out:
        raise ConfigError("--out is required")
    return args


def _settings(args) -> dict:
    return {k: v for k, v in vars(args).items() if k != "func"}


def _require(args, *names):
    missing = [n for n in names if getattr(args, n) in (None, "")]
    if missing:
        raise ConfigError("missing required option(s): " + ", ".join("--" + m.replace("_", "-") for m in missing))


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"{what} not found: {path}")
    return p


# ------------------------------------------------------------ commands

def cmd_generate(args, out: Path) -> dict:
    _require(args, "env")
    env = make_env(args.env, **args.env_params)
    base = default_plan(args.env, args.seed)
    excitation = {"random": "random_constant", "waypoint": "waypoint_pd", None: base.excitation}[args.plan]
    plan = CollectionPlan(
        n_segments=args.segments or base.n_segments, horizon=args.steps or base.horizon,
        dt=args.dt or base.dt, excitation=excitation, seed=args.seed,
        n_runs=args.runs or base.n_runs, run_duration=base.run_duration,
        noise=base.noise if args.noise is None else args.noise)
    data = _dataset_for(args.env, env, plan, not args.no_dissipation)
    io.write_jsonl(data, out / DATASET)
    return {"env": args.env, "plan": vars(plan), "segments": data.n_segments, "outputs": [DATASET]}


def cmd_train(args, out: Path) -> dict:
    _require(args, "dataset")
    data = io.read_jsonl(_existing(args.dataset, "dataset"))
    if args.init_checkpoint:
        model = io.load_checkpoint(_existing(args.init_checkpoint, "checkpoint"))
    else:
        _require(args, "preset")
        try:
            spec = model_spec(args.preset, args.arch, args.seed, args.width, args.dissipation)
        except KeyError:
            raise ConfigError(f"unknown preset {args.preset!r}") from None
        model = build_model(spec)
    if model.group != data.group or model.m != data.m:
        raise ConfigError(f"model ({model.group}, m={model.m}) does not fit the dataset "
                          f"({data.group}, m={data.m})")
    cfg = TrainConfig(iterations=args.iters, lr=args.lr, batch_size=args.batch_size, seed=args.seed,
                      grad_mode=args.grad_mode, substeps=args.substeps,
                      checkpoint_every=args.checkpoint_every, lr_decay=args.lr_decay, log_every=args.log_every)
    try:
        res = train(model, data, cfg, out)
    finally:
        # the history is useful even after a divergence
        if "res" in locals():
            io.write_loss_csv(res.history, out / LOSS)
    io.save_checkpoint(model, out / CHECKPOINT)
    io.write_json({"final": res.final, "seconds": res.seconds, "iterations": args.iters,
                   "arch": model.arch, "group": model.group}, out / METRICS)
    return {"spec": model.spec, "outputs": [CHECKPOINT, LOSS, METRICS]}


def _eval_states(env_name, env, n, seed):
    if env_name == "pendulum":
        q0, z0 = env.to_state(np.pi / 2, 0.0)
        tq, tz = env.sample_states(n, seed=seed + 1)
        return q0[0], z0[0], tq, tz
    q, z = env.sample_states(n + 1, seed=seed + 1)
    return q[0], z[0], q[1:], z[1:]


def _conservative_truth(name, env):
    if name == "se2":
        return dataclasses.replace(env, drag=0.0).truth_model()
    return env.truth_model(dissipation=False)


def _dataset_for(name, env, plan, dissipation=True):
    if name == "pendulum":
        return env.collect(plan, dissipation=dissipation)
    if not dissipation:
        env.drag = None if name == "quadrotor" else 0.0
    return env.collect(plan)


def cmd_eval(args, out: Path) -> dict:
    _require(args, "checkpoint", "env")
    model = io.load_checkpoint(_existing(args.checkpoint, "checkpoint"))
    if args.arch and model.arch != args.arch:
        raise ConfigError(f"checkpoint holds a {model.arch} model, not {args.arch}")
    env = make_env(args.env, **args.env_params)
    truth = _conservative_truth(args.env, env)
    if model.group != truth.group:
        raise ConfigError(f"checkpoint is on {model.group}, env {args.env} on {truth.group}")
    if args.dataset:
        data = io.read_jsonl(_existing(args.dataset, "dataset"))
    else:
        plan = default_plan(args.env, args.seed)
        if args.env == "pendulum":
            plan.n_segments = 256
        data = _dataset_for(args.env, env, plan, dissipation=False)
    q0, z0, tq, tz = _eval_states(args.env, env, args.tests, args.seed)
    metrics = architecture_metrics(model, truth, data, q0, z0, tq, tz, duration=args.duration, dt=args.dt,
                                   horizon=args.horizon, substeps=args.substeps)
    trace = metrics.pop("_trace")
    write_rollout_csv(out / ROLLOUT, trace["t"], trace["q"], trace["zeta"], trace["H"], model.group)
    io.write_json(metrics, out / METRICS)
    return {"outputs": [METRICS, ROLLOUT]}


DEFAULT_REFERENCE = {"se2": ("horizontal_lemniscate", {"center": [0.0, 0.0, 0.0], "size": 1.0, "rate": 0.5}),
                     "quadrotor": ("diamond", {"center": [0.0, 0.0, 1.0], "size": 0.5}),
                     "pendulum": ("upright", {})}

TRACK_HEADER = ["controller", "t", "px", "py", "pz", "px_ref", "py_ref", "pz_ref", "pos_err",
                "yaw", "yaw_ref", "yaw_err", "vx", "vy", "vz", "wx", "wy", "wz", "Hd"]


def _gains(spec: str, env_name: str) -> Gains:
    if spec == "default":
        return DEFAULT_GAINS[env_name]
    try:
        return io.load_gains(_existing(spec, "gains file"))
    except io.FormatError as exc:
        raise ConfigError(str(exc)) from exc


def _start_state(env_name, env, ref):
    if env_name == "pendulum":
        q, z = env.to_state(0.1, 0.0)
        return q[0], z[0]
    r = ref(0.0)
    if env_name == "se2":
        c, s = np.cos(r["psi"]), np.sin(r["psi"])
        v = np.array([[c, s], [-s, c]]) @ r["dp"][:2]
        q, z = env.to_state(r["p"][0], r["p"][1], r["psi"], v[0], v[1], r["dpsi"])
        return q, z
    R = rot_z(r["psi"])
    return env.to_state(r["p"], R, R.T @ r["dp"], np.array([0.0, 0.0, r["dpsi"]]))


def _controller(model, gains, env_name, ref, gauge_q=None, force_rate="reference"):
    model = to_gauge(model, gains.gauge, gauge_q)
    if env_name == "pendulum":
        return pendulum_stabilize(model, gains)
    return TrackingController(model, gains, ref, force_rate=force_rate)


def _yaw(R):
    return np.arctan2(R[..., 1, 0], R[..., 0, 0])


def _track_rows(name, res, group):
    pos, R, v, w = embed_se3(res.q, res.zeta, group)
    ep = np.linalg.norm(pos - res.ref_pos, axis=1)
    yaw, yaw_ref = _yaw(R), _yaw(res.ref_R)
    yerr = np.abs(np.angle(np.exp(1j * (yaw - yaw_ref))))
    for k in range(len(res.t)):
        yield [name, res.t[k], *pos[k], *res.ref_pos[k], ep[k], yaw[k], yaw_ref[k], yerr[k], *v[k], *w[k], res.Hd[k]]


def cmd_track(args, out: Path) -> dict:
    _require(args, "env")
    env = make_env(args.env, **args.env_params)
    gains = _gains(args.gains, args.env)
    kind, params = DEFAULT_REFERENCE[args.env]
    if args.reference:
        kind = args.reference
    params = {**params, **args.ref_params} if kind == DEFAULT_REFERENCE[args.env][0] else dict(args.ref_params)
    ref = Reference(kind, params) if args.env != "pendulum" else None
    if ref is not None:
        ref(0.0)  # unknown kinds fail here, before any simulation
    duration = args.duration or (reference_duration(kind, params) if ref is not None else 5.0)
    plant = env.truth_model()
    controllers = {}
    if args.checkpoint:
        learned = io.load_checkpoint(_existing(args.checkpoint, "checkpoint"))
        if getattr(learned, "arch", None) != "structured":
            raise ConfigError("tracking needs a structured (port-Hamiltonian) model")
        if learned.group != plant.group:
            raise ConfigError(f"checkpoint is on {learned.group}, env {args.env} on {plant.group}")
        controllers["learned"] = learned
    if not args.no_baseline or not controllers:
        controllers["nominal"] = env.truth_model()
    gauge_q = io.read_jsonl(_existing(args.dataset, "dataset")).q[:, 0] if args.dataset else None
    q0, z0 = _start_state(args.env, env, ref)
    summary, rows = {}, []
    for name, model in controllers.items():
        ctrl = _controller(model, gains, args.env, ref, gauge_q if name == "learned" else None,
                           args.force_rate)
        try:
            res = simulate_closed_loop(plant, ctrl, q0, z0, duration, args.dt, args.substeps)
        except ControlError as exc:
            io.write_json({"controller": name, "error": str(exc),
                           "last_reference": getattr(ctrl, "last_ref", None).__dict__
                           if getattr(ctrl, "last_ref", None) is not None else None},
                          out / "state_dump.json")
            raise
        summary[name] = tracking_errors(res, plant.group)
        rows.extend(_track_rows(name, res, plant.group))
    with open(out / TRACKING, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRACK_HEADER)
        for r in rows:
            w.writerow([r[0]] + [repr(float(x)) for x in r[1:]])
    summary["reference"] = {"kind": kind, "params": params, "duration": duration}
    io.write_json(summary, out / METRICS)
    return {"outputs": [TRACKING, METRICS]}


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "track": cmd_track}


# ------------------------------------------------------------ entry point

def main(argv=None) -> int:
    try:
        args = parse_args(sys.argv[1:] if argv is None else argv)
    except SystemExit as exc:  # argparse usage errors
        return EXIT_CONFIG if exc.code else EXIT_OK
    except (ConfigError, io.FormatError) as exc:
        print(f"lieham: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"lieham: cannot read config: {exc}", file=sys.stderr)
        return EXIT_IO
    torch.set_num_threads(1)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        extra = COMMANDS[args.command](args, out)
        io.write_json(io.manifest(_settings(args), args.seed, {"command": args.command, **extra}), out / MANIFEST)
    except (ConfigError, ValueError) as exc:
        if isinstance(exc, io.FormatError):
            print(f"lieham: malformed input: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"lieham: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrainingDiverged, ControlError, IntegrationError) as exc:
        print(f"lieham: numerical divergence: {exc}", file=sys.stderr)
        if isinstance(exc, TrainingDiverged):
            print(f"lieham: last finite parameters saved to {out / 'checkpoint_last_good.npz'}", file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as exc:
        print(f"lieham: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
