"""File formats: datasets, checkpoints, loss curves, gains and manifests."""

from __future__ import annotations

import csv
import hashlib
import json
import platform
import sys
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .dynamics import NQ, build_model, matrix_from_q, q_from_matrix
from .liegroup import MATRIX_SIZE
from .training import TrajectoryDataset

CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    """Malformed input file."""


# ------------------------------------------------------------ datasets

def write_jsonl(data: TrajectoryDataset, path) -> None:
    """One JSON object per segment. ``q`` rows are group matrices flattened
    row-major (16 floats for SE3, 9 for SE2 and SO3)."""
    with open(path, "w") as fh:
        for i in range(data.n_segments):
            rec = {
                "group": data.group,
                "t": data.t[i].tolist(),
                "q": [matrix_from_q(q, data.group).reshape(-1).tolist() for q in data.q[i]],
                "zeta": data.zeta[i].tolist(),
                "u": data.u[i].tolist(),
            }
            fh.write(json.dumps(rec) + "\n")


def _parse_q(row, group: str) -> np.ndarray:
    row = np.asarray(row, dtype=float)
    n = MATRIX_SIZE[group]
    if row.size == n * n:
        return q_from_matrix(row.reshape(n, n), group)
    if row.size == NQ[group]:
        return row
    raise FormatError(f"q row with {row.size} entries does not fit group {group}")


def read_jsonl(path, group: str | None = None) -> TrajectoryDataset:
    """Read a dataset written by :func:`write_jsonl`.

    Rows of ``q`` may be full group matrices or flat ``[p, r1, r2, r3]``
    vectors; the group comes from the records or the ``group`` argument.
    """
    ts, qs, zs, us = [], [], [], []
    with open(path) as fh:
        for ln, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                g = rec.get("group", group)
                if g is None:
                    raise FormatError("group is not recorded; pass it explicitly")
                if group is None:
                    group = g
                elif g != group:
                    raise FormatError("mixed groups in one dataset")
                ts.append(rec["t"])
                qs.append([_parse_q(r, group) for r in rec["q"]])
                zs.append(rec["zeta"])
                us.append(rec["u"])
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise FormatError(f"{path}:{ln}: {exc}") from exc
    if not ts:
        raise FormatError(f"{path}: no segments")
    try:
        return TrajectoryDataset(group, np.array(ts, dtype=float), np.array(qs, dtype=float),
                                 np.array(zs, dtype=float), np.array(us, dtype=float))
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ------------------------------------------------------------ checkpoints

def save_checkpoint(model, path) -> None:
    """Spec plus every parameter and buffer as float64 arrays (exact round trip)."""
    if getattr(model, "spec", None) is None:
        raise ValueError("only models created by build_model can be checkpointed")
    arrays = {f"t:{k}": v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    meta = json.dumps({"version": CHECKPOINT_VERSION, "spec": model.spec})
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, __meta__=np.array(meta), **arrays)


def load_checkpoint(path):
    try:
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            state = {k[2:]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith("t:")}
    except (OSError, ValueError, KeyError) as exc:
        raise FormatError(f"cannot read checkpoint {path}: {exc}") from exc
    if meta.get("version") != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {meta.get('version')}")
    model = build_model(meta["spec"])
    model.load_state_dict(state)
    return model


# ------------------------------------------------------------ tables

LOSS_HEADER = ["iter", "loss", "loss_R", "loss_p", "loss_zeta"]


def write_loss_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOSS_HEADER)
        for h in history:
            w.writerow([h["iter"]] + [repr(float(h[k])) for k in LOSS_HEADER[1:]])


def read_loss_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (int(v) if k == "iter" else float(v)) for k, v in row.items()} for row in csv.DictReader(fh)]


def write_json(obj, path) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
        fh.write("\n")


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


# ------------------------------------------------------------ config / gains

def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except OSError:
        raise
    except yaml.YAMLError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise FormatError(f"{path}: top level must be a mapping")
    return cfg


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()


def manifest(cfg: dict, seed: int, extra: dict | None = None) -> dict:
    import scipy

    out = {"config_hash": config_hash(cfg), "seed": int(seed), "config": cfg,
           "versions": {"lieham": __version__, "python": sys.version.split()[0],
                        "numpy": np.__version__, "scipy": scipy.__version__, "torch": torch.__version__,
                        "platform": platform.platform()}}
    out.update(extra or {})
    return out


GAIN_KEYS = ("Kp", "Kv", "KR", "Kw")


def parse_gains(raw: dict):
    from .control import Gains

    unknown = set(raw) - set(GAIN_KEYS) - {"gauge"}
    if unknown:
        raise FormatError(f"unknown gain keys {sorted(unknown)}")
    vals = {}
    for k in GAIN_KEYS:
        if k not in raw:
            raise FormatError(f"gains file lacks {k}")
        a = np.asarray(raw[k], dtype=float)
        if a.ndim == 0:
            a = a * np.ones(3)
        if a.ndim == 1:
            if a.shape != (3,):
                raise FormatError(f"{k} must have 3 diagonal entries")
            a = np.diag(a)
        if a.shape != (3, 3) or not np.all(np.isfinite(a)):
            raise FormatError(f"{k} must be a scalar, a 3-vector or a 3x3 matrix")
        vals[k] = a
    gauge = raw.get("gauge")
    if gauge is not None:
        gauge = np.asarray(gauge, dtype=float)
        if gauge.shape != (2,) or not np.all(gauge > 0):
            raise FormatError("gauge must be two positive numbers (translational, rotational)")
        gauge = (float(gauge[0]), float(gauge[1]))
    return Gains(vals["Kp"], vals["Kv"], vals["KR"], vals["Kw"], gauge)


def load_gains(path):
    return parse_gains(load_config(path))


def write_gains(gains, path) -> None:
    with open(path, "w") as fh:
        out = {k: np.asarray(getattr(gains, k)).tolist() for k in GAIN_KEYS}
        if gains.gauge is not None:
            out["gauge"] = list(gains.gauge)
        yaml.safe_dump(out, fh)


__all__ = ["write_jsonl", "read_jsonl", "save_checkpoint", "load_checkpoint", "write_loss_csv",
           "read_loss_csv", "load_config", "manifest", "load_gains", "write_gains", "FormatError"]
