"""File formats: CSV datasets, JSON-lines traces, key=value configs and run manifests.

Traces store allocations and labels 1-based; in memory they are 0-based.
"""

import csv
import dataclasses
import hashlib
import json
import os
import tempfile

import numpy as np

from .exceptions import ConfigError, DataError
from .model import Dataset, DrawRecord, Hyperparams
from .stats import BnbParams

LABEL_COLUMN = "label"


# ---------------------------------------------------------------------------
# Atomic writes
# ---------------------------------------------------------------------------

def atomic_write_text(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def file_digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return "sha256:" + h.hexdigest()


# ---------------------------------------------------------------------------
# CSV datasets
# ---------------------------------------------------------------------------

def fmt_float(x):
    return format(float(x), ".17g")


def read_dataset(path):
    """Read a header-first UTF-8 CSV; an optional ``label`` column becomes truth labels."""
    if not os.path.exists(path):
        raise DataError(f"data file not found: {path}")
    with open(path, encoding="utf-8", newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise DataError(f"{path}: need a header and at least one row")
    header = [h.strip() for h in rows[0]]
    body = [r for r in rows[1:] if r]
    if any(len(r) != len(header) for r in body):
        raise DataError(f"{path}: ragged rows")
    label_idx = header.index(LABEL_COLUMN) if LABEL_COLUMN in header else None
    cols = [i for i in range(len(header)) if i != label_idx]
    try:
        values = np.array([[float(r[i]) for i in cols] for r in body])
        labels = None if label_idx is None else np.array([int(r[label_idx]) for r in body])
    except ValueError as err:
        raise DataError(f"{path}: non-numeric entry ({err})") from None
    return Dataset(values, truth_labels=labels, columns=[header[i] for i in cols])


def dataset_to_csv(data, labels=None):
    p = data.p
    names = data.columns or [f"y{i + 1}" for i in range(p)]
    lines = [",".join(names + ([LABEL_COLUMN] if labels is not None else []))]
    for t in range(data.T):
        row = [fmt_float(v) for v in data.values[t]]
        if labels is not None:
            row.append(str(int(labels[t])))
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def write_csv(path, header, rows):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(fmt_float(v) if isinstance(v, (float, np.floating)) else str(v)
                              for v in row))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# JSON with fixed float formatting
# ---------------------------------------------------------------------------

def dumps(obj):
    """Compact JSON where every float carries 17 significant digits."""
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if not np.isfinite(x):
            raise ValueError("non-finite float in trace")
        return fmt_float(x)
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, np.ndarray):
        return dumps(obj.tolist())
    if isinstance(obj, dict):
        return "{" + ",".join(f"{json.dumps(str(k))}:{dumps(v)}" for k, v in obj.items()) + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(dumps(v) for v in obj) + "]"
    raise TypeError(f"cannot serialise {type(obj)}")


# ---------------------------------------------------------------------------
# Traces
# ---------------------------------------------------------------------------

def record_to_dict(rec):
    clusters = [
        {
            "mu": rec.mu[k].tolist(),
            "lambda_rowmajor": rec.lam[k].ravel().tolist(),
            "xi2": rec.xi2[k].tolist(),
            "theta": rec.theta[k].tolist(),
            "tau": rec.tau[k].tolist(),
            "indicator": [int(v) for v in rec.indicator[k]],
        }
        for k in range(rec.K_plus)
    ]
    out = {
        "iter": rec.iter,
        "K": rec.K,
        "K_plus": rec.K_plus,
        "counts": [int(c) for c in rec.counts],
        "alpha_M": rec.alpha_M,
        "alpha_B": rec.alpha_B,
        "b_theta": rec.b_theta,
        "b_0": rec.b_0,
        "clusters": clusters,
    }
    if rec.alloc is not None:
        out["alloc"] = [int(a) + 1 for a in rec.alloc]
    return out


def record_to_line(rec):
    return dumps(record_to_dict(rec))


def record_from_line(line):
    d = json.loads(line)
    cl = d["clusters"]
    p = len(cl[0]["mu"])
    H = len(cl[0]["theta"])
    alloc = d.get("alloc")
    return DrawRecord(
        iter=int(d["iter"]),
        K=int(d["K"]),
        K_plus=int(d["K_plus"]),
        counts=np.asarray(d["counts"], dtype=int),
        alpha_M=float(d["alpha_M"]),
        alpha_B=float(d["alpha_B"]),
        b_theta=float(d["b_theta"]),
        b_0=float(d["b_0"]),
        mu=np.array([c["mu"] for c in cl], dtype=float),
        lam=np.array([c["lambda_rowmajor"] for c in cl], dtype=float).reshape(len(cl), p, H),
        xi2=np.array([c["xi2"] for c in cl], dtype=float),
        theta=np.array([c["theta"] for c in cl], dtype=float),
        tau=np.array([c["tau"] for c in cl], dtype=float),
        indicator=np.array([c["indicator"] for c in cl], dtype=int),
        alloc=None if alloc is None else np.asarray(alloc, dtype=int) - 1,
    )


def write_trace(path, records):
    atomic_write_text(path, "".join(record_to_line(r) + "\n" for r in records))


def read_trace(path):
    if not os.path.exists(path):
        raise DataError(f"trace not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return [record_from_line(line) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# Config files
# ---------------------------------------------------------------------------

_BNB_KEYS = {"alpha_lambda", "a_pi", "b_pi"}


def _field_types():
    return {f.name: f.type for f in dataclasses.fields(Hyperparams)}


def parse_config_text(text):
    """Parse ``key = value`` lines into Hyperparams keyword arguments.

    Blank lines and ``#`` comments are ignored; vector values are
    comma-separated; BNB parameters use their own names (``alpha_lambda``,
    ``a_pi``, ``b_pi``).
    """
    fields = _field_types()
    out, bnb = {}, {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        try:
            if key in _BNB_KEYS:
                bnb[key] = float(value)
            elif key == "seed":
                out[key] = int(value)
            elif key not in fields or key == "bnb":
                raise ConfigError(f"config line {lineno}: unknown key '{key}'")
            elif key in ("b0_mean", "B0_diag", "b_g"):
                out[key] = np.array([float(v) for v in value.split(",")])
            elif key == "alpha_B_update":
                out[key] = value
            elif key in ("H", "H_override_p_max", "K_init", "expected_clusters",
                         "iters", "burnin", "thin"):
                out[key] = int(value)
            else:
                out[key] = float(value)
        except ValueError:
            raise ConfigError(f"config line {lineno}: bad value for '{key}': {value}") from None
    if bnb:
        out["bnb"] = BnbParams(**bnb)
    return out


def read_config(path):
    if not os.path.exists(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def hyper_snapshot(hyper):
    """JSON-friendly dict of a Hyperparams instance."""
    out = {}
    for f in dataclasses.fields(hyper):
        v = getattr(hyper, f.name)
        if isinstance(v, BnbParams):
            v = dataclasses.asdict(v)
        elif isinstance(v, np.ndarray):
            v = v.tolist()
        out[f.name] = v
    return out


def write_json(path, obj):
    atomic_write_text(path, json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def read_json(path):
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    raise TypeError(type(o))
