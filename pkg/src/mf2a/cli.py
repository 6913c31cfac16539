"""Command-line entry point: simulate, fit, summarize, evaluate, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

import argparse
import logging
import os
import sys
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from datetime import datetime, timezone

import numpy as np

from . import __version__
from . import io
from .evaluate import adjusted_rand_index, confusion_matrix, match_clusters, misclassification_rate, \
    mse_omega_from_moments
from .exceptions import ConfigError, DataError, MF2AError
from .model import Dataset, Hyperparams
from .postprocess import identify
from .sampler import ChainConfig, run_chain
from .simulate import SimTruth, gen_study1, gen_study2, standardize

logger = logging.getLogger("mf2a")

CLI_DEFAULTS = {"iters": 50_000, "burnin_frac": 0.2, "thin": 10, "seed": 0}
SEED_ENV = "MF2A_SEED"

MANIFEST = "manifest.json"
SUMMARY = "summary.json"


def _timestamp():
    # SOURCE_DATE_EPOCH pins timestamps so that manifests can be byte-identical
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    t = float(epoch) if epoch is not None else time.time()
    return datetime.fromtimestamp(t, tz=timezone.utc).isoformat()


def _trace_name(chain):
    return f"trace_chain{chain}.jsonl"


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------

def cmd_simulate(args):
    if args.study == 1:
        data, truth = gen_study1(p=args.p or 10, T=args.t or 100, seed=args.seed)
    else:
        if args.p is not None or args.t is not None:
            warnings.warn("--study 2 has a fixed design (p=20, T=700); ignoring --p/--t")
        data, truth = gen_study2(seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    io.atomic_write_text(os.path.join(args.out, "data.csv"), io.dataset_to_csv(data, truth.labels + 1))
    d = truth.to_dict()
    d["labels"] = (truth.labels + 1).tolist()
    d["study"] = args.study
    d["seed"] = args.seed
    io.write_json(os.path.join(args.out, "truth.json"), d)
    return 0


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------

def resolve_settings(args, environ=None):
    """Merge defaults, config file, flags and environment (in increasing priority)."""
    environ = os.environ if environ is None else environ
    file_vals = io.read_config(args.config) if args.config else {}
    run = dict(CLI_DEFAULTS)
    for key in ("iters", "burnin_frac", "thin"):
        if key in file_vals:
            run[key] = file_vals.pop(key)
    if "seed" in file_vals:
        run["seed"] = file_vals.pop("seed")
    for key in ("iters", "burnin_frac", "thin", "seed"):
        if getattr(args, key, None) is not None:
            run[key] = getattr(args, key)
    if environ.get(SEED_ENV):
        try:
            run["seed"] = int(environ[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer") from None
    hyper = Hyperparams(**file_vals, iters=int(run["iters"]), burnin_frac=float(run["burnin_frac"]),
                        thin=int(run["thin"]))
    return hyper, int(run["seed"])


def cmd_fit(args):
    hyper, seed = resolve_settings(args)
    if args.chains < 1:
        raise ConfigError("--chains must be >= 1")
    raw = io.read_dataset(args.data)
    digest = io.file_digest(args.data)
    data = Dataset(raw.values, columns=raw.columns)
    if not args.no_standardize:
        data, _ = standardize(data)
    os.makedirs(args.out, exist_ok=True)
    started = _timestamp()

    def one_chain(c):
        cfg = ChainConfig(hyper=hyper, seed=seed, chain_id=c, threads=args.threads,
                          record_alloc_every=args.record_alloc_every)
        path = os.path.join(args.out, _trace_name(c))
        tmp = path + ".part"
        with open(tmp, "w", encoding="utf-8") as fh:
            _, diag = run_chain(data, cfg, callback=lambda rec: fh.write(io.record_to_line(rec) + "\n"))
        os.replace(tmp, path)
        return diag

    with ThreadPoolExecutor(max_workers=args.chains) as pool:
        diags = list(pool.map(one_chain, range(args.chains)))

    resolved = hyper.resolve(data)
    manifest = {
        "version": __version__,
        "data_path": os.path.abspath(args.data),
        "data_digest": digest,
        "standardized": data.standardized,
        "center": data.center.tolist(),
        "scale": data.scale.tolist(),
        "T": data.T,
        "p": data.p,
        "seed": seed,
        "chains": [{"chain_id": c, "seed": seed, "trace": _trace_name(c),
                    "mh": diags[c].as_dict()} for c in range(args.chains)],
        "config": io.hyper_snapshot(resolved),
        "started": started,
        "finished": _timestamp(),
    }
    io.write_json(os.path.join(args.out, MANIFEST), manifest)
    return 0


# ---------------------------------------------------------------------------
# summarize
# ---------------------------------------------------------------------------

def _distribution_rows(values):
    vals, counts = np.unique(np.asarray(values, dtype=int), return_counts=True)
    total = counts.sum()
    return [(int(v), int(c), c / total) for v, c in zip(vals, counts)]


def cmd_summarize(args):
    manifest = io.read_json(os.path.join(args.run, MANIFEST))
    data_path = args.data or manifest["data_path"]
    if not os.path.exists(data_path):
        raise DataError(f"data file not found: {data_path}")
    if io.file_digest(data_path) != manifest["data_digest"]:
        raise DataError(f"dataset {data_path} changed since the fit (digest mismatch)")
    trace, trace_rows = [], []
    for ch in manifest["chains"]:
        for rec in io.read_trace(os.path.join(args.run, ch["trace"])):
            trace.append(rec)
            trace_rows.append((ch["chain_id"], rec.iter, rec.K, rec.K_plus))
    if not trace:
        raise DataError("trace is empty; nothing to summarise")
    post = identify(trace, seed=args.seed)
    out = args.out
    os.makedirs(out, exist_ok=True)
    K, p = post.K_hat, post.mu_mean.shape[1]

    io.write_json(os.path.join(out, SUMMARY), {
        "K_hat": K,
        "H_hat": [int(h) for h in post.H_hat],
        "M_retained": post.M_retained,
        "attrition": post.attrition,
        "draw_iters": post.draw_iters,
        "center": manifest["center"],
        "scale": manifest["scale"],
        "standardized": manifest["standardized"],
        "T": manifest["T"],
        "p": p,
    })
    io.write_csv(os.path.join(out, "cluster_means.csv"), ["cluster", "variable", "value"],
                 [(k + 1, j + 1, post.mu_mean[k, j]) for k in range(K) for j in range(p)])
    for name, arr in (("omega_mean.csv", post.omega_mean),
                      ("omega_second_moment.csv", post.omega_second_moment)):
        io.write_csv(os.path.join(out, name), ["cluster", "row", "col", "value"],
                     [(k + 1, i + 1, j + 1, arr[k, i, j])
                      for k in range(K) for i in range(p) for j in range(p)])
    io.write_csv(os.path.join(out, "posterior_K.csv"), ["K", "count", "mass"],
                 _distribution_rows([r.K for r in trace]))
    io.write_csv(os.path.join(out, "posterior_Kplus.csv"), ["K_plus", "count", "mass"],
                 _distribution_rows([r.K_plus for r in trace]))
    io.write_csv(os.path.join(out, "posterior_H.csv"), ["cluster", "H", "count", "mass"],
                 [(k + 1, *row) for k in range(K) for row in _distribution_rows(post.H_relabelled[:, k])])
    io.write_csv(os.path.join(out, "trace_K.csv"), ["chain", "iter", "K", "K_plus"], trace_rows)
    if post.allocation is not None:
        io.write_csv(os.path.join(out, "allocation.csv"), ["t", "cluster"],
                     [(t + 1, int(c) + 1) for t, c in enumerate(post.allocation)])
    return 0


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------

def _read_long(path, ncols):
    if not os.path.exists(path):
        raise DataError(f"file not found: {path}")
    rows = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return rows[:, :ncols]


def _load_summary(path):
    summary_file = os.path.join(path, SUMMARY)
    if not os.path.exists(summary_file):
        raise DataError(f"no summary found in {path}")
    s = io.read_json(summary_file)
    if s.get("M_retained", 0) < 1:
        raise DataError(f"summary in {path} has no retained draws")
    return s


def _omega_table(path, K, p):
    rows = _read_long(path, 4)
    out = np.zeros((K, p, p))
    out[rows[:, 0].astype(int) - 1, rows[:, 1].astype(int) - 1, rows[:, 2].astype(int) - 1] = rows[:, 3]
    return out


def cmd_evaluate(args):
    if not os.path.exists(args.truth):
        raise DataError(f"truth file not found: {args.truth}")
    summary = _load_summary(args.summary)
    truth = SimTruth.from_dict(io.read_json(args.truth))
    alloc_path = os.path.join(args.summary, "allocation.csv")
    if not os.path.exists(alloc_path):
        raise DataError("summary has no allocation table (fit with allocations recorded)")
    est = _read_long(alloc_path, 2)[:, 1].astype(int)
    true_labels = truth.labels
    if len(est) != len(true_labels):
        raise DataError(f"allocation has {len(est)} entries, truth has {len(true_labels)}")
    ari = adjusted_rand_index(est, true_labels)
    err = misclassification_rate(est, true_labels)
    matching = match_clusters(est, true_labels)

    K, p = summary["K_hat"], summary["p"]
    mean = _omega_table(os.path.join(args.summary, "omega_mean.csv"), K, p)
    second = _omega_table(os.path.join(args.summary, "omega_second_moment.csv"), K, p)
    inv_s = 1.0 / np.asarray(summary["scale"])
    true_omega = [o * np.outer(inv_s, inv_s) for o in truth.omega]
    # labels in files are 1-based for both estimate and truth
    rows = [("ari", "", ari), ("error_pct", "", err)]
    for e, t in sorted(matching.items()):
        mse = mse_omega_from_moments(mean[e - 1], second[e - 1], true_omega[t - 1])
        rows.append(("mse_omega", f"{e}:{t}", mse))
    true_ids = sorted(set(int(v) for v in true_labels))
    os.makedirs(args.out, exist_ok=True)
    io.write_csv(os.path.join(args.out, "scores.csv"), ["metric", "cluster", "value"], rows)
    cm = confusion_matrix(est, true_labels)
    est_ids = sorted(set(int(v) for v in est))
    io.write_csv(os.path.join(args.out, "confusion.csv"), ["true"] + [f"est_{e}" for e in est_ids],
                 [(t, *cm[i]) for i, t in enumerate(true_ids)])
    return 0


# ---------------------------------------------------------------------------
# report
# ---------------------------------------------------------------------------

def cmd_report(args):
    _load_summary(args.summary)
    os.makedirs(args.out, exist_ok=True)
    h = _read_long(os.path.join(args.summary, "posterior_H.csv"), 4)
    io.write_csv(os.path.join(args.out, "hk_posterior.csv"), ["cluster", "H", "mass"],
                 [(int(r[0]), int(r[1]), r[3]) for r in h])
    tk = _read_long(os.path.join(args.summary, "trace_K.csv"), 4).astype(int)
    io.write_csv(os.path.join(args.out, "kplus_trace.csv"), ["chain", "iter", "K_plus"],
                 [(r[0], r[1], r[3]) for r in tk])
    alloc_path = os.path.join(args.summary, "allocation.csv")
    if os.path.exists(alloc_path):
        alloc = _read_long(alloc_path, 2).astype(int)
        if args.time_index:
            time_vals = _read_time_index(args.time_index)
            if len(time_vals) != len(alloc):
                raise DataError(f"time index has {len(time_vals)} rows, allocation has {len(alloc)}")
        else:
            time_vals = [str(t) for t in alloc[:, 0]]
        io.write_csv(os.path.join(args.out, "assignment.csv"), ["t", "time", "cluster"],
                     [(r[0], tv, r[1]) for r, tv in zip(alloc, time_vals)])
    return 0


def _read_time_index(path):
    if not os.path.exists(path):
        raise DataError(f"time index not found: {path}")
    with open(path, encoding="utf-8") as fh:
        lines = [l.strip() for l in fh.read().splitlines() if l.strip()]
    return [l.split(",")[0] for l in lines[1:]]


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(prog="mf2a", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset with known truth")
    s.add_argument("--study", type=int, choices=(1, 2), default=1)
    s.add_argument("--p", type=int)
    s.add_argument("--t", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_simulate)

    f = sub.add_parser("fit", help="run the Gibbs sampler")
    f.add_argument("--data", required=True)
    f.add_argument("--config")
    f.add_argument("--seed", type=int)
    f.add_argument("--iters", type=int, help="default 50000")
    f.add_argument("--burnin-frac", dest="burnin_frac", type=float, help="default 0.2")
    f.add_argument("--thin", type=int, help="default 10")
    f.add_argument("--chains", type=int, default=1)
    f.add_argument("--threads", type=int, default=1, help="threads per chain for cluster updates")
    f.add_argument("--record-alloc-every", dest="record_alloc_every", type=int, default=1)
    f.add_argument("--no-standardize", dest="no_standardize", action="store_true")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    m = sub.add_parser("summarize", help="identify the posterior from fitted traces")
    m.add_argument("--run", required=True, help="directory written by fit")
    m.add_argument("--data", help="dataset path if it moved since the fit")
    m.add_argument("--seed", type=int, default=0, help="seed for the relabelling k-means")
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_summarize)

    e = sub.add_parser("evaluate", help="score a summary against a known truth")
    e.add_argument("--summary", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("report", help="emit long-format plot data")
    r.add_argument("--summary", required=True)
    r.add_argument("--time-index", dest="time_index")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_report)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except MF2AError as err:
        print(f"mf2a: error: {err}", file=sys.stderr)
        return err.exit_code


if __name__ == "__main__":
    sys.exit(main())
