"""Command-line front end: simulate, test, detect, online, report.

Every output file embeds the resolved experiment parameters (seed included,
worker count and output paths excluded), so any run can be reproduced
bit-for-bit from its own output. All parallelism flows through derived
seeds and order-preserving reduction; the worker count never changes numbers.
"""

# pin BLAS to one thread per process before numpy loads anywhere
import os
os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import argparse
import csv
import json
import sys

import numpy as np

from .detect import scan
from .errors import NumericError
from .inference import TestConfig, aggregate_pvalues, run_test
from .online import METHODS, OnlineConfig, ValueTrace, run_online
from .parallel import parallel_map
from .rng import STREAM_DATA, STREAM_KAPPA, STREAM_REP, derive_seed
from .sim import ScenarioSpec, gen_ihs, gen_scenario
from .trajectory import ParseError, read_csv, write_csv

EXIT_USAGE = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


def _parse_int_list(text: str) -> tuple[int, ...]:
    """Accept "a,b,c" or "start:stop:step" (stop inclusive)."""
    text = text.strip()
    if ":" in text:
        parts = [int(x) for x in text.split(":")]
        start, stop = parts[0], parts[1]
        step = parts[2] if len(parts) > 2 else 1
        return tuple(range(start, stop + 1, step))
    return tuple(int(x) for x in text.split(",") if x)


def _read_config_file(path: str) -> dict:
    values = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key = value")
            key, _, raw = line.partition("=")
            values[key.strip().replace("-", "_")] = raw.strip()
    return values


def _apply_config_defaults(args: argparse.Namespace, parser: argparse.ArgumentParser):
    """Fill unset flags from --config; CLI flags win."""
    if not getattr(args, "config", None):
        return
    file_values = _read_config_file(args.config)
    for key, raw in file_values.items():
        if not hasattr(args, key):
            raise ValueError(f"unknown config key: {key}")
        if getattr(args, key) is None:
            setattr(args, key, raw)


def _coerce(args: argparse.Namespace, name: str, typ, default):
    val = getattr(args, name, None)
    if val is None:
        setattr(args, name, default)
        return
    if isinstance(val, str):
        if typ is bool:
            setattr(args, name, val.lower() in ("1", "true", "yes", "on"))
        elif typ is tuple:
            setattr(args, name, _parse_int_list(val))
        else:
            setattr(args, name, typ(val))


def _echo(args: argparse.Namespace, keys) -> dict:
    out = {}
    for key in keys:
        val = getattr(args, key)
        out[key] = list(val) if isinstance(val, tuple) else val
    return out


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(x) if isinstance(x, float) else x for x in row])


def _test_config(args: argparse.Namespace) -> TestConfig:
    return TestConfig(
        discount=args.gamma, epsilon=args.epsilon_boundary,
        n_features=args.n_features,
        cv_candidates=args.cv_candidates or (),
        n_boot=args.bootstrap_b, n_reps=args.reps, tau=args.tau,
        u_stride=args.u_stride)


# -- simulate -----------------------------------------------------------------

_SIM_KEYS = ("scenario", "n", "t", "tstar", "seed", "delta_signal",
             "delta_smooth", "noise_sd")


def cmd_simulate(args) -> int:
    for name, typ, default in (
            ("scenario", str, "1"), ("n", int, 25), ("t", int, 100),
            ("tstar", int, 50), ("seed", int, 0), ("delta_signal", float, 1.0),
            ("delta_smooth", float, 0.1), ("noise_sd", float, 0.5)):
        _coerce(args, name, typ, default)
    if args.tstar > args.t:
        raise ValueError(f"tstar={args.tstar} exceeds horizon t={args.t}")
    seed = derive_seed(args.seed, STREAM_DATA)
    if args.scenario == "ihs":
        ds = gen_ihs(args.n, args.t, args.tstar, seed)
    else:
        spec = ScenarioSpec(kind=int(args.scenario), n_traj=args.n,
                            horizon=args.t, t_star=args.tstar,
                            delta_signal=args.delta_signal,
                            smooth_frac=args.delta_smooth,
                            noise_sd=args.noise_sd)
        ds = gen_scenario(spec, seed)
    os.makedirs(args.out, exist_ok=True)
    csv_path = os.path.join(args.out, "dataset.csv")
    write_csv(ds, csv_path)
    _write_json(os.path.join(args.out, "dataset_meta.json"), {
        "command": "simulate",
        "m": ds.m,
        "n_traj": ds.n_traj,
        "horizon": ds.horizon,
        "state_dim": ds.state_dim,
        "params": _echo(args, _SIM_KEYS),
    })
    print(f"wrote {csv_path} ({ds.n_traj} trajectories, horizon {ds.horizon})")
    return 0


# -- test ---------------------------------------------------------------------

_TEST_KEYS = ("data", "m", "t0", "t_end", "stat", "seed", "gamma", "alpha",
              "epsilon_boundary", "bootstrap_b", "reps", "tau", "n_features",
              "cv_candidates", "u_stride")


def _test_rep_worker(item):
    ds, t0, t_end, kind, rep_seed, cfg = item
    res = run_test(ds, t0, t_end, kind, rep_seed, cfg)
    return res.to_json_dict()


def cmd_test(args) -> int:
    _coerce_test_like(args)
    ds = read_csv(args.data, m=args.m)
    t_end = args.t_end if args.t_end is not None else ds.horizon
    t0 = args.t0 if args.t0 is not None else ds.t0
    cfg = _test_config(args)
    items = [(ds, t0, t_end, args.stat, derive_seed(args.seed, STREAM_REP, rep), cfg)
             for rep in range(cfg.n_reps)]
    reps = parallel_map(_test_rep_worker, items, args.workers)
    p0 = aggregate_pvalues([r["p_value"] for r in reps], cfg.tau)
    rejected = bool(p0 < args.alpha)
    os.makedirs(args.out, exist_ok=True)
    payload = {
        "command": "test",
        "p_value": p0,
        "rejected": rejected,
        "repetitions": reps,
        "params": _echo(args, _TEST_KEYS),
    }
    _write_json(os.path.join(args.out, "test_result.json"), payload)
    profile = reps[0]["diagnostics"].get("profile", [])
    if profile:
        header = list(profile[0].keys())
        _write_rows(os.path.join(args.out, "test_profile.csv"), header,
                    [tuple(row[k] for k in header) for row in profile])
    print(f"p-value {p0:.6g} -> {'reject' if rejected else 'accept'} "
          f"at alpha={args.alpha}")
    return 0


def _coerce_test_like(args):
    for name, typ, default in (
            ("m", int, 2), ("t0", int, None), ("t_end", int, None),
            ("stat", str, "integral"), ("seed", int, 0), ("gamma", float, 0.9),
            ("alpha", float, 0.05), ("epsilon_boundary", float, 0.1),
            ("bootstrap_b", int, 2000), ("reps", int, 4), ("tau", float, 0.1),
            ("n_features", int, 5), ("cv_candidates", tuple, ()),
            ("u_stride", int, 0)):
        _coerce(args, name, typ, default)


# -- detect -------------------------------------------------------------------

_DETECT_KEYS = _TEST_KEYS[:6] + ("kappas", "alpha", "gamma", "epsilon_boundary",
                                 "bootstrap_b", "reps", "tau", "n_features",
                                 "u_stride", "full_scan")


def _kappa_worker(item):
    ds, t_hi, kappa, kind, seed, cfg = item
    from .inference import run_test_aggregated
    p0, _ = run_test_aggregated(ds, t_hi - kappa, t_hi, kind, seed, cfg)
    return p0


def cmd_detect(args) -> int:
    _coerce_test_like(args)
    _coerce(args, "kappas", tuple, ())
    _coerce(args, "full_scan", bool, False)
    ds = read_csv(args.data, m=args.m)
    t_hi = args.t_end if args.t_end is not None else ds.horizon
    t_lo = args.t0 if args.t0 is not None else ds.t0
    kappas = args.kappas or tuple(k for k in range(25, 76, 5) if k <= t_hi - t_lo)
    cfg = _test_config(args)

    if args.full_scan:
        items = [(ds, t_hi, kappa, args.stat,
                  derive_seed(args.seed, STREAM_KAPPA, kappa), cfg)
                 for kappa in kappas]
        pvals = parallel_map(_kappa_worker, items, args.workers)
        result = scan(ds, kappas, args.stat, args.alpha, cfg, args.seed,
                      t_lo=t_lo, t_hi=t_hi, early_exit=False,
                      test_fn=_precomputed_test_fn(kappas, pvals))
    else:
        result = scan(ds, kappas, args.stat, args.alpha, cfg, args.seed,
                      t_lo=t_lo, t_hi=t_hi, early_exit=True)

    os.makedirs(args.out, exist_ok=True)
    rows = result.rows()
    _write_rows(os.path.join(args.out, "detect.csv"),
                ["kappa", "p_value", "rejected"],
                [(r["kappa"], r["p_value"], int(r["rejected"])) for r in rows])
    _write_json(os.path.join(args.out, "detect.json"), {
        "command": "detect",
        "t_hat": result.t_hat,
        "j0": result.j0,
        "no_stationary_prefix": result.no_stationary_prefix,
        "rows": rows,
        "params": _echo(args, _DETECT_KEYS),
    })
    print(f"estimated change point t_hat={result.t_hat} "
          f"(j0={result.j0}, windows tested: {len(rows)})")
    return 0


def _precomputed_test_fn(kappas, pvals):
    table = {int(k): float(p) for k, p in zip(kappas, pvals)}

    def test_fn(ds, t0, t_end, kind, seed, cfg):
        return table[t_end - t0]

    return test_fn


# -- online -------------------------------------------------------------------

_ONLINE_KEYS = ("scenario", "n", "t", "tstar", "methods", "n_reps_online",
                "seed", "gamma", "alpha", "delta_signal", "noise_sd",
                "batch_len", "n_batches", "explore_eps", "kernel_h",
                "bootstrap_b", "reps", "kappa_min", "kappa_step",
                "tree_max_depth", "tree_min_leaf", "tree_iters", "n_features")


def _online_rep_worker(item):
    rep, scenario, methods, cfg_base, master = item
    offline = gen_scenario(scenario, derive_seed(master, STREAM_DATA, rep))
    rep_master = derive_seed(master, 1000, rep)
    rows = []
    for method in methods:
        cfg = OnlineConfig(**{**cfg_base, "method": method})
        trace = run_online(offline, scenario, cfg, rep_master)
        rows.append({
            "rep": rep,
            "method": method,
            "value": trace.value,
            "t_star_trace": ";".join(str(t) for t in trace.t_star_trace),
        })
    return rows


def cmd_online(args) -> int:
    for name, typ, default in (
            ("scenario", int, 1), ("n", int, 50), ("t", int, 100),
            ("tstar", int, 50), ("seed", int, 0), ("gamma", float, 0.9),
            ("alpha", float, 0.05), ("delta_signal", float, 1.0),
            ("noise_sd", float, 0.5), ("batch_len", int, 25),
            ("n_batches", int, 8), ("explore_eps", float, 0.1),
            ("kernel_h", float, 0.4), ("bootstrap_b", int, 200),
            ("reps", int, 2), ("kappa_min", int, 25), ("kappa_step", int, 25),
            ("tree_max_depth", int, 5), ("tree_min_leaf", int, 50),
            ("tree_iters", int, 50), ("n_reps_online", int, 5),
            ("n_features", int, 5)):
        _coerce(args, name, typ, default)
    methods = tuple(args.methods.split(",")) if isinstance(args.methods, str) \
        else ("proposed", "overall", "random", "oracle")
    for method in methods:
        if method not in METHODS:
            raise ValueError(f"unknown method {method!r}; choose from {METHODS}")
    scenario = ScenarioSpec(kind=args.scenario, n_traj=args.n, horizon=args.t,
                            t_star=args.tstar, delta_signal=args.delta_signal,
                            noise_sd=args.noise_sd)
    test_cfg = TestConfig(discount=args.gamma, n_boot=args.bootstrap_b,
                          n_reps=args.reps, n_features=args.n_features)
    cfg_base = dict(batch_len=args.batch_len, n_batches=args.n_batches,
                    explore_eps=args.explore_eps, kernel_h=args.kernel_h,
                    tree_max_depth=args.tree_max_depth,
                    tree_min_leaf=args.tree_min_leaf,
                    tree_iters=args.tree_iters, alpha=args.alpha,
                    kappa_min=args.kappa_min, kappa_step=args.kappa_step,
                    stat_kind=args.stat or "integral", test=test_cfg)
    items = [(rep, scenario, methods, cfg_base, args.seed)
             for rep in range(args.n_reps_online)]
    all_rows = [row for rows in parallel_map(_online_rep_worker, items, args.workers)
                for row in rows]

    os.makedirs(args.out, exist_ok=True)
    _write_rows(os.path.join(args.out, "online.csv"),
                ["rep", "method", "value", "t_star_trace"],
                [(r["rep"], r["method"], r["value"], r["t_star_trace"])
                 for r in all_rows])
    summary = _online_summary(all_rows, methods)
    args.methods = ",".join(methods)
    _write_json(os.path.join(args.out, "online.json"), {
        "command": "online",
        "summary": summary,
        "params": _echo(args, _ONLINE_KEYS),
    })
    for method in methods:
        print(f"{method}: mean value {summary['mean_value'][method]:.4f}")
    return 0


def _online_summary(rows, methods) -> dict:
    by_method = {m: [r["value"] for r in rows if r["method"] == m] for m in methods}
    mean_value = {m: float(np.mean(v)) for m, v in by_method.items() if v}
    diffs = {}
    if "proposed" in by_method:
        base = np.array(by_method["proposed"])
        for m in methods:
            if m != "proposed" and by_method[m]:
                diffs[m] = float(np.mean(base - np.array(by_method[m])))
    return {"mean_value": mean_value, "mean_diff_proposed_minus": diffs}


# -- report -------------------------------------------------------------------

def cmd_report(args) -> int:
    _coerce(args, "kind", str, "test")
    inputs = args.inputs
    if not inputs:
        raise ValueError("report needs at least one input file")
    rows, summary = _build_report(args.kind, inputs)
    os.makedirs(args.out, exist_ok=True)
    if rows:
        header = list(rows[0].keys())
        _write_rows(os.path.join(args.out, "report.csv"), header,
                    [tuple(r[k] for k in header) for r in rows])
    _write_json(os.path.join(args.out, "report.json"), {
        "command": "report",
        "kind": args.kind,
        "n_inputs": len(inputs),
        "summary": summary,
        "params": {"kind": args.kind, "inputs": list(inputs)},
    })
    print(f"report over {len(inputs)} files -> {args.out}")
    return 0


def _build_report(kind: str, inputs) -> tuple[list[dict], dict]:
    payloads = []
    for path in inputs:
        with open(path, encoding="utf-8") as fh:
            payloads.append(json.load(fh))
    if kind == "test":
        rows = [{"file": p, "p_value": d["p_value"], "rejected": int(d["rejected"])}
                for p, d in zip(inputs, payloads)]
        summary = {"mean_p": float(np.mean([r["p_value"] for r in rows])),
                   "rejection_rate": float(np.mean([r["rejected"] for r in rows]))}
    elif kind == "detect":
        rows = [{"file": p, "t_hat": d["t_hat"],
                 "j0": -1 if d["j0"] is None else d["j0"]}
                for p, d in zip(inputs, payloads)]
        by_kappa: dict[int, list[int]] = {}
        for d in payloads:
            for r in d["rows"]:
                by_kappa.setdefault(int(r["kappa"]), []).append(int(r["rejected"]))
        t_hats = [r["t_hat"] for r in rows]
        summary = {
            "rejection_rate_by_kappa": {str(k): float(np.mean(v))
                                        for k, v in sorted(by_kappa.items())},
            "t_hat_mode": int(max(set(t_hats), key=lambda t: (t_hats.count(t), -t))),
        }
    elif kind == "online":
        rows = []
        for p, d in zip(inputs, payloads):
            for m, v in d["summary"]["mean_value"].items():
                rows.append({"file": p, "method": m, "mean_value": v})
        by_method: dict[str, list[float]] = {}
        for r in rows:
            by_method.setdefault(r["method"], []).append(r["mean_value"])
        summary = {"mean_value": {m: float(np.mean(v)) for m, v in by_method.items()}}
    else:
        raise ValueError(f"unknown report kind {kind!r}")
    return rows, summary


# -- entry --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qcusum",
        description="Stationarity testing and change-point detection for "
                    "offline RL Q-functions")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key = value file; flags win")
        p.add_argument("--seed", default=None)
        p.add_argument("--workers", type=int, default=1)
        p.add_argument("--out", default=".")
        p.add_argument("--gamma", default=None, help="discount factor")
        p.add_argument("--alpha", default=None, help="significance level")
        p.add_argument("--epsilon-boundary", dest="epsilon_boundary", default=None)
        p.add_argument("--stat", choices=("integral", "max", "norm"), default=None)
        p.add_argument("--bootstrap-b", dest="bootstrap_b", default=None)
        p.add_argument("--reps", default=None, help="feature redraws per test")
        p.add_argument("--tau", default=None, help="p-value combination quantile")

    p_sim = sub.add_parser("simulate", help="generate a synthetic dataset")
    add_common(p_sim)
    p_sim.add_argument("--scenario", default=None, help="1|2|3|4|ihs")
    p_sim.add_argument("--n", default=None)
    p_sim.add_argument("--t", default=None)
    p_sim.add_argument("--tstar", default=None)
    p_sim.add_argument("--delta-signal", dest="delta_signal", default=None)
    p_sim.add_argument("--delta-smooth", dest="delta_smooth", default=None)
    p_sim.add_argument("--noise-sd", dest="noise_sd", default=None)
    p_sim.set_defaults(fn=cmd_simulate)

    p_test = sub.add_parser("test", help="stationarity test on one window")
    add_common(p_test)
    p_test.add_argument("--data", required=True)
    p_test.add_argument("--m", default=None)
    p_test.add_argument("--t0", default=None)
    p_test.add_argument("--t-end", dest="t_end", default=None)
    p_test.add_argument("--n-features", dest="n_features", default=None)
    p_test.add_argument("--cv-candidates", dest="cv_candidates", default=None)
    p_test.add_argument("--u-stride", dest="u_stride", default=None)
    p_test.set_defaults(fn=cmd_test)

    p_det = sub.add_parser("detect", help="scan windows for the latest change")
    add_common(p_det)
    p_det.add_argument("--data", required=True)
    p_det.add_argument("--m", default=None)
    p_det.add_argument("--t0", default=None)
    p_det.add_argument("--t-end", dest="t_end", default=None)
    p_det.add_argument("--kappas", default=None, help="e.g. 25:75:5")
    p_det.add_argument("--n-features", dest="n_features", default=None)
    p_det.add_argument("--cv-candidates", dest="cv_candidates", default=None)
    p_det.add_argument("--u-stride", dest="u_stride", default=None)
    p_det.add_argument("--full-scan", dest="full_scan", action="store_const",
                       const="true", default=None,
                       help="evaluate every window (no early exit)")
    p_det.set_defaults(fn=cmd_detect)

    p_onl = sub.add_parser("online", help="batched online learning comparison")
    add_common(p_onl)
    p_onl.add_argument("--scenario", default=None)
    p_onl.add_argument("--n", default=None)
    p_onl.add_argument("--t", default=None)
    p_onl.add_argument("--tstar", default=None)
    p_onl.add_argument("--methods", default=None,
                       help="comma list from proposed,overall,random,oracle,kernel")
    p_onl.add_argument("--n-reps-online", dest="n_reps_online", default=None)
    p_onl.add_argument("--delta-signal", dest="delta_signal", default=None)
    p_onl.add_argument("--noise-sd", dest="noise_sd", default=None)
    p_onl.add_argument("--batch-len", dest="batch_len", default=None)
    p_onl.add_argument("--n-batches", dest="n_batches", default=None)
    p_onl.add_argument("--explore-eps", dest="explore_eps", default=None)
    p_onl.add_argument("--kernel-h", dest="kernel_h", default=None)
    p_onl.add_argument("--kappa-min", dest="kappa_min", default=None)
    p_onl.add_argument("--kappa-step", dest="kappa_step", default=None)
    p_onl.add_argument("--tree-max-depth", dest="tree_max_depth", default=None)
    p_onl.add_argument("--tree-min-leaf", dest="tree_min_leaf", default=None)
    p_onl.add_argument("--tree-iters", dest="tree_iters", default=None)
    p_onl.add_argument("--n-features", dest="n_features", default=None)
    p_onl.set_defaults(fn=cmd_online)

    p_rep = sub.add_parser("report", help="aggregate result files into tables")
    add_common(p_rep)
    p_rep.add_argument("--kind", choices=("test", "detect", "online"), default=None)
    p_rep.add_argument("--inputs", nargs="+", required=True)
    p_rep.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        _apply_config_defaults(args, parser)
        _coerce(args, "seed", int, 0)
        _coerce(args, "workers", int, 1)
        return args.fn(args)
    except (ParseError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
