"""Command-line entry point: ``qemcmc <command> [options]``.

Outputs are CSV or JSON files carrying the resolved configuration as a
provenance header. Relative output paths resolve against ``--out``, which
defaults to ``$QEMCMC_OUTPUT_DIR`` or the working directory.

Exit codes: 0 success, 1 a validation check failed, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, cache_io, chains, clusters, ising, quantum, spectral, stats

OUTPUT_ENV = "QEMCMC_OUTPUT_DIR"
CLUSTER_PROPOSALS = {
    "sw-ghost": ("swendsen_wang", "ghost"),
    "sw-ar": ("swendsen_wang", "accept_reject"),
    "wolff-ghost": ("wolff", "ghost"),
    "wolff-ar": ("wolff", "accept_reject"),
}
EXACT_PROPOSALS = ("channel", "trotter", "local", "uniform", "mismatched")
GAP_PROPOSALS = EXACT_PROPOSALS + tuple(CLUSTER_PROPOSALS) + ("houdayer",)


class UsageError(Exception):
    """Bad arguments or unreadable inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# Helpers


def _out_path(args, name: str) -> Path:
    path = Path(name)
    if not path.is_absolute():
        path = Path(args.out) / path
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def _provenance(args) -> dict:
    cfg = {k: v for k, v in vars(args).items() if k != "func"}
    cfg["version"] = __version__
    return cfg


def _write_json(path: Path, payload: dict, args) -> None:
    payload = {"config": _provenance(args), **payload}
    path.write_text(json.dumps(payload, indent=2, default=_jsonable) + "\n")


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not serializable: {type(obj)}")


def _write_csv(path: Path, header: list[str], rows, args) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# config: {json.dumps(_provenance(args), default=_jsonable)}\n")
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _load_instance(args) -> ising.IsingInstance:
    if getattr(args, "paper_instance", None):
        return ising.paper_instance(args.paper_instance)
    if not getattr(args, "instance", None):
        raise UsageError("give --instance FILE or --paper-instance N")
    try:
        return cache_io.load_instance(args.instance)
    except FileNotFoundError:
        raise UsageError(f"instance file not found: {args.instance}") from None


def _transition(kind: str, instance, T: float, rule: str, rng, Q_cache: dict):
    """Exact transition matrix for one of the matrix-based proposals."""
    if kind not in Q_cache:
        if kind == "channel":
            Q_cache[kind] = quantum.channel_q_matrix(instance)
        elif kind == "trotter":
            Q_cache[kind] = quantum.trotter_q_matrix(instance)
        elif kind == "mismatched":
            Q_cache[kind] = chains.mismatched_q_matrix(instance, rng)
        else:
            Q_cache[kind] = chains.classical_proposal_matrix(kind, instance.n)
    return chains.build_transition_matrix(Q_cache[kind], instance, T, rule)


# ---------------------------------------------------------------------------
# Commands


def cmd_gen(args) -> int:
    inst = ising.gen_random_instance(args.n, args.connectivity, args.sigma, rng=args.seed)
    path = _out_path(args, args.output)
    cache_io.save_instance(path, inst)
    print(path)
    return 0


def cmd_exact_stats(args) -> int:
    inst = _load_instance(args)
    table = ising.boltzmann(inst, args.T)
    top = table.top(args.top)
    E = np.sort(table.energies)
    result = {
        "n": inst.n,
        "T": args.T,
        "top": [{"code": c, "spins": ising.spins_from_code(c, inst.n).tolist(), "probability": p, "energy": e}
                for c, p, e in top],
        "mean_magnetization": ising.thermal_average(inst, args.T),
        "lowest_gap": float(E[1] - E[0]) if len(E) > 1 else 0.0,
        "alpha": ising.alpha(inst),
    }
    if args.output:
        _write_json(_out_path(args, args.output), result, args)
    print(json.dumps(result, indent=2))
    return 0


def _cluster_gap(kind, inst, T, args, rng):
    move = clusters.cluster_move_fn(*CLUSTER_PROPOSALS[kind])
    est = clusters.estimate_transition_matrix(move, inst, T, args.samples, rng)

    def transform(P):
        return chains.lazy(P) if args.lazy else P

    point = spectral.estimated_gap(transform(est.matrix)).delta
    lo = hi = float("nan")
    if args.bootstrap:
        reps = [spectral.estimated_gap(transform(est.resample(rng).matrix)).delta for _ in range(args.bootstrap)]
        q_lo, q_hi = np.quantile(reps, [(1 - args.level) / 2, (1 + args.level) / 2])
        lo, hi = 2 * point - q_hi, 2 * point - q_lo
    return point, lo, hi, "dense-general"


def cmd_gap(args) -> int:
    inst = _load_instance(args)
    rng = np.random.default_rng(args.seed)
    rows = []
    Q_cache: dict = {}
    tables = None
    for T in args.T:
        if args.proposal in CLUSTER_PROPOSALS:
            point, lo, hi, method = _cluster_gap(args.proposal, inst, T, args, rng)
        elif args.proposal == "houdayer":
            if tables is None:
                tables = clusters.HoudayerTables.build(inst)
            kern = clusters.HoudayerKernel(inst, T, tables)
            if args.krylov:
                res = spectral.ritz_gap_bound(kern, kern.stationary(), args.krylov, rng)
            else:
                res = spectral.matrix_free_gap(kern, kern.stationary(), method="lanczos", tolerance=1e-10)
            point, lo, hi, method = res.delta, float("nan"), float("nan"), res.method
        else:
            P = _transition(args.proposal, inst, T, args.acceptance, rng, Q_cache)
            if args.lazy:
                P = chains.lazy(P)
            res = spectral.absolute_spectral_gap(P)
            point, lo, hi, method = res.delta, float("nan"), float("nan"), res.method
        rows.append([T, point, lo, hi, method])
        print(f"T={T:g} delta={point:.6g} ci=[{lo:.6g}, {hi:.6g}] method={method}")
    _write_csv(_out_path(args, args.output), ["T", "delta", "ci_low", "ci_high", "method"], rows, args)
    return 0


def _scaling_item(item):
    n, index, connectivity, T, seed, rule = item
    rng = np.random.default_rng([seed, n, index])
    inst = ising.gen_random_instance(n, connectivity, rng=rng)
    out = {}
    for kind in ("channel", "mismatched", "local", "uniform"):
        P = _transition(kind, inst, T, rule, rng, {})
        out[kind] = spectral.absolute_spectral_gap(P).delta
    return n, index, out


def scaling_sweep(ns, instances: int, T: float, connectivity: str = "full", seed: int = 0,
                  rule: str = "mh", jobs: int = 1) -> dict:
    """Gaps of the four exact proposals on ``instances`` random instances per ``n``."""
    items = [(n, i, connectivity, T, seed, rule) for n in ns for i in range(instances)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_scaling_item, items, chunksize=4))
    else:
        results = [_scaling_item(it) for it in items]
    deltas = {kind: {n: [] for n in ns} for kind in ("channel", "mismatched", "local", "uniform")}
    for n, _, out in results:
        for kind, d in out.items():
            deltas[kind][n].append(d)
    return deltas


def fit_scaling(deltas: dict) -> dict:
    fits = {}
    for kind, by_n in deltas.items():
        ns = sorted(by_n)
        means = [float(np.mean(by_n[n])) for n in ns]
        sems = [float(np.std(by_n[n], ddof=1) / np.sqrt(len(by_n[n]))) for n in ns]
        fits[kind] = stats.fit_exponential(ns, means, sems)
    return fits


def cmd_scaling(args) -> int:
    ns = list(range(args.n_min, args.n_max + 1))
    deltas = scaling_sweep(ns, args.instances, args.T, args.connectivity, args.seed, args.acceptance, args.jobs)
    fits = fit_scaling(deltas)
    rows = [[kind, n, i, d] for kind, by_n in deltas.items() for n in ns for i, d in enumerate(by_n[n])]
    _write_csv(_out_path(args, args.output), ["proposal", "n", "instance", "delta"], rows, args)
    table = {kind: {"k": f.k, "k_sigma": f.k_sigma, "prefactor": f.prefactor, "reduced_chi2": f.reduced_chi2}
             for kind, f in fits.items()}
    _write_json(_out_path(args, Path(args.output).with_suffix(".fit.json")), {"fits": table}, args)
    for kind, f in fits.items():
        print(f"{kind:>10}: k = {f.k:.4f} +- {f.k_sigma:.4f}")
    return 0


def cmd_sample_q(args) -> int:
    inst = _load_instance(args)
    counts = quantum.sample_grid_counts(inst, args.shots, args.twirls, args.spam, args.p01, args.p10,
                                        rng=args.seed, prep_noise=not args.readout_only)
    path = _out_path(args, args.output)
    cache_io.save_counts(path, counts)
    print(f"{counts.total} transitions over {counts.n_circuits} circuits -> {path}")
    return 0


def _q_hat_gap(m: np.ndarray, inst, T: float, rule: str) -> float:
    tot = m.sum(axis=0)
    if np.any(tot == 0):
        return float("nan")
    Q = m / tot[None, :]
    return spectral.absolute_spectral_gap(chains.build_transition_matrix(Q, inst, T, rule)).delta


def cmd_analyze(args) -> int:
    inst = _load_instance(args)
    try:
        counts = cache_io.load_counts(args.counts)
    except FileNotFoundError:
        raise UsageError(f"counts file not found: {args.counts}") from None
    if counts.n != inst.n:
        raise UsageError(f"counts are for n={counts.n}, instance has n={inst.n}")
    rng = np.random.default_rng(args.seed)
    est = cache_io.estimate_q(counts)
    cache_io.save_matrix(_out_path(args, f"{args.prefix}_qhat.csv"), est.matrix, {"source": args.counts})
    theory = quantum.trotter_q_matrix(inst)
    tv = stats.tv_error(est.matrix, theory)

    # Bowker p-values over independent IID subsamples.
    p_trad, p_mod = [], []
    for _ in range(args.subsamples):
        M = stats.iid_subsample(counts, rng)
        p_trad.append(stats.bowker(M, "traditional").p_value)
        p_mod.append(stats.bowker(M, "modified").p_value)
    full = stats.bowker(counts.count_matrix())
    bins = np.linspace(0, 1, 21)
    report = {
        "tv_error_vs_trotter": tv,
        "unobserved_columns": est.unobserved.tolist(),
        "bowker_full": full.to_dict(),
        "bowker_subsample": {
            "traditional": {"mean_p": float(np.mean(p_trad)), "histogram": np.histogram(p_trad, bins)[0].tolist()},
            "modified": {"mean_p": float(np.mean(p_mod)), "histogram": np.histogram(p_mod, bins)[0].tolist()},
            "bin_edges": bins.tolist(),
            "fraction_below_threshold": float(np.mean(np.array(p_trad) <= stats.SIGNIFICANCE)),
        },
    }
    _write_json(_out_path(args, f"{args.prefix}_report.json"), report, args)

    # Gap estimate on all data; CI from basic bootstrap of one IID subsample.
    M = stats.iid_subsample(counts, rng)
    jj, kk = np.nonzero(M)
    pts = np.column_stack([np.repeat(jj, M[jj, kk]), np.repeat(kk, M[jj, kk])])
    d = 2**inst.n
    rows = []
    for T in args.T:
        point = _q_hat_gap(counts.count_matrix().astype(float), inst, T, args.acceptance)

        def stat(sample, T=T):
            mm = np.bincount(sample[:, 0] * d + sample[:, 1], minlength=d * d).reshape(d, d).astype(float)
            return _q_hat_gap(mm, inst, T, args.acceptance)

        lo = hi = float("nan")
        if args.bootstrap and len(pts):
            gen = np.random.default_rng(rng.integers(2**63))
            reps = np.array([stat(pts[gen.integers(len(pts), size=len(pts))]) for _ in range(args.bootstrap)])
            reps = reps[np.isfinite(reps)]
            if len(reps):
                q_lo, q_hi = np.quantile(reps, [(1 - args.level) / 2, (1 + args.level) / 2])
                lo, hi = 2 * point - q_hi, 2 * point - q_lo
        rows.append([T, point, lo, hi, "dense-symmetric"])
        print(f"T={T:g} delta_hat={point:.6g} ci=[{lo:.6g}, {hi:.6g}]")
    _write_csv(_out_path(args, f"{args.prefix}_gap.csv"), ["T", "delta", "ci_low", "ci_high", "method"], rows, args)
    print(f"TV error vs Trotter theory: {tv:.4f}; full-data Bowker p = {full.p_value:.3g}")
    return 0


def cmd_chain(args) -> int:
    inst = _load_instance(args)
    rng = np.random.default_rng(args.seed)
    series = []
    if args.counts:
        try:
            counts = cache_io.load_counts(args.counts)
        except FileNotFoundError:
            raise UsageError(f"counts file not found: {args.counts}") from None
        cache = stats.TransitionCache(counts, rng)
        for _ in range(args.chains):
            traj = stats.markov_chain_subsample(cache, inst, args.T, args.acceptance, rng,
                                                max_iterations=args.iterations)
            series.append(chains.running_average(traj))
    else:
        kwargs = {"mode": args.mode} if args.proposal == "quantum" else {}
        proposal = chains.make_proposal(args.proposal, inst, **kwargs)
        for _ in range(args.chains):
            traj = chains.run_chain(proposal, inst, args.T, args.iterations, args.acceptance, rng)
            series.append(chains.running_average(traj))
    target = ising.thermal_average(inst, args.T)
    rows = [[c, i, float(v)] for c, s in enumerate(series) for i, v in enumerate(s)]
    _write_csv(_out_path(args, args.output), ["chain", "iteration", "running_magnetization"], rows, args)
    finals = [float(s[-1]) for s in series]
    print(f"exact <m> = {target:.4f}; mean final running average = {np.mean(finals):.4f} "
          f"over {len(series)} chains (lengths {min(map(len, series))}-{max(map(len, series))})")
    return 0


def run_validation(seed: int = 0) -> list[tuple[str, bool, str]]:
    """Fast internal consistency checks; each returns ``(name, passed, detail)``."""
    rng = np.random.default_rng(seed)
    results = []
    inst4 = ising.gen_random_instance(4, "full", rng=rng)

    H = quantum.build_hamiltonian(inst4, 1e-3)
    errs = []
    for j in range(16):
        for b in range(4):
            k = j ^ (1 << b)
            exact = quantum.evolve_exact(H, 1.0, j)[k]
            approx = quantum.perturbative_transition(inst4, 1e-3, 1.0, j, k)
            errs.append(abs(exact - approx) / exact)
    results.append(("perturbative transition", max(errs) < 5e-2, f"max rel err {max(errs):.2e}"))

    H = quantum.build_hamiltonian(inst4, 0.4)
    ts = np.linspace(0, 1e4, 100_001)
    avg = np.zeros((16, 16))
    for t in ts:
        avg += quantum.exact_q(H, t)
    avg /= len(ts)
    err = float(np.abs(avg - quantum.longtime_q(H)).max())
    results.append(("long-time transition", err < 1e-2, f"max abs err {err:.2e}"))

    g, _ = quantum.default_trotter_grids()
    tv = []
    for dt in (0.8, 0.4, 0.2):
        ts = 0.8 * np.arange(2, 26)
        tv.append(stats.tv_error(quantum.trotter_q_matrix(inst4, g, ts, dt), quantum.channel_at_grid(inst4, g, ts)))
    ratios = [tv[0] / tv[1], tv[1] / tv[2]]
    results.append(("trotter order", all(3 <= r <= 5 for r in ratios), f"ratios {ratios[0]:.2f}, {ratios[1]:.2f}"))

    inst3 = ising.gen_random_instance(3, "full", rng=rng)
    U = quantum.reverse_anneal_propagator(inst3, lambda t: 0.5 * (1 - abs(2 * t / 10.0 - 1)), 10.0, 50)
    asym = float(np.abs(U - U.T).max())
    results.append(("reverse-anneal symmetry", asym <= 1e-10, f"max|U-U^T| {asym:.1e}"))

    c = quantum.TrotterCircuit.build(inst4, 0.4, steps=6)
    bare = np.abs(c.unitary()) ** 2
    worst = 0.0
    for _ in range(10):
        key = rng.choice([-1, 1], size=4)
        tw = quantum.spam_twirl(c, key)
        U_tw = quantum.run_gates(quantum.compile_circuit(tw.circuit, twirl_rng=rng), 4)
        worst = max(worst, float(np.abs(tw.transition_matrix(U_tw) - bare).max()))
    results.append(("twirl identities", worst <= 1e-10, f"max deviation {worst:.1e}"))
    return results


def cmd_validate(args) -> int:
    results = run_validation(args.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    if args.output:
        _write_json(_out_path(args, args.output),
                    {"checks": [{"name": n, "passed": ok, "detail": d} for n, ok, d in results]}, args)
    return 0 if all(ok for _, ok, _ in results) else 1


# ---------------------------------------------------------------------------
# Parser


def _add_instance(p) -> None:
    g = p.add_mutually_exclusive_group()
    g.add_argument("--instance", help="instance JSON file")
    g.add_argument("--paper-instance", type=int, choices=(8, 9, 10), help="bundled 1D chain instance")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="RNG seed (default 0)")
    common.add_argument("--out", default=os.environ.get(OUTPUT_ENV, "."),
                        help=f"output directory (default ${OUTPUT_ENV} or .)")
    common.add_argument("--jobs", type=int, default=1, help="worker processes for sweeps")

    parser = argparse.ArgumentParser(prog="qemcmc", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a random instance")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--connectivity", choices=("full", "chain"), default="full")
    p.add_argument("--sigma", type=float, default=1.0)
    p.add_argument("--output", default="instance.json")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("exact-stats", parents=[common], help="exact Boltzmann statistics")
    _add_instance(p)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--top", type=int, default=4)
    p.add_argument("--output")
    p.set_defaults(func=cmd_exact_stats)

    p = sub.add_parser("gap", parents=[common], help="absolute spectral gap versus temperature")
    _add_instance(p)
    p.add_argument("--proposal", choices=GAP_PROPOSALS, required=True)
    p.add_argument("--T", type=float, nargs="+", required=True)
    p.add_argument("--acceptance", choices=chains.ACCEPTANCE_RULES, default="mh")
    p.add_argument("--lazy", action="store_true")
    p.add_argument("--samples", type=int, default=100_000, help="moves per T for cluster estimates")
    p.add_argument("--bootstrap", type=int, default=0, help="bootstrap resamples for cluster CIs")
    p.add_argument("--level", type=float, default=stats.BOOTSTRAP_LEVEL)
    p.add_argument("--krylov", type=int, default=0,
                   help="Houdayer only: report the Ritz upper bound from this many Krylov steps")
    p.add_argument("--output", default="gap.csv")
    p.set_defaults(func=cmd_gap)

    p = sub.add_parser("scaling", parents=[common], help="ensemble gap scaling and exponential fits")
    p.add_argument("--n-min", type=int, default=3)
    p.add_argument("--n-max", type=int, default=8)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--T", type=float, default=1.0)
    p.add_argument("--connectivity", choices=("full", "chain"), default="full")
    p.add_argument("--acceptance", choices=chains.ACCEPTANCE_RULES, default="mh")
    p.add_argument("--output", default="scaling.csv")
    p.set_defaults(func=cmd_scaling)

    p = sub.add_parser("sample-q", parents=[common], help="simulate the grid experiment and store counts")
    _add_instance(p)
    p.add_argument("--shots", type=int, default=1000, help="shots per circuit")
    p.add_argument("--twirls", type=int, default=1, help="SPAM keys per (gamma, t) grid point")
    p.add_argument("--spam", action="store_true", help="enable SPAM twirling")
    p.add_argument("--p01", type=float, default=0.0)
    p.add_argument("--p10", type=float, default=0.0)
    p.add_argument("--readout-only", action="store_true", help="no bit flips at state preparation")
    p.add_argument("--output", default="counts.qemc")
    p.set_defaults(func=cmd_sample_q)

    p = sub.add_parser("analyze", parents=[common], help="Q-hat, gap estimates and symmetry tests from counts")
    _add_instance(p)
    p.add_argument("--counts", required=True)
    p.add_argument("--T", type=float, nargs="+", default=[0.1])
    p.add_argument("--acceptance", choices=chains.ACCEPTANCE_RULES, default="mh")
    p.add_argument("--subsamples", type=int, default=20, help="IID subsamples for Bowker histograms")
    p.add_argument("--bootstrap", type=int, default=stats.BOOTSTRAP_RESAMPLES)
    p.add_argument("--level", type=float, default=stats.BOOTSTRAP_LEVEL)
    p.add_argument("--prefix", default="analysis")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("chain", parents=[common], help="magnetization running averages")
    _add_instance(p)
    p.add_argument("--T", type=float, required=True)
    p.add_argument("--proposal", choices=("quantum", "local", "uniform"), default="quantum")
    p.add_argument("--mode", choices=("grid", "continuous"), default="grid")
    p.add_argument("--acceptance", choices=chains.ACCEPTANCE_RULES, default="mh")
    p.add_argument("--chains", type=int, default=10)
    p.add_argument("--iterations", type=int, default=1000)
    p.add_argument("--counts", help="run offline on a stored transition cache instead")
    p.add_argument("--output", default="chains.csv")
    p.set_defaults(func=cmd_chain)

    p = sub.add_parser("validate", parents=[common], help="fast oracle and identity checks")
    p.add_argument("--output")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, ising.IsingError, quantum.QuantumError, chains.ChainError,
            cache_io.CacheFormatError, stats.StatsError, spectral.SpectralError, clusters.ClusterError) as exc:
        print(f"qemcmc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
