"""Configuration loading, experiment orchestration, and result emission.

One JSON config drives every subcommand; all randomness derives from its
single seed (each subcommand hashes the seed with a fixed tag, replicas hash
the subcommand seed with their index).  CSV floats are written with 17
significant digits so reruns diff clean.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import clt_harness, cocycle_engine, kakutani, stationary
from .errors import (
    CocycleError,
    MissingArtifact,
    ParseError,
    ValidationError,
)
from .lie_sl import EdgeCocycle, Flag
from .markov_sft import GraphSpec, MarkovChain, validate_graph

SEED_TAGS = {
    "lyapunov": 1,
    "induce": 2,
    "stationary": 3,
    "stationary-replica": 33,
    "centering": 4,
    "clt": 5,
    "lindeberg": 6,
    "phi": 7,
    "bootstrap": 8,
}

DEFAULT_PARAMS = {
    "lyapunov": {"n": 2_000_000, "burn_in": 1000},
    "induce": {"vertex": None, "max_len": 16, "loops": 200_000,
               "tau_grid": [0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.4, 0.5, 0.75, 1.0]},
    "stationary": {"burn_in": 10_000, "samples": 10_000, "thin": 5},
    "centering": {"flags": 10, "h0_samples": None},
    "clt": {"n": 2000, "replicas": 10_000, "phi_samples": 512},
    "lindeberg": {"epsilon": 0.5, "n_grid": [250, 4000], "replicas": 200},
}


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    graph: GraphSpec
    kernel: np.ndarray
    cocycle: EdgeCocycle
    dim: int
    seed: int
    flag: Flag
    flag_spec: object
    params: dict
    chain: MarkovChain
    edge_assignments: list


def _merged_params(user: dict) -> dict:
    out = {}
    for key, defaults in DEFAULT_PARAMS.items():
        block = dict(defaults)
        block.update(user.get(key, {}))
        out[key] = block
    return out


def load_config(path) -> ExperimentConfig:
    """Parse and fully validate an experiment config file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno}: {exc.msg}") from exc

    for req in ("graph", "kernel", "edge_matrices", "dimension", "seed"):
        if req not in raw:
            raise ValidationError(f"config is missing required field {req!r}")
    g = raw["graph"]
    vertices = [str(v) for v in g.get("vertices", [])]
    directed = set()
    for pair in g.get("edges", []):
        u, v = str(pair[0]), str(pair[1])
        directed.add((u, v))
        directed.add((v, u))
    graph = GraphSpec.make(vertices, directed)
    validate_graph(graph)

    dim = int(raw["dimension"])
    seed = int(raw["seed"])
    if not 0 <= seed < 2 ** 64:
        raise ValidationError("seed must be a 64-bit unsigned integer")

    assignments = []
    for item in raw["edge_matrices"]:
        u, v = (str(x) for x in item["edge"])
        m = np.array(item["matrix"], dtype=float)
        if m.shape != (dim, dim):
            raise ValidationError(
                f"matrix for edge ({u}, {v}) has shape {m.shape}, expected ({dim}, {dim})"
            )
        assignments.append((u, v, m))
    cocycle = EdgeCocycle.from_unordered(graph, assignments)

    chain = MarkovChain.build(graph, raw["kernel"])

    flag_spec = raw.get("flag", "standard")
    if flag_spec == "standard":
        flag = Flag.standard(dim)
    else:
        flag = Flag.from_matrix(np.array(flag_spec, dtype=float))

    return ExperimentConfig(
        graph=graph,
        kernel=chain.kernel,
        cocycle=cocycle,
        dim=dim,
        seed=seed,
        flag=flag,
        flag_spec=flag_spec,
        params=_merged_params(raw.get("params", {})),
        chain=chain,
        edge_assignments=assignments,
    )


def emit_config(config: ExperimentConfig) -> dict:
    """Round-trippable JSON document for a loaded config."""
    seen = set()
    unordered = []
    for u, v, m in config.edge_assignments:
        key = frozenset(((u, v), (v, u)))
        if key not in seen:
            seen.add(key)
            unordered.append({"edge": [u, v], "matrix": m.tolist()})
    return {
        "graph": {
            "vertices": list(config.graph.vertices),
            "edges": sorted({tuple(sorted(e)) for e in config.graph.edges}),
        },
        "kernel": config.kernel.tolist(),
        "edge_matrices": unordered,
        "dimension": config.dim,
        "seed": config.seed,
        "flag": config.flag_spec if config.flag_spec == "standard"
        else np.asarray(config.flag_spec).tolist(),
        "params": config.params,
    }


def _rng(config: ExperimentConfig, tag: str) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((config.seed, SEED_TAGS[tag])))


def _sub_seed(config: ExperimentConfig, tag: str) -> int:
    ss = np.random.SeedSequence((config.seed, SEED_TAGS[tag]))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _write_csv(path: Path, header, rows):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _write_json(path: Path, payload):
    class _Encoder(json.JSONEncoder):
        def default(self, obj):
            if isinstance(obj, np.ndarray):
                return obj.tolist()
            if isinstance(obj, (np.floating, np.integer)):
                return obj.item()
            return super().default(obj)

    path.write_text(json.dumps(payload, indent=2, sort_keys=True, cls=_Encoder) + "\n")


def _load_json(path: Path, artifact: str):
    if not path.exists():
        raise MissingArtifact(f"required artifact {artifact} not found at {path}")
    return json.loads(path.read_text())


def cmd_validate(config, out_dir, threads=1):
    diag = validate_graph(config.graph)
    payload = {
        "connected": diag.connected,
        "loop_gcd": diag.loop_gcd,
        "stationary": dict(zip(config.graph.vertices, config.chain.stationary)),
    }
    _write_json(out_dir / "validate.json", payload)
    pi_str = ", ".join(f"{v}={p:.6f}" for v, p in
                       zip(config.graph.vertices, config.chain.stationary))
    print(f"stationary vector: {pi_str}")
    print(f"loop gcd: {diag.loop_gcd}")
    return payload


def cmd_lyapunov(config, out_dir, threads=1):
    p = config.params["lyapunov"]
    est = cocycle_engine.estimate_lyapunov(
        config.chain, config.cocycle, int(p["n"]), int(p["burn_in"]),
        _rng(config, "lyapunov"))
    payload = {
        "lambda_hat": est.lambda_hat,
        "standard_errors": est.standard_errors,
        "steps": est.steps,
        "simplicity_margin": cocycle_engine.simplicity_margin(est.lambda_hat),
    }
    _write_json(out_dir / "lyapunov.json", payload)
    print(f"lambda_hat = {est.lambda_hat}  (se {est.standard_errors})")
    return payload


def _lyapunov_estimate(config, out_dir) -> cocycle_engine.LyapunovEstimate:
    path = out_dir / "lyapunov.json"
    if path.exists():
        data = json.loads(path.read_text())
        return cocycle_engine.LyapunovEstimate(
            lambda_hat=np.array(data["lambda_hat"]),
            standard_errors=np.array(data["standard_errors"]),
            steps=int(data["steps"]),
        )
    cmd_lyapunov(config, out_dir)
    return _lyapunov_estimate(config, out_dir)


def cmd_induce(config, out_dir, threads=1):
    p = config.params["induce"]
    vertex = p["vertex"] or config.graph.vertices[0]
    law = kakutani.enumerate_first_returns(
        config.chain, vertex, int(p["max_len"]), f=config.cocycle)
    pi_v = float(config.chain.stationary[config.chain.index(vertex)])
    kac = kakutani.kac_statistic(law, pi_v)
    fit = kakutani.tail_decay_fit(law)
    probe = kakutani.exponential_moment_probe(law, p["tau_grid"])
    induced = kakutani.induced_lyapunov(
        law, int(p["loops"]), _rng(config, "induce"),
        chain=config.chain, f=config.cocycle)
    lyap = _lyapunov_estimate(config, out_dir)
    prop = kakutani.proportionality_check(lyap, induced, pi_v)

    _write_csv(out_dir / "induced_law.csv",
               ["loop", "length", "probability", "log_norm"],
               [[">".join(l.vertices), l.length, _fmt(l.probability),
                 _fmt(np.log(np.linalg.norm(l.matrix, 2)))] for l in law.loops])
    payload = {
        "vertex": vertex,
        "tail_mass": law.tail_mass,
        "n_loops": len(law.loops),
        "kac": kac,
        "tail_fit": fit,
        "moment_probe": probe,
        "induced_lambda": induced.lambda_hat,
        "induced_se": induced.standard_errors,
        "proportionality": {k: v for k, v in prop.items()},
    }
    _write_json(out_dir / "induce.json", payload)
    print(f"mean return {kac['mean_return']:.6f} vs 1/pi = {1 / pi_v:.6f}; "
          f"tail lambda_hat = {fit['lambda_hat']:.4f}")
    return payload


def _fiber_measures(config, out_dir):
    p = config.params["stationary"]
    fwd = stationary.estimate_fiber_measures(
        config.chain, config.cocycle, "forward", int(p["burn_in"]),
        int(p["samples"]), _rng(config, "stationary"), thin=int(p["thin"]))
    bwd = stationary.estimate_fiber_measures(
        config.chain, config.cocycle, "backward", int(p["burn_in"]),
        int(p["samples"]), _rng(config, "stationary"), thin=int(p["thin"]))
    return fwd, bwd


def _export_fiber(measure, chain, path):
    rows = []
    for vi, v in enumerate(chain.graph.vertices):
        for q in measure.samples[vi]:
            rows.append([v] + [_fmt(x) for x in q.flatten(order="F")])
    d = measure.dim
    header = ["vertex"] + [f"q{i}{j}" for j in range(d) for i in range(d)]
    _write_csv(path, header, rows)


def cmd_stationary(config, out_dir, threads=1):
    fwd, bwd = _fiber_measures(config, out_dir)
    rng = _rng(config, "stationary-replica")
    res_f = stationary.stationarity_residual(fwd, config.chain, config.cocycle, rng)
    res_b = stationary.stationarity_residual(bwd, config.chain, config.cocycle, rng)
    drift = stationary.lyapunov_from_stationary(fwd, config.chain, config.cocycle)
    _export_fiber(fwd, config.chain, out_dir / "fiber_forward.csv")
    _export_fiber(bwd, config.chain, out_dir / "fiber_backward.csv")
    payload = {
        "forward_residuals": res_f,
        "backward_residuals": res_b,
        "vertex_counts_forward": dict(zip(config.graph.vertices,
                                          fwd.vertex_counts())),
        "drift_from_stationary": drift.value,
        "drift_se": drift.standard_errors,
    }
    _write_json(out_dir / "stationary.json", payload)
    worst = max(abs(r["zscore"]) for r in res_f.values())
    print(f"worst forward stationarity z-score: {worst:.2f}")
    return payload


def cmd_centering(config, out_dir, threads=1):
    fwd, bwd = _fiber_measures(config, out_dir)
    lyap = _lyapunov_estimate(config, out_dir)
    centering = stationary.build_centering(config.chain, config.cocycle, bwd, lyap)
    p = config.params["centering"]
    rng = _rng(config, "centering")
    flags = [Flag.random(config.dim, rng) for _ in range(int(p["flags"]))]
    rows = []
    worst = 0.0
    for u in config.graph.vertices:
        for fi, flag in enumerate(flags):
            r, se = stationary.martingale_residual(
                config.chain, config.cocycle, centering, u, flag,
                max_samples=p["h0_samples"])
            z = float(np.linalg.norm(r) / max(np.linalg.norm(se), 1e-300))
            worst = max(worst, z)
            rows.append([u, fi] + [_fmt(x) for x in r] + [_fmt(x) for x in se])
    _write_csv(out_dir / "martingale_residuals.csv",
               ["vertex", "flag"] + [f"r{i}" for i in range(config.dim)]
               + [f"se{i}" for i in range(config.dim)], rows)
    _write_csv(out_dir / "l0_table.csv",
               ["u", "v"] + [f"l0_{i}" for i in range(config.dim)],
               [[u, v] + [_fmt(x) for x in val]
                for (u, v), val in sorted(centering.l0_table.items())])
    payload = {
        "fit_residual": centering.fit_residual,
        "raw_fit_residual": centering.raw_fit_residual,
        "psi": {v: val for v, val in centering.psi.items()},
        "worst_residual_z": worst,
        "convention": centering.convention,
    }
    _write_json(out_dir / "centering.json", payload)
    print(f"potential fit residual {centering.fit_residual:.3e}; "
          f"worst martingale z {worst:.2f}")
    return payload


def cmd_clt(config, out_dir, threads=1):
    p = config.params["clt"]
    lyap = _lyapunov_estimate(config, out_dir)
    n = int(p["n"])
    replicas = int(p["replicas"])
    samples = clt_harness.run_clt(
        config.chain, config.cocycle, n, replicas, config.flag, lyap,
        _sub_seed(config, "clt"), threads=threads)

    _write_csv(out_dir / "samples.csv",
               ["replica"] + [f"v{i}" for i in range(config.dim)]
               + [f"w{i}" for i in range(config.dim)] + ["final_vertex"],
               [[r] + [_fmt(x) for x in samples.v_samples[r]]
                + [_fmt(x) for x in samples.w_samples[r]]
                + [samples.vertex_names[samples.final_vertices[r]]]
                for r in range(replicas)])

    est_v = clt_harness.covariance_estimate(samples.v_samples)
    est_w = clt_harness.covariance_estimate(samples.w_samples)
    boot_rng = _rng(config, "bootstrap")
    se_v, se_eig = clt_harness.bootstrap_covariance_se(samples.v_samples, boot_rng)
    payload = {
        "n": n,
        "replicas": replicas,
        "phi_v": est_v.tensor.matrix,
        "phi_w": est_w.tensor.matrix,
        "phi_v_bootstrap_se": se_v,
        "min_eig_on_a": est_v.min_eig_on_a,
        "min_eig_bootstrap_se": se_eig,
        "degenerate": est_v.degenerate,
    }

    if est_v.degenerate:
        payload["note"] = "covariance degenerate on the sum-zero subspace; no Gaussian fit reported"
        _write_json(out_dir / "covariance.json", payload)
        print("covariance degenerate; skipping normality report")
        return payload

    fwd, bwd = _fiber_measures(config, out_dir)
    centering = stationary.build_centering(config.chain, config.cocycle, bwd, lyap)
    phi_int, phi_int_se = clt_harness.phi_integral_estimate(
        config.chain, config.cocycle, centering, int(p["phi_samples"]),
        _rng(config, "phi"))
    payload["phi_integral"] = phi_int.matrix
    payload["phi_integral_se"] = phi_int_se
    _write_json(out_dir / "covariance.json", payload)

    rows_v = clt_harness.normality_report(samples.v_samples, est_v.tensor)
    rows_w = clt_harness.normality_report(samples.w_samples, est_w.tensor)
    _write_csv(out_dir / "normality.csv",
               ["family", "direction", "ks_distance", "skewness", "kurtosis"],
               [["V", r["direction"], _fmt(r["ks_distance"]), _fmt(r["skewness"]),
                 _fmt(r["kurtosis"])] for r in rows_v]
               + [["W", r["direction"], _fmt(r["ks_distance"]), _fmt(r["skewness"]),
                   _fmt(r["kurtosis"])] for r in rows_w])

    qq = clt_harness.qq_table(samples.v_samples, est_v.tensor)
    _write_csv(out_dir / "qq.csv", ["sample_quantile", "normal_quantile"],
               [[_fmt(a), _fmt(b)] for a, b in qq])

    lp = config.params["lindeberg"]
    lind = clt_harness.lindeberg_statistic(
        config.chain, config.cocycle, centering, float(lp["epsilon"]),
        [int(x) for x in lp["n_grid"]], int(lp["replicas"]),
        _sub_seed(config, "lindeberg"))
    _write_csv(out_dir / "lindeberg.csv",
               ["n", "epsilon", "statistic", "exceedances", "sampled_steps"],
               [[r["n"], _fmt(r["epsilon"]), _fmt(r["statistic"]),
                 r["exceedances"], r["sampled_steps"]] for r in lind])

    max_ks = max(r["ks_distance"] for r in rows_v + rows_w)
    payload["max_ks_distance"] = max_ks
    print(f"max KS distance (both families): {max_ks:.4f}")
    return payload


def cmd_report(config, out_dir, threads=1):
    summary = {"covariance": _load_json(out_dir / "covariance.json", "covariance.json")}
    for name in ("validate", "lyapunov", "induce", "stationary", "centering"):
        path = out_dir / f"{name}.json"
        if path.exists():
            summary[name] = json.loads(path.read_text())
    _write_json(out_dir / "summary.json", summary)
    print(f"aggregated {len(summary)} artifact(s) into summary.json")
    return summary


COMMANDS = {
    "validate": cmd_validate,
    "lyapunov": cmd_lyapunov,
    "induce": cmd_induce,
    "stationary": cmd_stationary,
    "centering": cmd_centering,
    "clt": cmd_clt,
    "report": cmd_report,
}


def run(subcommand: str, config: ExperimentConfig, out_dir, threads: int = 1):
    if subcommand not in COMMANDS:
        raise ValidationError(f"unknown subcommand {subcommand!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return COMMANDS[subcommand](config, out_dir, threads=threads)


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cocycle-clt",
        description="Markov-driven matrix cocycle simulator and CLT verification suite",
    )
    parser.add_argument("subcommand", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="experiment config JSON")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config seed")
    parser.add_argument("--threads", type=int, default=1)
    args = parser.parse_args(argv)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        config = load_config(args.config)
        seed = config.seed
        if args.seed is not None:
            seed = args.seed
        env = os.environ.get("COCYCLE_CLT_SEED")
        if env is not None:
            seed = int(env)
        if seed != config.seed:
            config = replace(config, seed=seed)
        run(args.subcommand, config, out_dir, threads=args.threads)
    except CocycleError as exc:
        payload = {"error": type(exc).__name__, "message": str(exc)}
        _write_json(out_dir / "error.json", payload)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
