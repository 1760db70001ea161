"""
End-to-end runs: simulate, expand, sPCA, invariants, solve, evaluate, EM.

``run_pipeline`` drives the file-based stages used by the command line; each
stage reads its inputs from the output directory, writes its outputs there
and appends one entry to ``manifest.json``.  ``run_experiment`` performs the
same computation in memory, streaming observations in chunks.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .em_baseline import EMOptions, em_classify
from .evaluation import evaluate_estimate
from .invariants import InvariantIndex, MixedInvariants, estimate_mixed_invariants
from .observation_model import (
    MixtureSpec,
    estimate_noise_variance,
    generate_phantoms,
    sample_observations,
    sigma_for_snr,
    snr,
)
from .solver import SolverOptions, solve
from .spca import DEFAULT_THRESHOLD, SPCABasis, fit_spca, project, reconstruct_coeffs
from .stackfile import RunManifest, StackFileError, read_stack, write_stack
from .steerable_basis import build_basis

logger = logging.getLogger(__name__)

STAGES = ("simulate", "expand", "spca", "invariants", "solve", "evaluate", "em")
CHUNK = 1000


class ConfigError(ValueError):
    """Invalid run configuration."""


class NonConvergence(RuntimeError):
    """Solver gradient tolerance unmet after all restarts."""


DEFAULTS = {
    "pi": "uniform",
    "snr": None,
    "sigma": None,
    "shift_radius": 0.0,
    "bandlimit": 0.5,
    "threshold": DEFAULT_THRESHOLD,
    "noise": "estimate",
    "seed": 0,
    "stages": list(STAGES[:-1]),
    "out": "run",
    "solver": {
        "restarts": 5,
        "max_iterations": 10_000,
        "gradient_tolerance": 1e-8,
        "method": "conjugate-gradient",
        "fix_pi": False,
        "workers": 1,
    },
    "em": {"R": [], "max_iterations": 200, "tolerance": 1e-8},
}


def _merge(base, extra):
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def _require_int(cfg, key, minimum):
    v = cfg.get(key)
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"field '{key}' must be an integer >= {minimum}, got {v!r}")


def validate_config(raw):
    """Fill defaults and check every field; raises :class:`ConfigError`."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = set(raw) - set(DEFAULTS) - {"K", "L", "N"}
    if unknown:
        raise ConfigError(f"unknown field(s): {', '.join(sorted(unknown))}")
    cfg = _merge(DEFAULTS, raw)
    for key in ("K", "L", "N"):
        if key not in raw:
            raise ConfigError(f"field '{key}' is required")
    _require_int(cfg, "K", 1)
    _require_int(cfg, "L", 9)
    _require_int(cfg, "N", 2)
    _require_int(cfg, "seed", 0)
    if cfg["L"] % 2 == 0:
        raise ConfigError("field 'L' must be odd")
    if cfg["N"] < cfg["K"]:
        raise ConfigError("field 'N' must be at least K")
    if (cfg["snr"] is None) == (cfg["sigma"] is None):
        raise ConfigError("exactly one of fields 'snr' and 'sigma' must be given")
    if cfg["snr"] is not None and not (isinstance(cfg["snr"], (int, float)) and cfg["snr"] > 0):
        raise ConfigError("field 'snr' must be positive")
    if cfg["sigma"] is not None and not (isinstance(cfg["sigma"], (int, float)) and cfg["sigma"] > 0):
        raise ConfigError("field 'sigma' must be positive")
    pi = cfg["pi"]
    if pi == "estimate":
        # simulate uniform classes, estimate the weights
        if cfg["solver"]["fix_pi"] is True:
            raise ConfigError("field 'pi' is \"estimate\" but 'solver.fix_pi' is true")
        pi = "uniform"
    if pi == "uniform":
        pi = [1.0 / cfg["K"]] * cfg["K"]
    if not isinstance(pi, list) or len(pi) != cfg["K"] or not all(isinstance(p, (int, float)) for p in pi):
        raise ConfigError(f"field 'pi' must be \"uniform\", \"estimate\" or a list of {cfg['K']} numbers")
    if any(p <= 0 for p in pi):
        raise ConfigError("field 'pi' must be strictly positive")
    if abs(sum(pi) - 1) > 1e-9:
        raise ConfigError(f"field 'pi' must sum to 1 (sums to {sum(pi):.6g})")
    cfg["pi"] = [float(p) for p in pi]
    if not isinstance(cfg["shift_radius"], (int, float)) or cfg["shift_radius"] < 0:
        raise ConfigError("field 'shift_radius' must be nonnegative")
    if not isinstance(cfg["bandlimit"], (int, float)) or not 0 < cfg["bandlimit"] <= 0.5:
        raise ConfigError("field 'bandlimit' must be in (0, 0.5]")
    if not isinstance(cfg["threshold"], (int, float)) or cfg["threshold"] <= 0:
        raise ConfigError("field 'threshold' must be positive")
    if cfg["noise"] not in ("estimate", "known"):
        raise ConfigError("field 'noise' must be \"estimate\" or \"known\"")
    if not isinstance(cfg["stages"], list) or not set(cfg["stages"]) <= set(STAGES):
        raise ConfigError(f"field 'stages' must be a list drawn from {list(STAGES)}")
    s = cfg["solver"]
    unknown = set(s) - set(DEFAULTS["solver"]) - {"seed"}
    if unknown:
        raise ConfigError(f"unknown field(s) in 'solver': {', '.join(sorted(unknown))}")
    try:
        solver_options(cfg)
    except ValueError as err:
        raise ConfigError(f"field 'solver': {err}") from None
    if not isinstance(s["fix_pi"], bool):
        raise ConfigError("field 'solver.fix_pi' must be true or false")
    e = cfg["em"]
    if not isinstance(e.get("R"), list) or not all(isinstance(r, int) and r >= 1 for r in e["R"]):
        raise ConfigError("field 'em.R' must be a list of positive integers")
    return cfg


def load_config(path):
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    return validate_config(raw)


def seeds_of(cfg):
    base = cfg["seed"]
    return {
        "phantoms": base,
        "data": base + 1,
        "solver": cfg["solver"].get("seed", base + 2),
        "em": base + 3,
    }


def solver_options(cfg):
    s = cfg["solver"]
    return SolverOptions(
        restarts=s["restarts"],
        max_iterations=s["max_iterations"],
        gradient_tolerance=s["gradient_tolerance"],
        method=s["method"],
        fix_pi=np.array(cfg["pi"]) if s["fix_pi"] else None,
        seed=seeds_of(cfg)["solver"],
        workers=s.get("workers", 1),
    )


# --- persistence helpers -------------------------------------------------


def save_spca(path, basis):
    blocks = [V.astype(np.complex64).ravel() for V in basis.eigvecs]
    payload = np.concatenate(blocks) if blocks else np.zeros(0, np.complex64)
    fb = basis.fb
    meta = {
        "L": fb.L,
        "bandlimit": fb.bandlimit,
        "basis_hash": fb.digest,
        "counts": basis.counts.tolist(),
        "p_k": fb.p_k[: len(basis.counts)].tolist(),
        "mean": basis.mean_coeffs[fb.block(0)].real.tolist(),
        "eigvals": [w.tolist() for w in basis.eigvals],
        "sigma2": basis.sigma2,
        "n_samples": basis.n_samples,
        "threshold": basis.threshold,
    }
    write_stack(path, payload, meta)


def load_spca(path):
    payload, meta = read_stack(path, with_meta=True)
    fb = build_basis(meta["L"], meta["bandlimit"])
    if fb.digest != meta["basis_hash"]:
        raise StackFileError("sPCA file was written with a different Fourier-Bessel basis")
    eigvecs, pos = [], 0
    for p, r in zip(meta["p_k"], meta["counts"]):
        eigvecs.append(payload[pos : pos + p * r].astype(complex).reshape(p, r))
        pos += p * r
    if pos != payload.size:
        raise StackFileError("sPCA payload does not match its block sizes")
    mean = np.zeros(fb.count, dtype=complex)
    mean[fb.block(0)] = meta["mean"]
    return SPCABasis(
        fb,
        mean,
        eigvecs,
        [np.array(w) for w in meta["eigvals"]],
        np.array(meta["counts"], dtype=int),
        meta["sigma2"],
        meta["n_samples"],
        meta["threshold"],
    )


def _rounded_basis(basis):
    """Basis with eigenvectors rounded to their on-disk precision."""
    vecs = [V.astype(np.complex64).astype(complex) for V in basis.eigvecs]
    return SPCABasis(
        basis.fb, basis.mean_coeffs, vecs, basis.eigvals, basis.counts,
        basis.sigma2, basis.n_samples, basis.threshold,
    )


def save_invariants(path, inv, basis_hash):
    payload = np.concatenate([inv.m.astype(complex), inv.p, inv.b])
    meta = {
        "ks": inv.index.ks.tolist(),
        "sizes": [inv.m.size, inv.p.size, inv.b.size],
        "n_samples": inv.n_samples,
        "sigma2": inv.sigma2,
        "basis_hash": basis_hash,
    }
    write_stack(path, payload, meta)


def load_invariants(path):
    payload, meta = read_stack(path, with_meta=True)
    payload = payload.astype(complex)
    index = InvariantIndex(np.array(meta["ks"], dtype=int))
    n1, n2, n3 = meta["sizes"]
    if (n1, n2, n3) != (index.mean_idx.size, index.pow_i1.size, index.bis_i1.size) or payload.size != n1 + n2 + n3:
        raise StackFileError("invariants payload does not match its layout")
    return MixedInvariants(
        payload[:n1].real.copy(),
        payload[n1 : n1 + n2].copy(),
        payload[n1 + n2 :].copy(),
        index,
        n_samples=meta["n_samples"],
        sigma2=meta["sigma2"],
        term_counts=(n1, n2, n3),
    )


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True))


def _read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise StackFileError(f"missing input {path}; run the earlier stages first") from None


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def _stack(path, **kw):
    try:
        return read_stack(path, **kw)
    except FileNotFoundError:
        raise StackFileError(f"missing input {path}; run the earlier stages first") from None


# --- stages --------------------------------------------------------------


def stage_simulate(cfg, out):
    seeds = seeds_of(cfg)
    K, L, N = cfg["K"], cfg["L"], cfg["N"]
    phantoms = generate_phantoms(K, L, seeds["phantoms"])
    sigma = cfg["sigma"] if cfg["sigma"] is not None else sigma_for_snr(phantoms, cfg["snr"])
    spec = MixtureSpec(K, np.array(cfg["pi"]), sigma, cfg["shift_radius"])
    obs = sample_observations(phantoms, spec, N, seeds["data"], dtype=np.float32)
    meta = {"L": L, "K": K, "sigma": sigma, "seed": seeds["data"]}
    write_stack(out / "phantoms.stk", phantoms, {"L": L, "K": K, "seed": seeds["phantoms"]})
    write_stack(out / "observations.stk", obs.observations, meta)
    truth = {
        "pi": cfg["pi"],
        "sigma": sigma,
        "snr": snr(phantoms, sigma),
        "labels": obs.true_labels.tolist(),
        "angles": obs.true_angles.tolist(),
        "shifts": obs.true_shifts.tolist(),
    }
    _write_json(out / "truth.json", truth)
    outputs = [out / "phantoms.stk", out / "observations.stk", out / "truth.json"]
    return [], outputs, {"sigma": sigma, "snr": truth["snr"]}


def stage_expand(cfg, out):
    obs = _stack(out / "observations.stk")
    truth = _read_json(out / "truth.json")
    fb = build_basis(cfg["L"], cfg["bandlimit"])
    if obs.ndim != 3 or obs.shape[1:] != (fb.L, fb.L):
        raise StackFileError(f"observations have shape {obs.shape}, expected (N, {fb.L}, {fb.L})")
    coeffs = np.empty((obs.shape[0], fb.count), dtype=np.complex64)
    for s in range(0, obs.shape[0], CHUNK):
        coeffs[s : s + CHUNK] = fb.expand(obs[s : s + CHUNK].astype(float))
    if cfg["noise"] == "estimate":
        sigma2 = estimate_noise_variance(obs)
    else:
        sigma2 = float(truth["sigma"]) ** 2
    write_stack(out / "fb_coeffs.stk", coeffs, {"L": fb.L, "basis_hash": fb.digest, "sigma2": sigma2})
    return (
        [out / "observations.stk"],
        [out / "fb_coeffs.stk"],
        {"sigma2": sigma2, "fb_count": fb.count},
    )


def stage_spca(cfg, out):
    coeffs, meta = _stack(out / "fb_coeffs.stk", with_meta=True)
    fb = build_basis(cfg["L"], cfg["bandlimit"])
    if meta.get("basis_hash") != fb.digest:
        raise StackFileError("coefficients were expanded in a different basis")
    basis = _rounded_basis(fit_spca(coeffs, meta["sigma2"], fb, cfg["threshold"]))
    alpha = project(coeffs, basis)
    save_spca(out / "spca_basis.stk", basis)
    write_stack(out / "spca_coeffs.stk", alpha, {"L": fb.L, "basis_hash": fb.digest, "sigma2": meta["sigma2"]})
    return (
        [out / "fb_coeffs.stk"],
        [out / "spca_basis.stk", out / "spca_coeffs.stk"],
        {"M": basis.count, "k_max": basis.k_max},
    )


def stage_invariants(cfg, out):
    alpha, meta = _stack(out / "spca_coeffs.stk", with_meta=True)
    basis = load_spca(out / "spca_basis.stk")
    inv = estimate_mixed_invariants(alpha, meta["sigma2"], basis)
    save_invariants(out / "invariants.stk", inv, basis.fb.digest)
    return (
        [out / "spca_coeffs.stk", out / "spca_basis.stk"],
        [out / "invariants.stk"],
        {"terms": list(inv.term_counts)},
    )


def stage_solve(cfg, out):
    inv = load_invariants(out / "invariants.stk")
    basis = load_spca(out / "spca_basis.stk")
    est = solve(inv, cfg["K"], solver_options(cfg))
    write_stack(out / "estimate_coeffs.stk", est.coeffs, {"K": cfg["K"], "basis_hash": basis.fb.digest})
    images = basis.fb.synthesize(reconstruct_coeffs(est.coeffs, basis))
    write_stack(out / "estimate_images.stk", images, {"K": cfg["K"], "L": cfg["L"]})
    summary = {
        "pi_hat": est.pi_hat.tolist(),
        "objective_value": est.objective_value,
        "gradient_norm": est.gradient_norm,
        "iterations": est.iterations,
        "restarts_used": est.restarts_used,
        "converged": bool(est.converged),
    }
    _write_json(out / "estimate.json", summary)
    return (
        [out / "invariants.stk", out / "spca_basis.stk"],
        [out / "estimate_coeffs.stk", out / "estimate_images.stk", out / "estimate.json"],
        summary,
    )


def _truth_after_spca(phantoms, basis):
    fb = basis.fb
    return reconstruct_coeffs(project(fb.expand(phantoms), basis), basis)


def stage_evaluate(cfg, out):
    phantoms = _stack(out / "phantoms.stk").astype(float)
    basis = load_spca(out / "spca_basis.stk")
    est = _stack(out / "estimate_coeffs.stk").astype(complex)
    summary = _read_json(out / "estimate.json")
    truth = _read_json(out / "truth.json")
    fb = basis.fb
    report = evaluate_estimate(
        phantoms,
        _truth_after_spca(phantoms, basis),
        reconstruct_coeffs(est, basis),
        fb,
        pi=np.array(cfg["pi"]),
        pi_hat=np.array(summary["pi_hat"]),
    )
    rep = report.to_dict()
    rep["M"] = basis.count
    _write_json(out / "report.json", rep)
    _write_csv(
        out / "error_vs_snr.csv",
        ["snr", "spca_error", "estimation_error", "dist_r", "tv_distance"],
        [[truth["snr"], report.spca_error, report.estimation_error, report.dist_r, report.tv_distance]],
    )
    return (
        [out / "phantoms.stk", out / "spca_basis.stk", out / "estimate_coeffs.stk", out / "estimate.json"],
        [out / "report.json", out / "error_vs_snr.csv"],
        {k: rep[k] for k in ("dist_r", "spca_error", "estimation_error", "tv_distance")},
    )


def stage_em(cfg, out):
    alpha, meta = _stack(out / "spca_coeffs.stk", with_meta=True)
    alpha = alpha.astype(complex)
    basis = load_spca(out / "spca_basis.stk")
    phantoms = _stack(out / "phantoms.stk").astype(float)
    truth_spca = _truth_after_spca(phantoms, basis)
    rows, metrics, outputs = [], {}, []
    for R in cfg["em"]["R"]:
        opts = EMOptions(
            K=cfg["K"], R=R, sigma2=meta["sigma2"], max_iterations=cfg["em"]["max_iterations"],
            tolerance=cfg["em"]["tolerance"], seed=seeds_of(cfg)["em"],
            fix_weights=np.array(cfg["pi"]) if cfg["solver"]["fix_pi"] else None,
        )
        res = em_classify(alpha, opts, basis)
        rep = evaluate_estimate(
            phantoms, truth_spca, reconstruct_coeffs(res.coeffs, basis), basis.fb,
            pi=np.array(cfg["pi"]), pi_hat=res.weights,
        )
        monotone = bool(np.all(np.diff(res.log_likelihood) >= -1e-9 * np.abs(res.log_likelihood[:-1])))
        rows.append([R, rep.estimation_error, rep.tv_distance, res.iterations, int(monotone)])
        path = out / f"em_R{R}.stk"
        write_stack(path, res.coeffs, {"R": R, "weights": res.weights.tolist()})
        outputs.append(path)
        metrics[f"R{R}"] = {
            "estimation_error": rep.estimation_error,
            "wall_time": res.wall_time,
            "iterations": res.iterations,
            "monotone": monotone,
        }
    _write_csv(out / "em_vs_R.csv", ["R", "estimation_error", "tv_distance", "iterations", "monotone"], rows)
    outputs.append(out / "em_vs_R.csv")
    return [out / "spca_coeffs.stk", out / "spca_basis.stk"], outputs, metrics


STAGE_FUNCS = {
    "simulate": stage_simulate,
    "expand": stage_expand,
    "spca": stage_spca,
    "invariants": stage_invariants,
    "solve": stage_solve,
    "evaluate": stage_evaluate,
    "em": stage_em,
}


def run_stages(cfg, stages, out, command="pipeline"):
    """
    Run ``stages`` in order, appending each to the run manifest.

    :raises NonConvergence: after all stages if the solver missed its tolerance.
    """
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(out / "manifest.json", command=command, config=cfg, seeds=seeds_of(cfg))
    results = {}
    for name in STAGES:
        if name not in stages:
            continue
        t0 = time.perf_counter()
        inputs, outputs, metrics = STAGE_FUNCS[name](cfg, out)
        manifest.add_stage(name, inputs, outputs, time.perf_counter() - t0, metrics)
        results[name] = metrics
        logger.info("stage %s done in %.2f s", name, time.perf_counter() - t0)
    if "solve" in results and not results["solve"]["converged"]:
        raise NonConvergence(
            f"gradient norm {results['solve']['gradient_norm']:.3g} above tolerance after all restarts"
        )
    return results


def run_pipeline(config_path, out=None, overrides=None):
    """
    Run the configured stages; returns the process exit code.

    0 success, 1 config error, 2 data/format error, 3 solver non-convergence.
    """
    try:
        cfg = load_config(config_path)
        if overrides:
            cfg = validate_config(_merge(cfg, overrides))
        run_stages(cfg, cfg["stages"], out or cfg["out"])
    except ConfigError as err:
        logger.error("config error: %s", err)
        return 1
    except StackFileError as err:
        logger.error("data error: %s", err)
        return 2
    except NonConvergence as err:
        logger.error("%s", err)
        return 3
    return 0


# --- in-memory experiments -----------------------------------------------


@dataclass
class ExperimentResult:
    phantoms: np.ndarray
    basis: SPCABasis
    alpha: np.ndarray
    invariants: MixedInvariants
    estimate: object
    report: object
    truth_spca: np.ndarray
    sigma2: float
    labels: np.ndarray
    timings: dict = field(default_factory=dict)


def simulate_coefficients(phantoms, spec, N, seed, fb, chunk=CHUNK):
    """
    Draw N observations in chunks and return their Fourier-Bessel
    coefficients (complex64), the pooled corner-pixel noise variance and labels.
    """
    coeffs = np.empty((N, fb.count), dtype=np.complex64)
    labels = np.empty(N, dtype=int)
    outside = ~fb.mask
    total, sq, count = 0.0, 0.0, 0
    for s in range(0, N, chunk):
        n = min(chunk, N - s)
        obs = sample_observations(phantoms, spec, n, seed, start=s)
        coeffs[s : s + n] = fb.expand(obs.observations)
        labels[s : s + n] = obs.true_labels
        corners = obs.observations[:, outside]
        total += corners.sum()
        sq += np.sum(corners**2)
        count += corners.size
    mean = total / count
    sigma2 = (sq - count * mean**2) / (count - 1)
    return coeffs, float(sigma2), labels


def run_experiment(
    K, L, N, snr_value, pi=None, seed=0, phantoms=None, shift_radius=0.0, estimate_pi=False,
    solver=None, known_noise=False,
):
    """
    In-memory version of the pipeline, returning every intermediate.

    :param pi: True mixing weights (default uniform).
    :param estimate_pi: Estimate pi; otherwise the solver holds it at ``pi``.
    :param solver: :class:`SolverOptions` overrides as a dict.
    """
    timings = {}
    pi = np.full(K, 1.0 / K) if pi is None else np.asarray(pi, dtype=float)
    if phantoms is None:
        phantoms = generate_phantoms(K, L, seed)
    fb = build_basis(L)
    sigma = sigma_for_snr(phantoms, snr_value)
    spec = MixtureSpec(K, pi, sigma, shift_radius)

    t0 = time.perf_counter()
    coeffs, sigma2, labels = simulate_coefficients(phantoms, spec, N, seed + 1, fb)
    if known_noise:
        sigma2 = sigma**2
    timings["simulate_expand"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    basis = fit_spca(coeffs, sigma2, fb)
    alpha = project(coeffs, basis)
    del coeffs
    timings["spca"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    inv = estimate_mixed_invariants(alpha, sigma2, basis)
    timings["invariants"] = time.perf_counter() - t0

    opts = SolverOptions(seed=seed + 2, fix_pi=None if estimate_pi else pi, **(solver or {}))
    t0 = time.perf_counter()
    est = solve(inv, K, opts)
    timings["solve"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    truth_spca = _truth_after_spca(phantoms, basis)
    report = evaluate_estimate(
        phantoms, truth_spca, reconstruct_coeffs(est.coeffs, basis), fb, pi=pi, pi_hat=est.pi_hat
    )
    timings["evaluate"] = time.perf_counter() - t0
    logger.info(
        "experiment K=%d L=%d N=%d: M=%d spca=%.4f est=%.4f tv=%.4g",
        K, L, N, basis.count, report.spca_error, report.estimation_error, report.tv_distance,
    )
    return ExperimentResult(phantoms, basis, alpha, inv, est, report, truth_spca, sigma2, labels, timings)
