"""Command-line orchestration: one subcommand per experiment, CSV/JSON outputs plus a manifest."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import platform
import sys
import time
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .config import ConfigError, ExperimentConfig, format_float

logger = logging.getLogger(__name__)

SUBCOMMANDS = ("certify", "flow", "classify", "phase", "amplitude", "fbi-check", "kernel", "dispersion",
               "strichartz", "compare", "evolve")


class CommandFailure(RuntimeError):
    """A subcommand ran but its check failed; carries a machine-readable payload."""

    def __init__(self, message: str, payload: dict):
        super().__init__(message)
        self.payload = payload


# ---------------------------------------------------------------------------
# output helpers
# ---------------------------------------------------------------------------


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format_float(v)
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, header: list, rows: list) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            w.writerow([_cell(v) for v in r])


def _jsonable(v):
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    if isinstance(v, np.ndarray):
        return [_jsonable(x) for x in v.tolist()]
    if isinstance(v, (bool, np.bool_)):
        return bool(v)
    if isinstance(v, (float, np.floating)):
        return float(format_float(v))
    if isinstance(v, (int, np.integer)):
        return int(v)
    return v


def write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# shared builders
# ---------------------------------------------------------------------------


def build_perturbation(cfg: ExperimentConfig):
    from .symbols import builtin_family

    p = cfg.perturbation
    return builtin_family(p.family, dim=p.dim, epsilon=p.epsilon, sigma0=p.sigma0, seminorms=p.seminorms, **p.params)


def build_cutoffs(cfg: ExperimentConfig):
    from .fbi import make_cutoffs

    g = cfg.geometry
    return make_cutoffs(g.xi0, g.delta1, g.delta2, g.delta, g.c0, strict=g.strict)


def _times(cfg: ExperimentConfig, lam: float) -> list:
    from .kernel import dispersion_times

    return list(cfg.t_grid) if cfg.t_grid is not None else dispersion_times(lam, cfg.T)


def _ys(cfg: ExperimentConfig) -> np.ndarray:
    return np.atleast_2d(np.asarray(cfg.grids.xy_inputs, dtype=float))


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_certify(cfg, out, workers):
    pert = build_perturbation(cfg)
    report = pert.report.as_dict()
    report["family"] = pert.name
    report["certified"] = pert.certified
    report["strictly_small"] = pert.strictly_small
    write_json(out / "certify.json", report)
    if not pert.certified:
        raise CommandFailure(f"certification failed at derivative order {report['first_failure']}",
                             {"error": "certification", "first_failure": report["first_failure"]})


def cmd_flow(cfg, out, workers):
    from .flow import PhasePoint, flow_map, integrate_flow, outgoing_seeds, reversal_identity_residual, \
        variational_jacobian

    pert = build_perturbation(cfg)
    n = pert.dim
    seeds = outgoing_seeds(n, cfg.seeds, rng=cfg.seed)
    tol = cfg.tolerances.flow
    horizon = 50.0
    drift = integrate_flow(pert, seeds, (0.0, horizon), tol).energy_drift(pert).max(axis=0)
    xT, xiT = flow_map(pert, seeds, horizon, tol)
    xb, xib = flow_map(pert, PhasePoint(xT, xiT), -horizon, tol)
    rev = np.maximum(np.abs(xb - seeds.alpha_x).max(axis=0), np.abs(xib - seeds.alpha_xi).max(axis=0))
    sym = variational_jacobian(pert, seeds, 5.0, tol).symplectic_defect()
    ident = reversal_identity_residual(pert, seeds, 5.0, tol)
    rows = [[i, *seeds.alpha_x[:, i], *seeds.alpha_xi[:, i], drift[i], rev[i], sym[i], ident[i]]
            for i in range(seeds.alpha_x.shape[1])]
    header = ["seed"] + [f"x{j}" for j in range(n)] + [f"xi{j}" for j in range(n)] + \
        ["energy_drift", "reversal_error", "symplectic_defect", "jacobian_reversal_defect"]
    write_csv(out / "flow.csv", header, rows)


def cmd_classify(cfg, out, workers):
    from .flow import PhasePoint, classify_point, random_seeds

    pert = build_perturbation(cfg)
    n = pert.dim
    seeds = random_seeds(n, cfg.seeds, rng=cfg.seed)
    rows = []
    for i in range(seeds.alpha_x.shape[1]):
        c = classify_point(PhasePoint(seeds.alpha_x[:, i:i + 1], seeds.alpha_xi[:, i:i + 1]), cfg.geometry.c0)
        rows.append([i, *seeds.alpha_x[:, i], *seeds.alpha_xi[:, i], c.label.value, c.outgoing_label.value,
                     "|".join(str(k) for k in c.cases)])
    header = ["seed"] + [f"x{j}" for j in range(n)] + [f"xi{j}" for j in range(n)] + ["label", "outgoing", "cases"]
    write_csv(out / "classify.csv", header, rows)


def _shell_seeds(cfg, count):
    from .flow import PhasePoint

    rng = np.random.default_rng(cfg.seed)
    n = cfg.perturbation.dim
    ax = rng.uniform(-1.0, 1.0, size=(n, count))
    v = rng.normal(size=(n, count))
    axi = v / np.linalg.norm(v, axis=0) * rng.uniform(0.6, 1.9, size=count)
    return PhasePoint(ax, axi)


def cmd_phase(cfg, out, workers):
    from .flow import PhasePoint
    from .phase import on_ray_action_error, residual_slope, transport_phase_jet

    pert = build_perturbation(cfg)
    seeds = _shell_seeds(cfg, min(cfg.seeds, 20))
    rows = []
    for i in range(seeds.alpha_x.shape[1]):
        a = PhasePoint(seeds.alpha_x[:, i:i + 1], seeds.alpha_xi[:, i:i + 1])
        beam = transport_phase_jet(pert, a, (0.0, 30.0), order=cfg.jets.n_jet, tol=cfg.tolerances.phase,
                                   delta=cfg.geometry.delta)
        rows.append([i, on_ray_action_error(beam, np.linspace(0, 30, 31)), residual_slope(beam, 1.0)])
    write_csv(out / "phase.csv", ["seed", "action_error", "residual_slope"], rows)


def cmd_amplitude(cfg, out, workers):
    from .flow import PhasePoint
    from .transport import direct_amplitude, on_ray_amplitude

    pert = build_perturbation(cfg)
    seeds = _shell_seeds(cfg, min(cfg.seeds, 10))
    thetas = np.linspace(0.0, 30.0, 31)
    rows = []
    for i in range(seeds.alpha_x.shape[1]):
        a = PhasePoint(seeds.alpha_x[:, i:i + 1], seeds.alpha_xi[:, i:i + 1])
        ampl = direct_amplitude(pert, a, (0.0, 30.0), n_terms=cfg.jets.n_terms, n0=cfg.jets.n0)
        for lam in cfg.lambdas:
            vals = on_ray_amplitude(ampl, thetas, lam)
            rows += [[i, lam, th, v] for th, v in zip(thetas, vals)]
    write_csv(out / "amplitude.csv", ["seed", "lambda", "theta", "scaled_on_ray_amplitude"], rows)


def cmd_fbi_check(cfg, out, workers):
    from .fbi import SpatialGrid, check_inversion, isometry_error, make_cutoffs, microlocal_mismatch, \
        random_band_limited

    n = cfg.perturbation.dim
    rng = np.random.default_rng(cfg.seed)
    rows = []
    for lam in cfg.lambdas:
        grid = SpatialGrid.for_lambda(n, cfg.grids.half_width, lam) if n == 1 else \
            SpatialGrid.for_lambda(n, 2.0, lam)
        u = random_band_limited(grid, lam, rng)
        rows.append([lam, grid.nodes[0], isometry_error(u, grid, lam), check_inversion(u, grid, lam)])
    write_csv(out / "fbi.csv", ["lambda", "nodes", "isometry_error", "inversion_error"], rows)
    g = cfg.geometry
    fam = make_cutoffs(g.xi0, g.delta1, g.delta2, g.delta, g.c0, strict=g.strict)
    if len(cfg.lambdas) >= 4 and n == 1:
        rep = microlocal_mismatch(fam, cfg.lambdas)
        write_json(out / "mismatch.json", {"lambdas": rep.lams, "ratios": rep.ratios, "slope": rep.slope,
                                           "bound_slope": rep.bound_slope, "passes": rep.passes})


def _kernel_rows(table, n):
    rows = []
    for r in table.rows:
        for s in r.samples:
            rows.append([s.t, s.lam, *s.x, *s.y, s.value.real, s.value.imag, s.scaled, s.regime, s.error,
                         s.converged])
    header = ["t", "lambda"] + [f"x{j}" for j in range(n)] + [f"y{j}" for j in range(n)] + \
        ["re_k", "im_k", "scaled_abs_k", "regime", "error_estimate", "converged"]
    return header, rows


def _sweep(cfg, workers):
    from .kernel import dispersion_sweep

    pert = build_perturbation(cfg)
    fam = build_cutoffs(cfg)
    t_grid = {float(lam): _times(cfg, lam) for lam in cfg.lambdas}
    return dispersion_sweep(pert, fam, t_grid, [float(l) for l in cfg.lambdas], _ys(cfg), cfg.grids.speeds,
                            tol=cfg.tolerances.transport, workers=workers)


def cmd_kernel(cfg, out, workers):
    table = _sweep(cfg, workers)
    header, rows = _kernel_rows(table, cfg.perturbation.dim)
    write_csv(out / "kernel.csv", header, rows)


def cmd_dispersion(cfg, out, workers):
    table = _sweep(cfg, workers)
    n = cfg.perturbation.dim
    header, rows = _kernel_rows(table, n)
    write_csv(out / "kernel.csv", header, rows)
    summary = [[r.t, r.lam, r.sup_scaled, r.regime, r.flagged] for r in table.rows]
    write_csv(out / "dispersion.csv", ["t", "lambda", "sup_scaled_abs_k", "regime", "flagged"], summary)
    write_json(out / "dispersion.json", {"verdict": table.verdict, "max_over_median": table.max_over_median,
                                         "flagged": table.flagged,
                                         "by_regime": {k: list(v) for k, v in table.by_regime().items()}})
    if table.verdict != "PASS":
        raise CommandFailure("dispersion sweep failed the uniformity test",
                             {"error": "dispersion", "max_over_median": table.max_over_median})


def cmd_strichartz(cfg, out, workers):
    from .reference import StrichartzPair, strichartz_ratio

    pert = build_perturbation(cfg)
    pair = StrichartzPair(cfg.strichartz.q, cfg.strichartz.r, pert.dim)
    rows = [[lam, strichartz_ratio(pert, lam, pair, cfg.T, direction=cfg.geometry.xi0,
                                   tol=max(cfg.tolerances.reference, 1e-9))] for lam in cfg.lambdas]
    write_csv(out / "strichartz.csv", ["lambda", "ratio"], rows)
    vals = [r[1] for r in rows]
    write_json(out / "strichartz.json", {"q": pair.q, "r": pair.r, "spread": max(vals) / min(vals)})


def cmd_compare(cfg, out, workers):
    from .kernel import compare_box, compare_packet, compare_parametrix

    pert = build_perturbation(cfg)
    fam = build_cutoffs(cfg)
    ts = list(cfg.t_grid) if cfg.t_grid is not None else [0.02, 0.05, 0.1]
    rows = []
    for lam in cfg.lambdas:
        psi0 = compare_packet(lam, fam, half_width=compare_box(lam, max(abs(t) for t in ts), fam))
        for r in compare_parametrix(pert, fam, psi0, ts, lam, tol=cfg.tolerances.reference):
            rows.append([r.t, r.lam, r.relative_error, r.reference_norm, r.parametrix_norm, r.quadrature_error])
    write_csv(out / "compare.csv", ["t", "lambda", "relative_error", "reference_norm", "parametrix_norm",
                                    "quadrature_error"], rows)


def cmd_evolve(cfg, out, workers):
    from .reference import evolve_many, wave_packet

    pert = build_perturbation(cfg)
    lam = float(cfg.lambdas[0])
    psi0 = wave_packet(lam, pert.dim, cfg.geometry.xi0, max(cfg.grids.half_width, 12.0 * np.sqrt(lam) * cfg.T))
    ts = np.linspace(0.0, cfg.T, 11)[1:]
    states, rep = evolve_many(pert, psi0, ts, cfg.tolerances.reference)
    rows = [[t, s.norm(2.0), s.norm(np.inf), s.edge_mass()] for t, s in zip(ts, states)]
    write_csv(out / "evolve.csv", ["t", "l2_norm", "sup_norm", "edge_mass"], rows)
    write_json(out / "evolve.json", {"mass_drift": rep.mass_drift, "energy_drift": rep.energy_drift})


COMMANDS = {
    "certify": cmd_certify, "flow": cmd_flow, "classify": cmd_classify, "phase": cmd_phase,
    "amplitude": cmd_amplitude, "fbi-check": cmd_fbi_check, "kernel": cmd_kernel, "dispersion": cmd_dispersion,
    "strichartz": cmd_strichartz, "compare": cmd_compare, "evolve": cmd_evolve,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def run(subcommand: str, config_path, out_dir, workers: int = 1, seed_override: int | None = None) -> int:
    """Run one subcommand; returns the process exit status."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    try:
        cfg = ExperimentConfig.load(config_path) if config_path else ExperimentConfig.from_dict({})
        if seed_override is not None:
            cfg.seed = int(seed_override)
    except ConfigError as exc:
        write_json(out / "error.json", {"error": "config", "message": str(exc)})
        logger.error("%s", exc)
        return 2
    start = time.perf_counter()
    status = 0
    try:
        COMMANDS[subcommand](cfg, out, workers)
    except CommandFailure as exc:
        write_json(out / "error.json", {**exc.payload, "message": str(exc)})
        logger.error("%s", exc)
        status = 1
    except ConfigError as exc:
        write_json(out / "error.json", {"error": "config", "message": str(exc)})
        status = 2
    elapsed = time.perf_counter() - start
    outputs = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    write_json(out / "manifest.json", {
        "subcommand": subcommand,
        "config_sha256": cfg.digest(),
        "config": cfg.to_dict(),
        "versions": {"package": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "timings": {"seconds": elapsed},
        "outputs": outputs,
        "status": status,
    })
    return status


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="parametrix", description="Wave-packet parametrix experiments.")
    ap.add_argument("subcommand", choices=SUBCOMMANDS)
    ap.add_argument("--config", help="YAML experiment configuration")
    ap.add_argument("--out", default="out", help="output directory")
    ap.add_argument("--workers", type=int, default=1, help="worker processes for independent items")
    ap.add_argument("--seed-override", type=int, default=None, help="replace the configured seed")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    return run(args.subcommand, args.config, args.out, args.workers, args.seed_override)


if __name__ == "__main__":
    sys.exit(main())
