"""Batch driver: every experiment is a subcommand with a JSON config.

Usage: ``rwre <experiment> --config cfg.json [--seed S] [--out DIR]``.
The output directory resolves as --out, then $RWRE_OUT, then the config's
"out" entry, then ./rwre-out.  Every run writes a manifest listing the config
hash, package version, and produced files; data files carry no timestamps, so
a rerun with the same config and seed is byte-identical except the manifest's
clock field.  Files are written atomically (temp + rename) per sweep point.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import time
import warnings

import numpy as np

from . import __version__
from .errors import RwreError

warnings.filterwarnings("ignore", message=".*TBB.*")

EXPERIMENTS = ("gen-env", "kernel-compare", "spectrum", "walk", "kappa",
               "dipole", "bounds")


def _atomic_write(path: str, text: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        fh.write(text)
    os.replace(tmp, path)


def _atomic_writer(path: str):
    class _Ctx:
        def __enter__(self):
            self.tmp = path + ".tmp"
            self.fh = open(self.tmp, "w")
            return self.fh

        def __exit__(self, exc_type, *a):
            self.fh.close()
            if exc_type is None:
                os.replace(self.tmp, path)
            else:
                os.unlink(self.tmp)
    return _Ctx()


def _env_spec(cfg: dict):
    from . import env as env_mod
    e = cfg["environment"]
    family = env_mod.family_from_name(e["family"], e.get("params", {}))
    return env_mod.EnvironmentSpec(family=family, d=int(e["d"]), L=int(e["L"]),
                                   seed=int(e["seed"]))


def _t_grid(cfg: dict) -> np.ndarray:
    g = cfg["t_grid"]
    if isinstance(g, dict):
        if g.get("spacing") == "log":
            return np.geomspace(g["start"], g["stop"], g["num"])
        return np.linspace(g["start"], g["stop"], g["num"])
    return np.asarray(g, dtype=float)


def run_gen_env(cfg: dict, out: str) -> list[str]:
    from . import env as env_mod
    spec = _env_spec(cfg)
    e = env_mod.sample_environment(spec)
    path = os.path.join(out, "environment.json")
    _atomic_write(path, json.dumps(env_mod.environment_to_dict(e)))
    summary = {"n_bonds": e.n_bonds, "min_rate": float(e.rates.min()),
               "max_rate": float(e.rates.max())}
    if e.d == 1:
        summary["harmonic_kappa"] = env_mod.harmonic_kappa(e)
    spath = os.path.join(out, "summary.json")
    _atomic_write(spath, json.dumps(summary, indent=2))
    return [path, spath]


def run_kernel_compare(cfg: dict, out: str) -> list[str]:
    from . import env as env_mod, green
    spec = _env_spec(cfg)
    sweep = [int(v) for v in cfg.get("l_sweep", [spec.L])]
    m = int(cfg.get("grid_m", 129))
    rows = []
    for L in sweep:
        sp = dataclasses.replace(spec, L=L)
        e = env_mod.sample_environment(sp)
        kappa = env_mod.harmonic_kappa(e) if e.d == 1 else float(cfg["kappa"])
        K = green.kernel_from_inverse(e, m=m)
        C = green.continuum_kernel_grid(kappa, m=m)
        dist = green.hs_distance(K, C)
        rows.append((L, kappa, dist.hs, dist.sup))
    path = os.path.join(out, "kernel_compare.csv")
    with _atomic_writer(path) as fh:
        fh.write("L,kappa_hat,hs_distance,sup_distance\n")
        for L, kap, hs, sup in rows:
            fh.write(f"{L},{float(kap)!r},{float(hs)!r},{float(sup)!r}\n")
    return [path]


def run_spectrum(cfg: dict, out: str) -> list[str]:
    from . import env as env_mod, spectral
    spec = _env_spec(cfg)
    sweep = [int(v) for v in cfg.get("l_sweep", [spec.L])]
    n_pairs = int(cfg.get("cutoff", 8))
    paths = []
    for L in sweep:
        sp = dataclasses.replace(spec, L=L)
        e = env_mod.sample_environment(sp)
        kappa = env_mod.harmonic_kappa(e) if e.d == 1 else float(cfg.get("kappa", 1.0))
        discrete = spectral.smallest_eigenpairs(spectral.scaled_inverse_operator(e), n_pairs)
        cont = spectral.continuum_eigenpairs(kappa, n_pairs, e.d)[:n_pairs]
        rows = []
        for c in cont:
            j = int(np.argmin([abs(p.value - c.value) for p in discrete]))
            rows.append((c.index, discrete[j].value, c.value, True,
                         abs(discrete[j].value - c.value)))
        path = os.path.join(out, f"spectrum_L{L}.csv")
        with _atomic_writer(path) as fh:
            fh.write("index,lambda_discrete,lambda_continuum,paired,residual\n")
            for idx, ld, lc, flag, res in rows:
                tag = " ".join(str(i) for i in idx)
                fh.write(f"{tag},{float(ld)!r},{float(lc)!r},{int(flag)},{float(res)!r}\n")
        paths.append(path)
    return paths


def run_walk(cfg: dict, out: str) -> list[str]:
    from . import walker
    spec = _env_spec(cfg)
    t_grid = _t_grid(cfg)
    ensemble = int(cfg.get("ensemble", 10000))
    occupancy_at = [int(k) for k in cfg.get("occupancy_at", [len(t_grid) - 1])]
    stats = walker.msd_curve(spec, t_grid, ensemble, occupancy_at=occupancy_at)
    paths = [os.path.join(out, "msd.csv")]
    stats.to_csv(paths[0] + ".tmp")
    os.replace(paths[0] + ".tmp", paths[0])
    for k in occupancy_at:
        p = os.path.join(out, f"occupancy_t{k}.csv")
        stats.occupancy_to_csv(p + ".tmp", k)
        os.replace(p + ".tmp", p)
        paths.append(p)
    window = cfg.get("fit_window")
    fit = walker.fit_diffusion(stats, tuple(window) if window else None)
    fpath = os.path.join(out, "fit.json")
    _atomic_write(fpath, json.dumps({
        "kappa": fit.kappa, "stderr": fit.stderr, "exponent": fit.exponent,
        "r2": fit.r2, "window": list(fit.window), "n_points": fit.n_points,
        "kappa_matrix": None if fit.kappa_matrix is None else fit.kappa_matrix.tolist(),
    }, indent=2))
    paths.append(fpath)
    return paths


def run_kappa(cfg: dict, out: str) -> list[str]:
    from . import env as env_mod, spectral, walker
    spec = _env_spec(cfg)
    e = env_mod.sample_environment(spec)
    result = {"L": spec.L, "d": spec.d, "seed": int(spec.seed)}
    if spec.d == 1:
        result["harmonic"] = env_mod.harmonic_kappa(e)
        result["spectral"] = spectral.spectral_kappa(e)
    t_grid = _t_grid(cfg)
    ensemble = int(cfg.get("ensemble", 10000))
    stats = walker.run_ensemble(e, t_grid, ensemble, seed=spec.seed)
    window = cfg.get("fit_window")
    fit = walker.fit_diffusion(stats, tuple(window) if window else None)
    result["msd"] = fit.kappa
    result["msd_stderr"] = fit.stderr
    result["msd_r2"] = fit.r2
    path = os.path.join(out, "kappa.json")
    _atomic_write(path, json.dumps(result, indent=2))
    return [path]


def run_dipole(cfg: dict, out: str) -> list[str]:
    from . import dipole
    d = int(cfg["environment"]["d"])
    L = int(cfg["environment"]["L"])
    phi = dipole.dipole_phi_matrix(L, d)
    report = {
        "d": d, "L": L,
        "projector_residual": float(np.abs(phi @ phi - phi).max()),
        "symmetry_residual": float(np.abs(phi - phi.T).max()),
        "trace": float(phi.trace()),
        "interior_sites": (2 * L - 1) ** d,
    }
    distances = [int(v) for v in cfg.get("decay_distances", [])]
    if distances:
        offs = []
        for k in distances:
            off = [0] * d
            off[0] = k
            offs.append(dipole.dipole_phi_infinite(d, off, 0, 0))
        report["decay"] = {"distances": distances, "phi": offs}
        if len(distances) >= 2:
            slope = np.polyfit(np.log(distances), np.log(np.abs(offs)), 1)[0]
            report["decay"]["loglog_slope"] = float(slope)
    path = os.path.join(out, "dipole.json")
    _atomic_write(path, json.dumps(report, indent=2))
    return [path]


def run_bounds(cfg: dict, out: str) -> list[str]:
    from . import dipole, env as env_mod
    spec = _env_spec(cfg)
    n_env = int(cfg.get("n_env", 200))
    n_vectors = int(cfg.get("n_vectors", 50))
    order = cfg.get("order")
    schwarz = dipole.schwarz_bound_check(spec, n_env, n_vectors)
    theta = dipole.theta_estimate(spec, n_env, order=None if order is None else int(order))
    payload = {"schwarz": schwarz.to_dict(), "theta": theta.to_dict()}
    fam = spec.family
    if isinstance(fam, env_mod.BoundedPerturbation):
        try:
            payload["series_bound"] = dipole.kl_series_bound(
                fam.delta, float(cfg.get("geometric_constant", 1.0))).to_dict()
        except RwreError as exc:
            payload["series_bound"] = {"error": str(exc)}
    path = os.path.join(out, "bounds.json")
    _atomic_write(path, json.dumps(payload, indent=2))
    return [path]


_RUNNERS = {
    "gen-env": run_gen_env,
    "kernel-compare": run_kernel_compare,
    "spectrum": run_spectrum,
    "walk": run_walk,
    "kappa": run_kappa,
    "dipole": run_dipole,
    "bounds": run_bounds,
}


def _fail(payload: dict, code: int) -> int:
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="rwre",
        description="Random-walk-in-random-media experiments with CSV/JSON outputs",
    )
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name in EXPERIMENTS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--out", default=None)
    args = parser.parse_args(argv)
    try:
        with open(args.config) as fh:
            cfg = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        return _fail({"error": "config_unreadable", "detail": str(exc)}, 2)
    if args.seed is not None:
        cfg.setdefault("environment", {})["seed"] = args.seed
    out = args.out or os.environ.get("RWRE_OUT") or cfg.get("out") or "rwre-out"
    os.makedirs(out, exist_ok=True)
    canonical = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    try:
        outputs = _RUNNERS[args.experiment](cfg, out)
    except RwreError as exc:
        return _fail({"error": type(exc).__name__, "detail": str(exc)}, 1)
    except (KeyError, TypeError, ValueError) as exc:
        return _fail({"error": "invalid_config", "detail": f"{type(exc).__name__}: {exc}"}, 2)
    manifest = {
        "experiment": args.experiment,
        "version": __version__,
        "config": cfg,
        "config_sha256": hashlib.sha256(canonical.encode()).hexdigest(),
        "outputs": [os.path.basename(p) for p in outputs],
        "generated_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    }
    _atomic_write(os.path.join(out, "manifest.json"), json.dumps(manifest, indent=2))
    return 0


if __name__ == "__main__":
    sys.exit(main())
