"""Batch execution of a RunConfig: couplings -> states -> dynamics / ensembles / Monte Carlo -> analysis.

Every task writes its own files and is keyed by a hash of the config blocks it
reads, so re-running an unchanged configuration reuses earlier outputs. The
manifest (``manifest.json`` in the output directory) lists every file.
"""
from __future__ import annotations

import json
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .analysis import (
    BinderCurve,
    assemble_phase_diagram,
    anchor_value,
    collapse_quality,
    extrapolate_tc,
    find_crossing,
    scaling_fit,
)
from .config import RunConfig
from .csvio import read_csv, write_csv, write_json
from .dynamics import (
    default_times,
    encode_product_state,
    estimate_sx2,
    evolve_and_measure,
    krylov_evolve,
    sample_shots,
    time_average,
)
from .ensembles import (
    ED_MAX_L,
    EnsembleResult,
    canonical_energy_density,
    canonical_expectation,
    diagonal_ensemble,
    diagonalize,
    invert_energy_to_temperature,
    microcanonical_expectation,
)
from .errors import InvalidParameterError
from .ionchain import BeamConfig, TrapConfig, calibrate_to_target, compute_radial_modes, \
    solve_equilibrium_positions, synthesize_couplings
from .model import (
    CouplingMatrix,
    ModelSpec,
    ProductState,
    build_ideal_couplings,
    build_unnormalized_couplings,
    kac_rescale,
    product_state_energy,
    select_initial_states,
)
from .montecarlo import merge_estimates, run_chain, u4_from_estimate

log = logging.getLogger(__name__)

# energy densities this close to the spectrum mean are treated as infinite temperature
INF_T_TOL = 1e-9


@dataclass
class ResultManifest:
    run_id: str
    config_hash: str
    out: Path
    tasks: dict = field(default_factory=dict)
    version: str = __version__

    @property
    def failed(self) -> list[str]:
        return [k for k, t in self.tasks.items() if t["status"] == "failed"]

    def files(self) -> list[str]:
        return sorted({f for t in self.tasks.values() for f in t["files"]})

    def path(self, task: str, suffix: str | None = None) -> Path:
        """First file of ``task`` (optionally ending in ``suffix``)."""
        for f in self.tasks[task]["files"]:
            if suffix is None or f.endswith(suffix):
                return self.out / f
        raise KeyError(f"task {task!r} has no file ending in {suffix!r}")

    def save(self) -> Path:
        extra = sorted(
            str(p.relative_to(self.out)) for p in self.out.rglob("*")
            if p.is_file() and p.name != "manifest.json"
        )
        listed = set(self.files())
        stray = [f for f in extra if f not in listed]
        if stray:
            self.tasks.setdefault("untracked", {"status": "untracked", "hash": "", "seconds": 0.0,
                                                "files": []})["files"] = stray
        return write_json(self.out / "manifest.json", {
            "run_id": self.run_id, "config_hash": self.config_hash,
            "version": self.version, "tasks": self.tasks,
        })

    @classmethod
    def load(cls, out) -> "ResultManifest":
        out = Path(out)
        data = json.loads((out / "manifest.json").read_text())
        data["tasks"].pop("untracked", None)
        return cls(data["run_id"], data["config_hash"], out, data["tasks"], data["version"])


def build_couplings(cfg: RunConfig, L: int | None = None, gamma: float | None = None) -> CouplingMatrix:
    """Coupling matrix described by the model (and ionchain) blocks, optionally at another size."""
    m = cfg.model
    L = m["L"] if L is None else L
    gamma = float(m["gamma"]) if gamma is None else gamma
    if m["couplings"] == "ideal":
        return build_ideal_couplings(L, gamma, m["J"])
    if m["couplings"] == "unnormalized":
        return kac_rescale(build_unnormalized_couplings(L, gamma, m["denominator"]), m["J"])
    ic = cfg.ionchain
    tr, bm = ic["trap"], ic["beams"]
    trap = TrapConfig(tr["N"], tr["c2"], tr["c4"], 2 * np.pi * 1e6 * tr["omega1_mhz"], tr["mass"])
    beams = BeamConfig(tuple(bm["rabi"]), 2 * np.pi * 1e3 * bm["detuning_khz"], bm["eta0"],
                       bm["staggered"], bm["convention"])
    spec = compute_radial_modes(solve_equilibrium_positions(trap), trap)
    _, normalized = calibrate_to_target(synthesize_couplings(spec, beams))
    return normalized.scaled(m["J"])


def _gtag(g: float) -> str:
    return f"g{g:.4f}"


def _rel(out: Path, paths) -> list[str]:
    return sorted(str(Path(p).relative_to(out)) for p in paths)


def _map(fn, items, jobs: int):
    if jobs > 1 and len(items) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


# ---------------------------------------------------------------- tasks


def task_couplings(cfg: RunConfig, out: Path) -> list[Path]:
    c = build_couplings(cfg)
    return [c.to_csv(out / "couplings.csv"), out / "couplings.json"]


def _initial_states(cfg: RunConfig, model: ModelSpec) -> list[ProductState]:
    d = cfg.dynamics
    states = cfg.states()
    if states is None:
        picked = select_initial_states(model, d["n_states"], E_max=d["E_max"] * model.L)
        states = [s for s, _ in picked]
    if d["tilt"]:
        states = [ProductState(s.spins, d["tilt"]) for s in states]
    return states


def _quench_one(args):
    cfg, g, out = args
    d = cfg.dynamics
    couplings = build_couplings(cfg)
    model = ModelSpec(couplings, g)
    states = _initial_states(cfg, model)
    times = default_times(d["t_max"], d["dt"])
    cache = diagonalize(model) if model.L <= ED_MAX_L and d["method"] != "krylov" else None
    gdir = out / "quench" / _gtag(g)
    files = []
    summary = []
    for k, st in enumerate(states):
        flat = ProductState(st.spins)
        E = product_state_energy(flat, model)
        series = evolve_and_measure(encode_product_state(st), model, times, d["observables"],
                                    correlations=d["correlations"], method=d["method"], cache=cache)
        p = series.to_csv(gdir / f"state{k:02d}.csv",
                          [f"state: {st.to_string()}", f"g: {g!r}", f"energy: {E!r}"])
        files.append(p)
        if d["correlations"]:
            files += sorted(gdir.glob(f"state{k:02d}_corr_*.csv"))
        row = [k, st.to_string(), E, E / model.L]
        ta = time_average(series)
        row += [ta.get(o, np.nan) for o in ("sx2", "sz")]
        if cache is not None:
            psi0 = encode_product_state(st).amplitudes
            row += [diagonal_ensemble(psi0, cache, o) for o in ("sx2", "sz")]
            try:
                T = invert_energy_to_temperature(cache, E)
                row += [T] + [canonical_expectation(cache, o, T).value for o in ("sx2", "sz")]
            except InvalidParameterError:
                row += [np.nan] * 3
        else:
            row += [np.nan] * 5
        if d["shots"]:
            psi0 = encode_product_state(st).amplitudes
            final = (cache.evolve(psi0, [times[-1]]) if cache is not None
                     else krylov_evolve(psi0, model, [times[-1]]))[0]
            counts = sample_shots(final, "x", d["shots"], d["seed"] + k)
            row += [estimate_sx2(counts)]
        summary.append(row)
    header = ["index", "state", "energy", "eps", "ta_sx2", "ta_sz", "diag_sx2", "diag_sz",
              "T", "can_sx2", "can_sz"] + (["shots_sx2"] if d["shots"] else [])
    files.append(write_csv(gdir / "summary.csv", header, summary, [f"g: {g!r}", f"t_max: {float(times[-1])!r}"]))
    return files


def task_quench(cfg: RunConfig, out: Path, jobs: int = 1) -> list[Path]:
    res = _map(_quench_one, [(cfg, g, out) for g in cfg.model["g"]], jobs)
    return [p for r in res for p in r]


def _ensemble_one(args):
    cfg, g, out = args
    e = cfg.ensembles
    model = ModelSpec(build_couplings(cfg), g)
    cache = diagonalize(model)
    L = model.L
    rows = []
    for T in e["temperatures"]:
        rows.append([T, canonical_energy_density(cache, T)]
                    + [canonical_expectation(cache, o, T).value for o in e["observables"]])
    gdir = out / "ensemble" / _gtag(g)
    files = [write_csv(gdir / "canonical.csv", ["T", "eps"] + list(e["observables"]), rows, [f"g: {g!r}"])]
    eps0 = cache.ground_energy_density()
    eps_inf = canonical_energy_density(cache, np.inf)
    results = []
    for eps in e["energies"]:
        if eps < eps0:
            continue
        for o in e["observables"]:
            if e["kind"] == "microcanonical":
                v = microcanonical_expectation(cache, o, eps * L, e["window"])
                T = np.nan
            elif eps >= eps_inf - INF_T_TOL:
                T = np.inf
                v = canonical_expectation(cache, o, T).value
            else:
                T = invert_energy_to_temperature(cache, eps * L)
                v = canonical_expectation(cache, o, T).value
            results.append([eps, o, v, T])
    files.append(write_csv(gdir / "grid.csv", ["eps", "observable", "value", "T"], results,
                           [f"g: {g!r}", f"ensemble: {e['kind']}", f"eps_min: {eps0!r}"]))
    return files


def task_ensemble(cfg: RunConfig, out: Path, jobs: int = 1) -> list[Path]:
    res = _map(_ensemble_one, [(cfg, g, out) for g in cfg.model["g"]], jobs)
    files = [p for r in res for p in r]
    files += _phase_diagram(cfg, out)
    return files


def _phase_diagram(cfg: RunConfig, out: Path) -> list[Path]:
    e = cfg.ensembles
    results, eps_min, eoft = [], {}, {}
    for g in cfg.model["g"]:
        gdir = out / "ensemble" / _gtag(g)
        _, rows, comments = read_csv(gdir / "grid.csv")
        eps_min[round(g, 10)] = float(next(c for c in comments if c.startswith("eps_min")).split(":")[1])
        for eps, o, v, _T in rows:
            results.append(EnsembleResult(float(eps), o, float(v), e["kind"], {"g": g}))
        _, crow, _ = read_csv(gdir / "canonical.csv")
        Ts = np.array([float(r[0]) for r in crow])
        es = np.array([float(r[1]) for r in crow])
        eoft[round(g, 10)] = (lambda T, Ts=Ts, es=es: float(np.interp(np.log(T), np.log(Ts), es)))
    critical = {}
    tc_file = out / "analysis" / "tc.json"
    if tc_file.exists() and 0.0 in [round(g, 10) for g in cfg.model["g"]]:
        tc = json.loads(tc_file.read_text())
        if tc.get("Tc") is not None and cfg.mc and cfg.mc["gamma"] == cfg.model["gamma"]:
            critical[0.0] = (tc["Tc"], tc["err"])
    grid = assemble_phase_diagram(results, critical, eps_min, eoft, e["energies"])
    return [grid.to_json(out / "phase_diagram.json"), grid.to_csv(out / "phase_diagram.csv"),
            grid.critical_line_csv(out / "critical_line.csv")]


def _mc_one(args):
    cfg, L, T, seed = args
    mc = cfg.mc
    couplings = build_couplings(cfg, L=L, gamma=mc["gamma"])
    est = run_chain(couplings, T, mc["n_measure"], mc["n_burn"], seed, backend=mc["backend"])
    u, du = u4_from_estimate(est)
    return est, u, du


def task_mc(cfg: RunConfig, out: Path, jobs: int = 1) -> list[Path]:
    mc = cfg.mc
    items = [(cfg, L, T, s) for L in mc["sizes"] for T in mc["temperatures"] for s in mc["seeds"]]
    res = _map(_mc_one, items, jobs)
    groups: dict = {}
    for (_, L, T, _s), r in zip(items, res):
        groups.setdefault((L, T), []).append(r)
    rows = []
    keys = ("abs_m", "m2", "m4", "eps")
    for (L, T), rs in sorted(groups.items()):
        merged = merge_estimates([r[0] for r in rs])
        u = np.array([r[1] for r in rs])
        du = np.array([r[2] for r in rs])
        w = 1 / np.maximum(du, 1e-300) ** 2
        U, dU = float(w @ u / w.sum()), float(1 / np.sqrt(w.sum()))
        rows.append([L, T] + [v for k in keys for v in merged[k]] + [U, dU,
                    float(np.mean([r[0].mean_cluster for r in rs])), len(rs)])
    header = ["L", "T"] + [f"{k}{s}" for k in keys for s in ("", "_err")] + ["u4", "u4_err", "mean_cluster", "n_chains"]
    return [write_csv(out / "mc" / "estimates.csv", header, rows,
                      [f"gamma: {mc['gamma']!r}", f"couplings: {cfg.model['couplings']}",
                       f"n_measure: {mc['n_measure']}", f"backend: {mc['backend']}"])]


def load_binder_curves(path) -> dict[int, BinderCurve]:
    header, rows, _ = read_csv(path)
    col = {h: k for k, h in enumerate(header)}
    by_L: dict = {}
    for r in rows:
        by_L.setdefault(int(r[col["L"]]), []).append(
            (float(r[col["T"]]), float(r[col["u4"]]), float(r[col["u4_err"]])))
    return {L: BinderCurve(L, *map(np.array, zip(*v))) for L, v in sorted(by_L.items())}


def task_analysis(cfg: RunConfig, out: Path) -> list[Path]:
    curves = load_binder_curves(out / "mc" / "estimates.csv")
    a = cfg.analysis
    rows, pts = [], []
    for La, Lb in a["ladder"]:
        c = find_crossing(curves[La], curves[Lb], a["n_resample"])
        rows.append([La, Lb, c.T, c.err, c.u4, c.status])
        if c.ok:
            pts.append((min(La, Lb), c.T, c.err))
    files = [write_csv(out / "analysis" / "crossings.csv",
                       ["L_a", "L_b", "T_cross", "err", "u4_cross", "status"], rows)]
    report = {"Tc": None, "err": None, "n_points": len(pts), "gamma": cfg.mc["gamma"],
              "tag": "finite-size extrapolation, linear in 1/L"}
    if len(pts) >= 2:
        tc = extrapolate_tc(pts)
        report.update(Tc=tc.Tc, err=tc.err, err_stat=tc.err_stat, err_sys=tc.err_sys, slope=tc.slope)
    files.append(write_json(out / "analysis" / "tc.json", report))
    return files


def task_collapse(cfg: RunConfig, out: Path) -> list[Path]:
    header, rows, _ = read_csv(out / "analysis" / "crossings.csv")
    ok = [r for r in rows if r[5] == "ok"]
    Ls = [min(int(r[0]), int(r[1])) for r in ok]
    fit = scaling_fit(Ls, [float(r[2]) for r in ok], [float(r[4]) for r in ok])
    curves = list(load_binder_curves(out / "mc" / "estimates.csv").values())
    u_star = anchor_value(curves, fit)
    raw, col = collapse_quality(curves, fit, u_star)
    payload = fit.as_dict() | {"u_star": u_star, "spread_raw": raw, "spread_collapsed": col}
    return [write_json(out / "analysis" / "scaling.json", payload)]


# ---------------------------------------------------------------- driver

_TASKS = {
    "couplings": (task_couplings, ("model", "ionchain"), False),
    "quench": (task_quench, ("model", "ionchain", "dynamics"), True),
    "mc": (task_mc, ("model", "mc"), True),
    "analysis": (task_analysis, ("model", "mc", "analysis"), False),
    "collapse": (task_collapse, ("model", "mc", "analysis"), False),
    "ensemble": (task_ensemble, ("model", "ionchain", "ensembles", "mc", "analysis"), True),
}


def stages_for(cfg: RunConfig, wanted=None) -> list[str]:
    """Stages enabled by the config, in dependency order, filtered to ``wanted``."""
    present = {
        "couplings": True,
        "quench": cfg.dynamics is not None,
        "mc": cfg.mc is not None,
        "analysis": cfg.analysis is not None,
        "collapse": cfg.analysis is not None and cfg.analysis["scaling_fit"]
        and len(cfg.analysis["ladder"]) >= 3,
        "ensemble": cfg.ensembles is not None,
    }
    order = ["couplings", "quench", "mc", "analysis", "collapse", "ensemble"]
    return [s for s in order if present[s] and (wanted is None or s in wanted)]


def run(cfg: RunConfig, out=None, *, stages=None, force: bool = False, jobs: int = 1) -> ResultManifest:
    """Execute the enabled stages; failures are recorded in the manifest and later stages still run."""
    out = Path(out or cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    try:
        old = ResultManifest.load(out)
    except (FileNotFoundError, json.JSONDecodeError, KeyError):
        old = None
    man = ResultManifest(cfg.config_hash[:8], cfg.config_hash, out)
    if old is not None:
        man.tasks.update(old.tasks)
    cfg_path = out / "config.yaml"
    cfg_path.write_text(yaml.safe_dump(cfg.as_dict(), sort_keys=True))
    man.tasks["config"] = {"status": "ok", "hash": cfg.config_hash, "seconds": 0.0, "files": ["config.yaml"]}

    for name in stages_for(cfg, stages):
        fn, blocks, parallel = _TASKS[name]
        h = cfg.block_hash(*blocks)
        prev = man.tasks.get(name)
        if (not force and prev and prev["status"] in ("ok", "cached") and prev["hash"] == h
                and all((out / f).exists() for f in prev["files"])):
            prev["status"] = "cached"
            log.info("%s: reusing cached outputs", name)
            continue
        t0 = time.perf_counter()
        try:
            files = fn(cfg, out, jobs) if parallel else fn(cfg, out)
            man.tasks[name] = {"status": "ok", "hash": h, "seconds": round(time.perf_counter() - t0, 3),
                               "files": _rel(out, files)}
        except Exception as exc:  # noqa: BLE001 - recorded, run continues
            log.error("%s failed: %s", name, exc)
            man.tasks[name] = {"status": "failed", "hash": h, "seconds": round(time.perf_counter() - t0, 3),
                               "files": [], "error": f"{type(exc).__name__}: {exc}",
                               "traceback": traceback.format_exc(limit=3)}
    man.save()
    return man
