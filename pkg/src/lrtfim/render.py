"""Static SVG figures from the files a run leaves behind."""
from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .csvio import read_csv  # noqa: E402
from .dynamics import ObservableSeries, running_average  # noqa: E402
from .errors import InvalidParameterError  # noqa: E402

KINDS = ("timeseries", "running-average", "ensemble", "phase-diagram", "correlations", "binder")
_RC = {"svg.hashsalt": "lrtfim", "svg.fonttype": "none", "font.size": 9}


class MissingInputError(FileNotFoundError):
    pass


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with matplotlib.rc_context(_RC):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": None})
    plt.close(fig)
    return path


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingInputError(f"required input {path} is missing; run the producing stage first")
    return path


def _series(path: Path) -> tuple[ObservableSeries, dict]:
    header, rows, comments = read_csv(path)
    arr = np.array(rows, dtype=float)
    info = dict(c.split(": ", 1) for c in comments if ": " in c)
    return ObservableSeries(arr[:, 0], {h: arr[:, k + 1] for k, h in enumerate(header[1:])}), info


def _g_dirs(out: Path, stage: str) -> list[Path]:
    dirs = sorted(p for p in (out / stage).glob("g*") if p.is_dir()) if (out / stage).exists() else []
    if not dirs:
        raise MissingInputError(f"no {stage} results under {out / stage}")
    return dirs


def _quench_curves(gdir: Path):
    files = sorted(p for p in gdir.glob("state*.csv") if "_corr_" not in p.name)
    if not files:
        raise MissingInputError(f"no time series in {gdir}")
    curves = [_series(p) for p in files]
    energies = np.array([float(info["energy"]) for _, info in curves])
    return curves, energies


def _energy_colors(energies):
    lo, hi = energies.min(), energies.max()
    norm = matplotlib.colors.Normalize(lo, hi if hi > lo else lo + 1)
    return plt.get_cmap("viridis"), norm


def timeseries(out: Path, fig_dir: Path, observable: str = "sx2", running: bool = False) -> list[Path]:
    paths = []
    for gdir in _g_dirs(out, "quench"):
        curves, energies = _quench_curves(gdir)
        L = len(curves[0][1]["state"].split("@")[0])
        cmap, norm = _energy_colors(energies / L)
        fig, ax = plt.subplots(figsize=(4.5, 3.2))
        for (s, _), e in zip(curves, energies):
            if observable not in s.values:
                raise MissingInputError(f"{observable} was not recorded in {gdir}")
            y = running_average(s, observable) if running else s[observable]
            ax.plot(s.times, y, color=cmap(norm(e / L)), lw=1.2)
        fig.colorbar(matplotlib.cm.ScalarMappable(norm, cmap), ax=ax, label="energy density")
        ax.set_xlabel("Jt")
        ax.set_ylabel(("running mean of " if running else "") + observable)
        ax.set_title(gdir.name)
        kind = "running_average" if running else "timeseries"
        paths.append(_save(fig, fig_dir / f"{kind}_{observable}_{gdir.name}.svg"))
    return paths


def ensemble_scatter(out: Path, fig_dir: Path, observable: str = "sx2") -> list[Path]:
    paths = []
    for gdir in _g_dirs(out, "quench"):
        header, rows, _ = read_csv(_need(gdir / "summary.csv"))
        col = {h: k for k, h in enumerate(header)}
        data = {h: np.array([float(r[k]) for r in rows]) for h, k in col.items() if h != "state"}
        fig, ax = plt.subplots(figsize=(4.2, 3.2))
        ax.plot(data["eps"], data[f"ta_{observable}"], "o", label="time average")
        ax.plot(data["eps"], data[f"diag_{observable}"], "x", label="diagonal ensemble")
        can = out / "ensemble" / gdir.name / "canonical.csv"
        if can.exists():
            h2, r2, _ = read_csv(can)
            arr = np.array(r2, dtype=float)
            ax.plot(arr[:, 1], arr[:, h2.index(observable)], "-", color="k", lw=1, label="canonical")
            ax.set_xlim(data["eps"].min() - 0.05, max(0.0, data["eps"].max()) + 0.05)
        else:
            ax.plot(data["eps"], data[f"can_{observable}"], "s", mfc="none", label="canonical")
        ax.set_xlabel("energy density")
        ax.set_ylabel(observable)
        ax.legend(frameon=False)
        ax.set_title(gdir.name)
        paths.append(_save(fig, fig_dir / f"ensemble_{observable}_{gdir.name}.svg"))
    return paths


def heatmap(grid: dict, name: str, path: Path) -> Path:
    """One observable of an exported phase-diagram grid over (eps, g)."""
    g = np.asarray(grid["g"], float)
    eps = np.asarray(grid["eps"], float)
    if g.size == 0 or eps.size == 0 or name not in grid["values"]:
        raise InvalidParameterError(f"phase-diagram grid has no cells for {name!r}")
    vals = np.array([[np.nan if v is None else v for v in row] for row in grid["values"][name]], float)
    fig, ax = plt.subplots(figsize=(4.2, 3.4))

    def edges(x):
        if x.size == 1:
            return np.array([x[0] - 0.5, x[0] + 0.5]) if x[0] == 0 else x[0] * np.array([0.5, 1.5])
        mid = 0.5 * (x[1:] + x[:-1])
        return np.concatenate([[2 * x[0] - mid[0]], mid, [2 * x[-1] - mid[-1]]])

    mesh = ax.pcolormesh(edges(g), edges(eps), np.ma.masked_invalid(vals), cmap="magma", shading="flat")
    fig.colorbar(mesh, ax=ax, label=name)
    line = [c for c in grid.get("critical_line", []) if np.isfinite(c.get("eps_c") or np.nan)]
    if line:
        ax.errorbar([c["g"] for c in line], [c["eps_c"] for c in line],
                    yerr=[c["eps_c_err"] for c in line], fmt="o", color="c", label=grid.get("tag", ""))
        ax.legend(frameon=False, loc="upper right")
    ax.set_xlabel("g / J")
    ax.set_ylabel("energy density")
    return _save(fig, path)


def phase_diagram(out: Path, fig_dir: Path) -> list[Path]:
    grid = json.loads(_need(out / "phase_diagram.json").read_text())
    if not grid["values"]:
        raise InvalidParameterError("phase-diagram grid is empty")
    return [heatmap(grid, n, fig_dir / f"phase_diagram_{n}.svg") for n in sorted(grid["values"])]


def correlations(out: Path, fig_dir: Path) -> list[Path]:
    paths = []
    for gdir in _g_dirs(out, "quench"):
        _, energies = _quench_curves(gdir)
        picks = {"low": int(np.argmin(energies)), "high": int(np.argmax(energies))}
        for tag, k in picks.items():
            frames = sorted(gdir.glob(f"state{k:02d}_corr_*.csv"))
            if not frames:
                raise MissingInputError(f"no correlation matrices in {gdir}; enable dynamics.correlations")
            _, rows, comments = read_csv(frames[-1])
            C = np.array(rows, float)
            fig, ax = plt.subplots(figsize=(3.4, 3.0))
            im = ax.imshow(C, cmap="RdBu_r", vmin=-1, vmax=1)
            fig.colorbar(im, ax=ax)
            ax.set_title(f"{gdir.name}, {tag} energy, {comments[0]}")
            ax.set_xlabel("j")
            ax.set_ylabel("i")
            paths.append(_save(fig, fig_dir / f"correlations_{tag}_{gdir.name}.svg"))
    return paths


def binder(out: Path, fig_dir: Path) -> list[Path]:
    from .pipeline import load_binder_curves

    curves = load_binder_curves(_need(out / "mc" / "estimates.csv"))
    fig, ax = plt.subplots(figsize=(4.2, 3.2))
    for L, c in curves.items():
        ax.errorbar(c.control, c.u4, yerr=c.err, marker="o", ms=3, lw=1, label=f"L={L}")
    tc = out / "analysis" / "tc.json"
    if tc.exists():
        rep = json.loads(tc.read_text())
        if rep.get("Tc") is not None:
            ax.axvspan(rep["Tc"] - rep["err"], rep["Tc"] + rep["err"], color="0.85")
    ax.set_xlabel("T / J")
    ax.set_ylabel("U4")
    ax.legend(frameon=False)
    return [_save(fig, fig_dir / "binder.svg")]


def render(manifest, kind: str, observable: str = "sx2") -> list[Path]:
    """Write the figures of ``kind`` into <out>/figures and register them in the manifest."""
    if kind not in KINDS:
        raise InvalidParameterError(f"unknown figure kind {kind!r}; choose from {KINDS}")
    out = Path(manifest.out)
    fig_dir = out / "figures"
    if kind == "timeseries":
        paths = timeseries(out, fig_dir, observable)
    elif kind == "running-average":
        paths = timeseries(out, fig_dir, observable, running=True)
    elif kind == "ensemble":
        paths = ensemble_scatter(out, fig_dir, observable)
    elif kind == "phase-diagram":
        paths = phase_diagram(out, fig_dir)
    elif kind == "correlations":
        paths = correlations(out, fig_dir)
    else:
        paths = binder(out, fig_dir)
    manifest.tasks[f"render:{kind}"] = {"status": "ok", "hash": manifest.config_hash, "seconds": 0.0,
                                        "files": sorted(str(p.relative_to(out)) for p in paths)}
    manifest.save()
    return paths
