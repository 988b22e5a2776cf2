"""Run configuration: a YAML file with one block per stage, validated before any compute starts."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from .dynamics import STATE_MAX_L
from .ensembles import ED_MAX_L
from .errors import ConfigError
from .model import PROVENANCES, ProductState

# default values; a key absent here is not allowed in the file
DEFAULTS = {
    "model": {
        "L": None,
        "gamma": 0.0,
        "g": [0.0],
        "J": 1.0,
        "couplings": "ideal",
        "denominator": 13.0,
    },
    "ionchain": {
        "trap": {"N": None, "c2": None, "c4": 0.0, "omega1_mhz": 3.075, "mass": 171.0},
        "beams": {"rabi": None, "detuning_khz": None, "eta0": 0.08, "staggered": True,
                  "convention": "mode-detuning"},
    },
    "dynamics": {
        "t_max": 12.0,
        "dt": 0.1,
        "observables": ["sx2", "sz"],
        "correlations": False,
        "states": None,
        "n_states": 9,
        "E_max": 0.0,
        "tilt": 0.0,
        "shots": 0,
        "seed": 0,
        "method": "auto",
    },
    "ensembles": {
        "temperatures": None,
        "energies": None,
        "kind": "canonical",
        "window": None,
        "observables": ["sx2", "sz"],
    },
    "mc": {
        "sizes": None,
        "temperatures": None,
        "gamma": None,
        "n_measure": 20000,
        "n_burn": None,
        "seeds": [0],
        "backend": "cumulative",
    },
    "analysis": {
        "ladder": None,
        "n_resample": 200,
        "scaling_fit": True,
    },
    "output": "results",
}

BLOCKS = ("model", "ionchain", "dynamics", "ensembles", "mc", "analysis", "output")


@dataclass(frozen=True)
class RunConfig:
    model: dict
    ionchain: dict | None
    dynamics: dict | None
    ensembles: dict | None
    mc: dict | None
    analysis: dict | None
    output: str
    source: str | None = None

    def block(self, name):
        return getattr(self, name)

    def as_dict(self) -> dict:
        return {b: copy.deepcopy(getattr(self, b)) for b in BLOCKS}

    def block_hash(self, *names) -> str:
        """Content hash of the listed blocks; used to key cached task outputs."""
        payload = json.dumps({n: getattr(self, n) for n in names}, sort_keys=True, default=float)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    @property
    def config_hash(self) -> str:
        return self.block_hash(*[b for b in BLOCKS if b != "output"])

    def states(self) -> list[ProductState] | None:
        if not self.dynamics or self.dynamics["states"] is None:
            return None
        return [ProductState.from_string(s) for s in self.dynamics["states"]]


def _merge(block: str, given, defaults, path=""):
    if not isinstance(given, dict):
        raise ConfigError(f"'{path or block}' must be a mapping, got {type(given).__name__}")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key '{(path or block)}.{unknown[0]}'; allowed: {sorted(defaults)}")
    out = {}
    for k, d in defaults.items():
        sub = f"{path or block}.{k}"
        if isinstance(d, dict):
            out[k] = _merge(block, given.get(k, {}), d, sub)
        else:
            out[k] = copy.deepcopy(given.get(k, d))
    return out


def _require(cond, msg):
    if not cond:
        raise ConfigError(msg)


def _as_list(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def _plain(obj):
    """Numpy scalars and arrays to built-in types, so the config dumps cleanly to YAML."""
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple, np.ndarray)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def from_dict(raw: dict, source: str | None = None) -> RunConfig:
    """Apply defaults and check cross-block consistency; raises ConfigError naming the key."""
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    raw = _plain(raw)
    unknown = sorted(set(raw) - set(BLOCKS))
    if unknown:
        raise ConfigError(f"unknown top-level key '{unknown[0]}'; allowed: {list(BLOCKS)}")
    _require("model" in raw, "missing required block 'model'")
    cfg = {"output": str(raw.get("output", DEFAULTS["output"]))}
    for b in BLOCKS[:-1]:
        cfg[b] = _merge(b, raw[b], DEFAULTS[b]) if raw.get(b) is not None else None
    if "model" in raw and cfg["model"] is None:
        cfg["model"] = _merge("model", {}, DEFAULTS["model"])

    m = cfg["model"]
    _require(isinstance(m["L"], int) and m["L"] >= 2, "model.L must be an integer >= 2")
    m["g"] = [float(v) for v in _as_list(m["g"])]
    _require(len(m["g"]) > 0, "model.g must list at least one field")
    _require(float(m["gamma"]) >= 0, "model.gamma must be >= 0")
    _require(m["couplings"] in PROVENANCES, f"model.couplings must be one of {PROVENANCES}")
    L = m["L"]

    if m["couplings"] == "ion-derived":
        _require(cfg["ionchain"] is not None,
                 "model.couplings is 'ion-derived' but there is no 'ionchain' block")
    if cfg["ionchain"] is not None:
        tr, bm = cfg["ionchain"]["trap"], cfg["ionchain"]["beams"]
        for k in ("N", "c2"):
            _require(tr[k] is not None, f"ionchain.trap.{k} is required")
        _require(bm["rabi"] is not None and bm["detuning_khz"] is not None,
                 "ionchain.beams.rabi and ionchain.beams.detuning_khz are required")
        _require(len(bm["rabi"]) == tr["N"],
                 f"ionchain.beams.rabi has {len(bm['rabi'])} entries for N={tr['N']} ions")
        n_on = sum(1 for r in bm["rabi"] if r > 0)
        _require(n_on == L, f"ionchain.beams switches on {n_on} beams but model.L={L}")

    d = cfg["dynamics"]
    if d is not None:
        _require(L <= STATE_MAX_L,
                 f"dynamics needs state vectors, capped at L <= {STATE_MAX_L}; model.L={L}")
        _require(d["method"] in ("auto", "dense", "krylov"), "dynamics.method must be auto, dense or krylov")
        _require(d["method"] != "dense" or L <= ED_MAX_L,
                 f"dynamics.method 'dense' needs exact diagonalization, capped at L <= {ED_MAX_L}")
        _require(d["t_max"] > 0 and d["dt"] > 0, "dynamics.t_max and dynamics.dt must be positive")
        if d["states"] is not None:
            for s in d["states"]:
                try:
                    st = ProductState.from_string(s)
                except Exception as exc:  # noqa: BLE001 - re-raised as a config error
                    raise ConfigError(f"dynamics.states: cannot parse {s!r}: {exc}") from None
                _require(st.L == L, f"dynamics.states entry {s!r} has {st.L} sites, model.L={L}")
        from .observables import OBSERVABLES

        for o in d["observables"]:
            _require(o in OBSERVABLES or o == "energy", f"dynamics.observables: unknown {o!r}")

    e = cfg["ensembles"]
    if e is not None:
        _require(L <= ED_MAX_L,
                 f"ensembles need exact diagonalization, capped at L <= {ED_MAX_L}; model.L={L}. "
                 "Use the mc block (classical g=0) or dynamics with the krylov method instead")
        _require(e["kind"] in ("canonical", "microcanonical"), "ensembles.kind must be canonical or microcanonical")
        if e["temperatures"] is None:
            e["temperatures"] = np.round(np.geomspace(0.05, 20.0, 40), 6).tolist()
        if e["energies"] is None:
            e["energies"] = np.round(np.linspace(-0.45, 0.0, 10), 6).tolist()

    mc = cfg["mc"]
    if mc is not None:
        _require(mc["sizes"] is not None and mc["temperatures"] is not None,
                 "mc.sizes and mc.temperatures are required")
        _require(all(isinstance(s, int) and s >= 2 for s in mc["sizes"]), "mc.sizes must be integers >= 2")
        _require(all(t > 0 for t in mc["temperatures"]), "mc.temperatures must be positive")
        _require(mc["backend"] in ("naive", "cumulative"), "mc.backend must be naive or cumulative")
        _require(mc["n_measure"] >= 100, "mc.n_measure must be >= 100")
        _require(m["couplings"] != "ion-derived", "mc runs need ideal or unnormalized couplings")
        if mc["gamma"] is None:
            mc["gamma"] = float(m["gamma"])

    a = cfg["analysis"]
    if a is not None:
        _require(mc is not None, "analysis block needs an mc block to analyse")
        if a["ladder"] is None:
            sizes = sorted(mc["sizes"])
            a["ladder"] = [[s, t] for s, t in zip(sizes[:-1], sizes[1:])]
        for pair in a["ladder"]:
            _require(len(pair) == 2 and all(p in mc["sizes"] for p in pair),
                     f"analysis.ladder pair {pair} refers to sizes not in mc.sizes")
    return RunConfig(cfg["model"], cfg["ionchain"], d, e, mc, a, cfg["output"], source)


def validate_config(path) -> RunConfig:
    """Read and validate a YAML run configuration."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        raw = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: not valid YAML: {exc}") from None
    return from_dict(raw, str(path))
