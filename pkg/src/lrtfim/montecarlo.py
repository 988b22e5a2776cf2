"""Classical Wolff cluster Monte Carlo for the g = 0 limit with arbitrary ferromagnetic J_ij.

Random numbers come from xoshiro256** (256-bit state) seeded through
``numpy.random.SeedSequence``, so a u64 seed fully determines a chain.

Two cluster-growth backends share one interface:

``"naive"``
    every added site scans all L sites and tests each aligned one with
    p_ij = 1 - exp(-2 J_ij / T).
``"cumulative"``
    bonds of an added site i are drawn by jumping along the cumulative row sums
    sum_{l<=j} J_il with exponential increments of scale T/2, which generates the
    same independent bond activations at O(log L) cost per activated bond.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numba as nb
import numpy as np

from .errors import InvalidParameterError, UnsupportedModelError
from .model import CouplingMatrix

N_BLOCKS = 64
N_BOOTSTRAP = 400
MIN_BURN = 1000
AUDIT_EVERY = 10_000
BACKENDS = ("cumulative", "naive")

# ---------------------------------------------------------------------------
# xoshiro256**


@nb.njit(inline="always")
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@nb.njit
def _next_u64(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@nb.njit
def _uniform(s):
    return (_next_u64(s) >> np.uint64(11)) * (1.0 / 9007199254740992.0)


def rng_state(seed) -> np.ndarray:
    st = np.random.SeedSequence(seed).generate_state(4, np.uint64)
    if not st.any():
        st[0] = 1
    return st


# ---------------------------------------------------------------------------
# kernels


@nb.njit
def _grow_naive(spins, p, s, cluster, in_cluster, seed_site):
    L = spins.size
    s0 = spins[seed_site]
    cluster[0] = seed_site
    in_cluster[seed_site] = True
    n = 1
    head = 0
    while head < n:
        i = cluster[head]
        head += 1
        for j in range(L):
            if not in_cluster[j] and spins[j] == s0:
                if _uniform(s) < p[i, j]:
                    in_cluster[j] = True
                    cluster[n] = j
                    n += 1
    return n


@nb.njit
def _grow_cumulative(spins, cum, half_T, s, cluster, in_cluster, seed_site):
    L = spins.size
    s0 = spins[seed_site]
    cluster[0] = seed_site
    in_cluster[seed_site] = True
    n = 1
    head = 0
    while head < n:
        i = cluster[head]
        head += 1
        total = cum[i, L - 1]
        pos = 0.0
        while True:
            pos += -math.log(1.0 - _uniform(s)) * half_T
            if pos >= total:
                break
            # first j with cum[i, j] > pos
            lo = 0
            hi = L - 1
            while lo < hi:
                mid = (lo + hi) >> 1
                if cum[i, mid] > pos:
                    hi = mid
                else:
                    lo = mid + 1
            j = lo
            if spins[j] == s0 and not in_cluster[j]:
                in_cluster[j] = True
                cluster[n] = j
                n += 1
            pos = cum[i, j]
    return n


@nb.njit
def _flip_cluster(spins, J, rowsum, cluster, n, in_cluster):
    """Flip the cluster and return the energy change for H = -sum_{i<j} J_ij s_i s_j."""
    L = spins.size
    s0 = spins[cluster[0]]
    acc = 0.0
    if 2 * n <= L:
        for a in range(n):
            i = cluster[a]
            for j in range(L):
                if not in_cluster[j]:
                    acc += J[i, j] * spins[j]
    else:
        # sum_{j not in C} s_j (rowsum_j - sum_{i not in C} J_ij)
        for j in range(L):
            if in_cluster[j]:
                continue
            inner = rowsum[j]
            for i in range(L):
                if not in_cluster[i]:
                    inner -= J[i, j]
            acc += spins[j] * inner
    for a in range(n):
        spins[cluster[a]] = -spins[cluster[a]]
        in_cluster[cluster[a]] = False
    return 2.0 * s0 * acc


@nb.njit
def _energy(spins, J):
    L = spins.size
    e = 0.0
    for i in range(L):
        for j in range(i + 1, L):
            e -= J[i, j] * spins[i] * spins[j]
    return e


@nb.njit
def _chain(spins, J, cum, p, rowsum, T, s, n_updates, every, backend, energy,
           out_m, out_e, trace):
    """Run ``n_updates`` cluster updates, recording m and E after every ``every``-th.

    Returns (energy, total cluster size, max energy-audit deviation).
    """
    L = spins.size
    cluster = np.empty(L, dtype=np.int64)
    in_cluster = np.zeros(L, dtype=np.bool_)
    half_T = 0.5 * T
    total_size = 0
    audit = 0.0
    k = 0
    for u in range(n_updates):
        seed_site = int(_uniform(s) * L)
        if backend == 0:
            n = _grow_cumulative(spins, cum, half_T, s, cluster, in_cluster, seed_site)
        else:
            n = _grow_naive(spins, p, s, cluster, in_cluster, seed_site)
        energy += _flip_cluster(spins, J, rowsum, cluster, n, in_cluster)
        total_size += n
        if trace.size > 0:
            idx = 0
            for i in range(L):
                idx = 2 * idx + (1 if spins[i] > 0 else 0)
            trace[u] = idx
        if (u + 1) % 10000 == 0:
            exact = _energy(spins, J)
            audit = max(audit, abs(exact - energy))
            energy = exact
        if every > 0 and (u + 1) % every == 0 and k < out_m.size:
            msum = 0.0
            for i in range(L):
                msum += spins[i]
            out_m[k] = msum / L
            out_e[k] = energy
            k += 1
    return energy, total_size, audit


# ---------------------------------------------------------------------------
# public API


@dataclass
class SpinConfiguration:
    spins: np.ndarray
    energy: float

    @classmethod
    def from_spins(cls, spins, couplings) -> "SpinConfiguration":
        J = couplings.J if isinstance(couplings, CouplingMatrix) else np.asarray(couplings)
        s = np.asarray(spins, dtype=np.int8).copy()
        return cls(s, float(_energy(s, np.ascontiguousarray(J, dtype=float))))

    def recomputed_energy(self, couplings) -> float:
        J = couplings.J if isinstance(couplings, CouplingMatrix) else np.asarray(couplings)
        return float(_energy(self.spins, np.ascontiguousarray(J, dtype=float)))


class _Prepared:
    """Per-(couplings, T) arrays the kernels need."""

    def __init__(self, couplings, T):
        J = couplings.J if isinstance(couplings, CouplingMatrix) else np.asarray(couplings, float)
        if T <= 0:
            raise InvalidParameterError("temperature must be positive")
        if np.any(J < 0):
            raise UnsupportedModelError("Wolff updates need ferromagnetic couplings (J_ij >= 0)")
        self.J = np.ascontiguousarray(J, dtype=float)
        self.cum = np.ascontiguousarray(np.cumsum(self.J, axis=1))
        self.p = -np.expm1(-2.0 * self.J / T)
        self.rowsum = self.J.sum(axis=1)
        self.T = float(T)


def _backend_code(backend: str) -> int:
    if backend not in BACKENDS:
        raise InvalidParameterError(f"unknown backend {backend!r}; choose from {BACKENDS}")
    return BACKENDS.index(backend)


_EMPTY_F = np.empty(0)
_EMPTY_I = np.empty(0, dtype=np.int64)


def wolff_update(config: SpinConfiguration, couplings, T: float, rng: np.ndarray,
                 backend: str = "cumulative") -> tuple[SpinConfiguration, int]:
    """One cluster flip. ``rng`` is a xoshiro state from :func:`rng_state`, advanced in place."""
    prep = _Prepared(couplings, T)
    spins = config.spins.copy()
    energy, size, _ = _chain(spins, prep.J, prep.cum, prep.p, prep.rowsum, prep.T, rng, 1, 0,
                             _backend_code(backend), config.energy, _EMPTY_F, _EMPTY_F, _EMPTY_I)
    return SpinConfiguration(spins, float(energy)), int(size)


def sample_configurations(couplings, T: float, n_updates: int, seed=0, backend="cumulative",
                          start=None) -> np.ndarray:
    """Configuration index (site 0 most significant, up-spin = 1) after every update."""
    prep = _Prepared(couplings, T)
    L = prep.J.shape[0]
    if L > 30:
        raise InvalidParameterError("configuration traces are limited to L <= 30")
    spins = np.ones(L, dtype=np.int8) if start is None else np.asarray(start, np.int8).copy()
    trace = np.empty(n_updates, dtype=np.int64)
    _chain(spins, prep.J, prep.cum, prep.p, prep.rowsum, prep.T, rng_state(seed), n_updates, 0,
           _backend_code(backend), float(_energy(spins, prep.J)), _EMPTY_F, _EMPTY_F, trace)
    return trace


@dataclass
class McEstimate:
    """Chain averages with block-bootstrap errors.

    ``blocks`` holds the 64 block means of every recorded series so that derived
    quantities (Binder cumulant) can be bootstrapped consistently.
    """

    L: int
    T: float
    means: dict
    errors: dict
    blocks: dict
    n_measure: int
    every: int
    n_burn: int
    seed: int
    mean_cluster: float
    energy_audit: float
    params: dict = field(default_factory=dict)

    def __getitem__(self, key):
        return self.means[key]


def _bootstrap_seed(seed) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])


def block_bootstrap(series: dict, n_blocks: int = N_BLOCKS, n_boot: int = N_BOOTSTRAP, seed=0):
    """Return (block means, bootstrap errors of the mean) for each named series."""
    blocks, errors = {}, {}
    rng = _bootstrap_seed(seed)
    n = min(len(v) for v in series.values())
    size = n // n_blocks
    if size < 1:
        raise InvalidParameterError(f"need at least {n_blocks} samples for block bootstrap")
    picks = rng.integers(0, n_blocks, size=(n_boot, n_blocks))
    for name, v in series.items():
        b = np.asarray(v[: size * n_blocks]).reshape(n_blocks, size).mean(axis=1)
        blocks[name] = b
        errors[name] = float(b[picks].mean(axis=1).std(ddof=1))
    return blocks, errors


def run_chain(couplings, T: float, n_measure: int, n_burn: int | None = None, seed=0, *,
              backend: str = "cumulative", every: int | None = None) -> McEstimate:
    """Burn in, then record ``n_measure`` samples of m = sum s_i / L and E.

    Without an explicit ``every`` the spacing is ceil(L / mean cluster size),
    estimated from the burn-in. The default burn-in is 10% of the total update
    count, at least 1000 updates.
    """
    if n_measure < 100:
        raise InvalidParameterError("n_measure must be >= 100")
    prep = _Prepared(couplings, T)
    L = prep.J.shape[0]
    code = _backend_code(backend)
    s = rng_state(seed)
    spins = np.ones(L, dtype=np.int8)
    energy = float(_energy(spins, prep.J))
    args = (prep.J, prep.cum, prep.p, prep.rowsum, prep.T, s)

    pilot = MIN_BURN if n_burn is None else min(MIN_BURN, n_burn)
    energy, size, audit = _chain(spins, *args, pilot, 0, code, energy, _EMPTY_F, _EMPTY_F, _EMPTY_I)
    mean_cluster = size / max(pilot, 1)
    if every is None:
        every = max(1, math.ceil(L / max(mean_cluster, 1.0)))
    if n_burn is None:
        n_burn = max(MIN_BURN, int(0.1 * n_measure * every))
    rest = n_burn - pilot
    if rest > 0:
        energy, size, a = _chain(spins, *args, rest, 0, code, energy, _EMPTY_F, _EMPTY_F, _EMPTY_I)
        audit = max(audit, a)

    out_m = np.empty(n_measure)
    out_e = np.empty(n_measure)
    energy, size, a = _chain(spins, *args, n_measure * every, every, code, energy, out_m, out_e, _EMPTY_I)
    audit = max(audit, a)
    mean_cluster = size / (n_measure * every)

    series = {
        "m": out_m,
        "abs_m": np.abs(out_m),
        "m2": out_m**2,
        "m4": out_m**4,
        "eps": out_e / L,
    }
    blocks, errors = block_bootstrap(series, seed=seed)
    means = {k: float(np.mean(v)) for k, v in series.items()}
    meta = couplings.metadata() if isinstance(couplings, CouplingMatrix) else {}
    return McEstimate(L, float(T), means, errors, blocks, n_measure, every, n_burn, seed,
                      float(mean_cluster), float(audit), {**meta, "backend": backend})


def u4_from_estimate(est: McEstimate, n_boot: int = N_BOOTSTRAP) -> tuple[float, float]:
    """Binder cumulant 1 - <m^4>/(3<m^2>^2) with a block-bootstrap error."""
    m2, m4 = est.means["m2"], est.means["m4"]
    if m2 <= 0:
        raise InvalidParameterError("<m^2> is zero; Binder cumulant undefined")
    b2, b4 = est.blocks["m2"], est.blocks["m4"]
    rng = _bootstrap_seed((est.seed, 1))
    picks = rng.integers(0, b2.size, size=(n_boot, b2.size))
    r2, r4 = b2[picks].mean(axis=1), b4[picks].mean(axis=1)
    u = 1 - r4 / (3 * r2**2)
    return float(1 - m4 / (3 * m2**2)), float(np.std(u, ddof=1))


def merge_estimates(estimates: list[McEstimate]) -> dict:
    """Inverse-variance weighted means and errors across same-parameter chains."""
    keys = estimates[0].means.keys()
    out = {}
    for k in keys:
        v = np.array([e.means[k] for e in estimates])
        err = np.array([e.errors[k] for e in estimates])
        if np.all(err > 0):
            w = 1 / err**2
            out[k] = (float(w @ v / w.sum()), float(1 / np.sqrt(w.sum())))
        else:
            out[k] = (float(v.mean()), 0.0)
    return out


def enumerate_moments(couplings, T: float) -> dict:
    """Exact Boltzmann averages of |m|, m^2, m^4 and E/L by summing all 2^L configurations."""
    J = couplings.J if isinstance(couplings, CouplingMatrix) else np.asarray(couplings, float)
    L = J.shape[0]
    if L > 22:
        raise InvalidParameterError("exhaustive enumeration limited to L <= 22")
    idx = np.arange(2**L, dtype=np.int64)
    S = (2 * ((idx[:, None] >> np.arange(L - 1, -1, -1)) & 1) - 1).astype(float)
    E = -0.5 * np.einsum("bi,bi->b", S @ J, S)
    w = np.exp(-(E - E.min()) / T)
    w /= w.sum()
    m = S.mean(axis=1)
    return {"abs_m": w @ np.abs(m), "m2": w @ m**2, "m4": w @ m**4, "eps": w @ E / L,
            "weights": w, "energies": E}
