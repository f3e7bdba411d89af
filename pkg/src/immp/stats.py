"""Observables and estimators for trajectories of the samplers."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .chain import delta_k, neumann_spectral_transform
from .errors import InsufficientCrossings


@dataclass
class TimeSeries:
    values: np.ndarray
    dt_between_samples: float = 1.0
    seed: int = 0
    replica: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    @property
    def times(self):
        return self.dt_between_samples * np.arange(self.values.shape[-1])


def chain_length(q):
    """l = q_N - q_1."""
    q = np.asarray(q)
    return q[..., -1] - q[..., 0]


def center_of_mass(q):
    """c = q_{N/2} (1-based), the particle at the middle of the chain."""
    q = np.asarray(q)
    return q[..., q.shape[-1] // 2 - 1]


def autocorrelation(ts, max_lag):
    """Biased autocorrelation estimate, normalized to 1 at lag 0 (FFT based)."""
    x = np.asarray(getattr(ts, "values", ts), dtype=float)
    n = x.shape[-1]
    x = x - x.mean(axis=-1, keepdims=True)
    nfft = 1 << int(np.ceil(np.log2(2 * n)))
    f = np.fft.rfft(x, nfft, axis=-1)
    acov = np.fft.irfft(f * np.conj(f), nfft, axis=-1)[..., : max_lag + 1] / n
    return acov / acov[..., :1]


def silverman_bandwidth(samples):
    x = np.asarray(samples, dtype=float).ravel()
    sd = np.std(x, ddof=1) if x.size > 1 else 0.0
    if sd == 0:
        sd = 1.0
    return 1.06 * sd * x.size ** (-0.2)


def kde_grid(samples, n_points=512, bandwidth=None):
    x = np.asarray(samples, dtype=float).ravel()
    bw = silverman_bandwidth(x) if bandwidth is None else bandwidth
    return np.linspace(x.min() - 3 * bw, x.max() + 3 * bw, n_points)


def kde_density(samples, grid=None, bandwidth=None, chunk=2048):
    """Gaussian kernel density estimate on a grid (Silverman bandwidth by default).

    Returns (grid, density).  The grid defaults to 512 points spanning the
    sample range extended by three bandwidths.
    """
    x = np.asarray(samples, dtype=float).ravel()
    bw = silverman_bandwidth(x) if bandwidth is None else bandwidth
    if grid is None:
        grid = kde_grid(x, bandwidth=bw)
    grid = np.asarray(grid, dtype=float)
    dens = np.zeros_like(grid)
    norm = 1.0 / (x.size * bw * np.sqrt(2 * np.pi))
    for start in range(0, x.size, chunk):
        u = (grid[:, None] - x[None, start : start + chunk]) / bw
        dens += np.exp(-0.5 * u * u).sum(axis=1)
    return grid, dens * norm


def relative_entropy(p_hat, q_hat, grid, floor=1e-12):
    """Discrete KL divergence sum p ln(p/q) dx on a uniform grid."""
    p = np.asarray(p_hat, dtype=float)
    q = np.maximum(np.asarray(q_hat, dtype=float), floor)
    dx = np.diff(grid).mean()
    mask = p > floor  # negligible mass below the floor is dropped
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])) * dx)


def transition_durations(values, dt=1.0, a=0.4, b=0.6):
    """Durations of all a->b and b->a passages of a sampled path.

    A passage runs from the last exit of the start set ({x <= a} or
    {x >= b}) to the first entry into the other set; both instants are
    located by linear interpolation between neighbouring samples.
    """
    x = np.asarray(values, dtype=float)
    region = np.zeros(x.size, dtype=np.int8)
    region[x <= a] = -1
    region[x >= b] = 1
    idx = np.flatnonzero(region)
    reg = region[idx]
    sw = np.flatnonzero(reg[1:] != reg[:-1])
    i, j = idx[sw], idx[sw + 1]
    up = reg[sw] == -1
    lev_from = np.where(up, a, b)
    lev_to = np.where(up, b, a)
    exit_t = i + (lev_from - x[i]) / (x[i + 1] - x[i])
    hit_t = (j - 1) + (lev_to - x[j - 1]) / (x[j] - x[j - 1])
    return dt * (hit_t - exit_t)


def mean_transition_time(ts, a=0.4, b=0.6, min_events=10):
    """Mean passage time between the levels a and b, with its standard error.

    A passage starts when the path last leaves one level set ({x <= a}
    or {x >= b}) and ends when it first reaches the other; crossings are
    located by linear interpolation between samples.  ``ts`` may be a
    TimeSeries or a list of them (events are pooled).
    """
    series = ts if isinstance(ts, (list, tuple)) else [ts]
    events = np.concatenate(
        [transition_durations(s.values, s.dt_between_samples, a, b) for s in series]
    )
    if events.size < min_events:
        raise InsufficientCrossings(f"only {events.size} transitions observed", events.size)
    se = events.std(ddof=1) / np.sqrt(events.size) if events.size > 1 else np.nan
    return float(events.mean()), float(se), int(events.size)


def norm_l2(q):
    """Discrete l2 norm sqrt((1/N) sum q_i^2)."""
    q = np.asarray(q, dtype=float)
    return np.sqrt(np.mean(q * q, axis=-1))


def norm_hminus1(p):
    """Discrete h_{-1} norm: sqrt(pbar^2 + (1/N) sum_{k>=1} p_k^2 / delta_k).

    p_k are the orthonormal cosine coefficients; the mean mode is
    weighted by one.
    """
    p = np.asarray(p, dtype=float)
    N = p.shape[-1]
    ph = neumann_spectral_transform(p)
    dk = delta_k(N, np.arange(1, N))
    mean = ph[..., 0] / np.sqrt(N)
    return np.sqrt(mean**2 + np.sum(ph[..., 1:] ** 2 / dk, axis=-1) / N)


def batch_means_error(x, n_batches=50):
    """Standard error of the mean of a correlated series by batch means."""
    x = np.asarray(x, dtype=float)
    m = x.shape[0] // n_batches
    b = x[: m * n_batches].reshape((n_batches, m) + x.shape[1:]).mean(axis=1)
    return b.std(axis=0, ddof=1) / np.sqrt(n_batches)


def chi2_histogram_test(samples, edges, probs):
    """Pearson chi-square of binned samples against bin probabilities.

    Bins with expected count below 5 are merged into their neighbours.
    Returns (statistic, p-value, degrees of freedom).
    """
    from scipy import stats

    counts, _ = np.histogram(samples, edges)
    n = counts.sum()
    exp = np.asarray(probs, dtype=float) * n / np.sum(probs)
    c2, e2 = _merge_small(counts.astype(float), exp)
    stat = float(np.sum((c2 - e2) ** 2 / e2))
    dof = len(c2) - 1
    return stat, float(stats.chi2.sf(stat, dof)), dof


def _merge_small(counts, exp, min_exp=5.0):
    c_out, e_out = [], []
    c_acc = e_acc = 0.0
    for c, e in zip(counts, exp):
        c_acc += c
        e_acc += e
        if e_acc >= min_exp:
            c_out.append(c_acc)
            e_out.append(e_acc)
            c_acc = e_acc = 0.0
    if e_acc > 0:
        if e_out:
            c_out[-1] += c_acc
            e_out[-1] += e_acc
        else:
            c_out.append(c_acc)
            e_out.append(e_acc)
    return np.array(c_out), np.array(e_out)


def chi2_two_sample(x, y, edges):
    """Chi-square homogeneity test of two samples on common bins."""
    from scipy import stats

    cx, _ = np.histogram(x, edges)
    cy, _ = np.histogram(y, edges)
    keep = (cx + cy) > 0
    table = np.vstack([cx[keep], cy[keep]])
    stat, p, dof, _ = stats.chi2_contingency(table, correction=False)
    return float(stat), float(p), int(dof)


def same_noise_coupling_distance(nubar_list, T, seed, N=128, dt=None, n_replicas=32, beta=10.0, gamma=1.0):
    """Pathwise distance between penalized and unpenalized harmonic chains.

    Every chain (the nubar = 0 reference runs plain Verlet) starts from the
    same canonical draw and is driven by the same noise stream.  Returns a
    list of (nubar, mean of ||q^nubar_T - q^0_T||^2_l2, standard error).
    """
    from .chain import ChainModel, build_chain_system, chain_equilibrium_harmonic
    from .integrators import IntegratorConfig, langevin_immp_step, verlet_baseline_step
    from .model import PhaseState, state_from_penalized_momentum
    from .rng import rng_stream

    if dt is None:
        dt = 0.25 / N
    n_steps = int(round(T / dt))
    cfg = IntegratorConfig(dt=dt)

    def run(nubar):
        ch = ChainModel(N=N, nubar=nubar, beta=beta, gamma=gamma, interaction="harmonic", external=False)
        model = build_chain_system(ch)
        q, p_nu = chain_equilibrium_harmonic(ch, n_replicas, rng_stream(seed, 0, "coupling/init"))
        noise = rng_stream(seed, 0, "coupling/noise")
        th = ch.thermostat()
        if nubar == 0:
            s = PhaseState.create(q, p_nu, n=N - 1)
            for _ in range(n_steps):
                s, _ = verlet_baseline_step(model, th, cfg, s, noise)
        else:
            pen = ch.penalty()
            s = state_from_penalized_momentum(model, pen, q, p_nu)
            for _ in range(n_steps):
                s, _ = langevin_immp_step(model, pen, th, cfg, s, noise)
        return s.q

    ref = run(0.0)
    rows = []
    for nubar in nubar_list:
        d2 = norm_l2(run(nubar) - ref) ** 2
        rows.append((float(nubar), float(d2.mean()), float(d2.std(ddof=1) / np.sqrt(d2.size))))
    return rows
