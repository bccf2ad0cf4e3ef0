"""Communication performance: Q kernels, pairwise error probabilities, SER."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from cfmimo import channel
from cfmimo.scenario import (
    Deployment,
    InfeasibleModelError,
    ServiceType,
    SystemConfig,
    rng_stream,
)


@dataclass
class Constellation:
    name: str
    points: np.ndarray  # unit average energy

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=complex)
        energy = float(np.mean(np.abs(self.points) ** 2))
        if abs(energy - 1.0) > 1e-12:
            raise ValueError(f"constellation {self.name} mean energy {energy!r} != 1")
        diffs = [abs(a - b) for i, a in enumerate(self.points) for b in self.points[i + 1:]]
        if min(diffs) <= 0:
            raise ValueError(f"constellation {self.name} has coincident points")

    @property
    def M(self) -> int:
        return len(self.points)


BPSK = Constellation("BPSK", np.array([1.0, -1.0]))
# Gray-labelled QPSK, unit symbol energy
QPSK = Constellation("QPSK", np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / math.sqrt(2.0))

_BY_NAME = {"bpsk": BPSK, "qpsk": QPSK}


def constellation(name: str) -> Constellation:
    try:
        return _BY_NAME[name.lower()]
    except KeyError:
        raise ValueError(f"unknown modulation {name!r} (expected bpsk or qpsk)") from None


def q_exact(x):
    """Gaussian tail probability via the complementary error function."""
    xs = np.asarray(x, dtype=float)
    out = np.array([0.5 * math.erfc(v / math.sqrt(2.0)) for v in np.atleast_1d(xs)])
    return float(out[0]) if xs.ndim == 0 else out.reshape(xs.shape)


def q_approx(x):
    """Two-exponential surrogate exp(-x^2/2)/12 + exp(-2x^2/3)/4, x >= 0."""
    xs = np.asarray(x, dtype=float)
    if np.any(xs < 0):
        raise ValueError("q_approx is defined for x >= 0")
    out = np.exp(-xs ** 2 / 2.0) / 12.0 + np.exp(-2.0 * xs ** 2 / 3.0) / 4.0
    return float(out) if xs.ndim == 0 else out


def pep_conditioned(h_hat, s_i: complex, s_j: complex, Sigma) -> float:
    """Pairwise error probability conditioned on a channel estimate.

    Q(||u||^2 / sqrt(2 u^H Sigma u)) with u = h_hat (s_i - s_j); the general
    covariance form of the ML-detector bound.
    """
    if s_i == s_j:
        raise ValueError("identical symbols have no pairwise error event")
    u = np.asarray(h_hat, dtype=complex) * (s_i - s_j)
    num = float(np.vdot(u, u).real)
    quad = float(np.vdot(u, np.asarray(Sigma, dtype=complex) @ u).real)
    if quad <= 0.0:
        return 0.5 if num == 0.0 else 0.0
    return q_exact(num / math.sqrt(2.0 * quad))


def pep_conditioned_diag(h_hat, s_i: complex, s_j: complex, sigma2: float, b2: float) -> float:
    """Diagonal-covariance reduction Q(||u|| / sqrt(2 (sigma2 + b2)))."""
    n = np.asarray(h_hat, dtype=complex).size
    return pep_conditioned(h_hat, s_i, s_j, (sigma2 + b2) * np.eye(n))


def effective_alpha(p: float, tau_p: int, beta, sigma2: float, X: int):
    """Per-link effective estimate variance p tau_p beta^2 / (p tau_p beta + X sigma2)."""
    beta = np.asarray(beta, dtype=float)
    return p * tau_p * beta ** 2 / (p * tau_p * beta + X * sigma2)


def residual_error_power(sigma2: float, K: int, tau_p: int, X: int, mode: str = "sparse") -> float:
    """Aggregate channel-estimation-error power.

    "sparse" gives c^2 = sigma2 K / (tau_p X), the term the final SER uses;
    "dense" gives the alternate b^2 = sigma2 X K / tau_p.
    """
    if mode == "sparse":
        return sigma2 * K / (tau_p * X)
    if mode == "dense":
        return sigma2 * X * K / tau_p
    raise ValueError(f"unknown mode {mode!r}")


def mgf_gamma(t: float, alphas, deltas, N: int) -> float:
    """MGF of the effective signal strength: prod_l (1 - t sum_k a_lk |d_k|^2)^(-N)."""
    a = np.atleast_1d(np.asarray(alphas, dtype=float))
    d2 = np.abs(np.asarray(deltas, dtype=complex)) ** 2
    if a.ndim == 2:
        link_sums = a @ np.atleast_1d(d2)
    else:
        link_sums = a * d2
    link_sums = np.atleast_1d(link_sums)
    terms = 1.0 - t * link_sums
    if np.any(terms <= 0.0):
        raise ValueError("MGF evaluated beyond its pole (1 - t*s <= 0)")
    return float(np.prod(terms ** (-float(N))))


def pep_average(alphas, delta: complex, sigma2: float, c2: float, N: int) -> float:
    """Fading-averaged pairwise error probability via the two-point MGF rule."""
    D = 2.0 * (sigma2 + c2)
    return (mgf_gamma(-1.0 / (4.0 * D), alphas, delta, N) / 12.0
            + mgf_gamma(-1.0 / (3.0 * D), alphas, delta, N) / 4.0)


def ser_theory(constel: Constellation, alphas, sigma2: float, c2: float, N: int,
               clamp: bool = True) -> float:
    """Closed-form SER: average pairwise error over all ordered symbol pairs."""
    pts = constel.points
    total = 0.0
    for i in range(constel.M):
        for j in range(constel.M):
            if i == j:
                continue
            total += pep_average(alphas, pts[i] - pts[j], sigma2, c2, N)
    ser = total / constel.M
    return min(max(ser, 0.0), 1.0) if clamp else ser


def ser_awgn_approx(constel: Constellation, snr_lin: float) -> float:
    """Conditioned SER of a unit channel in AWGN with the two-exponential kernel."""
    sigma2 = 1.0 / snr_lin
    total = 0.0
    for i in range(constel.M):
        for j in range(constel.M):
            if i == j:
                continue
            d = abs(constel.points[i] - constel.points[j])
            total += q_approx(d ** 2 / math.sqrt(2.0 * sigma2 * d ** 2))
    return min(total / constel.M, 1.0)


def wilson_halfwidth(errors: int, n: int, z: float = 1.959963984540054) -> float:
    """Half-width of the 95% Wilson score interval."""
    if n == 0:
        return 0.0
    p = errors / n
    denom = 1.0 + z * z / n
    return z * math.sqrt(p * (1.0 - p) / n + z * z / (4.0 * n * n)) / denom


@dataclass
class SerPoint:
    snr_db: float
    ser_theory: float
    ser_mc: float
    mc_symbols: int
    ci95: float


def ser_csv(points_by_scheme: dict[str, dict[str, list[SerPoint]]]) -> str:
    lines = ["scheme,modulation,snr_db,ser_theory,ser_mc,ci95,n_symbols"]
    for scheme in sorted(points_by_scheme):
        for mod in sorted(points_by_scheme[scheme]):
            for p in points_by_scheme[scheme][mod]:
                lines.append(
                    f"{scheme},{mod},{repr(float(p.snr_db))},{repr(float(p.ser_theory))},"
                    f"{repr(float(p.ser_mc))},{repr(float(p.ci95))},{p.mc_symbols}"
                )
    return "\n".join(lines) + "\n"


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("CFMIMO_THREADS", "1")))
    except ValueError:
        return 1


# --- link-level AWGN reference ------------------------------------------------

def ser_awgn_mc(constel: Constellation, snr_db_grid, n_symbols: int, seed: int):
    """Single-link, perfect-CSI, unit-channel Monte-Carlo SER (textbook AWGN)."""
    out = []
    for i, snr_db in enumerate(np.atleast_1d(snr_db_grid)):
        sigma2 = 10.0 ** (-float(snr_db) / 10.0)
        rng = rng_stream(seed, "mc", 1000 + i)
        idx = rng.integers(0, constel.M, n_symbols)
        s = constel.points[idx]
        noise = math.sqrt(sigma2 / 2.0) * (rng.standard_normal(n_symbols)
                                           + 1j * rng.standard_normal(n_symbols))
        y = s + noise
        det = np.argmin(np.abs(y[:, None] - constel.points[None, :]) ** 2, axis=1)
        errors = int(np.count_nonzero(det != idx))
        out.append(SerPoint(float(snr_db), math.nan, errors / n_symbols, n_symbols,
                            wilson_halfwidth(errors, n_symbols)))
    return out


# --- scenario-level Monte-Carlo -----------------------------------------------

def _link_sqrt_factors(deployment, config, pairs):
    """Correlation square roots per needed link (identity model returns None)."""
    if config.correlation_model == "identity":
        return None
    factors = {}
    for (l, k) in pairs:
        ang = channel.bearing(deployment.ap_pos[l], deployment.ue_pos[k])
        R = channel.local_scattering_correlation(config.N, ang, config.angular_spread_deg)
        factors[(l, k)] = channel.correlation_sqrt(R)
    return factors


def ser_monte_carlo(deployment: Deployment, config: SystemConfig, A, constel: Constellation,
                    snr_db_grid, n_symbols: int, seed: int, perfect_csi: bool = False,
                    gain_ref: float | None = None):
    """Uplink SER of communication and JCAS UEs under a given association.

    Estimated channels (MMSE with the scheme's pilot reuse), MR combining over
    each UE's serving set, ML detection.  snr_db is the per-symbol receive SNR
    of a reference link with gain `gain_ref` (default: median gain over the
    serving links of A); the same reference must be reused across schemes to
    put them on one axis.
    """
    A = np.asarray(A)
    L, K, N = deployment.L, deployment.K, config.N
    budget = channel.link_budget(deployment, config)
    gains = budget.gain_lin
    if gain_ref is None:
        sel = gains[np.asarray(A) == 1]
        gain_ref = float(np.median(sel)) if sel.size else 1.0
    g = gains / gain_ref

    p_lin = channel.dbm_to_watts(deployment.ue_power_dbm)
    p_rel = p_lin / float(np.median(p_lin))

    eval_ues = [k for k in range(K) if int(deployment.ue_service[k]) in
                (ServiceType.COM, ServiceType.JCAS)]
    serving = {k: np.flatnonzero(A[:, k] == 1) for k in range(K)}
    for k in eval_ues:
        if serving[k].size == 0:
            raise InfeasibleModelError(f"UE {k} has an empty serving set")
    needed_aps = sorted(set(int(l) for k in eval_ues for l in serving[k]))
    ap_row = {l: i for i, l in enumerate(needed_aps)}

    # every UE sends pilots (sensing UEs contend for sequences too); only
    # communication and JCAS UEs carry uplink data
    tx_ues = list(range(K))
    pilots = channel.assign_pilots(serving, K, config.tau_p)
    pilot_groups: dict[int, list[int]] = {}
    for k in tx_ues:
        pilot_groups.setdefault(int(pilots[k]), []).append(k)
    tx_pos = {k: i for i, k in enumerate(tx_ues)}

    sqrt_factors = _link_sqrt_factors(
        deployment, config, [(l, k) for l in needed_aps for k in tx_ues])

    sym_per_block = max(1, config.tau_c - config.tau_p)
    points = []
    for gi, snr_db in enumerate(np.atleast_1d(snr_db_grid)):
        sigma2 = 10.0 ** (-float(snr_db) / 10.0)
        errors = np.zeros(len(eval_ues), dtype=np.int64)
        done = 0
        block = 0
        data_ues = [k for k in range(K) if int(deployment.ue_service[k]) in
                    (ServiceType.COM, ServiceType.JCAS)]
        while done < n_symbols:
            nsym = min(sym_per_block, n_symbols - done)
            rng = rng_stream(seed, "mc", gi, block)
            errors += _ser_one_block(
                rng, nsym, sigma2, g, p_rel, constel, config, deployment,
                eval_ues, tx_ues, tx_pos, data_ues, serving, needed_aps, ap_row,
                pilot_groups, pilots, perfect_csi, sqrt_factors)
            done += nsym
            block += 1

        c2 = residual_error_power(sigma2, K, config.tau_p, config.X)
        theory = float(np.mean([
            ser_theory(constel,
                       effective_alpha(p_rel[k], config.tau_p, g[serving[k], k], sigma2, config.X),
                       sigma2, c2, N)
            for k in eval_ues
        ]))
        pooled = int(errors.sum())
        n_tot = n_symbols * len(eval_ues)
        points.append(SerPoint(float(snr_db), theory, pooled / n_tot, n_symbols,
                               wilson_halfwidth(pooled, n_tot)))
    return points


def _ser_one_block(rng, nsym, sigma2, g, p_rel, constel, config, deployment,
                   eval_ues, tx_ues, tx_pos, data_ues, serving, needed_aps, ap_row,
                   pilot_groups, pilots, perfect_csi, sqrt_factors):
    n_need, n_tx, N = len(needed_aps), len(tx_ues), config.N

    w = (rng.standard_normal((n_need, n_tx, N)) + 1j * rng.standard_normal((n_need, n_tx, N)))
    w /= math.sqrt(2.0)
    g_sub = g[np.ix_(needed_aps, tx_ues)]
    if sqrt_factors is None:
        h = np.sqrt(g_sub)[:, :, None] * w
    else:
        h = np.empty_like(w)
        for i, l in enumerate(needed_aps):
            for j, k in enumerate(tx_ues):
                h[i, j] = math.sqrt(g[l, k]) * (sqrt_factors[(l, k)] @ w[i, j])

    if perfect_csi:
        h_hat = {(l, k): h[ap_row[l], tx_pos[k]] for k in eval_ues for l in serving[k]}
    else:
        h_hat = {}
        for t, members in pilot_groups.items():
            amp = np.array([math.sqrt(config.tau_p * p_rel[k]) for k in members])
            y_p = np.einsum("k,lkn->ln", amp,
                            h[:, [tx_pos[k] for k in members], :]).astype(complex)
            y_p += math.sqrt(sigma2 / 2.0) * (rng.standard_normal((n_need, N))
                                              + 1j * rng.standard_normal((n_need, N)))
            if sqrt_factors is None:
                psi = config.tau_p * (g_sub[:, [tx_pos[m] for m in members]]
                                      @ p_rel[members]) + sigma2
            for k in members:
                if k not in eval_ues:
                    continue
                for l in serving[k]:
                    i = ap_row[l]
                    if sqrt_factors is None:
                        h_hat[(l, k)] = (math.sqrt(p_rel[k] * config.tau_p)
                                         * g[l, k] / psi[i]) * y_p[i]
                    else:
                        est = channel.mmse_estimate(
                            y_p[i], g[l, k] * (sqrt_factors[(l, k)] @ sqrt_factors[(l, k)].conj().T),
                            p_rel[k], config.tau_p, sigma2,
                            copilot=[(p_rel[m],
                                      g[l, m] * (sqrt_factors[(l, m)] @ sqrt_factors[(l, m)].conj().T))
                                     for m in members if m != k])
                        h_hat[(l, k)] = est.h_hat

    data_cols = [tx_pos[k] for k in data_ues]
    data_pos = {k: i for i, k in enumerate(data_ues)}
    idx = rng.integers(0, constel.M, (len(data_ues), nsym))
    s = constel.points[idx]
    amp_tx = np.sqrt(p_rel[data_ues])
    y = np.einsum("lkn,ks->lns", h[:, data_cols, :] * amp_tx[None, :, None], s)
    y += math.sqrt(sigma2 / 2.0) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))

    errors = np.zeros(len(eval_ues), dtype=np.int64)
    for pos, k in enumerate(eval_ues):
        z = np.zeros(nsym, dtype=complex)
        gain = 0.0
        for l in serving[k]:
            hh = h_hat[(l, k)]
            z += np.einsum("n,ns->s", hh.conj(), y[ap_row[l]])
            gain += float(np.vdot(hh, hh).real)
        gain *= math.sqrt(p_rel[k])
        det = np.argmin(np.abs(z[:, None] - gain * constel.points[None, :]) ** 2, axis=1)
        errors[pos] = np.count_nonzero(det != idx[data_pos[k]])
    return errors


# --- decision-metric statistics -------------------------------------------------

@dataclass
class DecisionMetricParams:
    h_hat: np.ndarray          # (N,)
    delta: complex             # symbol difference
    sigma2: float
    powers: tuple = ()         # per-UE uplink powers
    error_covs: tuple = ()     # matching per-UE estimation-error covariances


@dataclass
class DecisionMetricStats:
    mean: complex
    variance: float
    predicted_variance: float
    n_trials: int


def decision_metric_stats(n_trials: int, params: DecisionMetricParams,
                          rng: np.random.Generator) -> DecisionMetricStats:
    """Empirical mean/variance of J = u^H (n + estimation-error leakage)."""
    u = np.asarray(params.h_hat, dtype=complex) * params.delta
    n_dim = u.size
    v = math.sqrt(params.sigma2 / 2.0) * (rng.standard_normal((n_trials, n_dim))
                                          + 1j * rng.standard_normal((n_trials, n_dim)))
    cov = params.sigma2 * np.eye(n_dim)
    for p_k, B_k in zip(params.powers, params.error_covs):
        B_k = np.asarray(B_k, dtype=complex)
        half = channel.correlation_sqrt(B_k)
        wk = (rng.standard_normal((n_trials, n_dim)) + 1j * rng.standard_normal((n_trials, n_dim)))
        wk /= math.sqrt(2.0)
        v += math.sqrt(p_k) * wk @ half.T
        cov = cov + p_k * B_k
    j = v @ u.conj()
    predicted = float(np.vdot(u, cov @ u).real)
    return DecisionMetricStats(complex(j.mean()), float(j.var()), predicted, n_trials)
