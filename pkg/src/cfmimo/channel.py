"""Propagation, fading, pilot-based estimation, echo synthesis, DFRC covariance."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cfmimo.scenario import Deployment, PathLossParams, SystemConfig, rng_stream

# Sensing-lobe membership rule for clutter accounting (the spatial clutter
# model is an artifact choice): a scatterer affects link (l, k) when it lies
# within a cone of half-angle BEAM_HALF_ANGLE_FACTOR/N radians about the
# AP->UE bearing and no farther than CLUTTER_RANGE_FACTOR times the link
# distance from the AP.
BEAM_HALF_ANGLE_FACTOR = 2.0
CLUTTER_RANGE_FACTOR = 1.2

SPEED_OF_LIGHT = 299792458.0


def db_to_lin(db):
    return 10.0 ** (np.asarray(db, dtype=float) / 10.0)


def lin_to_db(x):
    return 10.0 * np.log10(np.asarray(x, dtype=float))


def dbm_to_watts(dbm):
    return 10.0 ** ((np.asarray(dbm, dtype=float) - 30.0) / 10.0)


def watts_to_dbm(w):
    return 10.0 * np.log10(np.asarray(w, dtype=float)) + 30.0


def path_loss_db(params: PathLossParams, d_m, shadow_db=0.0):
    """Log-distance loss PL0 + 10*gamma*log10(d/d0) + shadow; d clamped at d0."""
    d = np.maximum(np.asarray(d_m, dtype=float), params.d0_m)
    return params.pl0_db + 10.0 * params.gamma_pl * np.log10(d / params.d0_m) + shadow_db


def rssi_dbm(p_t_dbm, pl_db):
    return np.asarray(p_t_dbm, dtype=float) - np.asarray(pl_db, dtype=float)


@dataclass
class LinkBudget:
    """Per-(AP, UE) large-scale state with shadowing frozen per deployment.

    The same frozen shadow realization feeds RSSI, masking, and SNR so every
    stage of the association pipeline observes one consistent channel, and the
    received power P_r equals the RSSI under this model.
    """

    distance_m: np.ndarray   # (L, K)
    shadow_db: np.ndarray    # (L, K)
    pl_db: np.ndarray        # (L, K)
    rssi_dbm: np.ndarray     # (L, K)
    gain_lin: np.ndarray     # (L, K) linear channel gain 10^(-PL/10)

    @property
    def p_r_dbm(self) -> np.ndarray:
        return self.rssi_dbm


def link_budget(deployment: Deployment, config: SystemConfig) -> LinkBudget:
    diff = deployment.ap_pos[:, None, :] - deployment.ue_pos[None, :, :]
    d = np.maximum(np.linalg.norm(diff, axis=2), config.pathloss.d0_m)
    rng = rng_stream(config.seed, "shadow")
    shadow = rng.normal(0.0, config.pathloss.shadow_sigma_db, size=d.shape)
    pl = path_loss_db(config.pathloss, d, shadow)
    rs = rssi_dbm(config.p_t_dbm, pl)
    return LinkBudget(distance_m=d, shadow_db=shadow, pl_db=pl, rssi_dbm=rs, gain_lin=db_to_lin(-pl))


def received_power_dbm(budget: LinkBudget, l: int, k: int) -> float:
    return float(budget.p_r_dbm[l, k])


# --- spatial correlation and small-scale fading -----------------------------

def local_scattering_correlation(n_antennas: int, nominal_angle_rad: float,
                                 spread_deg: float) -> np.ndarray:
    """Gaussian local-scattering correlation for a half-wavelength ULA, trace N."""
    spread = math.radians(spread_deg)
    idx = np.arange(n_antennas)
    delta = idx[:, None] - idx[None, :]
    phase = np.exp(1j * math.pi * delta * math.sin(nominal_angle_rad))
    damp = np.exp(-0.5 * (spread * math.pi * delta * math.cos(nominal_angle_rad)) ** 2)
    return phase * damp


def correlation_sqrt(R: np.ndarray, tol: float = 1e-10) -> np.ndarray:
    """Hermitian square root; eigenvalues below -tol are rejected, tiny negatives clamped."""
    vals, vecs = np.linalg.eigh(R)
    if np.min(vals) < -tol:
        raise ValueError(f"correlation matrix is not PSD (min eigenvalue {np.min(vals):.3e})")
    # eigenvalue dust would leak sqrt(eps)-sized components into null directions
    vals = np.where(vals < np.max(vals) * 1e-14, 0.0, vals)
    return (vecs * np.sqrt(vals)) @ vecs.conj().T


def draw_channel(R: np.ndarray, beta: float, rng: np.random.Generator, size: int | None = None):
    """Correlated Rayleigh draws h = sqrt(beta) R^(1/2) w, w ~ CN(0, I)."""
    n = R.shape[0]
    shape = (n,) if size is None else (size, n)
    w = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
    half = correlation_sqrt(R)
    return math.sqrt(beta) * w @ half.T


def clutter_channel(R: np.ndarray, rng: np.random.Generator, size: int | None = None):
    """Target-free channel R^(1/2) W R^(1/2) with W i.i.d. CN(0, 1)."""
    n = R.shape[0]
    shape = (n, n) if size is None else (size, n, n)
    w = (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / math.sqrt(2.0)
    half = correlation_sqrt(R)
    return half @ w @ half


# --- pilots and MMSE estimation ----------------------------------------------

def pilot_rx(h_set, p_p, tau_p: int, sigma2: float, rng: np.random.Generator):
    """Received pilot observation for one pilot sequence at one AP.

    h_set holds the channels of the co-pilot UEs (those sharing this
    sequence); p_p their pilot powers (scalar or per-UE).
    """
    h_set = np.atleast_2d(np.asarray(h_set, dtype=complex))
    n = h_set.shape[1]
    p = np.broadcast_to(np.asarray(p_p, dtype=float), (h_set.shape[0],))
    if np.any(p < 0):
        raise ValueError("pilot power must be >= 0")
    y = (np.sqrt(tau_p * p)[:, None] * h_set).sum(axis=0)
    noise = math.sqrt(sigma2 / 2.0) * (rng.standard_normal(n) + 1j * rng.standard_normal(n))
    return y + noise


@dataclass
class ChannelEstimate:
    h_hat: np.ndarray   # (N,)
    B: np.ndarray       # (N, N) error covariance
    Psi: np.ndarray     # (N, N) pilot observation covariance


def mmse_estimate(y_p, R: np.ndarray, p_k: float, tau_p: int, sigma2: float,
                  copilot=(), sparse_error_x: int | None = None) -> ChannelEstimate:
    """MMSE channel estimate from a pilot observation.

    `copilot` lists (power, correlation) pairs of contaminating UEs sharing the
    pilot; they widen Psi. With sparse_error_x set, the error covariance is
    replaced by the high-SNR sparse-link shortcut (sigma2 * X / (tau_p * p_k)) I.
    """
    R = np.asarray(R, dtype=complex)
    n = R.shape[0]
    Psi = tau_p * p_k * R + sigma2 * np.eye(n)
    for p_i, R_i in copilot:
        Psi = Psi + tau_p * p_i * np.asarray(R_i, dtype=complex)
    try:
        filt = np.linalg.solve(Psi, np.asarray(y_p, dtype=complex))
        inv_R = np.linalg.solve(Psi, R)
    except np.linalg.LinAlgError as e:
        raise ValueError("pilot observation covariance is singular") from e
    h_hat = math.sqrt(p_k * tau_p) * (R @ filt)
    if sparse_error_x is not None:
        if p_k <= 0:
            raise ValueError("sparse error shortcut needs p_k > 0")
        B = (sigma2 * sparse_error_x / (tau_p * p_k)) * np.eye(n)
    else:
        B = R - tau_p * p_k * (R @ inv_R)
    return ChannelEstimate(h_hat=h_hat, B=B, Psi=Psi)


def assign_pilots(serving_sets, K: int, tau_p: int) -> np.ndarray:
    """Round-robin pilots, avoiding collisions among UEs served by a common AP.

    serving_sets maps UE index -> iterable of serving AP indices (empty sets
    allowed). With each AP serving at most tau_p UEs a collision-free choice
    usually exists; if every pilot is taken the round-robin default stands.
    """
    pilots = np.full(K, -1, dtype=int)
    ap_members: dict[int, list[int]] = {}
    for k in range(K):
        used = set()
        for l in serving_sets.get(k, ()):
            for other in ap_members.get(l, ()):
                used.add(int(pilots[other]))
        pilot = k % tau_p
        for step in range(tau_p):
            cand = (k + step) % tau_p
            if cand not in used:
                pilot = cand
                break
        pilots[k] = pilot
        for l in serving_sets.get(k, ()):
            ap_members.setdefault(l, []).append(k)
    return pilots


# --- uplink data and MR combining --------------------------------------------

def ul_data_rx(h_by_ap: np.ndarray, symbols: np.ndarray, sigma2: float,
               rng: np.random.Generator):
    """Received uplink data y_l = sum_k h_lk s_k + n_l for every AP.

    h_by_ap has shape (L, K, N); symbols (K,) or (K, S). Returns (L, N) or
    (L, N, S).
    """
    h = np.asarray(h_by_ap, dtype=complex)
    s = np.asarray(symbols, dtype=complex)
    if s.ndim == 1:
        y = np.einsum("lkn,k->ln", h, s)
    else:
        y = np.einsum("lkn,ks->lns", h, s)
    noise = math.sqrt(sigma2 / 2.0) * (rng.standard_normal(y.shape) + 1j * rng.standard_normal(y.shape))
    return y + noise


def mr_combine(y_by_ap, combiners, serving: list[int]):
    """Coherent MR output sum_{l in serving} combiner_l^H y_l."""
    if len(serving) == 0:
        raise ValueError("empty serving set")
    out = None
    for l in serving:
        c = np.asarray(combiners[l], dtype=complex)
        contrib = np.einsum("n,n...->...", c.conj(), np.asarray(y_by_ap[l], dtype=complex))
        out = contrib if out is None else out + contrib
    return out


def ul_data_rx_mr(h_by_ap, symbols, sigma2, combiners, serving, rng):
    """Uplink reception followed by MR combining for one UE's serving set."""
    y = ul_data_rx(h_by_ap, symbols, sigma2, rng)
    return mr_combine(y, combiners, serving)


# --- sensing: array response, echo synthesis, clutter geometry ---------------

def array_response(phi: float, theta: float, n_antennas: int) -> np.ndarray:
    """ULA steering vector, entries exp(j n pi sin(phi) cos(theta))."""
    n = np.arange(n_antennas)
    return np.exp(1j * math.pi * n * math.sin(phi) * math.cos(theta))


def bearing(src, dst) -> float:
    return math.atan2(float(dst[1]) - float(src[1]), float(dst[0]) - float(src[0]))


@dataclass
class ClutterGeometry:
    """Per-(AP, scatterer) geometry cached once per deployment."""

    dist: np.ndarray          # (L, S)
    angle: np.ndarray         # (L, S) bearing AP -> scatterer
    two_way_gain: np.ndarray  # (L, S) linear, both hops at the config exponent


def clutter_geometry(deployment: Deployment, pathloss: PathLossParams) -> ClutterGeometry:
    diff = deployment.scatterer_pos[None, :, :] - deployment.ap_pos[:, None, :]
    d = np.maximum(np.linalg.norm(diff, axis=2), pathloss.d0_m)
    ang = np.arctan2(diff[..., 1], diff[..., 0])
    g2 = db_to_lin(-2.0 * path_loss_db(pathloss, d))
    return ClutterGeometry(dist=d, angle=ang, two_way_gain=g2)


def _lobe_mask(geom: ClutterGeometry, l: int, ue_pos, ap_pos, link_dist: float,
               n_antennas: int) -> np.ndarray:
    half_angle = BEAM_HALF_ANGLE_FACTOR / n_antennas
    ang_ue = bearing(ap_pos, ue_pos)
    dphi = np.angle(np.exp(1j * (geom.angle[l] - ang_ue)))
    return (np.abs(dphi) <= half_angle) & (geom.dist[l] <= CLUTTER_RANGE_FACTOR * link_dist)


def clutter_return(geom: ClutterGeometry, deployment: Deployment, config: SystemConfig,
                   l: int, k: int, link_dist: float) -> tuple[float, int]:
    """Clutter power (W) and scatterer count inside the (l, k) sensing lobe."""
    if deployment.scatterer_pos.shape[0] == 0:
        return 0.0, 0
    in_lobe = _lobe_mask(geom, l, deployment.ue_pos[k], deployment.ap_pos[l],
                         link_dist, config.N)
    if not np.any(in_lobe):
        return 0.0, 0
    p_t_w = float(dbm_to_watts(config.p_t_dbm))
    power = config.sigma_c2 * p_t_w * float(
        np.sum(deployment.scatterer_refl[in_lobe] * geom.two_way_gain[l][in_lobe])
    )
    return power, int(np.count_nonzero(in_lobe))


def synth_echo(ap_pos, target_pos, x, config: SystemConfig, clutter_var_w: float,
               noise_var_w: float, rng: np.random.Generator, n_trials: int | None = None,
               rcs_amplitude: complex | None = None):
    """Monostatic echo over one dwell: target reflection + clutter + noise.

    x is the (N, L_d) transmit matrix over the dwell. The RCS coefficient is
    drawn once per dwell (Swerling-I) unless rcs_amplitude pins it. Returns
    (N, L_d), or (n_trials, N, L_d) with independent dwells.
    """
    x = np.asarray(x, dtype=complex)
    n, l_d = x.shape
    if l_d < 1:
        raise ValueError("need at least one sensing symbol")
    phi = bearing(ap_pos, target_pos)
    a = array_response(phi, 0.0, n)
    d = max(math.hypot(target_pos[0] - ap_pos[0], target_pos[1] - ap_pos[1]),
            config.pathloss.d0_m)
    beta_2way = float(db_to_lin(-2.0 * path_loss_db(config.pathloss, d)))
    t = 1 if n_trials is None else n_trials

    if rcs_amplitude is None:
        alpha = math.sqrt(config.sigma_rcs / 2.0) * (rng.standard_normal(t) + 1j * rng.standard_normal(t))
    else:
        alpha = np.full(t, complex(rcs_amplitude))
    target = alpha[:, None, None] * math.sqrt(beta_2way) * np.outer(a, a @ x)[None, :, :]

    h_c = (rng.standard_normal((t, n, n)) + 1j * rng.standard_normal((t, n, n))) / math.sqrt(2.0)
    clutter = math.sqrt(clutter_var_w / n) * np.einsum("tij,jm->tim", h_c, x)

    noise = math.sqrt(noise_var_w / 2.0) * (rng.standard_normal((t, n, l_d)) + 1j * rng.standard_normal((t, n, l_d)))
    y = target + clutter + noise
    return y[0] if n_trials is None else y


def dfrc_covariance(W: np.ndarray):
    """Transmit covariance R = W W^H and the per-stream rank-1 terms."""
    W = np.atleast_2d(np.asarray(W, dtype=complex))
    R = W @ W.conj().T
    per_stream = np.einsum("ng,mg->gnm", W, W.conj())
    return R, per_stream
