"""Semi-discretization of the regenerative model into a one-period linear map.

The state x = [q, q'] is propagated over m sub-intervals of the delay
tau = m * eps. Inside each sub-interval the time-periodic coefficients are
replaced by their averages and the delayed state by the mean of the two
bracketing history samples, giving

    x_{i+1} = P_i x_i + 1/2 R_i (x_{i-m} + x_{i-m+1}) + Q_i u_i

Stacking x_i with the position history q_{i-1} .. q_{i-m} gives the
augmented map y_{i+1} = E_i y_i + G_i u_i, and the product of m such maps is
the period transition Phi. Its spectral radius decides chatter stability.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from millstab.dynamics import (
    TWO_PI,
    OperatingPoint,
    ProcessParameters,
    _directional_parts_at_angle,
    directional_matrices,
    engagement_window,
    tooth_period,
)


class SdmNumericalError(ArithmeticError):
    def __init__(self, message: str, interval: int | None = None):
        super().__init__(message)
        self.interval = interval


@dataclass(frozen=True)
class SdmConfig:
    delay_resolution: int = 40
    quadrature_nodes: int = 8

    def __post_init__(self):
        if int(self.delay_resolution) != self.delay_resolution or self.delay_resolution < 4:
            raise ValueError(f"delay_resolution must be an integer >= 4, got {self.delay_resolution}")
        if self.quadrature_nodes < 1:
            raise ValueError("quadrature_nodes must be >= 1")


@dataclass(frozen=True)
class StepMatrices:
    A: np.ndarray
    B: np.ndarray
    D: np.ndarray
    P: np.ndarray
    R: np.ndarray
    Q: np.ndarray


@dataclass(frozen=True)
class PeriodTransition:
    phi: np.ndarray
    gamma: np.ndarray
    rho: float
    gamma_max: float
    sigma_max_phi: float  # diagnostic only; stability uses rho

    @property
    def stable(self) -> bool:
        return self.rho < 1.0


def _state_blocks(params: ProcessParameters, depth_m, h):
    """A, B, D for a stack of directional matrices ``h`` (k, 2, 2)."""
    m_inv = 1.0 / params.modal_mass
    k = h.shape[0]
    cut = depth_m * m_inv * h
    A = np.zeros((k, 4, 4))
    A[:, 0, 2] = A[:, 1, 3] = 1.0
    A[:, 2:, :2] = -(params.stiffness * m_inv * np.eye(2) + cut)
    A[:, 2, 2] = A[:, 3, 3] = -params.damping * m_inv
    B = np.zeros((k, 4, 4))
    B[:, 2:, :2] = cut
    D = np.zeros((k, 4, 2))
    D[:, 2:, :] = cut
    return A, B, D


def continuous_matrices(params: ProcessParameters, op: OperatingPoint, t: float):
    """Time-varying system matrices A(t), B(t), D(t) of the delayed state-space form."""
    h = directional_matrices(params, op.spindle_speed, [t])
    A, B, D = _state_blocks(params, op.axial_depth * 1e-3, h)
    return A[0], B[0], D[0]


def _switching_times(params: ProcessParameters, spindle_speed: float, a: float, b: float) -> list[float]:
    """Instants in (a, b) at which any tooth enters or leaves the cut."""
    phi_in, phi_out = engagement_window(params)
    rate = TWO_PI * spindle_speed / 60.0
    n = params.teeth_count
    times = []
    for j in range(n):
        offset = j * TWO_PI / n
        for edge in (phi_in, phi_out):
            k_lo = math.floor((rate * a + offset - edge) / TWO_PI)
            k_hi = math.ceil((rate * b + offset - edge) / TWO_PI)
            for k in range(k_lo, k_hi + 1):
                t = (edge + TWO_PI * k - offset) / rate
                if a < t < b:
                    times.append(t)
    return sorted(set(times))


def _panels(params: ProcessParameters, spindle_speed: float, m: int):
    """Quadrature panels covering one tooth period, split at sub-interval
    boundaries and at tooth entry/exit instants. Returns (lo, hi, owner, eps)."""
    tau = tooth_period(params.teeth_count, spindle_speed)
    eps = tau / m
    cuts = np.concatenate([np.arange(m + 1) * eps, _switching_times(params, spindle_speed, 0.0, tau)])
    cuts = np.unique(cuts)
    lo, hi = cuts[:-1], cuts[1:]
    keep = hi - lo > 1e-12 * tau
    lo, hi = lo[keep], hi[keep]
    owner = np.minimum((0.5 * (lo + hi) / eps).astype(int), m - 1)
    return lo, hi, owner, eps


_LEGGAUSS: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _leggauss(nodes: int):
    if nodes not in _LEGGAUSS:
        _LEGGAUSS[nodes] = np.polynomial.legendre.leggauss(nodes)
    return _LEGGAUSS[nodes]


def interval_directional_averages(params: ProcessParameters, spindle_speed: float, m: int,
                                  nodes: int = 8) -> np.ndarray:
    """Mean of H_d over each of the m sub-intervals of one tooth period, shape (m, 2, 2).

    Gauss-Legendre quadrature, split at tooth entry/exit instants so each
    panel integrates a smooth function.
    """
    return _averages_many(params, [spindle_speed], m, nodes)[0]


def _averages_many(params: ProcessParameters, speeds, m: int, nodes: int) -> np.ndarray:
    """Interval averages for several speeds with one directional evaluation, (len(speeds), m, 2, 2)."""
    x, w = _leggauss(nodes)
    angles, weights, owners, counts, eps_all = [], [], [], [], []
    for speed in speeds:
        lo, hi, owner, eps = _panels(params, speed, m)
        half = 0.5 * (hi - lo)
        ts = (0.5 * (hi + lo))[:, None] + half[:, None] * x[None, :]
        angles.append((TWO_PI * speed / 60.0 * ts).ravel())
        weights.append(half[:, None] * w[None, :])
        owners.append(owner)
        counts.append(len(lo))
        eps_all.append(eps)
    ht, hr = _directional_parts_at_angle(params, np.concatenate(angles))
    h = params.tangential_coeff * ht + params.radial_coeff * hr
    out = np.zeros((len(counts), m, 2, 2))
    start = 0
    for k, count in enumerate(counts):
        block = h[start * nodes:(start + count) * nodes].reshape(count, nodes, 2, 2)
        start += count
        np.add.at(out[k], owners[k], np.einsum("pk,pkij->pij", weights[k], block))
        out[k] /= eps_all[k]
    return out


def interval_average(params: ProcessParameters, op: OperatingPoint, i: int, m: int, nodes: int = 8):
    """Sub-interval averages (A_i, B_i, D_i) over [i eps, (i+1) eps]."""
    if not 0 <= i < m:
        raise IndexError(f"interval {i} outside 0..{m - 1}")
    tau = tooth_period(params.teeth_count, op.spindle_speed)
    eps = tau / m
    x, w = np.polynomial.legendre.leggauss(nodes)
    a, b = i * eps, (i + 1) * eps
    edges = [a, *_switching_times(params, op.spindle_speed, a, b), b]
    h_mean = np.zeros((2, 2))
    for lo, hi in zip(edges[:-1], edges[1:]):
        half = 0.5 * (hi - lo)
        h = directional_matrices(params, op.spindle_speed, 0.5 * (hi + lo) + half * x)
        h_mean += np.einsum("k,kij->ij", half * w, h)
    A, B, D = _state_blocks(params, op.axial_depth * 1e-3, (h_mean / eps)[None])
    return A[0], B[0], D[0]


_PADE13 = (64764752532480000.0, 32382376266240000.0, 7771770303897600.0, 1187353796428800.0,
           129060195264000.0, 10559470521600.0, 670442572800.0, 33522128640.0, 1323241920.0,
           40840800.0, 960960.0, 16380.0, 182.0, 1.0)
_THETA13 = 5.371920351148152


def expm_batch(a: np.ndarray) -> np.ndarray:
    """Matrix exponential of a stack (k, n, n): Pade(13) with scaling and squaring.

    One scaling exponent is shared by the whole stack, chosen from the largest
    1-norm, which keeps every member within the Pade accuracy region.
    """
    a = np.asarray(a, dtype=float)
    norm = float(np.abs(a).sum(axis=-2).max()) if a.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm / _THETA13)))) if norm > _THETA13 else 0
    a = a / (2.0 ** s)
    b = _PADE13
    ident = np.broadcast_to(np.eye(a.shape[-1]), a.shape)
    a2 = a @ a
    a4 = a2 @ a2
    a6 = a4 @ a2
    u = a @ (a6 @ (b[13] * a6 + b[11] * a4 + b[9] * a2) + b[7] * a6 + b[5] * a4 + b[3] * a2 + b[1] * ident)
    v = a6 @ (b[12] * a6 + b[10] * a4 + b[8] * a2) + b[6] * a6 + b[4] * a4 + b[2] * a2 + b[0] * ident
    out = np.linalg.solve(v - u, v + u)
    for _ in range(s):
        out = out @ out
    return out


def exp_phi1(x: np.ndarray, order: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """exp(X) and phi1(X) = sum_k X^k / (k+1)! for a stack of square matrices.

    phi1 is the upper-right block of exp([[X, I], [0, 0]]), so
    (exp(X) - I) X^-1 B = phi1(X) B holds without inverting X. Taylor series
    on X / 2^s with ||X / 2^s||_1 <= 1/2, then s doublings of
    exp(2Y) = exp(Y)^2 and phi1(2Y) = 1/2 phi1(Y) (exp(Y) + I).
    """
    x = np.asarray(x, dtype=float)
    norm = float(np.abs(x).sum(axis=-2).max()) if x.size else 0.0
    s = max(0, int(math.ceil(math.log2(norm / 0.5)))) if norm > 0.5 else 0
    y = x / (2.0 ** s)
    ident = np.eye(x.shape[-1])
    phi = np.broadcast_to(ident / math.factorial(order + 1), x.shape).copy()
    for k in range(order - 1, -1, -1):
        phi = y @ phi
        phi += ident / math.factorial(k + 1)
    ex = ident + y @ phi
    for _ in range(s):
        phi = 0.5 * (phi @ (ex + ident))
        ex = ex @ ex
    return ex, phi


def _exp_blocks(A, B, D, eps):
    """Batched exp of [[A, B, D], [0, 0, 0]] * eps -> (P, R, Q).

    The upper-right blocks equal phi1(A eps) B eps and phi1(A eps) D eps,
    i.e. (exp(A eps) - I) A^-1 B without ever inverting A. ``eps`` is a
    scalar or broadcasts as (k, 1, 1).
    """
    # Balance the units of [q, q'] first: with S = diag(1, 1, 1/c, 1/c) the
    # similarity S (A eps) S^-1 has entries of order omega * eps instead of
    # spanning eps .. omega^2 eps, so far fewer squarings are needed.
    a = A * eps
    upper = float(np.abs(a[:, :2, 2:]).max())
    lower = float(np.abs(a[:, 2:, :2]).max())
    c = math.sqrt(lower / upper) if upper > 0 and lower > 0 else 1.0
    scale = np.array([1.0, 1.0, 1.0 / c, 1.0 / c])
    P, phi = exp_phi1(a * scale[:, None] / scale[None, :])
    unscale = scale[None, :] / scale[:, None]
    P = P * unscale
    phi = phi * unscale
    return P, phi @ (B * eps), phi @ (D * eps)


def step_matrices(A_i, B_i, D_i, eps: float, interval: int | None = None) -> StepMatrices:
    if not eps > 0:
        raise ValueError("eps must be positive")
    P, R, Q = _exp_blocks(np.asarray(A_i)[None], np.asarray(B_i)[None], np.asarray(D_i)[None], eps)
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(R)) and np.all(np.isfinite(Q))):
        raise SdmNumericalError(f"non-finite matrix exponential in interval {interval}", interval)
    return StepMatrices(np.asarray(A_i), np.asarray(B_i), np.asarray(D_i), P[0], R[0], Q[0])


def augmented_step(step: StepMatrices, m: int) -> tuple[np.ndarray, np.ndarray]:
    """Dense (E_i, G_i) on the augmented state [q_i, q'_i, q_{i-1}, ..., q_{i-m}]."""
    if m < 4:
        raise ValueError("m must be >= 4")
    n = 2 * (m + 2)
    E = np.zeros((n, n))
    E[:4, :4] = step.P
    half_r = 0.5 * step.R[:, :2]
    E[:4, n - 4:n - 2] = half_r
    E[:4, n - 2:] = half_r
    E[4:6, 0:2] = np.eye(2)
    E[6:, 4:n - 2] = np.eye(2 * m - 2)
    G = np.zeros((n, 2))
    G[:4] = step.Q
    return E, G


def _history_slot(j: int) -> slice:
    """Columns of q_j (j <= 0) in the augmented state [q_0, q'_0, q_-1, ..., q_-m]."""
    if j == 0:
        return slice(0, 2)
    start = 4 + 2 * (-j - 1)
    return slice(start, start + 2)


def _apply_steps(P, R, Q, order, n):
    """Period product for a batch: P, R, Q have shape (batch, m, ...).

    Equivalent to multiplying the dense augmented maps, but only the 4-row
    state block is propagated: every delayed position used within one period
    is a plain selection of the initial augmented state, so the delay term
    just adds 1/2 R into two column slots.
    """
    batch = P.shape[0]
    m = len(order)
    x = np.zeros((batch, 4, n))
    x[:, :, :4] = np.eye(4)
    z = np.zeros((batch, 4, 2))
    positions = [x[:, :2].copy()]
    forced = [z[:, :2].copy()]
    for k, i in enumerate(order):
        half_r = 0.5 * R[:, i, :, :2]
        x = P[:, i] @ x
        x[:, :, _history_slot(k - m)] += half_r
        x[:, :, _history_slot(k - m + 1)] += half_r
        z = P[:, i] @ z + Q[:, i]
        if k < m - 1:
            positions.append(x[:, :2].copy())
            forced.append(z[:, :2].copy())
    phi = np.concatenate([x] + positions[::-1], axis=1)
    gamma = np.concatenate([z] + forced[::-1], axis=1)
    return phi, gamma


def _check_finite(P, R, Q):
    bad = ~(np.isfinite(P).all(axis=(-2, -1)) & np.isfinite(R).all(axis=(-2, -1))
            & np.isfinite(Q).all(axis=(-2, -1)))
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise SdmNumericalError(f"non-finite matrix exponential in interval {int(idx[-1])}", int(idx[-1]))


def spectral_radius(matrices: np.ndarray) -> np.ndarray:
    """Largest eigenvalue modulus for a stack of square matrices."""
    return np.abs(np.linalg.eigvals(matrices)).max(axis=-1)


def period_transition(params: ProcessParameters, op: OperatingPoint, cfg: SdmConfig = SdmConfig(),
                      anchor: int = 0) -> PeriodTransition:
    """Transition over one tooth period starting at sub-interval ``anchor``."""
    m = cfg.delay_resolution
    tau = tooth_period(params.teeth_count, op.spindle_speed)
    eps = tau / m
    h = interval_directional_averages(params, op.spindle_speed, m, cfg.quadrature_nodes)
    A, B, D = _state_blocks(params, op.axial_depth * 1e-3, h)
    P, R, Q = _exp_blocks(A, B, D, eps)
    _check_finite(P, R, Q)
    order = [(anchor + k) % m for k in range(m)]
    n = 2 * (m + 2)
    phi, gamma = _apply_steps(P[None], R[None], Q[None], order, n)
    phi, gamma = phi[0], gamma[0]
    rho = float(spectral_radius(phi))
    svals = np.linalg.svd(gamma, compute_uv=False)
    sigma_phi = float(np.linalg.svd(phi, compute_uv=False)[0])
    return PeriodTransition(phi, gamma, rho, float(svals[0]), sigma_phi)


def speed_column(params: ProcessParameters, spindle_speed: float, depths_mm, cfg: SdmConfig = SdmConfig()):
    """rho and gamma_max at one spindle speed for every depth in ``depths_mm``.

    The directional averages depend only on speed, so they are shared across
    depths and all exponentials of the column are evaluated in one batch.
    Zero depth uses the closed-form free-vibration decay exp(-zeta*omega_n*tau).
    """
    depths = np.asarray(depths_mm, dtype=float)
    m = cfg.delay_resolution
    n = 2 * (m + 2)
    tau = tooth_period(params.teeth_count, spindle_speed)
    eps = tau / m
    rho = np.empty(len(depths))
    gam = np.zeros(len(depths))
    zero = depths == 0.0
    rho[zero] = math.exp(-params.damping_ratio * params.natural_frequency * tau)
    live = np.flatnonzero(~zero)
    if len(live):
        h = interval_directional_averages(params, spindle_speed, m, cfg.quadrature_nodes)
        nd = len(live)
        depth_m = np.repeat(depths[live] * 1e-3, m)[:, None, None]
        A, B, D = _state_blocks(params, depth_m, np.tile(h, (nd, 1, 1)))
        P, R, Q = _exp_blocks(A, B, D, eps)
        P, R, Q = (x.reshape(nd, m, *x.shape[1:]) for x in (P, R, Q))
        _check_finite(P, R, Q)
        phi, gamma = _apply_steps(P, R, Q, range(m), n)
        rho[live] = spectral_radius(phi)
        gam[live] = np.linalg.svd(gamma, compute_uv=False)[:, 0]
    return rho, gam


def speed_rows(params: ProcessParameters, speeds, depths_mm, cfg: SdmConfig = SdmConfig()):
    """rho and gamma_max on a (depth x speed) block, batched across speeds.

    Used for the small controller grids rebuilt at every decision: all
    exponentials and period products of the block run as one batch.
    Returns two arrays of shape (len(depths_mm), len(speeds)).
    """
    speeds = np.asarray(speeds, dtype=float)
    depths = np.asarray(depths_mm, dtype=float)
    m = cfg.delay_resolution
    n = 2 * (m + 2)
    ns, nd = len(speeds), len(depths)
    rho = np.empty((nd, ns))
    gam = np.zeros((nd, ns))
    taus = np.array([tooth_period(params.teeth_count, w) for w in speeds])
    zero = depths == 0.0
    rho[zero] = np.exp(-params.damping_ratio * params.natural_frequency * taus)[None, :]
    live = np.flatnonzero(~zero)
    if len(live) == 0:
        return rho, gam
    h = _averages_many(params, speeds, m, cfg.quadrature_nodes)
    # batch layout: (depth, speed, interval)
    nl = len(live)
    depth_m = np.broadcast_to((depths[live] * 1e-3)[:, None, None], (nl, ns, m)).reshape(-1, 1, 1)
    hh = np.broadcast_to(h[None], (nl, ns, m, 2, 2)).reshape(-1, 2, 2)
    A, B, D = _state_blocks(params, depth_m, hh)
    eps = np.broadcast_to((taus / m)[None, :, None], (nl, ns, m)).reshape(-1, 1, 1)
    P, R, Q = _exp_blocks(A, B, D, eps)
    P, R, Q = (x.reshape(nl * ns, m, *x.shape[1:]) for x in (P, R, Q))
    _check_finite(P, R, Q)
    phi, gamma = _apply_steps(P, R, Q, range(m), n)
    rho[live] = spectral_radius(phi).reshape(nl, ns)
    gam[live] = np.linalg.svd(gamma, compute_uv=False)[:, 0].reshape(nl, ns)
    return rho, gam
