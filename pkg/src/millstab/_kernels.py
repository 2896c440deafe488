"""Compiled inner loops for the delay simulator."""
import math

import numba
import numpy as np

TWO_PI = 2.0 * math.pi


@numba.njit(cache=True)
def _directional(t, n_teeth, kt, kr, phi_in, phi_out, omega_rpm):
    hxx = 0.0
    hxy = 0.0
    hyx = 0.0
    hyy = 0.0
    base = TWO_PI * omega_rpm / 60.0 * t
    for j in range(n_teeth):
        phi = np.mod(base + j * TWO_PI / n_teeth, TWO_PI)
        if phi > phi_in and phi < phi_out:
            s2 = math.sin(2.0 * phi)
            c2 = math.cos(2.0 * phi)
            hxx += kt * s2 + kr * (1.0 - c2)
            hxy += kt * (1.0 + c2) + kr * s2
            hyx += -kt * (1.0 - c2) + kr * s2
            hyy += -kt * s2 + kr * (1.0 + c2)
    return 0.5 * hxx, 0.5 * hxy, 0.5 * hyx, 0.5 * hyy


@numba.njit(cache=True)
def _delayed(ring, s, h):
    if s < 0.0:
        return 0.0, 0.0
    x = s / h
    i = int(math.floor(x))
    frac = x - i
    n = ring.shape[0]
    a = ring[i % n]
    b = ring[(i + 1) % n]
    if frac == 0.0:
        return a[0], a[1]
    return a[0] * (1.0 - frac) + b[0] * frac, a[1] * (1.0 - frac) + b[1] * frac


@numba.njit(cache=True)
def _rhs(t, qx, qy, vx, vy, dqx, dqy, n_teeth, mass, damp, stiff, kt, kr, phi_in, phi_out,
         omega_rpm, ap):
    hxx, hxy, hyx, hyy = _directional(t, n_teeth, kt, kr, phi_in, phi_out, omega_rpm)
    ex = qx - dqx
    ey = qy - dqy
    fx = -ap * (hxx * ex + hxy * ey)
    fy = -ap * (hyx * ex + hyy * ey)
    ax = (fx - damp * vx - stiff * qx) / mass
    ay = (fy - damp * vy - stiff * qy) / mass
    return ax, ay, fx, fy


@numba.njit(cache=True)
def record_sample(state, ring, n, h, t, out, n_teeth, mass, damp, stiff, kt, kr, phi_in, phi_out,
                  omega_rpm, ap):
    tau = 60.0 / (n_teeth * omega_rpm)
    dqx, dqy = _delayed(ring, t - tau, h)
    ax, ay, fx, fy = _rhs(t, state[0], state[1], state[2], state[3], dqx, dqy, n_teeth, mass, damp,
                          stiff, kt, kr, phi_in, phi_out, omega_rpm, ap)
    out[0] = t
    out[1] = state[0]
    out[2] = state[1]
    out[3] = state[2]
    out[4] = state[3]
    out[5] = ax
    out[6] = ay
    out[7] = fx
    out[8] = fy


@numba.njit(cache=True)
def integrate(state, ring, n0, h, n_steps, guard, out, n_teeth, mass, damp, stiff, kt, kr,
              phi_in, phi_out, omega_rpm, ap):
    """Advance ``n_steps`` RK4 steps in place; returns the number completed.

    Stops early (returning fewer steps) when the displacement norm exceeds
    ``guard`` or becomes non-finite; the offending step is discarded.
    """
    tau = 60.0 / (n_teeth * omega_rpm)
    L = ring.shape[0]
    qx, qy, vx, vy = state[0], state[1], state[2], state[3]
    for s in range(n_steps):
        n = n0 + s
        t = n * h
        d1x, d1y = _delayed(ring, t - tau, h)
        d2x, d2y = _delayed(ring, t + 0.5 * h - tau, h)
        d3x, d3y = _delayed(ring, t + h - tau, h)
        k1ax, k1ay, _, _ = _rhs(t, qx, qy, vx, vy, d1x, d1y, n_teeth, mass, damp, stiff, kt, kr,
                                phi_in, phi_out, omega_rpm, ap)
        k1qx, k1qy = vx, vy
        k2qx = vx + 0.5 * h * k1ax
        k2qy = vy + 0.5 * h * k1ay
        k2ax, k2ay, _, _ = _rhs(t + 0.5 * h, qx + 0.5 * h * k1qx, qy + 0.5 * h * k1qy, k2qx, k2qy,
                                d2x, d2y, n_teeth, mass, damp, stiff, kt, kr, phi_in, phi_out,
                                omega_rpm, ap)
        k3qx = vx + 0.5 * h * k2ax
        k3qy = vy + 0.5 * h * k2ay
        k3ax, k3ay, _, _ = _rhs(t + 0.5 * h, qx + 0.5 * h * k2qx, qy + 0.5 * h * k2qy, k3qx, k3qy,
                                d2x, d2y, n_teeth, mass, damp, stiff, kt, kr, phi_in, phi_out,
                                omega_rpm, ap)
        k4qx = vx + h * k3ax
        k4qy = vy + h * k3ay
        k4ax, k4ay, _, _ = _rhs(t + h, qx + h * k3qx, qy + h * k3qy, k4qx, k4qy, d3x, d3y, n_teeth,
                                mass, damp, stiff, kt, kr, phi_in, phi_out, omega_rpm, ap)
        nqx = qx + h / 6.0 * (k1qx + 2.0 * k2qx + 2.0 * k3qx + k4qx)
        nqy = qy + h / 6.0 * (k1qy + 2.0 * k2qy + 2.0 * k3qy + k4qy)
        nvx = vx + h / 6.0 * (k1ax + 2.0 * k2ax + 2.0 * k3ax + k4ax)
        nvy = vy + h / 6.0 * (k1ay + 2.0 * k2ay + 2.0 * k3ay + k4ay)
        norm = math.sqrt(nqx * nqx + nqy * nqy)
        if not (norm <= guard) or not (math.isfinite(nvx) and math.isfinite(nvy)):
            return s
        qx, qy, vx, vy = nqx, nqy, nvx, nvy
        ring[(n + 1) % L, 0] = qx
        ring[(n + 1) % L, 1] = qy
        state[0] = qx
        state[1] = qy
        state[2] = vx
        state[3] = vy
        record_sample(state, ring, n + 1, h, (n + 1) * h, out[s], n_teeth, mass, damp, stiff, kt,
                      kr, phi_in, phi_out, omega_rpm, ap)
    return n_steps


def warmup() -> None:
    """Compile the kernels ahead of timing-sensitive use."""
    ring = np.zeros((8, 2))
    state = np.zeros(4)
    out = np.empty((1, 9))
    integrate(state, ring, 0, 1e-6, 1, 1.0, out, 2, 1.0, 1.0, 1.0, 1.0, 1.0, 0.5, 3.0, 1000.0, 0.0)
