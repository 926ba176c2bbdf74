"""Right-invariant EKF with lateral/vertical zero-velocity pseudo-measurements.

The state lives on SE_2(3) x R^6 x SO(3) x R^3; errors are applied on the left
of the estimate (``x = exp(xi) * x_hat``) for the group parts and additively
for the biases and lever arm. Every numeric step is a numba kernel over raw
arrays; :func:`run_filter` chains them over a whole sequence, and the
per-step functions below wrap the same kernels around :class:`FilterState`.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from numba import njit

from .geom import THETA_SMALL, _exp_se23, _exp_so3, _orthonormalize, _skew
from .model import GRAVITY, FilterState, ImuSample, MeasurementNoise, ProcessNoise

log = logging.getLogger(__name__)

COND_MAX = 1e12
MAINTENANCE_EVERY = 1000


class NumericalError(RuntimeError):
    """Raised when the filter produces non-finite values."""


# --------------------------------------------------------------------- kernels


@njit(cache=True)
def _propagate(R, v, p, bg, ba, omega, accel, dt, g, theta_small):
    w = omega - bg
    a = accel - ba
    R_new = R @ _exp_so3(w * dt, theta_small)
    v_new = v + (R @ a + g) * dt
    p_new = p + v * dt
    return R_new, v_new, p_new


@njit(cache=True)
def _jacobians(R, v, p, dt, g):
    F = np.eye(21)
    G = np.zeros((21, 18))
    if dt == 0.0:
        return F, G
    vxR = _skew(v) @ R
    pxR = _skew(p) @ R
    F[0:3, 9:12] = -R * dt
    F[3:6, 0:3] = _skew(g) * dt
    F[3:6, 9:12] = -vxR * dt
    F[3:6, 12:15] = -R * dt
    F[6:9, 3:6] = np.eye(3) * dt
    F[6:9, 9:12] = -pxR * dt
    G[0:3, 0:3] = R * dt
    G[3:6, 0:3] = vxR * dt
    G[3:6, 3:6] = R * dt
    G[6:9, 0:3] = pxR * dt
    for i in range(12):
        G[9 + i, 6 + i] = dt
    return F, G


@njit(cache=True)
def _car_velocity(R, v, bg, Rc, pc, omega):
    return Rc.T @ (R.T @ v) + _skew(omega - bg) @ pc


@njit(cache=True)
def _predict(R, v, bg, Rc, pc, omega):
    vc = _car_velocity(R, v, bg, Rc, pc, omega)
    return vc[1:3].copy()


@njit(cache=True)
def _jacobian_h(R, v, bg, Rc, pc, omega):
    J = np.zeros((3, 21))
    v_body = R.T @ v
    J[:, 3:6] = Rc.T @ R.T
    J[:, 9:12] = _skew(pc)
    J[:, 15:18] = Rc.T @ _skew(v_body)
    J[:, 18:21] = _skew(omega - bg)
    return J[1:3, :].copy()


@njit(cache=True)
def _update(R, v, p, bg, ba, Rc, pc, P, y_pred, H, n_lat, n_up, theta_small):
    PHt = P @ H.T
    S = H @ PHt
    S[0, 0] += n_lat
    S[1, 1] += n_up
    s00, s01, s10, s11 = S[0, 0], 0.5 * (S[0, 1] + S[1, 0]), 0.5 * (S[0, 1] + S[1, 0]), S[1, 1]
    det = s00 * s11 - s01 * s10
    half_tr = 0.5 * (s00 + s11)
    disc = np.sqrt(max(half_tr * half_tr - det, 0.0))
    lmax = half_tr + disc
    lmin = half_tr - disc
    if not (det > 0.0) or not (lmin > 0.0) or lmax / lmin > COND_MAX:
        return R, v, p, bg, ba, Rc, pc, P, False
    Sinv = np.empty((2, 2))
    Sinv[0, 0] = s11 / det
    Sinv[0, 1] = -s01 / det
    Sinv[1, 0] = -s10 / det
    Sinv[1, 1] = s00 / det
    K = PHt @ Sinv
    e = -(K @ y_pred)
    Gam, dv, dp = _exp_se23(e[0:9].copy(), theta_small)
    R_new = Gam @ R
    v_new = Gam @ v + dv
    p_new = Gam @ p + dp
    bg_new = bg + e[9:12]
    ba_new = ba + e[12:15]
    Rc_new = _exp_so3(e[15:18].copy(), theta_small) @ Rc
    pc_new = pc + e[18:21]
    P_new = (np.eye(21) - K @ H) @ P
    P_new = 0.5 * (P_new + P_new.T)
    return R_new, v_new, p_new, bg_new, ba_new, Rc_new, pc_new, P_new, True


@njit(cache=True)
def _clamp_psd(P):
    w, V = np.linalg.eigh(P)
    for i in range(w.shape[0]):
        if w[i] < 0.0:
            w[i] = 0.0
    out = (V * w) @ V.T
    return 0.5 * (out + out.T)


@njit(cache=True)
def _run(t, omega, accel, n_diag, R0, v0, p0, bg0, ba0, Rc0, pc0, P0, Q, g, theta_small,
         do_update, maintenance_every):
    T = t.shape[0]
    Rs = np.empty((T, 3, 3))
    vs = np.empty((T, 3))
    ps = np.empty((T, 3))
    bgs = np.empty((T, 3))
    bas = np.empty((T, 3))
    Rcs = np.empty((T, 3, 3))
    pcs = np.empty((T, 3))
    Pdiag = np.empty((T, 21))
    applied = np.zeros(T, dtype=np.bool_)

    R, v, p = R0.copy(), v0.copy(), p0.copy()
    bg, ba, Rc, pc = bg0.copy(), ba0.copy(), Rc0.copy(), pc0.copy()
    P = P0.copy()
    max_asym = 0.0
    Rs[0], vs[0], ps[0], bgs[0], bas[0], Rcs[0], pcs[0] = R, v, p, bg, ba, Rc, pc
    for j in range(21):
        Pdiag[0, j] = P[j, j]

    for n in range(T - 1):
        dt = t[n + 1] - t[n]
        if dt > 0.0:
            F, G = _jacobians(R, v, p, dt, g)
            R, v, p = _propagate(R, v, p, bg, ba, omega[n], accel[n], dt, g, theta_small)
            if do_update:
                P = F @ P @ F.T + G @ Q @ G.T
                scale = np.max(np.abs(P))
                if scale > 0.0:
                    asym = np.max(np.abs(P - P.T)) / scale
                    if asym > max_asym:
                        max_asym = asym
                P = 0.5 * (P + P.T)
                y = _predict(R, v, bg, Rc, pc, omega[n])
                H = _jacobian_h(R, v, bg, Rc, pc, omega[n])
                R, v, p, bg, ba, Rc, pc, P, ok = _update(
                    R, v, p, bg, ba, Rc, pc, P, y, H, n_diag[n, 0], n_diag[n, 1], theta_small
                )
                applied[n + 1] = ok
        if maintenance_every > 0 and (n + 1) % maintenance_every == 0:
            R = _orthonormalize(R)
            Rc = _orthonormalize(Rc)
            if do_update:
                P = _clamp_psd(P)
        Rs[n + 1], vs[n + 1], ps[n + 1] = R, v, p
        bgs[n + 1], bas[n + 1], Rcs[n + 1], pcs[n + 1] = bg, ba, Rc, pc
        for j in range(21):
            Pdiag[n + 1, j] = P[j, j]
    return Rs, vs, ps, bgs, bas, Rcs, pcs, Pdiag, applied, P, max_asym


# ------------------------------------------------------------------ public API


@dataclass(frozen=True)
class Innovation:
    y_pred: np.ndarray
    S: np.ndarray
    K: np.ndarray


def _g(gravity) -> np.ndarray:
    return np.asarray(GRAVITY if gravity is None else gravity, dtype=float)


def propagate_state(x: FilterState, u: ImuSample, dt: float, gravity=None,
                    theta_small: float = THETA_SMALL) -> FilterState:
    """Noise-free discrete kinematics over one sample interval.

    Position advances with the velocity from *before* this step.
    """
    if not dt > 0.0:
        raise ValueError(f"dt must be positive, got {dt!r}")
    R, v, p, bg, ba, Rc, pc = x.arrays()
    R1, v1, p1 = _propagate(R, v, p, bg, ba, u.omega, u.accel, float(dt), _g(gravity), theta_small)
    return FilterState.from_arrays(R1, v1, p1, bg.copy(), ba.copy(), Rc.copy(), pc.copy())


def jacobians_FG(x: FilterState, u: ImuSample, dt: float, gravity=None):
    """Error-propagation Jacobians ``(F, G)`` (21x21, 21x18) for one step."""
    R, v, p = x.arrays()[:3]
    return _jacobians(R, v, p, float(dt), _g(gravity))


def propagate_covariance(P, F, G, Q) -> np.ndarray:
    Q = Q.matrix() if isinstance(Q, ProcessNoise) else np.asarray(Q, dtype=float)
    out = F @ P @ F.T + G @ Q @ G.T
    return 0.5 * (out + out.T)


def car_velocity(x: FilterState, u: ImuSample) -> np.ndarray:
    """Velocity of the car-frame origin expressed in the car frame."""
    R, v, _, bg, _, Rc, pc = x.arrays()
    return _car_velocity(R, v, bg, Rc, pc, u.omega)


def predict_measurement(x: FilterState, u: ImuSample) -> np.ndarray:
    """Predicted ``[v_lat, v_up]`` of the car frame."""
    R, v, _, bg, _, Rc, pc = x.arrays()
    return _predict(R, v, bg, Rc, pc, u.omega)


def jacobian_H(x: FilterState, u: ImuSample) -> np.ndarray:
    R, v, _, bg, _, Rc, pc = x.arrays()
    return _jacobian_h(R, v, bg, Rc, pc, u.omega)


def innovation(P, y_pred, H, N: MeasurementNoise) -> Innovation:
    S = H @ P @ H.T + N.matrix()
    K = P @ H.T @ np.linalg.inv(S)
    return Innovation(np.asarray(y_pred, dtype=float), S, K)


def update(x: FilterState, P, y_pred, H, N: MeasurementNoise,
           theta_small: float = THETA_SMALL, t: float | None = None):
    """Fuse the zero lateral/vertical velocity pseudo-measurement.

    Returns ``(state, P)``. When ``S`` is singular or too ill-conditioned the
    inputs are returned unchanged and a warning is logged.
    """
    out = _update(*x.arrays(), np.asarray(P, dtype=float), np.asarray(y_pred, dtype=float),
                  np.asarray(H, dtype=float), float(N.lat), float(N.up), theta_small)
    if not out[-1]:
        log.warning("update skipped at t=%s: innovation covariance ill-conditioned", t)
        return x, P
    return FilterState.from_arrays(*out[:7]), out[7]


def step(x: FilterState, P, u: ImuSample, dt: float, N: MeasurementNoise,
         Q=None, gravity=None, theta_small: float = THETA_SMALL):
    """One propagate-then-update cycle."""
    Q = ProcessNoise() if Q is None else Q
    F, G = jacobians_FG(x, u, dt, gravity)
    x1 = propagate_state(x, u, dt, gravity, theta_small)
    P1 = propagate_covariance(P, F, G, Q)
    y = predict_measurement(x1, u)
    H = jacobian_H(x1, u)
    return update(x1, P1, y, H, N, theta_small, t=u.t)


@dataclass
class FilterResult:
    t: np.ndarray
    rotation: np.ndarray
    velocity: np.ndarray
    position: np.ndarray
    bias_gyro: np.ndarray
    bias_accel: np.ndarray
    R_car: np.ndarray
    p_car: np.ndarray
    P_diag: np.ndarray
    P_final: np.ndarray
    update_applied: np.ndarray
    skipped: np.ndarray
    max_asymmetry: float

    def state(self, n: int) -> FilterState:
        return FilterState.from_arrays(
            self.rotation[n], self.velocity[n], self.position[n], self.bias_gyro[n],
            self.bias_accel[n], self.R_car[n], self.p_car[n],
        )


def run_filter(t, omega, accel, x0: FilterState, P0, Q, noise_diag=None, *,
               sigma_lat: float = 1.0, sigma_up: float = 3.0, gravity=None,
               theta_small: float = THETA_SMALL, update: bool = True,
               align: bool = True, dt_warn: float = 0.05,
               maintenance_every: int = MAINTENANCE_EVERY) -> FilterResult:
    """Filter a whole sequence.

    Parameters
    ----------
    t, omega, accel : arrays of shape (T,), (T, 3), (T, 3)
    x0, P0 : initial state and 21x21 covariance
    Q : ProcessNoise or 18x18 matrix
    noise_diag : (T, 2) array of ``[N_lat, N_up]`` per step, or None for the
        static ``diag(sigma_lat**2, sigma_up**2)``.
    update : False gives pure strapdown integration (no covariance, no update).
    align : False freezes the car frame at its initial value by removing it
        from the filter (its covariance rows and process noise are zeroed).
    """
    t = np.ascontiguousarray(t, dtype=float)
    omega = np.ascontiguousarray(omega, dtype=float)
    accel = np.ascontiguousarray(accel, dtype=float)
    T = t.shape[0]
    if noise_diag is None:
        noise_diag = np.tile([sigma_lat**2, sigma_up**2], (T, 1))
    noise_diag = np.ascontiguousarray(noise_diag, dtype=float)
    Qm = Q.matrix() if isinstance(Q, ProcessNoise) else np.array(Q, dtype=float)
    P0 = np.array(P0, dtype=float)
    if not align:
        P0[15:21, :] = 0.0
        P0[:, 15:21] = 0.0
        Qm[12:18, :] = 0.0
        Qm[:, 12:18] = 0.0
    dts = np.diff(t)
    jumps = np.flatnonzero(dts > dt_warn)
    if jumps.size:
        log.warning("%d time step(s) exceed %.3g s (first at t=%.3f)", jumps.size, dt_warn, t[jumps[0]])
    arr = [np.ascontiguousarray(a, dtype=float) for a in x0.arrays()]
    out = _run(t, omega, accel, noise_diag, *arr, P0, Qm, _g(gravity), theta_small,
               update, maintenance_every)
    Rs, vs, ps, bgs, bas, Rcs, pcs, Pdiag, applied, Pf, asym = out
    if not (np.all(np.isfinite(ps)) and np.all(np.isfinite(Pdiag))):
        raise NumericalError("filter produced non-finite values")
    skipped = np.zeros(T, dtype=bool)
    if update:
        skipped[1:] = ~applied[1:] & (dts > 0)
        for n in np.flatnonzero(skipped):
            log.warning("update skipped at t=%.3f", t[n])
    return FilterResult(t, Rs, vs, ps, bgs, bas, Rcs, pcs, Pdiag, Pf, applied, skipped, float(asym))
