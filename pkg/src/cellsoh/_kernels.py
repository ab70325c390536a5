"""Compiled per-sample kernels shared by the dataclass API and the fast run loop.

Every numeric path in the package goes through these functions, so the
object-level API (``jekf_step``, ``segment_step``, ...), the streaming
estimator and the batch loop produce bit-identical results.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

# jekf status codes
STEP_OK = 0
STEP_BAD_INNOVATION_VAR = 1
STEP_GATED = 2

# segment event codes
EVT_NONE = 0
EVT_OPENED = 1
EVT_ACCEPTED = 2
EVT_DISCARDED = 3

MODE_CHARGE_ONLY = 0
MODE_ANY_WINDOW = 1

# segment accumulator layout
ACC_ACTIVE = 0
ACC_S_A = 1
ACC_Q = 2
ACC_START = 3
ACC_COUNT = 4
ACC_GAP = 5
ACC_S_LAST = 6
ACC_SIZE = 7

# rls layout
RLS_C = 0
RLS_P = 1
RLS_LAMBDA = 2
RLS_N = 3
RLS_SIZE = 4

# pipeline scalar-state layout (jekf capacity/flags + counters)
PS_CAPACITY = 0
PS_FLAGGED = 1
PS_OPENED = 2
PS_ACCEPTED = 3
PS_DISCARDED = 4
PS_REJECTED_C = 5
PS_GATED = 6
PS_SIZE = 7

THETA1_CEILING = 1.0 - 1e-6


@njit(cache=True)
def emf_segment(ks, s):
    n = ks.shape[0]
    i = np.searchsorted(ks, s, side="right") - 1
    if i < 0:
        i = 0
    elif i > n - 2:
        i = n - 2
    return i


@njit(cache=True)
def emf_value(ks, kv, slopes, s):
    i = emf_segment(ks, s)
    return kv[i] + slopes[i] * (s - ks[i])


@njit(cache=True)
def emf_slope(ks, slopes, s):
    return slopes[emf_segment(ks, s)]


@njit(cache=True)
def emf_inverse(ks, kv, slopes, v):
    n = kv.shape[0]
    if v <= kv[0]:
        return ks[0]
    if v >= kv[n - 1]:
        return ks[n - 1]
    j = np.searchsorted(kv, v, side="right") - 1
    if j > n - 2:
        j = n - 2
    return ks[j] + (v - kv[j]) / slopes[j]


@njit(cache=True)
def jekf_predict(x, u, capacity, tau, theta1_fixed, out):
    n = x.shape[0]
    theta1 = x[4] if n == 5 else theta1_fixed
    for i in range(n):
        out[i] = x[i]
    out[0] = x[0] + tau / capacity * u
    out[1] = theta1 * x[1] + x[2] * u


@njit(cache=True)
def jekf_transition_jacobian(x, u, theta1_fixed, F):
    n = x.shape[0]
    for i in range(n):
        for j in range(n):
            F[i, j] = 0.0
        F[i, i] = 1.0
    F[1, 1] = x[4] if n == 5 else theta1_fixed
    F[1, 2] = u
    if n == 5:
        F[1, 4] = x[1]


@njit(cache=True)
def jekf_output(x, u, ks, kv, slopes):
    return emf_value(ks, kv, slopes, x[0]) + x[1] + x[3] * u


@njit(cache=True)
def jekf_output_jacobian(x, u, ks, slopes, H):
    for i in range(H.shape[0]):
        H[i] = 0.0
    H[0] = emf_slope(ks, slopes, x[0])
    H[1] = 1.0
    H[3] = u


@njit(cache=True)
def jekf_step_inplace(x, P, capacity, u, y, ks, kv, slopes, tau, theta1_fixed,
                      gamma, meas_var, gate):
    """Forgetting-factor JEKF step; overwrites ``x`` and ``P``.

    Returns (y_hat, innovation, innovation_variance, status).
    """
    n = x.shape[0]
    F = np.empty((n, n))
    jekf_transition_jacobian(x, u, theta1_fixed, F)
    xp = np.empty(n)
    jekf_predict(x, u, capacity, tau, theta1_fixed, xp)

    # P- = F P F' / gamma
    FP = np.zeros((n, n))
    for i in range(n):
        for k in range(n):
            f = F[i, k]
            if f != 0.0:
                for j in range(n):
                    FP[i, j] += f * P[k, j]
    Pp = np.zeros((n, n))
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += FP[i, k] * F[j, k]
            Pp[i, j] = acc / gamma

    H = np.empty(n)
    jekf_output_jacobian(xp, u, ks, slopes, H)
    y_hat = jekf_output(xp, u, ks, kv, slopes)
    innov = y - y_hat

    PHt = np.zeros(n)
    for i in range(n):
        acc = 0.0
        for j in range(n):
            acc += Pp[i, j] * H[j]
        PHt[i] = acc
    S = meas_var
    for i in range(n):
        S += H[i] * PHt[i]
    if not (S > 0.0) or not math.isfinite(S):
        return y_hat, innov, S, STEP_BAD_INNOVATION_VAR

    if gate > 0.0 and abs(innov) > gate * math.sqrt(S):
        for i in range(n):
            x[i] = xp[i]
            for j in range(n):
                P[i, j] = 0.5 * (Pp[i, j] + Pp[j, i])
        return y_hat, innov, S, STEP_GATED

    K = np.empty(n)
    for i in range(n):
        K[i] = PHt[i] / S
        x[i] = xp[i] + K[i] * innov

    # Joseph form: (I - K H) P- (I - K H)' + K R K'
    M = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            M[i, j] = -K[i] * H[j]
        M[i, i] += 1.0
    MP = np.zeros((n, n))
    for i in range(n):
        for k in range(n):
            m = M[i, k]
            if m != 0.0:
                for j in range(n):
                    MP[i, j] += m * Pp[k, j]
    for i in range(n):
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += MP[i, k] * M[j, k]
            P[i, j] = acc + meas_var * K[i] * K[j]
    for i in range(n):
        for j in range(i + 1, n):
            a = 0.5 * (P[i, j] + P[j, i])
            P[i, j] = a
            P[j, i] = a
    return y_hat, innov, S, STEP_OK


@njit(cache=True)
def stability_guard_inplace(x):
    """Clamp theta1 to the ceiling; flag only genuine instability (theta1 >= 1)."""
    if x.shape[0] == 5 and x[4] > THETA1_CEILING:
        flagged = x[4] >= 1.0
        x[4] = THETA1_CEILING
        return flagged
    return False


@njit(cache=True)
def segment_step_inplace(acc, k, u, s_hat, mode, min_delta, threshold,
                         max_gap, tau, window):
    """Advance the charge-segment state machine by one sample.

    ``window`` receives (s_a, s_b, charge) when a window is emitted.
    Returns the event code for this sample.
    """
    event = EVT_NONE
    if mode == MODE_CHARGE_ONLY:
        if acc[ACC_ACTIVE] == 0.0:
            if u > threshold:
                acc[ACC_ACTIVE] = 1.0
                acc[ACC_S_A] = acc[ACC_S_LAST]
                acc[ACC_Q] = tau * u
                acc[ACC_START] = k
                acc[ACC_COUNT] = 1.0
                acc[ACC_GAP] = 0.0
                event = EVT_OPENED
        else:
            acc[ACC_Q] += tau * u
            acc[ACC_COUNT] += 1.0
            if u > threshold:
                acc[ACC_GAP] = 0.0
            else:
                acc[ACC_GAP] += 1.0
            if acc[ACC_GAP] > max_gap:
                acc[ACC_ACTIVE] = 0.0
                if s_hat - acc[ACC_S_A] > min_delta:
                    window[0] = acc[ACC_S_A]
                    window[1] = s_hat
                    window[2] = acc[ACC_Q]
                    event = EVT_ACCEPTED
                else:
                    event = EVT_DISCARDED
    else:
        if acc[ACC_ACTIVE] == 0.0:
            acc[ACC_ACTIVE] = 1.0
            acc[ACC_S_A] = acc[ACC_S_LAST]
            acc[ACC_Q] = tau * u
            acc[ACC_START] = k
            acc[ACC_COUNT] = 1.0
            acc[ACC_GAP] = 0.0
            event = EVT_OPENED
        else:
            acc[ACC_Q] += tau * u
            acc[ACC_COUNT] += 1.0
            if abs(s_hat - acc[ACC_S_A]) > min_delta:
                acc[ACC_ACTIVE] = 0.0
                window[0] = acc[ACC_S_A]
                window[1] = s_hat
                window[2] = acc[ACC_Q]
                event = EVT_ACCEPTED
    acc[ACC_S_LAST] = s_hat
    return event


@njit(cache=True)
def rls_update_inplace(rls, q, d):
    lam = rls[RLS_LAMBDA]
    p = rls[RLS_P]
    c = rls[RLS_C]
    if math.isinf(p):
        # exact diffuse-prior limit of the recursion below
        rls[RLS_C] = q / d
        rls[RLS_P] = 1.0 / (d * d)
    else:
        denom = lam + d * p * d
        gain = p * d / denom
        rls[RLS_C] = c + gain * (q - c * d)
        # equals (p - gain*d*p)/lam without the cancellation at diffuse p
        rls[RLS_P] = p / denom
    rls[RLS_N] += 1.0


@njit(cache=True)
def pipeline_step_inplace(x, P, ps, acc, rls, k, u, y, ks, kv, slopes, tau,
                          theta1_fixed, gamma, meas_var, gate, mode, min_delta,
                          threshold, max_gap, updates_enabled, out):
    """One coupled estimator sample.

    ``out`` receives (y_hat, innovation, event, flagged, status).
    """
    y_hat, innov, S, status = jekf_step_inplace(
        x, P, ps[PS_CAPACITY], u, y, ks, kv, slopes, tau, theta1_fixed,
        gamma, meas_var, gate)
    out[0] = y_hat
    out[1] = innov
    out[4] = status
    if status == STEP_BAD_INNOVATION_VAR:
        return
    if status == STEP_GATED:
        ps[PS_GATED] += 1.0
    flagged = stability_guard_inplace(x)
    if flagged:
        ps[PS_FLAGGED] += 1.0
    window = np.empty(3)
    event = segment_step_inplace(acc, k, u, x[0], mode, min_delta, threshold,
                                 max_gap, tau, window)
    if event == EVT_OPENED:
        ps[PS_OPENED] += 1.0
    elif event == EVT_DISCARDED:
        ps[PS_DISCARDED] += 1.0
    elif event == EVT_ACCEPTED:
        ps[PS_ACCEPTED] += 1.0
        if updates_enabled:
            d = window[1] - window[0]
            if d != 0.0:
                rls_update_inplace(rls, window[2], d)
                if rls[RLS_C] > 0.0:
                    ps[PS_CAPACITY] = rls[RLS_C]
                else:
                    ps[PS_REJECTED_C] += 1.0
    out[2] = event
    out[3] = 1.0 if flagged else 0.0


@njit(cache=True)
def pipeline_run_kernel(u_arr, y_arr, x, P, ps, acc, rls, ks, kv, slopes, tau,
                        theta1_fixed, gamma, meas_var, gate, mode, min_delta,
                        threshold, max_gap, updates_enabled,
                        s_out, o_out, th1_out, th2_out, th3_out, yhat_out,
                        innov_out, c_out, evt_out, flag_out):
    """Batch loop over arrays. Returns the index of a failing sample or -1."""
    out = np.zeros(5)
    n = x.shape[0]
    for k in range(u_arr.shape[0]):
        pipeline_step_inplace(x, P, ps, acc, rls, k, u_arr[k], y_arr[k], ks,
                              kv, slopes, tau, theta1_fixed, gamma, meas_var,
                              gate, mode, min_delta, threshold, max_gap,
                              updates_enabled, out)
        if out[4] == STEP_BAD_INNOVATION_VAR:
            return k
        s_out[k] = x[0]
        o_out[k] = x[1]
        th2_out[k] = x[2]
        th3_out[k] = x[3]
        th1_out[k] = x[4] if n == 5 else theta1_fixed
        yhat_out[k] = out[0]
        innov_out[k] = out[1]
        c_out[k] = ps[PS_CAPACITY]
        evt_out[k] = int(out[2])
        flag_out[k] = out[3] != 0.0
    return -1
