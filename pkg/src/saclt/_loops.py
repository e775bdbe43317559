"""Compiled inner loops for the recursion engine.

Every kernel consumes pre-drawn raw randomness (uniforms or standard
normals) so that the compiled path and the pure-Python step path walk the
same stream.  State sampling uses the searchsorted-right convention: the
drawn state is the first index j with u < cum_row[j].

Return convention: ``(status, fail_step, theta, theta_bar, sigma, chain)``
where status 0 is success and status 1 flags a non-finite iterate first
seen when producing step ``fail_step``.
"""

from __future__ import annotations

import numpy as np
from numba import njit

OK = 0
NONFINITE = 1


@njit(cache=True, nogil=True)
def _draw_state(cum_row, u):
    S = cum_row.shape[0]
    j = 0
    while j < S - 1 and u >= cum_row[j]:
        j += 1
    return j


@njit(cache=True, nogil=True)
def simulate_chain(cum_rows, start_state, uniforms):
    """States X_0..X_n of a frozen chain driven by ``uniforms`` (length n)."""
    n = uniforms.shape[0]
    states = np.empty(n + 1, dtype=np.int64)
    states[0] = start_state
    x = start_state
    for k in range(n):
        x = _draw_state(cum_rows[x], uniforms[k])
        states[k + 1] = x
    return states


@njit(cache=True, nogil=True)
def sa_gaussian_linear(
    A,
    target,
    chol,
    theta0,
    gammas,
    normals,
    trunc_on,
    r0,
    growth,
    center,
    reset,
    cp_idx,
    cp_theta,
    cp_bar,
    cp_sigma,
):
    d = theta0.shape[0]
    horizon = gammas.shape[0]
    theta = theta0.copy()
    bar = theta0.copy()
    half = np.empty(d)
    sigma = 0
    ci = 0
    for n in range(horizon):
        g = gammas[n]
        for i in range(d):
            s = 0.0
            for j in range(d):
                s += A[i, j] * (theta[j] - target[j])
            for j in range(d):
                s += chol[i, j] * normals[n, j]
            half[i] = theta[i] + g * s
        if trunc_on:
            radius = r0 * growth ** float(sigma)
            ssq = 0.0
            for i in range(d):
                diff = half[i] - center[i]
                ssq += diff * diff
            if ssq <= radius * radius:
                for i in range(d):
                    theta[i] = half[i]
            else:
                for i in range(d):
                    theta[i] = reset[i]
                sigma += 1
        else:
            for i in range(d):
                theta[i] = half[i]
        finite = True
        for i in range(d):
            if not np.isfinite(theta[i]):
                finite = False
        if not finite:
            return NONFINITE, n + 1, theta, bar, sigma, -1
        for i in range(d):
            bar[i] = bar[i] + (theta[i] - bar[i]) / (n + 2)
        if ci < cp_idx.shape[0] and n + 1 == cp_idx[ci]:
            for i in range(d):
                cp_theta[ci, i] = theta[i]
                cp_bar[ci, i] = bar[i]
            cp_sigma[ci] = sigma
            ci += 1
    return OK, -1, theta, bar, sigma, -1


@njit(cache=True, nogil=True)
def sa_gaussian_cubic(
    noise_scale,
    theta0,
    gammas,
    normals,
    trunc_on,
    r0,
    growth,
    center,
    reset,
    cp_idx,
    cp_theta,
    cp_bar,
    cp_sigma,
):
    # scalar double-well drift: H = theta - theta**3 + noise
    horizon = gammas.shape[0]
    theta = theta0
    bar = theta0
    sigma = 0
    ci = 0
    for n in range(horizon):
        g = gammas[n]
        h = theta - theta * theta * theta + noise_scale * normals[n, 0]
        half = theta + g * h
        if trunc_on:
            radius = r0 * growth ** float(sigma)
            diff = half - center
            if diff * diff <= radius * radius:
                theta = half
            else:
                theta = reset
                sigma += 1
        else:
            theta = half
        if not np.isfinite(theta):
            return NONFINITE, n + 1, theta, bar, sigma, -1
        bar = bar + (theta - bar) / (n + 2)
        if ci < cp_idx.shape[0] and n + 1 == cp_idx[ci]:
            cp_theta[ci, 0] = theta
            cp_bar[ci, 0] = bar
            cp_sigma[ci] = sigma
            ci += 1
    return OK, -1, theta, bar, sigma, -1


@njit(cache=True, nogil=True)
def sa_states_table(
    cum_rows,
    values,
    start_state,
    theta0,
    gammas,
    uniforms,
    trunc_on,
    r0,
    growth,
    center,
    reset,
    cp_idx,
    cp_theta,
    cp_bar,
    cp_sigma,
):
    # theta-independent kernel; observation H(theta, x) = values[x] - theta
    d = theta0.shape[0]
    horizon = gammas.shape[0]
    theta = theta0.copy()
    bar = theta0.copy()
    half = np.empty(d)
    sigma = 0
    ci = 0
    x = start_state
    for n in range(horizon):
        g = gammas[n]
        x = _draw_state(cum_rows[x], uniforms[n])
        for i in range(d):
            half[i] = theta[i] + g * (values[x, i] - theta[i])
        if trunc_on:
            radius = r0 * growth ** float(sigma)
            ssq = 0.0
            for i in range(d):
                diff = half[i] - center[i]
                ssq += diff * diff
            if ssq <= radius * radius:
                for i in range(d):
                    theta[i] = half[i]
            else:
                for i in range(d):
                    theta[i] = reset[i]
                sigma += 1
        else:
            for i in range(d):
                theta[i] = half[i]
        finite = True
        for i in range(d):
            if not np.isfinite(theta[i]):
                finite = False
        if not finite:
            return NONFINITE, n + 1, theta, bar, sigma, x
        for i in range(d):
            bar[i] = bar[i] + (theta[i] - bar[i]) / (n + 2)
        if ci < cp_idx.shape[0] and n + 1 == cp_idx[ci]:
            for i in range(d):
                cp_theta[ci, i] = theta[i]
                cp_bar[ci, i] = bar[i]
            cp_sigma[ci] = sigma
            ci += 1
    return OK, -1, theta, bar, sigma, x


@njit(cache=True, nogil=True)
def sa_two_state_logistic(
    epsilon,
    v0,
    v1,
    resample_stationary,
    start_state,
    theta0,
    gammas,
    uniforms,
    trunc_on,
    r0,
    growth,
    center,
    reset,
    cp_idx,
    cp_theta,
    cp_bar,
    cp_sigma,
):
    # scalar two-state chain: q01 = eps + (1-2 eps) sigmoid(theta),
    # q10 = eps + (1-2 eps) sigmoid(-theta); stationary law is (q10, q01).
    horizon = gammas.shape[0]
    theta = theta0
    bar = theta0
    sigma = 0
    ci = 0
    x = start_state
    for n in range(horizon):
        g = gammas[n]
        q01 = epsilon + (1.0 - 2.0 * epsilon) * (1.0 / (1.0 + np.exp(-theta)))
        u = uniforms[n]
        if resample_stationary:
            x = 0 if u < 1.0 - q01 else 1
        elif x == 0:
            x = 0 if u < 1.0 - q01 else 1
        else:
            q10 = epsilon + (1.0 - 2.0 * epsilon) * (1.0 / (1.0 + np.exp(theta)))
            x = 0 if u < q10 else 1
        v = v0 if x == 0 else v1
        half = theta + g * (v - theta)
        if trunc_on:
            radius = r0 * growth ** float(sigma)
            diff = half - center
            if diff * diff <= radius * radius:
                theta = half
            else:
                theta = reset
                sigma += 1
        else:
            theta = half
        if not np.isfinite(theta):
            return NONFINITE, n + 1, theta, bar, sigma, x
        bar = bar + (theta - bar) / (n + 2)
        if ci < cp_idx.shape[0] and n + 1 == cp_idx[ci]:
            cp_theta[ci, 0] = theta
            cp_bar[ci, 0] = bar
            cp_sigma[ci] = sigma
            ci += 1
    return OK, -1, theta, bar, sigma, x
