"""Action of exp(-t A) on a vector by Arnoldi projection with adaptive sub-stepping.

The step control follows the scheme popularised by Expokit: an Arnoldi basis of
dimension ``m`` is built for the current vector, a local error estimate is
read off an augmented Hessenberg exponential, and the step is accepted or
shrunk accordingly.
"""
from __future__ import annotations

import math

import numpy as np
import scipy.linalg


class KrylovConvergenceError(RuntimeError):
    pass


def expm_multiply_krylov(A, v: np.ndarray, t: float, m: int = 30, tol: float = 1e-8, max_steps: int = 5000) -> np.ndarray:
    """exp(-t A) v, with relative accuracy about ``tol`` in the euclidean norm."""
    v = np.asarray(v, dtype=float)
    n = v.shape[0]
    if t == 0:
        return v.copy()
    beta0 = np.linalg.norm(v)
    if beta0 == 0:
        return np.zeros_like(v)
    m = min(m, n)
    anorm = float(abs(A).sum(axis=1).max()) if hasattr(A, "sum") else 1.0
    anorm = max(anorm, 1e-300)
    gamma, delta = 0.9, 1.2
    xm = 1.0 / m
    fact = ((m + 1) / math.e) ** (m + 1) * math.sqrt(2 * math.pi * (m + 1))
    t_new = (1.0 / anorm) * ((fact * tol) / (4.0 * anorm)) ** xm
    s = 10.0 ** (math.floor(math.log10(t_new)) - 1)
    t_new = math.ceil(t_new / s) * s

    w = v.copy()
    t_now = 0.0
    steps = 0
    while t_now < t:
        steps += 1
        if steps > max_steps:
            raise KrylovConvergenceError(f"no convergence after {max_steps} sub-steps (t reached {t_now:.3g} of {t})")
        tau = min(t - t_now, t_new)
        beta = np.linalg.norm(w)
        V = np.zeros((n, m + 1))
        H = np.zeros((m + 2, m + 2))
        V[:, 0] = w / beta
        happy = False
        mb = m
        for j in range(m):
            p = -(A @ V[:, j])
            for i in range(j + 1):
                H[i, j] = V[:, i] @ p
                p -= H[i, j] * V[:, i]
            # one reorthogonalisation sweep keeps the basis orthonormal for stiff A
            for i in range(j + 1):
                c = V[:, i] @ p
                H[i, j] += c
                p -= c * V[:, i]
            s_norm = np.linalg.norm(p)
            if s_norm < 1e-12 * max(1.0, anorm):
                happy = True
                mb = j + 1
                tau = t - t_now
                break
            H[j + 1, j] = s_norm
            V[:, j + 1] = p / s_norm
        if happy:
            F = scipy.linalg.expm(tau * H[:mb, :mb])
            w = V[:, :mb] @ (beta * F[:, 0])
            t_now += tau
            continue
        avnorm = np.linalg.norm(-(A @ V[:, m]))
        H[m + 1, m] = 1.0
        while True:
            F = scipy.linalg.expm(tau * H)
            err1 = abs(beta * F[m, 0])
            err2 = abs(beta * F[m + 1, 0] * avnorm)
            if err1 > 10 * err2:
                err_loc = err2
            elif err1 > err2:
                err_loc = err1 * err2 / (err1 - err2)
            else:
                err_loc = err1
            budget = delta * tau / t * tol * beta0
            if err_loc <= budget:
                break
            tau = gamma * tau * (tau * tol * beta0 / t / max(err_loc, 1e-300)) ** xm
            s = 10.0 ** (math.floor(math.log10(tau)) - 1)
            tau = math.ceil(tau / s) * s
            steps += 1
            if steps > max_steps:
                raise KrylovConvergenceError(f"step size collapsed at t = {t_now:.3g}")
        w = V @ (beta * F[: m + 1, 0])
        t_now += tau
        err_loc = max(err_loc, 1e-300)
        t_new = gamma * tau * (tau * tol * beta0 / t / err_loc) ** xm
        s = 10.0 ** (math.floor(math.log10(t_new)) - 1)
        t_new = math.ceil(t_new / s) * s
    return w
