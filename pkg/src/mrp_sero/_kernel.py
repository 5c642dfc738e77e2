"""Compiled log-density kernel.

Records are aggregated to (cell, week) groups so the likelihood is a sum of
binomial terms; this is term-for-term equal to the per-record Bernoulli sum
(without binomial coefficients).
"""
import math

import numpy as np
from numba import njit

# p and 1 - p are floored at this value before taking logs.
P_CLAMP = 1e-12

_LOG_2PI = math.log(2.0 * math.pi)
_LOG_2 = math.log(2.0)


@njit(cache=True)
def _softplus(z):
    if z > 0.0:
        return z + math.log1p(math.exp(-z))
    return math.log1p(math.exp(z))


@njit(cache=True)
def _expit(z):
    if z >= 0.0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@njit(cache=True)
def _normal_lpdf(x, scale):
    return -0.5 * (x / scale) ** 2 - math.log(scale) - 0.5 * _LOG_2PI


@njit(cache=True)
def logp_grad(
    x, cell_male, cell_age, cell_race, cell_county, cell_inter,
    cell, week, inter, n, y,
    n_weeks, n_inter, inter_by_week, scales, estimated, fixed_delta, fixed_gamma,
    sens_y, sens_n, spec_y, spec_n, study_const,
):
    """Return (loglik, logprior, grad_loglik, grad_logprior) on the unconstrained scale.

    ``cell_*`` describe the 60 demographic cells; ``cell``, ``week`` and
    ``inter`` index each aggregated group.  The interaction index comes from
    ``inter`` when ``inter_by_week`` is true, otherwise from ``cell_inter``.
    ``scales`` holds prior scales for (beta1/beta2, age, race, county, time,
    interaction).
    """
    dim = x.shape[0]
    g_lik = np.zeros(dim)
    g_pri = np.zeros(dim)
    for j in range(dim):
        if not math.isfinite(x[j]):
            g_lik[:] = np.nan
            g_pri[:] = np.nan
            return -np.inf, -np.inf, g_lik, g_pri

    o_age = 2
    o_race = 7
    o_cty = 10
    o_time = 12
    o_int = o_time + n_weeks
    o_ls = o_int + n_inter
    o_mis = o_ls + 5

    s_age = math.exp(x[o_ls])
    s_race = math.exp(x[o_ls + 1])
    s_cty = math.exp(x[o_ls + 2])
    s_time = math.exp(x[o_ls + 3])
    s_int = math.exp(x[o_ls + 4])

    if estimated:
        ld = x[o_mis]
        lg = x[o_mis + 1]
        delta = _expit(ld)
        gamma = _expit(lg)
    else:
        delta = fixed_delta
        gamma = fixed_gamma
    fpr = 1.0 - gamma
    fnr = 1.0 - delta
    slope = delta + gamma - 1.0

    # linear predictor = per-cell part + per-week part (+ age x week term)
    n_cells = cell_male.shape[0]
    eta_cell = np.empty(n_cells)
    for j in range(n_cells):
        v = (x[0] + x[1] * cell_male[j] + s_age * x[o_age + cell_age[j]]
             + s_race * x[o_race + cell_race[j]] + s_cty * x[o_cty + cell_county[j]])
        if not inter_by_week:
            v += s_int * x[o_int + cell_inter[j]]
        eta_cell[j] = v

    lik = 0.0
    d_delta = 0.0
    d_gamma = 0.0
    d_cell = np.zeros(n_cells)
    for i in range(n.shape[0]):
        e = eta_cell[cell[i]] + s_time * x[o_time + week[i]]
        if inter_by_week:
            e += s_int * x[o_int + inter[i]]
        ex = math.exp(-abs(e))
        if e >= 0.0:
            pi = 1.0 / (1.0 + ex)
            qi = ex * pi
        else:
            qi = 1.0 / (1.0 + ex)
            pi = ex * qi
        p = delta * pi + fpr * qi
        q = fnr * pi + gamma * qi
        yi = y[i]
        ni = n[i] - yi
        # d loglik / d p, respecting the clamp
        dp = 0.0
        if yi > 0.0:
            if p > P_CLAMP:
                lik += yi * math.log(p)
                dp += yi / p
            else:
                lik += yi * math.log(P_CLAMP)
        if ni > 0.0:
            if q > P_CLAMP:
                lik += ni * math.log(q)
                dp -= ni / q
            else:
                lik += ni * math.log(P_CLAMP)
        de = dp * slope * pi * qi
        d_delta += dp * pi
        d_gamma -= dp * qi
        d_cell[cell[i]] += de
        g_lik[o_time + week[i]] += de
        if inter_by_week:
            g_lik[o_int + inter[i]] += de

    for j in range(n_cells):
        de = d_cell[j]
        g_lik[0] += de
        g_lik[1] += de * cell_male[j]
        g_lik[o_age + cell_age[j]] += de
        g_lik[o_race + cell_race[j]] += de
        g_lik[o_cty + cell_county[j]] += de
        if not inter_by_week:
            g_lik[o_int + cell_inter[j]] += de
    # chain rule through effect = sigma * raw; g_lik currently holds d/d effect
    blocks = ((o_age, o_race, s_age), (o_race, o_cty, s_race), (o_cty, o_time, s_cty),
              (o_time, o_int, s_time), (o_int, o_ls, s_int))
    for b in range(5):
        lo, hi, s = blocks[b]
        acc = 0.0
        for j in range(lo, hi):
            acc += g_lik[j] * x[j]
            g_lik[j] *= s
        g_lik[o_ls + b] = acc * s

    pri = 0.0
    # fixed coefficients
    for j in range(2):
        pri += _normal_lpdf(x[j], scales[0])
        g_pri[j] = -x[j] / scales[0] ** 2
    # standardized varying effects
    for j in range(o_age, o_ls):
        pri += -0.5 * x[j] * x[j] - 0.5 * _LOG_2PI
        g_pri[j] = -x[j]
    # half-normal scales on log sigma, with log-Jacobian
    for j in range(5):
        ls = x[o_ls + j]
        s = math.exp(ls)
        sc = scales[1 + j]
        pri += _LOG_2 + _normal_lpdf(s, sc) + ls
        g_pri[o_ls + j] = -(s * s) / (sc * sc) + 1.0

    if estimated:
        # uniform priors on (0, 1) + logit Jacobian; log delta = -softplus(-ld)
        log_d = -_softplus(-ld)
        log_1md = -_softplus(ld)
        log_g = -_softplus(-lg)
        log_1mg = -_softplus(lg)
        pri += log_d + log_1md + log_g + log_1mg
        g_pri[o_mis] = 1.0 - 2.0 * delta
        g_pri[o_mis + 1] = 1.0 - 2.0 * gamma
        # validation-study binomial terms belong to the likelihood
        lik += sens_y * log_d + (sens_n - sens_y) * log_1md
        lik += spec_y * log_g + (spec_n - spec_y) * log_1mg + study_const
        g_lik[o_mis] += sens_y - sens_n * delta + d_delta * delta * (1.0 - delta)
        g_lik[o_mis + 1] += spec_y - spec_n * gamma + d_gamma * gamma * (1.0 - gamma)

    return lik, pri, g_lik, g_pri
