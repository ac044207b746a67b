# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled sampling kernel.

Statement-for-statement twin of ``_kernel_py``; see that module for the full
sweep documentation.  Both use the same libm functions in the same order,
and the extension is built with FMA contraction disabled, so outputs are
bit-identical to the pure-Python kernel.
"""

from libc.math cimport exp, log, log1p, sqrt

BACKEND = "cython"


cdef inline double _logsig(double x) noexcept nogil:
    if x >= 0.0:
        return -log1p(exp(-x))
    return x - log1p(exp(x))


cdef inline double _expit(double x) noexcept nogil:
    cdef double e
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _binom_loglik(double r, double n, double eta) noexcept nogil:
    return r * _logsig(eta) + (n - r) * _logsig(-eta)


cdef inline bint _accept(double u, double delta) noexcept nogil:
    if u <= 0.0:
        return True
    return log(u) < delta


cdef inline void _refresh_lam(
    double[::1] log_lam, int[::1] cell_terms,
    double[::1] lam_val, double[::1] cell_lamprod,
) noexcept nogil:
    cdef int n_term = log_lam.shape[0]
    cdef int n_cell = cell_terms.shape[0]
    cdef int t, c, mask
    cdef double lp
    for t in range(n_term):
        lam_val[t] = exp(log_lam[t])
    for c in range(n_cell):
        mask = cell_terms[c]
        lp = 1.0
        for t in range(n_term):
            if mask >> t & 1:
                lp *= lam_val[t]
        cell_lamprod[c] = lp


def refresh_lam(double[::1] log_lam, int[::1] cell_terms,
                double[::1] lam_val, double[::1] cell_lamprod):
    """Recompute per-term ratio values and per-cell ratio products."""
    _refresh_lam(log_lam, cell_terms, lam_val, cell_lamprod)


def init_loglik(double[::1] rctrl, double[::1] nctrl,
                double[::1] rtreat, double[::1] ntreat,
                double[::1] mu, double[::1] theta,
                double[::1] llc, double[::1] llt, int like_on):
    """Fill the per-trial binomial log-likelihood caches."""
    cdef int n = rctrl.shape[0]
    cdef int i
    for i in range(n):
        if like_on:
            llc[i] = _binom_loglik(rctrl[i], nctrl[i], mu[i])
            llt[i] = _binom_loglik(rtreat[i], ntreat[i], mu[i] + theta[i])
        else:
            llc[i] = 0.0
            llt[i] = 0.0


def conjugate_location_draw(double prior_mean, double prior_var,
                            double[::1] obs, double[::1] obs_vars, double z):
    """Normal-normal conjugate draw used for the location blocks."""
    cdef double prec = 1.0 / prior_var
    cdef double num = prior_mean / prior_var
    cdef int n = obs.shape[0]
    cdef int i
    cdef double w
    for i in range(n):
        w = 1.0 / obs_vars[i]
        prec += w
        num += obs[i] * w
    return num / prec + sqrt(1.0 / prec) * z


def sweep(
    double[::1] rctrl, double[::1] nctrl, double[::1] rtreat, double[::1] ntreat,
    int[::1] meta_of, int[::1] cell_of, int[::1] meta_start, int[::1] cell_terms,
    double[:, ::1] X,
    double[::1] theta, double[::1] mu, double[::1] llc, double[::1] llt,
    double[::1] d, double[::1] log_tau2, double[:, ::1] b,
    double[::1] b0, double[::1] phi2, double[::1] log_lam, double[::1] hyper,
    double[::1] lam_val, double[::1] cell_lamprod, double[::1] tau2_val,
    double[::1] s_mu, double[::1] s_th, double[::1] s_lam, double[::1] s_tau,
    double[::1] s_hyper,
    double[::1] z_mu, double[::1] u_mu, double[::1] z_th, double[::1] u_th,
    double[::1] z_loc, double[::1] z_b0, double[::1] g_phi,
    double[::1] z_lam, double[::1] u_lam, double[::1] z_tau, double[::1] u_tau,
    double[::1] z_hyp, double[::1] u_hyp,
    long[::1] a_mu, long[::1] a_th, long[::1] a_lam, long[::1] a_tau,
    long[::1] a_hyper,
    double v_loc, double v_base, double v_mutau,
    double lam_lmean, double lam_lvar, double phi_rate, double sig_upper,
    int like_on, int n_beta,
):
    """One full update sweep, in place."""
    cdef int n_trial = rctrl.shape[0]
    cdef int n_meta = d.shape[0]
    cdef int n_term = b0.shape[0]

    cdef int i, m, t, t2, j, k, i0, i1, cell, cmask
    cdef double mu_cur, mu_prop, llc_p, llt_p, delta, mean_i, v_i
    cdef double th_cur, th_prop, rc_, rp, prec, num, bias, w, resid
    cdef double sum_b, ss, x, xp, lam_p, lp_c, lp_p, tau2_m, v_c, v_p, r
    cdef double sig, sig2, linpred, tau_c, tau_p, xb, xj, other
    cdef double y, yp, sig_p, s2p, lp, dev

    _refresh_lam(log_lam, cell_terms, lam_val, cell_lamprod)
    for m in range(n_meta):
        tau2_val[m] = exp(log_tau2[m])

    # (a) per-trial baseline and effect updates
    for i in range(n_trial):
        m = meta_of[i]
        cell = cell_of[i]
        cmask = cell_terms[cell]
        mu_cur = mu[i]
        if like_on:
            mu_prop = mu_cur + s_mu[i] * z_mu[i]
            llc_p = _binom_loglik(rctrl[i], nctrl[i], mu_prop)
            llt_p = _binom_loglik(rtreat[i], ntreat[i], mu_prop + theta[i])
            delta = llc_p + llt_p - llc[i] - llt[i]
            delta += 0.5 * (mu_cur * mu_cur - mu_prop * mu_prop) / v_base
            if _accept(u_mu[i], delta):
                mu[i] = mu_prop
                llc[i] = llc_p
                llt[i] = llt_p
                a_mu[i] += 1
        else:
            mu[i] = sqrt(v_base) * z_mu[i]
            a_mu[i] += 1

        mean_i = d[m]
        for t in range(n_term):
            if cmask >> t & 1:
                mean_i += b[m, t]
        v_i = tau2_val[m] * cell_lamprod[cell]
        th_cur = theta[i]
        if like_on:
            th_prop = th_cur + s_th[i] * z_th[i]
            llt_p = _binom_loglik(rtreat[i], ntreat[i], mu[i] + th_prop)
            rc_ = th_cur - mean_i
            rp = th_prop - mean_i
            delta = llt_p - llt[i] + 0.5 * (rc_ * rc_ - rp * rp) / v_i
            if _accept(u_th[i], delta):
                theta[i] = th_prop
                llt[i] = llt_p
                a_th[i] += 1
        else:
            theta[i] = mean_i + sqrt(v_i) * z_th[i]
            a_th[i] += 1

    # (b) conjugate per-meta effect and bias draws
    k = 0
    for m in range(n_meta):
        i0 = meta_start[m]
        i1 = meta_start[m + 1]
        tau2_m = tau2_val[m]
        prec = 1.0 / v_loc
        num = 0.0
        for i in range(i0, i1):
            cmask = cell_terms[cell_of[i]]
            v_i = tau2_m * cell_lamprod[cell_of[i]]
            bias = 0.0
            for t in range(n_term):
                if cmask >> t & 1:
                    bias += b[m, t]
            w = 1.0 / v_i
            prec += w
            num += (theta[i] - bias) * w
        d[m] = num / prec + sqrt(1.0 / prec) * z_loc[k]
        k += 1
        for t in range(n_term):
            prec = 1.0 / phi2[t]
            num = b0[t] / phi2[t]
            for i in range(i0, i1):
                cmask = cell_terms[cell_of[i]]
                if cmask >> t & 1:
                    v_i = tau2_m * cell_lamprod[cell_of[i]]
                    resid = theta[i] - d[m]
                    for t2 in range(n_term):
                        if t2 != t and (cmask >> t2 & 1):
                            resid -= b[m, t2]
                    w = 1.0 / v_i
                    prec += w
                    num += resid * w
            b[m, t] = num / prec + sqrt(1.0 / prec) * z_loc[k]
            k += 1

    # (c) conjugate global bias means and variances
    for t in range(n_term):
        sum_b = 0.0
        for m in range(n_meta):
            sum_b += b[m, t]
        prec = 1.0 / v_loc + n_meta / phi2[t]
        num = sum_b / phi2[t]
        b0[t] = num / prec + sqrt(1.0 / prec) * z_b0[t]

    for t in range(n_term):
        ss = 0.0
        for m in range(n_meta):
            dev = b[m, t] - b0[t]
            ss += dev * dev
        phi2[t] = (phi_rate + 0.5 * ss) / g_phi[t]

    # (d) heterogeneity-ratio random walks (log scale)
    for t in range(n_term):
        x = log_lam[t]
        xp = x + s_lam[t] * z_lam[t]
        lam_p = exp(xp)
        delta = (
            0.5
            * ((x - lam_lmean) * (x - lam_lmean) - (xp - lam_lmean) * (xp - lam_lmean))
            / lam_lvar
        )
        for i in range(n_trial):
            cell = cell_of[i]
            cmask = cell_terms[cell]
            if cmask >> t & 1:
                m = meta_of[i]
                lp_c = cell_lamprod[cell]
                lp_p = 1.0
                for t2 in range(n_term):
                    if cmask >> t2 & 1:
                        if t2 == t:
                            lp_p *= lam_p
                        else:
                            lp_p *= lam_val[t2]
                tau2_m = tau2_val[m]
                v_c = tau2_m * lp_c
                v_p = tau2_m * lp_p
                mean_i = d[m]
                for t2 in range(n_term):
                    if cmask >> t2 & 1:
                        mean_i += b[m, t2]
                r = theta[i] - mean_i
                delta += -0.5 * (log(v_p) - log(v_c)) - 0.5 * r * r * (
                    1.0 / v_p - 1.0 / v_c
                )
        if _accept(u_lam[t], delta):
            log_lam[t] = xp
            a_lam[t] += 1
            _refresh_lam(log_lam, cell_terms, lam_val, cell_lamprod)

    # (e) per-meta heterogeneity random walks (log scale)
    sig = sig_upper * _expit(hyper[3])
    sig2 = sig * sig
    for m in range(n_meta):
        x = log_tau2[m]
        xp = x + s_tau[m] * z_tau[m]
        linpred = hyper[0] + X[m, 0] * hyper[1] + X[m, 1] * hyper[2]
        delta = (
            0.5 * ((x - linpred) * (x - linpred) - (xp - linpred) * (xp - linpred)) / sig2
        )
        tau_c = tau2_val[m]
        tau_p = exp(xp)
        i0 = meta_start[m]
        i1 = meta_start[m + 1]
        for i in range(i0, i1):
            cell = cell_of[i]
            cmask = cell_terms[cell]
            lp = cell_lamprod[cell]
            v_c = tau_c * lp
            v_p = tau_p * lp
            mean_i = d[m]
            for t in range(n_term):
                if cmask >> t & 1:
                    mean_i += b[m, t]
            r = theta[i] - mean_i
            delta += -0.5 * (log(v_p) - log(v_c)) - 0.5 * r * r * (
                1.0 / v_p - 1.0 / v_c
            )
        if _accept(u_tau[m], delta):
            log_tau2[m] = xp
            tau2_val[m] = tau_p
            a_tau[m] += 1

    # (f) mean of the log-heterogeneity regression (conjugate)
    prec = 1.0 / v_mutau
    num = 0.0
    for m in range(n_meta):
        xb = X[m, 0] * hyper[1] + X[m, 1] * hyper[2]
        prec += 1.0 / sig2
        num += (log_tau2[m] - xb) / sig2
    hyper[0] = num / prec + sqrt(1.0 / prec) * z_hyp[0]
    a_hyper[0] += 1

    # (g) outcome-type coefficients (conjugate)
    for j in range(n_beta):
        prec = 1.0 / v_mutau
        num = 0.0
        for m in range(n_meta):
            xj = X[m, j]
            other = X[m, 1 - j] * hyper[2 - j]
            r = log_tau2[m] - hyper[0] - other
            prec += xj * xj / sig2
            num += xj * r / sig2
        hyper[1 + j] = num / prec + sqrt(1.0 / prec) * z_hyp[1 + j]
        a_hyper[1 + j] += 1

    # (h) spread of the log-heterogeneity regression (logit scale)
    y = hyper[3]
    yp = y + s_hyper[3] * z_hyp[3]
    delta = (_logsig(yp) + _logsig(-yp)) - (_logsig(y) + _logsig(-y))
    sig_p = sig_upper * _expit(yp)
    s2p = sig_p * sig_p
    for m in range(n_meta):
        linpred = hyper[0] + X[m, 0] * hyper[1] + X[m, 1] * hyper[2]
        r = log_tau2[m] - linpred
        delta += -0.5 * (log(s2p) - log(sig2)) - 0.5 * r * r * (1.0 / s2p - 1.0 / sig2)
    if _accept(u_hyp[3], delta):
        hyper[3] = yp
        a_hyper[3] += 1
