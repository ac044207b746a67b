"""Pure-Python sampling kernel.

Fallback twin of the compiled extension ``_kernel``.  Both implement exactly
the same update sweep with the same operation order and the same libm calls,
so given identical inputs and random-number buffers they produce bit-identical
states.  All randomness is drawn by the driver and passed in; the kernel is a
deterministic function of (state, buffers).

Update sweep, in order: per-trial baseline/effect random walks (direct
conjugate draws when the likelihood is switched off), conjugate draws for the
per-meta effect and bias terms, conjugate draws for the global bias means and
variances, log-scale random walks for the heterogeneity ratios and per-meta
heterogeneity, conjugate draws for the log-heterogeneity regression mean and
coefficients, and a logit-scale random walk for its spread.
"""

from math import exp, log, log1p, sqrt

BACKEND = "python"


def _logsig(x):
    # log(1/(1+exp(-x)))
    if x >= 0.0:
        return -log1p(exp(-x))
    return x - log1p(exp(x))


def _expit(x):
    if x >= 0.0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def _binom_loglik(r, n, eta):
    # binomial log likelihood without the constant term
    return r * _logsig(eta) + (n - r) * _logsig(-eta)


def _accept(u, delta):
    if u <= 0.0:
        return True
    return log(u) < delta


def refresh_lam(log_lam, cell_terms, lam_val, cell_lamprod):
    """Recompute per-term ratio values and per-cell ratio products."""
    n_term = log_lam.shape[0]
    n_cell = cell_terms.shape[0]
    for t in range(n_term):
        lam_val[t] = exp(float(log_lam[t]))
    for c in range(n_cell):
        mask = cell_terms[c]
        lp = 1.0
        for t in range(n_term):
            if mask >> t & 1:
                lp *= float(lam_val[t])
        cell_lamprod[c] = lp


def init_loglik(rctrl, nctrl, rtreat, ntreat, mu, theta, llc, llt, like_on):
    """Fill the per-trial binomial log-likelihood caches."""
    n = rctrl.shape[0]
    for i in range(n):
        if like_on:
            llc[i] = _binom_loglik(float(rctrl[i]), float(nctrl[i]), float(mu[i]))
            llt[i] = _binom_loglik(
                float(rtreat[i]), float(ntreat[i]), float(mu[i]) + float(theta[i])
            )
        else:
            llc[i] = 0.0
            llt[i] = 0.0


def conjugate_location_draw(prior_mean, prior_var, obs, obs_vars, z):
    """Normal-normal conjugate draw used for the location blocks."""
    prec = 1.0 / prior_var
    num = prior_mean / prior_var
    n = obs.shape[0]
    for i in range(n):
        w = 1.0 / float(obs_vars[i])
        prec += w
        num += float(obs[i]) * w
    return num / prec + sqrt(1.0 / prec) * z


def sweep(
    rctrl, nctrl, rtreat, ntreat, meta_of, cell_of, meta_start, cell_terms, X,
    theta, mu, llc, llt, d, log_tau2, b, b0, phi2, log_lam, hyper,
    lam_val, cell_lamprod, tau2_val,
    s_mu, s_th, s_lam, s_tau, s_hyper,
    z_mu, u_mu, z_th, u_th, z_loc, z_b0, g_phi, z_lam, u_lam, z_tau, u_tau,
    z_hyp, u_hyp,
    a_mu, a_th, a_lam, a_tau, a_hyper,
    v_loc, v_base, v_mutau, lam_lmean, lam_lvar, phi_rate, sig_upper,
    like_on, n_beta,
):
    """One full update sweep, in place."""
    n_trial = rctrl.shape[0]
    n_meta = d.shape[0]
    n_term = b0.shape[0]

    refresh_lam(log_lam, cell_terms, lam_val, cell_lamprod)
    for m in range(n_meta):
        tau2_val[m] = exp(float(log_tau2[m]))

    # (a) per-trial baseline and effect updates
    for i in range(n_trial):
        m = meta_of[i]
        cell = cell_of[i]
        cmask = cell_terms[cell]
        mu_cur = float(mu[i])
        if like_on:
            mu_prop = mu_cur + float(s_mu[i]) * float(z_mu[i])
            llc_p = _binom_loglik(float(rctrl[i]), float(nctrl[i]), mu_prop)
            llt_p = _binom_loglik(
                float(rtreat[i]), float(ntreat[i]), mu_prop + float(theta[i])
            )
            delta = llc_p + llt_p - float(llc[i]) - float(llt[i])
            delta += 0.5 * (mu_cur * mu_cur - mu_prop * mu_prop) / v_base
            if _accept(float(u_mu[i]), delta):
                mu[i] = mu_prop
                llc[i] = llc_p
                llt[i] = llt_p
                a_mu[i] += 1
        else:
            mu[i] = sqrt(v_base) * float(z_mu[i])
            a_mu[i] += 1

        mean_i = float(d[m])
        for t in range(n_term):
            if cmask >> t & 1:
                mean_i += float(b[m, t])
        v_i = float(tau2_val[m]) * float(cell_lamprod[cell])
        th_cur = float(theta[i])
        if like_on:
            th_prop = th_cur + float(s_th[i]) * float(z_th[i])
            llt_p = _binom_loglik(
                float(rtreat[i]), float(ntreat[i]), float(mu[i]) + th_prop
            )
            rc_ = th_cur - mean_i
            rp = th_prop - mean_i
            delta = llt_p - float(llt[i]) + 0.5 * (rc_ * rc_ - rp * rp) / v_i
            if _accept(float(u_th[i]), delta):
                theta[i] = th_prop
                llt[i] = llt_p
                a_th[i] += 1
        else:
            theta[i] = mean_i + sqrt(v_i) * float(z_th[i])
            a_th[i] += 1

    # (b) conjugate per-meta effect and bias draws
    k = 0
    for m in range(n_meta):
        i0 = meta_start[m]
        i1 = meta_start[m + 1]
        tau2_m = float(tau2_val[m])
        prec = 1.0 / v_loc
        num = 0.0
        for i in range(i0, i1):
            cmask = cell_terms[cell_of[i]]
            v_i = tau2_m * float(cell_lamprod[cell_of[i]])
            bias = 0.0
            for t in range(n_term):
                if cmask >> t & 1:
                    bias += float(b[m, t])
            w = 1.0 / v_i
            prec += w
            num += (float(theta[i]) - bias) * w
        d[m] = num / prec + sqrt(1.0 / prec) * float(z_loc[k])
        k += 1
        for t in range(n_term):
            prec = 1.0 / float(phi2[t])
            num = float(b0[t]) / float(phi2[t])
            for i in range(i0, i1):
                cmask = cell_terms[cell_of[i]]
                if cmask >> t & 1:
                    v_i = tau2_m * float(cell_lamprod[cell_of[i]])
                    resid = float(theta[i]) - float(d[m])
                    for t2 in range(n_term):
                        if t2 != t and (cmask >> t2 & 1):
                            resid -= float(b[m, t2])
                    w = 1.0 / v_i
                    prec += w
                    num += resid * w
            b[m, t] = num / prec + sqrt(1.0 / prec) * float(z_loc[k])
            k += 1

    # (c) conjugate global bias means and variances
    for t in range(n_term):
        sum_b = 0.0
        for m in range(n_meta):
            sum_b += float(b[m, t])
        prec = 1.0 / v_loc + n_meta / float(phi2[t])
        num = sum_b / float(phi2[t])
        b0[t] = num / prec + sqrt(1.0 / prec) * float(z_b0[t])

    for t in range(n_term):
        ss = 0.0
        for m in range(n_meta):
            dev = float(b[m, t]) - float(b0[t])
            ss += dev * dev
        phi2[t] = (phi_rate + 0.5 * ss) / float(g_phi[t])

    # (d) heterogeneity-ratio random walks (log scale)
    for t in range(n_term):
        x = float(log_lam[t])
        xp = x + float(s_lam[t]) * float(z_lam[t])
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
                lp_c = float(cell_lamprod[cell])
                lp_p = 1.0
                for t2 in range(n_term):
                    if cmask >> t2 & 1:
                        if t2 == t:
                            lp_p *= lam_p
                        else:
                            lp_p *= float(lam_val[t2])
                tau2_m = float(tau2_val[m])
                v_c = tau2_m * lp_c
                v_p = tau2_m * lp_p
                mean_i = float(d[m])
                for t2 in range(n_term):
                    if cmask >> t2 & 1:
                        mean_i += float(b[m, t2])
                r = float(theta[i]) - mean_i
                delta += -0.5 * (log(v_p) - log(v_c)) - 0.5 * r * r * (
                    1.0 / v_p - 1.0 / v_c
                )
        if _accept(float(u_lam[t]), delta):
            log_lam[t] = xp
            a_lam[t] += 1
            refresh_lam(log_lam, cell_terms, lam_val, cell_lamprod)

    # (e) per-meta heterogeneity random walks (log scale)
    sig = sig_upper * _expit(float(hyper[3]))
    sig2 = sig * sig
    for m in range(n_meta):
        x = float(log_tau2[m])
        xp = x + float(s_tau[m]) * float(z_tau[m])
        linpred = (
            float(hyper[0])
            + float(X[m, 0]) * float(hyper[1])
            + float(X[m, 1]) * float(hyper[2])
        )
        delta = (
            0.5 * ((x - linpred) * (x - linpred) - (xp - linpred) * (xp - linpred)) / sig2
        )
        tau_c = float(tau2_val[m])
        tau_p = exp(xp)
        i0 = meta_start[m]
        i1 = meta_start[m + 1]
        for i in range(i0, i1):
            cell = cell_of[i]
            cmask = cell_terms[cell]
            lp = float(cell_lamprod[cell])
            v_c = tau_c * lp
            v_p = tau_p * lp
            mean_i = float(d[m])
            for t in range(n_term):
                if cmask >> t & 1:
                    mean_i += float(b[m, t])
            r = float(theta[i]) - mean_i
            delta += -0.5 * (log(v_p) - log(v_c)) - 0.5 * r * r * (
                1.0 / v_p - 1.0 / v_c
            )
        if _accept(float(u_tau[m]), delta):
            log_tau2[m] = xp
            tau2_val[m] = tau_p
            a_tau[m] += 1

    # (f) mean of the log-heterogeneity regression (conjugate)
    prec = 1.0 / v_mutau
    num = 0.0
    for m in range(n_meta):
        xb = float(X[m, 0]) * float(hyper[1]) + float(X[m, 1]) * float(hyper[2])
        prec += 1.0 / sig2
        num += (float(log_tau2[m]) - xb) / sig2
    hyper[0] = num / prec + sqrt(1.0 / prec) * float(z_hyp[0])
    a_hyper[0] += 1

    # (g) outcome-type coefficients (conjugate)
    for j in range(n_beta):
        prec = 1.0 / v_mutau
        num = 0.0
        for m in range(n_meta):
            xj = float(X[m, j])
            other = float(X[m, 1 - j]) * float(hyper[2 - j])
            r = float(log_tau2[m]) - float(hyper[0]) - other
            prec += xj * xj / sig2
            num += xj * r / sig2
        hyper[1 + j] = num / prec + sqrt(1.0 / prec) * float(z_hyp[1 + j])
        a_hyper[1 + j] += 1

    # (h) spread of the log-heterogeneity regression (logit scale)
    y = float(hyper[3])
    yp = y + float(s_hyper[3]) * float(z_hyp[3])
    delta = (_logsig(yp) + _logsig(-yp)) - (_logsig(y) + _logsig(-y))
    sig_p = sig_upper * _expit(yp)
    s2p = sig_p * sig_p
    for m in range(n_meta):
        linpred = (
            float(hyper[0])
            + float(X[m, 0]) * float(hyper[1])
            + float(X[m, 1]) * float(hyper[2])
        )
        r = float(log_tau2[m]) - linpred
        delta += -0.5 * (log(s2p) - log(sig2)) - 0.5 * r * r * (1.0 / s2p - 1.0 / sig2)
    if _accept(float(u_hyp[3]), delta):
        hyper[3] = yp
        a_hyper[3] += 1
