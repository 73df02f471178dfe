"""JIT-compiled inner loops shared by the filters, simulators and policy harness.

Conventions: regimes and reaction types are 0-based here. A rate layout is
given by ``idx``/``coef`` (``theta_q(i) = coef[q, i] * free[idx[q, i]]``) and
the mass-action factors of the current interval by ``H`` (length qbar).
"""
import math

import numpy as np
from numba import njit

MULTINOMIAL, RESIDUAL, STRATIFIED, SYSTEMATIC = 0, 1, 2, 3
SCHEMES = {"multinomial": MULTINOMIAL, "residual": RESIDUAL, "stratified": STRATIFIED, "systematic": SYSTEMATIC}

_TAYLOR_ORDER = 18


# ---------------------------------------------------------------------------
# matrix exponentials of killed generators
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def killed2(q00, q01, q10, q11, t, out):
    """exp(t Q) for a 2x2 sub-generator by its eigen-decomposition.

    Both spectral projectors are written with nonnegative numerators so no
    cancellation occurs; ``exp(lambda_+ t) <= 1`` keeps it overflow free.
    """
    half = 0.5 * (q00 + q11)
    dd = 0.5 * (q00 - q11)
    prod = q01 * q10
    delta = math.sqrt(dd * dd + prod)
    if delta * t < 1e-9:
        e = math.exp(half * t)
        out[0, 0] = e * (1.0 + t * dd)
        out[1, 1] = e * (1.0 - t * dd)
        out[0, 1] = e * t * q01
        out[1, 0] = e * t * q10
        return out
    if dd >= 0.0:
        pplus = delta + dd
        pminus = prod / pplus if pplus > 0.0 else 0.0
    else:
        pminus = delta - dd
        pplus = prod / pminus
    ep = math.exp((half + delta) * t)
    em = math.exp((half - delta) * t)
    inv = 0.5 / delta
    out[0, 0] = (ep * pplus + em * pminus) * inv
    out[1, 1] = (ep * pminus + em * pplus) * inv
    s = ep * (-math.expm1(-2.0 * delta * t)) * inv
    out[0, 1] = s * q01
    out[1, 0] = s * q10
    return out


@njit(cache=True)
def expm_small(A):
    """Scaling-and-squaring Taylor exponential for small dense matrices."""
    n = A.shape[0]
    norm = 0.0
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += abs(A[i, j])
        norm = max(norm, s)
    sq = 0
    if norm > 0.5:
        sq = int(math.ceil(math.log2(norm / 0.5)))
    B = A / (2.0 ** sq)
    E = np.eye(n)
    term = np.eye(n)
    for k in range(1, _TAYLOR_ORDER + 1):
        term = term @ B / k
        E += term
    for _ in range(sq):
        E = E @ E
    return E


@njit(cache=True)
def killed_matrix(G, abar, t):
    m = G.shape[0]
    out = np.empty((m, m))
    if m == 1:
        out[0, 0] = math.exp(-abar[0] * t)
        return out
    if m == 2:
        return killed2(G[0, 0] - abar[0], G[0, 1], G[1, 0], G[1, 1] - abar[1], t, out)
    Q = G.copy()
    for i in range(m):
        Q[i, i] -= abar[i]
    return expm_small(Q * t)


@njit(cache=True, inline="always")
def killed2_row(q00, q01, q10, q11, t, i, row):
    """Row ``i`` of :func:`killed2` using one exponential and one expm1."""
    half = 0.5 * (q00 + q11)
    dd = 0.5 * (q00 - q11)
    prod = q01 * q10
    delta = math.sqrt(dd * dd + prod)
    if delta * t < 1e-9:
        e = math.exp(half * t)
        if i == 0:
            row[0] = e * (1.0 + t * dd)
            row[1] = e * t * q01
        else:
            row[0] = e * t * q10
            row[1] = e * (1.0 - t * dd)
        return
    if dd >= 0.0:
        pplus = delta + dd
        pminus = prod / pplus if pplus > 0.0 else 0.0
    else:
        pminus = delta - dd
        pplus = prod / pminus
    ep = math.exp((half + delta) * t)
    e2 = math.expm1(-2.0 * delta * t)
    em = ep * (1.0 + e2)
    inv = 0.5 / delta
    s = -ep * e2 * inv
    if i == 0:
        row[0] = (ep * pplus + em * pminus) * inv
        row[1] = s * q01
    else:
        row[0] = s * q10
        row[1] = (ep * pminus + em * pplus) * inv


@njit(cache=True, inline="always")
def killed_row(G, abar, t, i, row, work):
    """Row ``i`` of the killed transition matrix, written into ``row``."""
    m = G.shape[0]
    if m == 2:
        killed2_row(G[0, 0] - abar[0], G[0, 1], G[1, 0], G[1, 1] - abar[1], t, i, row)
    else:
        P = killed_matrix(G, abar, t)
        for k in range(m):
            row[k] = P[i, k]


# ---------------------------------------------------------------------------
# rates for one particle
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def particle_rates(free, idx, coef, H, r, abar, alpha_r):
    """Total rate per regime and propensity of reaction ``r`` per regime."""
    qb, mb = idx.shape
    for i in range(mb):
        s = 0.0
        for q in range(qb):
            v = coef[q, i] * free[idx[q, i]] * H[q]
            s += v
            if q == r:
                alpha_r[i] = v
        abar[i] = s


# ---------------------------------------------------------------------------
# regime paths
# ---------------------------------------------------------------------------

@njit(cache=True, inline="always")
def propose_path(m0, G, gap, rng, occ, sw_t, sw_s):
    """Draw the chain on ``(0, gap]`` from ``m0``; occupation times go to ``occ``.

    Switches are written to ``sw_t``/``sw_s`` while they have room.
    Returns ``(end_regime, n_switches)``.
    """
    mb = G.shape[0]
    for k in range(mb):
        occ[k] = 0.0
    t = 0.0
    i = m0
    nsw = 0
    while True:
        rate = -G[i, i]
        if rate <= 0.0:
            occ[i] += gap - t
            return i, nsw
        e = rng.exponential() / rate
        if t + e >= gap:
            occ[i] += gap - t
            return i, nsw
        occ[i] += e
        t += e
        u = rng.random() * rate
        acc = 0.0
        j = i
        for k in range(mb):
            if k == i:
                continue
            acc += G[i, k]
            j = k
            if u < acc:
                break
        if nsw < sw_t.shape[0]:
            sw_t[nsw] = t
            sw_s[nsw] = j
        nsw += 1
        i = j


@njit(cache=True, inline="always")
def _sample_index(w, total, rng):
    u = rng.random() * total
    acc = 0.0
    last = 0
    for k in range(w.shape[0]):
        if w[k] > 0.0:
            last = k
            acc += w[k]
            if u < acc:
                return k
    return last


@njit(cache=True)
def bridge_path(m0, G, abar, alpha_r, gap, rng, occ, sw_t, sw_s):
    """Exact draw of the conditional regime path by uniformization.

    The endpoint is drawn from ``P[m0, e] * alpha_r[e]``, then the killed
    chain is bridged from ``m0`` to ``e`` with Poisson-thinned virtual jumps.
    """
    mb = G.shape[0]
    for k in range(mb):
        occ[k] = 0.0
    P = killed_matrix(G, abar, gap)
    we = np.empty(mb)
    tot = 0.0
    for e in range(mb):
        we[e] = P[m0, e] * alpha_r[e]
        tot += we[e]
    e = _sample_index(we, tot, rng)
    lam = 0.0
    for i in range(mb):
        lam = max(lam, abar[i] - G[i, i])
    if lam <= 0.0:
        occ[m0] = gap
        return m0, 0
    B = np.eye(mb)
    for i in range(mb):
        for j in range(mb):
            B[i, j] += (G[i, j] - (abar[i] if i == j else 0.0)) / lam
    mu = lam * gap
    nmax = int(mu + 40.0 * math.sqrt(mu) + 50.0)
    logterm = np.full(nmax + 1, -np.inf)
    v = np.zeros(mb)
    v[m0] = 1.0
    logscale = 0.0
    logp = -mu
    for n in range(nmax + 1):
        if n > 0:
            v = v @ B
            s = v.sum()
            if s <= 0.0:
                break
            v /= s
            logscale += math.log(s)
            logp += math.log(mu) - math.log(n)
        if v[e] > 0.0:
            logterm[n] = logp + logscale + math.log(v[e])
    mx = logterm.max()
    wn = np.exp(logterm - mx)
    n_jumps = _sample_index(wn, wn.sum(), rng)
    C = np.empty((n_jumps + 1, mb))
    for j in range(mb):
        C[0, j] = 1.0 if j == e else 0.0
    for rr in range(1, n_jumps + 1):
        col = B @ C[rr - 1]
        s = col.sum()
        C[rr] = col / s if s > 0.0 else col
    times = np.sort(rng.random(n_jumps) * gap)
    s_cur = m0
    t_prev = 0.0
    nsw = 0
    wj = np.empty(mb)
    for k in range(1, n_jumps + 1):
        tot = 0.0
        for j in range(mb):
            wj[j] = B[s_cur, j] * C[n_jumps - k, j]
            tot += wj[j]
        j = _sample_index(wj, tot, rng)
        tk = times[k - 1]
        occ[s_cur] += tk - t_prev
        t_prev = tk
        if j != s_cur:
            if nsw < sw_t.shape[0]:
                sw_t[nsw] = tk
                sw_s[nsw] = j
            nsw += 1
        s_cur = j
    occ[s_cur] += gap - t_prev
    return s_cur, nsw


@njit(cache=True, inline="always")
def rejection_path(m0, G, abar, alpha_r, gap, rng, cap, occ, sw_t, sw_s, counters):
    """Rejection draw of the regime path given the next event.

    Proposals come from the unconditional chain and are accepted with the
    ratio of the path likelihood to its bound
    ``exp(-gap * min abar) * max alpha_r``. Returns ``(-1, 0)`` if all
    ``cap`` proposals are rejected. ``counters`` accumulates
    (proposals, acceptances, fallbacks).
    """
    mb = G.shape[0]
    amin = abar[0]
    amax = alpha_r[0]
    for i in range(1, mb):
        amin = min(amin, abar[i])
        amax = max(amax, alpha_r[i])
    n = 0
    e = -1
    nsw = 0
    # a single exit keeps numba's inlined loop tight
    while n < cap:
        e, nsw = propose_path(m0, G, gap, rng, occ, sw_t, sw_s)
        n += 1
        ar = alpha_r[e]
        if ar > 0.0:
            # exponent is <= 0 because every regime's rate is >= amin
            x = gap * amin
            for i in range(mb):
                x -= occ[i] * abar[i]
            if rng.random() * amax < ar * math.exp(x):
                break
        e = -1
    counters[0] += n
    if e >= 0:
        counters[1] += 1
    return e, nsw


@njit(cache=True)
def conditional_path(m0, G, abar, alpha_r, gap, rng, cap, occ, sw_t, sw_s, counters):
    """Rejection draw with the exact bridge as fallback after ``cap`` proposals."""
    e, nsw = rejection_path(m0, G, abar, alpha_r, gap, rng, cap, occ, sw_t, sw_s, counters)
    if e < 0:
        counters[2] += 1
        return bridge_path(m0, G, abar, alpha_r, gap, rng, occ, sw_t, sw_s)
    return e, nsw


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

@njit(cache=True)
def _walk(w, u_sorted, out, start):
    """Inverse-CDF lookup of sorted uniforms; writes ancestors from ``start``."""
    J = w.shape[0]
    c = w[0]
    k = 0
    for n in range(u_sorted.shape[0]):
        while u_sorted[n] >= c and k < J - 1:
            k += 1
            c += w[k]
        out[start + n] = k


@njit(cache=True)
def _sorted_uniforms(n, rng):
    e = np.empty(n + 1)
    for k in range(n + 1):
        e[k] = rng.exponential()
    c = np.cumsum(e)
    return c[:n] / c[n]


@njit(cache=True)
def resample_indices(w, n_out, scheme, rng):
    """Ancestor indices; ``w`` must be normalized."""
    J = w.shape[0]
    out = np.empty(n_out, dtype=np.int64)
    if scheme == MULTINOMIAL:
        _walk(w, _sorted_uniforms(n_out, rng), out, 0)
    elif scheme == STRATIFIED or scheme == SYSTEMATIC:
        u = np.empty(n_out)
        u0 = rng.random()
        for k in range(n_out):
            u[k] = (k + (rng.random() if scheme == STRATIFIED and k > 0 else u0)) / n_out
        _walk(w, u, out, 0)
    else:
        nw = w * n_out
        counts = np.floor(nw)
        for k in range(J):
            # floating-point guard for J * (1/J) landing just below an integer
            if nw[k] - counts[k] > 1.0 - 1e-9:
                counts[k] += 1.0
        pos = 0
        for k in range(J):
            for _ in range(int(counts[k])):
                if pos < n_out:
                    out[pos] = k
                    pos += 1
        rest = n_out - pos
        if rest > 0:
            resid = np.maximum(nw - counts, 0.0)
            s = resid.sum()
            if s <= 0.0:
                resid = w.copy()
                s = resid.sum()
            _walk(resid / s, _sorted_uniforms(rest, rng), out, pos)
    return out


@njit(cache=True)
def normalize_logw(logw, w):
    """Normalized weights into ``w``; returns ESS, or -1.0 if every weight is log-zero."""
    mx = -np.inf
    for j in range(logw.shape[0]):
        if logw[j] > mx:
            mx = logw[j]
    if mx == -np.inf or math.isnan(mx):
        return -1.0
    s = 0.0
    for j in range(logw.shape[0]):
        w[j] = math.exp(logw[j] - mx) if not math.isnan(logw[j]) else 0.0
        s += w[j]
    s2 = 0.0
    for j in range(logw.shape[0]):
        w[j] /= s
        s2 += w[j] * w[j]
    return 1.0 / s2


@njit(cache=True)
def _select(logw, w, scheme, always, ess_frac, rng):
    """Resampling decision. Returns ancestors (identity if none) or None-like empty on collapse."""
    J = logw.shape[0]
    ess = normalize_logw(logw, w)
    if ess < 0.0:
        return np.empty(0, dtype=np.int64)
    if always or ess < ess_frac * J:
        anc = resample_indices(w, J, scheme, rng)
        logw[:] = 0.0
        return anc
    mx = logw.max()
    logw -= mx
    return np.arange(J)


# ---------------------------------------------------------------------------
# filter steps
# ---------------------------------------------------------------------------

@njit(cache=True)
def pl_step(m, a, b, logw, gap, r, H, G, idx, coef, rng, scheme, always, ess_frac, cap, counters):
    """Resample-move step of particle learning. Returns 0, or 1 on collapse."""
    J, P = a.shape
    mb = G.shape[0]
    qb = H.shape[0]
    abar = np.empty((J, mb))
    alr = np.empty((J, mb))
    theta = np.empty((J, P))
    ab_j = np.empty(mb)
    al_j = np.empty(mb)
    row = np.empty(mb)
    work = np.empty((2, 2))
    pw = np.empty(J)
    # draws first, then the RNG-free algebra so independent particles overlap
    for j in range(J):
        for p in range(P):
            theta[j, p] = rng.gamma(a[j, p], 1.0 / b[j, p])
    for j in range(J):
        pred = 0.0
        for i in range(mb):
            s = 0.0
            for q in range(qb):
                v = coef[q, i] * theta[j, idx[q, i]] * H[q]
                s += v
                if q == r:
                    al_j[i] = v
            ab_j[i] = s
        if mb == 2:
            killed2_row(G[0, 0] - ab_j[0], G[0, 1], G[1, 0], G[1, 1] - ab_j[1], gap, m[j], row)
        else:
            killed_row(G, ab_j, gap, m[j], row, work)
        for i in range(mb):
            pred += row[i] * al_j[i]
            abar[j, i] = ab_j[i]
            alr[j, i] = al_j[i]
        if always:
            pw[j] = pred
        else:
            logw[j] += math.log(pred) if pred > 0.0 else -np.inf
    w = np.empty(J)
    if always:
        tot = 0.0
        for j in range(J):
            tot += pw[j]
        if not tot > 0.0:
            return 1
        for j in range(J):
            w[j] = pw[j] / tot
        anc = resample_indices(w, J, scheme, rng)
        logw[:] = 0.0
    else:
        anc = _select(logw, w, scheme, always, ess_frac, rng)
        if anc.shape[0] == 0:
            return 1
    new_m = np.empty_like(m)
    new_a = np.empty_like(a)
    new_b = np.empty_like(b)
    occ = np.empty(mb)
    sw_t = np.empty(0)
    sw_s = np.empty(0, dtype=np.int64)
    n_prop = 0
    n_fall = 0
    for j in range(J):
        k = anc[j]
        for i in range(mb):
            ab_j[i] = abar[k, i]
            al_j[i] = alr[k, i]
        # rejection sampling written out here: helper calls with array
        # arguments cost atomic refcount traffic in this hot loop
        amin = ab_j[0]
        amax = al_j[0]
        for i in range(1, mb):
            amin = min(amin, ab_j[i])
            amax = max(amax, al_j[i])
        n = 0
        e = -1
        while n < cap:
            e, _ = propose_path(m[k], G, gap, rng, occ, sw_t, sw_s)
            n += 1
            if al_j[e] > 0.0:
                x = gap * amin
                for i in range(mb):
                    x -= occ[i] * ab_j[i]
                if rng.random() * amax < al_j[e] * math.exp(x):
                    break
            e = -1
        n_prop += n
        if e < 0:
            n_fall += 1
            e, _ = bridge_path(m[k], G, ab_j, al_j, gap, rng, occ, sw_t, sw_s)
        for p in range(P):
            new_a[j, p] = a[k, p]
            new_b[j, p] = b[k, p]
        new_a[j, idx[r, e]] += 1.0
        for q in range(qb):
            for i in range(mb):
                new_b[j, idx[q, i]] += coef[q, i] * H[q] * occ[i]
        new_m[j] = e
    counters[0] += n_prop
    counters[1] += J - n_fall
    counters[2] += n_fall
    m[:] = new_m
    a[:] = new_a
    b[:] = new_b
    return 0


@njit(cache=True)
def storvik_step(m, a, b, logw, gap, r, H, G, idx, coef, rng, scheme, always, ess_frac):
    """Propagate-resample step with parameters drawn from each particle's statistics."""
    J, P = a.shape
    mb = G.shape[0]
    qb = H.shape[0]
    theta = np.empty(P)
    abar = np.empty(mb)
    alr = np.empty(mb)
    occ = np.empty(mb)
    sw_t = np.empty(0)
    sw_s = np.empty(0, dtype=np.int64)
    for j in range(J):
        for p in range(P):
            theta[p] = rng.gamma(a[j, p], 1.0 / b[j, p])
        for i in range(mb):
            acc = 0.0
            for q in range(qb):
                v = coef[q, i] * theta[idx[q, i]] * H[q]
                acc += v
                if q == r:
                    alr[i] = v
            abar[i] = acc
        e, _ = propose_path(m[j], G, gap, rng, occ, sw_t, sw_s)
        ll = -np.inf
        if alr[e] > 0.0:
            ll = math.log(alr[e])
            for i in range(mb):
                ll -= occ[i] * abar[i]
        logw[j] += ll
        a[j, idx[r, e]] += 1.0
        for q in range(qb):
            for i in range(mb):
                b[j, idx[q, i]] += coef[q, i] * H[q] * occ[i]
        m[j] = e
    w = np.empty(J)
    anc = _select(logw, w, scheme, always, ess_frac, rng)
    if anc.shape[0] == 0:
        return 1
    m[:] = m[anc]
    a[:] = a[anc]
    b[:] = b[anc]
    return 0


@njit(cache=True)
def shrink_move(lt, logw, h, rng):
    """Liu-West kernel move on log-parameters: ``a*x + (1-a)*mean + h*L z``."""
    J, P = lt.shape
    w = np.empty(J)
    normalize_logw(logw, w)
    mean = np.zeros(P)
    for j in range(J):
        for p in range(P):
            mean[p] += w[j] * lt[j, p]
    cov = np.zeros((P, P))
    for j in range(J):
        for p in range(P):
            dp = lt[j, p] - mean[p]
            for s in range(p + 1):
                cov[p, s] += w[j] * dp * (lt[j, s] - mean[s])
    for p in range(P):
        for s in range(p):
            cov[s, p] = cov[p, s]
    scale = 0.0
    for p in range(P):
        scale = max(scale, cov[p, p])
    for p in range(P):
        cov[p, p] += 1e-14 * scale + 1e-300
    L = np.linalg.cholesky(cov)
    shrink = math.sqrt(1.0 - h * h)
    z = np.empty(P)
    for j in range(J):
        for p in range(P):
            z[p] = rng.standard_normal()
        for p in range(P):
            jit = 0.0
            for s in range(p + 1):
                jit += L[p, s] * z[s]
            lt[j, p] = shrink * lt[j, p] + (1.0 - shrink) * mean[p] + h * jit


@njit(cache=True)
def lw_step(m, lt, logw, gap, r, H, G, idx, coef, rng, scheme, always, ess_frac, h, move):
    """Bootstrap step over explicit log-parameter copies with an optional kernel move."""
    J, P = lt.shape
    mb = G.shape[0]
    qb = H.shape[0]
    if move:
        shrink_move(lt, logw, h, rng)
    theta = np.empty(P)
    abar = np.empty(mb)
    alr = np.empty(mb)
    occ = np.empty(mb)
    sw_t = np.empty(0)
    sw_s = np.empty(0, dtype=np.int64)
    for j in range(J):
        for p in range(P):
            theta[p] = math.exp(lt[j, p])
        for i in range(mb):
            acc = 0.0
            for q in range(qb):
                v = coef[q, i] * theta[idx[q, i]] * H[q]
                acc += v
                if q == r:
                    alr[i] = v
            abar[i] = acc
        e, _ = propose_path(m[j], G, gap, rng, occ, sw_t, sw_s)
        ll = -np.inf
        if alr[e] > 0.0:
            ll = math.log(alr[e])
            for i in range(mb):
                ll -= occ[i] * abar[i]
        logw[j] += ll
        m[j] = e
    w = np.empty(J)
    anc = _select(logw, w, scheme, always, ess_frac, rng)
    if anc.shape[0] == 0:
        return 1
    m[:] = m[anc]
    lt[:] = lt[anc]
    return 0


@njit(cache=True)
def regime_weights(m, logw, mb, out):
    J = m.shape[0]
    w = np.empty(J)
    normalize_logw(logw, w)
    for i in range(mb):
        out[i] = 0.0
    for j in range(J):
        out[m[j]] += w[j]


# ---------------------------------------------------------------------------
# whole-path drivers
# ---------------------------------------------------------------------------

@njit(cache=True, nogil=True)
def run_stats_filter(algo, m, a, b, logw, gaps, rs, H, G, idx, coef, rng, scheme, always,
                     ess_frac, cap, snap_at, snap_m, snap_a, snap_b, snap_logw, pi_out, counters):
    """Run PL (algo 0) or Storvik (algo 1) over all events. Returns -1 or the collapse index."""
    n = gaps.shape[0]
    mb = G.shape[1]
    si = 0
    for k in range(n + 1):
        while si < snap_at.shape[0] and snap_at[si] == k:
            snap_m[si] = m
            snap_a[si] = a
            snap_b[si] = b
            snap_logw[si] = logw
            si += 1
        if k == n:
            break
        if algo == 0:
            st = pl_step(m, a, b, logw, gaps[k], rs[k], H[k], G[k], idx, coef, rng, scheme, always, ess_frac, cap, counters)
        else:
            st = storvik_step(m, a, b, logw, gaps[k], rs[k], H[k], G[k], idx, coef, rng, scheme, always, ess_frac)
        if st != 0:
            return k
        regime_weights(m, logw, mb, pi_out[k])
    return -1


@njit(cache=True, nogil=True)
def run_lw_filter(m, lt, logw, gaps, rs, H, G, idx, coef, rng, scheme, always, ess_frac, h, move,
                  snap_at, snap_m, snap_lt, snap_logw, pi_out):
    n = gaps.shape[0]
    mb = G.shape[1]
    si = 0
    for k in range(n + 1):
        while si < snap_at.shape[0] and snap_at[si] == k:
            snap_m[si] = m
            snap_lt[si] = lt
            snap_logw[si] = logw
            si += 1
        if k == n:
            break
        st = lw_step(m, lt, logw, gaps[k], rs[k], H[k], G[k], idx, coef, rng, scheme, always, ess_frac, h, move)
        if st != 0:
            return k
        regime_weights(m, logw, mb, pi_out[k])
    return -1


@njit(cache=True)
def _drift(p, G, abar, dt):
    """p <- p P(dt) / |p P(dt)|, splitting long steps. Returns False on underflow."""
    mb = p.shape[0]
    amax = 0.0
    for i in range(mb):
        amax = max(amax, abar[i])
    n_sub = 1
    if amax > 0.0 and dt * amax > 5.0:
        n_sub = int(math.ceil(dt * amax / 5.0))
    h = dt / n_sub
    P = killed_matrix(G, abar, h)
    for _ in range(n_sub):
        q = p @ P
        s = q.sum()
        if not s > 1e-300:
            return False
        p[:] = q / s
    return True


@njit(cache=True)
def run_exact_filter(pi0, t0, ends, rs, H, G, theta, sample_times, out_t, out_pi, out_event):
    """Exact regime filter over intervals ending at ``ends``.

    Emits the posterior at each sample time and after each event jump.
    Returns the number of rows written, or -1 on an impossible event and
    -2 on survival underflow.
    """
    n = ends.shape[0]
    qb, mb = theta.shape
    p = pi0.copy()
    abar = np.empty(mb)
    t = t0
    si = 0
    row = 0
    while si < sample_times.shape[0] and sample_times[si] <= t0:
        out_t[row] = sample_times[si]
        out_pi[row] = p
        out_event[row] = False
        row += 1
        si += 1
    for k in range(n):
        for i in range(mb):
            s = 0.0
            for q in range(qb):
                s += theta[q, i] * H[k, q]
            abar[i] = s
        while si < sample_times.shape[0] and sample_times[si] < ends[k]:
            if not _drift(p, G[k], abar, sample_times[si] - t):
                return -2
            t = sample_times[si]
            out_t[row] = t
            out_pi[row] = p
            out_event[row] = False
            row += 1
            si += 1
        if not _drift(p, G[k], abar, ends[k] - t):
            return -2
        t = ends[k]
        r = rs[k]
        if r >= 0:
            s = 0.0
            for i in range(mb):
                p[i] *= theta[r, i] * H[k, r]
                s += p[i]
            if not s > 0.0:
                return -1
            p /= s
        while si < sample_times.shape[0] and sample_times[si] == t:
            si += 1
        out_t[row] = t
        out_pi[row] = p
        out_event[row] = r >= 0
        row += 1
    return row
