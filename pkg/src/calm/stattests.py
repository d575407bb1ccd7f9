"""Independence tests, direction estimators and pair attributes.

Every function takes a :class:`~calm.table.DataTable` and variable names.
Results do not depend on row order: whenever rows are subsampled,
jittered or split into folds, the rows are first put in a canonical
(lexicographic) order over the involved columns, taken in table order,
so swapping ``x`` and ``y`` sees the same rows too.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, special, stats
from scipy.spatial import cKDTree

ALPHA = 0.05
KERNEL_MAX_ROWS = 500
KCI_EPSILON = 1e-3
ANM_RIDGE = 1e-3
BIC_LAMBDAS = (0.1, 0.5, 1.0, 1.5)
CV_RIDGES = (0.01, 0.05, 0.1)
RSS_FLOOR = 1e-12
VAR_FLOOR = 1e-8


@dataclass
class CiResult:
    statistic: float
    p_value: float
    binary: int  # 1 = dependent at alpha
    flags: list = field(default_factory=list)

    @classmethod
    def make(cls, statistic, p_value, alpha=ALPHA, flags=None):
        p = float(min(1.0, max(0.0, p_value)))
        return cls(float(statistic), p, int(p < alpha), list(flags or []))


@dataclass
class DirectionScores:
    """Evidence for cause->effect (``forward``) versus effect->cause.

    ``polarity`` says which way is better: "lower" for BIC-type scores,
    "higher" for p-value scores such as ANM.
    """

    forward: float
    reverse: float
    binary: int
    polarity: str
    flags: list = field(default_factory=list)

    @classmethod
    def make(cls, forward, reverse, polarity, flags=None):
        better = forward < reverse if polarity == "lower" else forward > reverse
        return cls(float(forward), float(reverse), int(better), polarity, list(flags or []))


class InsufficientDataError(ValueError):
    pass


# row handling

def _rows(table, names, allow_missing=True):
    """Canonically ordered complete rows for ``names`` (columns in given order)."""
    cols = sorted(set(names), key=table.index)
    data = table.select(cols)
    ok = np.isfinite(data).all(axis=1)
    if not ok.all() and not allow_missing:
        raise ValueError("missing values present; pass allow_missing=True")
    data = data[ok]
    order = np.lexsort(data.T[::-1]) if len(data) else np.arange(0)
    data = data[order]
    pos = {c: i for i, c in enumerate(cols)}
    return data[:, [pos[n] for n in names]], [pos[n] for n in names], data


def _subsample(n, cap, seed):
    if n <= cap:
        return np.arange(n)
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=cap, replace=False))


def _pair_data(table, x, y, cond=(), cap=None, seed=0):
    names = [x, y, *cond]
    data, _, _ = _rows(table, names)
    if cap is not None:
        data = data[_subsample(len(data), cap, seed)]
    return data


def _zscore(a):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    sd = a.std(axis=0)
    sd[sd == 0] = 1.0
    return (a - a.mean(axis=0)) / sd


# Fisher-z

def fisher_z(table, x, y, cond=(), allow_missing=False, alpha=ALPHA):
    """Partial-correlation test. statistic = sqrt(n - |cond| - 3) * |atanh(r)|."""
    if x == y or x in cond or y in cond:
        raise ValueError("x, y and the conditioning set must be distinct")
    cond = list(cond)
    data, _, _ = _rows(table, [x, y, *cond], allow_missing=allow_missing)
    n = data.shape[0]
    dof = n - len(cond) - 3
    if dof < 1:
        raise InsufficientDataError(f"fisher_z needs n - |cond| - 3 >= 1 (n={n})")
    flags = []
    sd = data.std(axis=0)
    if (sd[:2] == 0).any():
        return CiResult.make(0.0, 1.0, alpha, ["zero_variance"])
    keep = [0, 1] + [i for i in range(2, data.shape[1]) if sd[i] > 0]
    corr = np.corrcoef(data[:, keep], rowvar=False)
    r = partial_corr(corr)
    if r is None:
        corr = corr + 1e-10 * np.eye(len(corr))
        r = partial_corr(corr)
        flags.append("ridge_regularized")
    r = float(np.clip(r, -1 + 1e-15, 1 - 1e-15))
    z = 0.5 * np.log1p(2 * r / (1 - r))
    stat = np.sqrt(dof) * abs(z)
    p = 2.0 * stats.norm.sf(stat)
    return CiResult.make(stat, p, alpha, flags)


def partial_corr(corr):
    """Partial correlation of the first two variables given the rest, or None if singular."""
    if corr.shape[0] == 2:
        return corr[0, 1]
    if np.linalg.cond(corr) > 1e12:
        return None
    prec = np.linalg.inv(corr)
    return -prec[0, 1] / np.sqrt(prec[0, 0] * prec[1, 1])


# kernels

def _sqdist(a):
    sq = (a * a).sum(axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * a @ a.T
    np.maximum(d, 0.0, out=d)
    np.fill_diagonal(d, 0.0)
    return d


def gaussian_gram(a):
    """Gaussian kernel with bandwidth = median pairwise distance."""
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    d2 = _sqdist(a)
    iu = np.triu_indices(len(a), 1)
    pos = d2[iu][d2[iu] > 0]
    if pos.size == 0:
        return np.ones_like(d2), 0.0
    sigma = float(np.sqrt(np.median(pos)))
    return np.exp(-d2 / (2.0 * sigma * sigma)), sigma


def _center(K):
    return K - K.mean(axis=0, keepdims=True) - K.mean(axis=1, keepdims=True) + K.mean()


def _hsic_gamma(K, L):
    """(biased HSIC, gamma p-value) for precomputed Gram matrices."""
    n = K.shape[0]
    Kc, Lc = _center(K), _center(L)
    stat = float((Kc * Lc).sum()) / (n * n)
    test = stat * n
    var = (Kc * Lc / 6.0) ** 2
    var = (var.sum() - np.trace(var)) / n / (n - 1)
    var = var * 72.0 * (n - 4) * (n - 5) / n / (n - 1) / (n - 2) / (n - 3)
    mu_x = (K.sum() - np.trace(K)) / n / (n - 1)
    mu_y = (L.sum() - np.trace(L)) / n / (n - 1)
    mean = (1.0 + mu_x * mu_y - mu_x - mu_y) / n
    if var <= 0 or mean <= 0:
        return stat, 1.0
    shape = mean * mean / var
    scale = var * n / mean
    return stat, float(stats.gamma.sf(test, shape, scale=scale))


def hsic_arrays(a, b, n_permutations=0, seed=0):
    """HSIC on raw samples; returns (statistic, p_value, flags)."""
    if np.std(a) == 0 or np.std(b) == 0:
        return 0.0, 1.0, ["zero_variance"]
    K, _ = gaussian_gram(a)
    L, _ = gaussian_gram(b)
    stat, p = _hsic_gamma(K, L)
    if n_permutations > 0:
        n = K.shape[0]
        Kc = _center(K)
        rng = np.random.default_rng(seed)
        hits = 0
        for _ in range(n_permutations):
            perm = rng.permutation(n)
            Lp = _center(L[np.ix_(perm, perm)])
            if (Kc * Lp).sum() / (n * n) >= stat:
                hits += 1
        p = (hits + 1) / (n_permutations + 1)
        return stat, p, ["permutation"]
    return stat, p, []


def hsic(table, x, y, n_permutations=0, alpha=ALPHA, seed=0, max_rows=KERNEL_MAX_ROWS):
    """Biased HSIC, trace(KHLH)/n^2, with a gamma (or permutation) p-value.

    Rows beyond ``max_rows`` are subsampled (seeded).
    """
    data = _pair_data(table, x, y, cap=max_rows, seed=seed)
    if len(data) < 20:
        raise InsufficientDataError("hsic needs at least 20 rows")
    stat, p, flags = hsic_arrays(data[:, 0], data[:, 1], n_permutations, seed)
    if len(data) < table.n_rows:
        flags = flags + [f"subsampled:{len(data)}"]
    return CiResult.make(stat, p, alpha, flags)


def _top_eig(K, thresh=1e-5, max_count=None):
    w, v = np.linalg.eigh(0.5 * (K + K.T))
    order = np.argsort(w)[::-1]
    w, v = w[order], v[:, order]
    keep = w > w[0] * thresh if w[0] > 0 else np.zeros_like(w, bool)
    if max_count is not None:
        keep[max_count:] = False
    return w[keep], v[:, keep]


def kci_arrays(a, b, c=None, epsilon=KCI_EPSILON):
    """KCI statistic tr(Kx~ Ky~)/n and gamma-approximated p-value."""
    a, b = _zscore(a), _zscore(b)
    n = a.shape[0]
    if c is None or c.size == 0:
        Kx = _center(gaussian_gram(a)[0])
        Ky = _center(gaussian_gram(b)[0])
        stat = float((Kx * Ky).sum()) / n
        mean = np.trace(Kx) * np.trace(Ky) / n / n
        var = 2.0 * (Kx ** 2).sum() * (Ky ** 2).sum() / n ** 4
    else:
        c = _zscore(c)
        Kx = _center(gaussian_gram(np.hstack([a, c]))[0])
        Ky = _center(gaussian_gram(b)[0])
        Kz = _center(gaussian_gram(c)[0])
        R = epsilon * np.linalg.inv(Kz + epsilon * np.eye(n))
        KxR = R @ Kx @ R
        KyR = R @ Ky @ R
        stat = float((KxR * KyR).sum()) / n
        wx, vx = _top_eig(KxR, max_count=n // 2)
        wy, vy = _top_eig(KyR, max_count=n // 2)
        if wx.size == 0 or wy.size == 0:
            return stat, 1.0
        fx = vx * np.sqrt(wx)
        fy = vy * np.sqrt(wy)
        uu = (fx[:, :, None] * fy[:, None, :]).reshape(n, -1)
        prod = uu.T @ uu if uu.shape[1] < n else uu @ uu.T
        mean = np.trace(prod) / n
        var = 2.0 * np.trace(prod @ prod) / n / n
    if var <= 0 or mean <= 0:
        return stat, 1.0
    return stat, float(stats.gamma.sf(stat, mean * mean / var, scale=var / mean))


def kci(table, x, y, cond=(), alpha=ALPHA, seed=0, max_rows=KERNEL_MAX_ROWS):
    """Kernel conditional independence test.

    Conditioning uses kernel ridge residualization of the centered Gram
    matrices, R = eps * (Kz + eps I)^-1, with eps = 1e-3.
    """
    cond = list(cond)
    data = _pair_data(table, x, y, cond, cap=max_rows, seed=seed)
    if len(data) < 20:
        raise InsufficientDataError("kci needs at least 20 rows")
    a, b = data[:, 0], data[:, 1]
    if np.std(a) == 0 or np.std(b) == 0:
        return CiResult.make(0.0, 1.0, alpha, ["zero_variance"])
    c = data[:, 2:] if cond else None
    if c is not None:
        c = c[:, c.std(axis=0) > 0]
    stat, p = kci_arrays(a, b, c)
    return CiResult.make(stat, p, alpha)


# mutual information

def _chebyshev_counts(points, radii, strict):
    tree = cKDTree(points)
    r = np.nextafter(radii, 0) if strict else radii
    return tree.query_ball_point(points, r, p=np.inf, return_length=True) - 1


def _jitter(data, seed, scale=1e-10):
    rng = np.random.default_rng(seed)
    return data + scale * rng.standard_normal(data.shape)


def _mi_data(table, names, k, seed):
    data, _, _ = _rows(table, names)
    if len(data) <= k:
        raise InsufficientDataError("not enough rows for the neighbor count")
    discrete = any(table.is_discrete(n) for n in names)
    if not discrete:
        # jitter in canonical column order so swapping names is exact
        canon = sorted(set(names), key=table.index)
        pos = [canon.index(n) for n in names]
        full = np.empty((len(data), len(canon)))
        for i, p in enumerate(pos):
            full[:, p] = data[:, i]
        full = _jitter(full, seed)
        data = full[:, pos]
    return data, discrete


def _ksg(data, k):
    """Kraskov estimator 1 for two scalar columns (nats)."""
    n = len(data)
    tree = cKDTree(data)
    eps = tree.query(data, k=k + 1, p=np.inf)[0][:, k]
    nx = _counts_1d(data[:, 0], eps)
    ny = _counts_1d(data[:, 1], eps)
    return float(special.digamma(k) + special.digamma(n)
                 - np.mean(special.digamma(nx + 1) + special.digamma(ny + 1)))


def _counts_1d(v, eps):
    """#{j != i : |v_j - v_i| < eps_i} via binary search."""
    s = np.sort(v)
    lo = np.searchsorted(s, v - eps, side="right")
    hi = np.searchsorted(s, v + eps, side="left")
    return hi - lo - 1


def _mixed_mi(data, k):
    """kNN MI tolerant of discrete values: ties at distance 0 are counted."""
    n = len(data)
    tree = cKDTree(data)
    rho = tree.query(data, k=k + 1, p=np.inf)[0][:, k]
    kk = np.full(n, float(k))
    zero = rho == 0
    if zero.any():
        kk[zero] = tree.query_ball_point(data[zero], 0.0, p=np.inf, return_length=True) - 1
    nx = _chebyshev_counts(data[:, :1], rho, strict=False)
    ny = _chebyshev_counts(data[:, 1:2], rho, strict=False)
    return float(np.mean(special.digamma(kk) + np.log(n) - np.log(nx + 1) - np.log(ny + 1)))


def kraskov_mi(table, x, y, k_neighbors=3, seed=0):
    """Mutual information in nats, clamped at 0.

    Continuous pairs use the Kraskov (algorithm 1) estimator with Chebyshev
    distances; pairs with a discrete member use a tie-aware kNN estimator.
    """
    data, discrete = _mi_data(table, [x, y], k_neighbors, seed)
    raw = _mixed_mi(data, k_neighbors) if discrete else _ksg(data, k_neighbors)
    return max(0.0, raw)


def conditional_mi(table, x, y, cond=(), k_neighbors=3, seed=0):
    """kNN conditional mutual information (Frenzel-Pompe); may be negative."""
    cond = list(cond)
    if not cond:
        return kraskov_mi(table, x, y, k_neighbors, seed)
    data, discrete = _mi_data(table, [x, y, *cond], k_neighbors, seed)
    k = k_neighbors
    n = len(data)
    tree = cKDTree(data)
    rho = tree.query(data, k=k + 1, p=np.inf)[0][:, k]
    strict = not discrete
    xz = data[:, [0] + list(range(2, data.shape[1]))]
    yz = data[:, 1:]
    zz = data[:, 2:]
    kk = np.full(n, float(k))
    if discrete:
        zero = rho == 0
        if zero.any():
            kk[zero] = tree.query_ball_point(data[zero], 0.0, p=np.inf, return_length=True) - 1
    nxz = _chebyshev_counts(xz, rho, strict)
    nyz = _chebyshev_counts(yz, rho, strict)
    nz = _chebyshev_counts(zz, rho, strict)
    return float(np.mean(special.digamma(kk) - special.digamma(nxz + 1)
                         - special.digamma(nyz + 1) + special.digamma(nz + 1)))


# direction estimators

def kernel_ridge_fit(a, b, ridge=ANM_RIDGE):
    """Fitted values of b ~ f(a) by Gaussian-kernel ridge regression.

    Solves (K + ridge * n * I) alpha = b - mean(b).
    """
    K, _ = gaussian_gram(a)
    n = len(b)
    mu = b.mean()
    coef = np.linalg.solve(K + ridge * n * np.eye(n), b - mu)
    return K @ coef + mu


def anm_direction(table, x, y, seed=0, max_rows=KERNEL_MAX_ROWS, ridge=ANM_RIDGE):
    """Additive-noise direction test; scores are residual-independence p-values.

    forward: HSIC p of (y - f(x), x); reverse: HSIC p of (x - g(y), y).
    binary = 1 when forward p > reverse p.
    """
    if table.is_discrete(x) or table.is_discrete(y):
        raise ValueError("anm_direction needs continuous variables")
    data = _pair_data(table, x, y, cap=max_rows, seed=seed)
    if len(data) < 20:
        raise InsufficientDataError("anm needs at least 20 rows")
    a, b = data[:, 0], data[:, 1]
    if np.std(a) == 0 or np.std(b) == 0:
        return DirectionScores.make(1.0, 1.0, "higher", ["zero_variance"])
    a = _zscore(a)[:, 0]
    b = _zscore(b)[:, 0]
    res_f = b - kernel_ridge_fit(a, b, ridge)
    res_r = a - kernel_ridge_fit(b, a, ridge)
    _, p_f, _ = hsic_arrays(res_f, a)
    _, p_r, _ = hsic_arrays(res_r, b)
    return DirectionScores.make(p_f, p_r, "higher")


def _embed(col, discrete, card):
    """Continuous -> column; discrete -> one-hot without the first category."""
    if not discrete:
        return col[:, None]
    codes = col.astype(int)
    k = max(card, int(codes.max()) + 1)
    return np.eye(k)[codes][:, 1:]


def _gaussian_score(child, design, lam, flags):
    """n*ln det(residual covariance) + lam * k * ln(n); k = child_dim * design_cols."""
    n = child.shape[0]
    coef, *_ = np.linalg.lstsq(design, child, rcond=None)
    resid = child - design @ coef
    if child.shape[1] == 1:
        rss_n = float(resid[:, 0] @ resid[:, 0]) / n
        if rss_n <= RSS_FLOOR:
            rss_n = RSS_FLOOR
            flags.append("rss_zero")
        fit = n * np.log(rss_n)
    else:
        cov = resid.T @ resid / n
        sign, logdet = np.linalg.slogdet(cov)
        if sign <= 0 or logdet < child.shape[1] * np.log(RSS_FLOOR):
            logdet = child.shape[1] * np.log(RSS_FLOOR)
            flags.append("rss_zero")
        fit = n * logdet
    k = child.shape[1] * design.shape[1]
    return float(fit + lam * k * np.log(n))


def _multinomial_deviance(codes, design, k_classes):
    """-2 * max log-likelihood of a multinomial logit (first class reference)."""
    n, p = design.shape
    onehot = np.eye(k_classes)[codes]

    def nll(w):
        W = np.hstack([np.zeros((p, 1)), w.reshape(p, k_classes - 1)])
        eta = design @ W
        lse = special.logsumexp(eta, axis=1)
        probs = np.exp(eta - lse[:, None])
        val = float(lse.sum() - (onehot * eta).sum())
        grad = design.T @ (probs - onehot)
        return val, grad[:, 1:].ravel()

    res = optimize.minimize(nll, np.zeros(p * (k_classes - 1)), jac=True, method="L-BFGS-B",
                            options={"maxiter": 500})
    return 2.0 * float(res.fun)


def _conditional_bic(table, child, parent, lam, data, flags, gaussian_discrete=False):
    ci, pi = child, parent
    c_disc, p_disc = table.is_discrete(ci), table.is_discrete(pi)
    n = len(data)
    design = np.hstack([np.ones((n, 1)), _embed(data[:, 1], p_disc, table.cardinality(pi))])
    if c_disc and not gaussian_discrete:
        codes = data[:, 0].astype(int)
        k = max(table.cardinality(ci), int(codes.max()) + 1)
        dev = _multinomial_deviance(codes, design, k)
        return dev + lam * (k - 1) * design.shape[1] * np.log(n)
    child_m = _embed(data[:, 0], c_disc, table.cardinality(ci))
    return _gaussian_score(child_m, design, lam, flags)


def bic_direction(table, x, y, lam=1.0):
    """BIC_lam(child | parent) = n ln(RSS/n) + lam * k * ln(n), lower is better.

    forward scores y | x, reverse scores x | y. A discrete child uses the
    multinomial-logit deviance in place of n ln(RSS/n).
    """
    data, _, _ = _rows(table, [x, y])
    flags = []
    fwd = _conditional_bic(table, y, x, lam, data[:, [1, 0]], flags)
    rev = _conditional_bic(table, x, y, lam, data, flags)
    return DirectionScores.make(fwd, rev, "lower", sorted(set(flags)))


def bic_value(n, rss_over_n, k, lam):
    """Closed-form BIC for a Gaussian fit."""
    return n * np.log(rss_over_n) + lam * k * np.log(n)


def dg_score(table, x, y, lam=1.0):
    """Degenerate-Gaussian BIC: discrete variables enter as one-hot (minus one) blocks."""
    data, _, _ = _rows(table, [x, y])
    flags = []
    fwd = _conditional_bic(table, y, x, lam, data[:, [1, 0]], flags, gaussian_discrete=True)
    rev = _conditional_bic(table, x, y, lam, data, flags, gaussian_discrete=True)
    return DirectionScores.make(fwd, rev, "lower", sorted(set(flags)))


def neg_cv_loglik(table, x, y, ridge=0.01, folds=5, seed=0):
    """Mean held-out Gaussian negative log-likelihood of y ~ ridge(x), per point.

    The ridge penalty is ridge * n_train * ||slope||^2; the noise variance
    is the training-fold residual variance floored at 1e-8.
    """
    data, _, _ = _rows(table, [x, y])
    n = len(data)
    if n < 2 * folds:
        raise InsufficientDataError(f"neg_cv_loglik needs at least {2 * folds} rows")
    X = _embed(data[:, 0], table.is_discrete(x), table.cardinality(x))
    yv = data[:, 1]
    rng = np.random.default_rng(seed)
    fold_of = np.empty(n, dtype=int)
    fold_of[rng.permutation(n)] = np.arange(n) % folds
    total = 0.0
    for f in range(folds):
        tr, te = fold_of != f, fold_of == f
        Xt, yt = X[tr], yv[tr]
        xm, ym = Xt.mean(axis=0), yt.mean()
        Xc = Xt - xm
        beta = np.linalg.solve(Xc.T @ Xc + ridge * len(yt) * np.eye(X.shape[1]), Xc.T @ (yt - ym))
        resid_tr = yt - ym - Xc @ beta
        var = max(float(np.mean(resid_tr ** 2)), VAR_FLOOR)
        resid = yv[te] - ym - (X[te] - xm) @ beta
        total += float(np.sum(0.5 * np.log(2 * np.pi * var) + resid ** 2 / (2 * var)))
    return total / n


def reset_test(table, x, y, augmentation="fitted", test="F", power=3):
    """RESET-style linearity test of y ~ x; returns (statistic, p_value, flags).

    augmentation: "fitted" (powers of fitted values), "exog" (powers of x),
    "princomp" (powers of the first principal component of the standardized
    regressors). test: "F" or "chi2" (Wald, q * F).
    """
    if augmentation not in ("fitted", "exog", "princomp"):
        raise ValueError(f"unknown augmentation {augmentation!r}")
    if test not in ("F", "chi2"):
        raise ValueError(f"unknown test {test!r}")
    data, _, _ = _rows(table, [x, y])
    n = len(data)
    if n < 20:
        raise InsufficientDataError("reset test needs at least 20 rows")
    xv, yv = data[:, 0], data[:, 1]
    base = np.column_stack([np.ones(n), xv])
    coef, *_ = np.linalg.lstsq(base, yv, rcond=None)
    fitted = base @ coef
    rss_r = float(np.sum((yv - fitted) ** 2))
    if augmentation == "fitted":
        src = fitted
    elif augmentation == "exog":
        src = xv
    else:
        sd = xv.std()
        src = (xv - xv.mean()) / sd if sd > 0 else xv - xv.mean()
    aug = np.column_stack([base] + [src ** p for p in range(2, power + 1)])
    q = aug.shape[1] - base.shape[1]
    if np.linalg.matrix_rank(aug) < aug.shape[1] or rss_r == 0:
        return 0.0, 1.0, ["rank_deficient"]
    coef_u, *_ = np.linalg.lstsq(aug, yv, rcond=None)
    rss_u = float(np.sum((yv - aug @ coef_u) ** 2))
    df = n - aug.shape[1]
    if rss_u <= 0:
        return 0.0, 1.0, ["rank_deficient"]
    F = ((rss_r - rss_u) / q) / (rss_u / df)
    F = max(F, 0.0)
    if test == "F":
        return float(F), float(stats.f.sf(F, q, df)), []
    chi = q * F
    return float(chi), float(stats.chi2.sf(chi, q)), []


def reset_linearity(table, x, y, augmentation="fitted", test="F"):
    """p-value of :func:`reset_test`."""
    return reset_test(table, x, y, augmentation, test)[1]


def variable_attributes(table, x, y):
    return int(table.is_discrete(x)), int(table.is_discrete(y))
