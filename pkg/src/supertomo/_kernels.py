"""Compiled per-ray incremental sweeps over CSR rows."""
import math

from numba import njit

EMISSION = 0
TRANSMISSION = 1


@njit(cache=True)
def ray_sweep(indptr, indices, data, rows, y, lam, inv_p, tau, floored, check,
              kind, a, beta, rho, eps):
    """Apply ``y <- y - lam D(y) grad f_i(y)`` for each ``i`` in ``rows``, in place.

    ``kind`` selects the per-ray term (emission data ``a = b``; transmission
    data ``a = alpha`` with ``beta``, ``rho``).  With ``floored`` the scaling
    entry is ``max(y_j, tau) / p_j``-style (``tau`` when ``y_j <= tau``).
    Returns the position in ``rows`` after which a touched component went
    negative (only when ``check`` is set and more rows follow), else -1.
    """
    n_steps = rows.shape[0]
    for k in range(n_steps):
        i = rows[k]
        start = indptr[i]
        stop = indptr[i + 1]
        s = 0.0
        for q in range(start, stop):
            s += data[q] * y[indices[q]]
        if kind == EMISSION:
            g = 1.0 - a[i] / max(s, eps)
        else:
            e = beta[i] * math.exp(-s)
            g = e * (a[i] / max(e + rho[i], eps) - 1.0)
        if g == 0.0:
            continue
        coef = lam * g
        for q in range(start, stop):
            j = indices[q]
            yj = y[j]
            if floored and yj <= tau:
                d = tau
            else:
                d = yj
            y[j] = yj - coef * d * inv_p[j] * data[q]
        if check and k < n_steps - 1:
            for q in range(start, stop):
                if y[indices[q]] < 0.0:
                    return k
    return -1
