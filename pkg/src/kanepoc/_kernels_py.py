"""Pure numpy implementation of the hot kernels.

Every routine here performs the same floating point operations, in the same
order, as the compiled ``_kernels`` extension, so both backends return
bit-identical arrays. Keep the two files in lockstep.
"""
import numpy as np


def find_spans(x, knots, degree, n_basis):
    """Knot span index for every point (right-closed at the last interval)."""
    span = np.searchsorted(knots, x, side="right") - 1
    np.clip(span, degree, n_basis - 1, out=span)
    return span.astype(np.intp, copy=False)


def basis_local(x, knots, degree, n_basis):
    """Nonzero B-spline values and first derivatives at each point.

    Returns ``(span, vals, ders)`` where ``vals[r, a]`` is the value of basis
    function ``span[r] - degree + a`` (0-based) at ``x[r]``.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    n = x.shape[0]
    p = degree
    span = find_spans(x, knots, p, n_basis)
    vals = np.zeros((n, p + 1))
    ders = np.zeros((n, p + 1))
    vals[:, 0] = 1.0
    left = np.empty((n, p + 1))
    right = np.empty((n, p + 1))
    low = None
    for j in range(1, p + 1):
        if j == p:
            low = vals[:, :p].copy()
        left[:, j] = x - knots[span + 1 - j]
        right[:, j] = knots[span + j] - x
        saved = np.zeros(n)
        for r in range(j):
            temp = vals[:, r] / (right[:, r + 1] + left[:, j - r])
            vals[:, r] = saved + right[:, r + 1] * temp
            saved = left[:, j - r] * temp
        vals[:, j] = saved
    if p > 0:
        for a in range(p + 1):
            d = np.zeros(n)
            if a >= 1:
                d = d + low[:, a - 1] / (knots[span + a] - knots[span - p + a])
            if a <= p - 1:
                d = d - low[:, a] / (knots[span + a + 1] - knots[span - p + a + 1])
            ders[:, a] = p * d
    return span, vals, ders


def layer_forward(span, vals, beta):
    """Pre-activations ``s[r, i] = sum_j sum_k beta[i, j, k] B_k(z[r, j])``.

    ``span`` and ``vals`` have shapes ``(n, n_in)`` and ``(n, n_in, p + 1)``.
    """
    n, n_in, q = vals.shape
    p = q - 1
    n_out = beta.shape[0]
    s = np.zeros((n, n_out))
    for i in range(n_out):
        acc = np.zeros(n)
        for j in range(n_in):
            base = span[:, j] - p
            for a in range(q):
                acc = acc + vals[:, j, a] * beta[i, j, base + a]
        s[:, i] = acc
    return s


def layer_backward(span, vals, ders, beta, ds):
    """Gradients of a layer given the upstream gradient ``ds`` (n, n_out).

    Returns ``(dbeta, dz)``: coefficient gradient summed over rows in row
    order, and the gradient with respect to the layer inputs.
    """
    n, n_in, q = vals.shape
    p = q - 1
    n_out, _, n_basis = beta.shape
    dbeta = np.zeros((n_out, n_in, n_basis))
    dz = np.zeros((n, n_in))
    if n == 0:
        return dbeta, dz
    # scatter in row-major (r, i, j, a) order so each cell accumulates rows in order
    contrib = ds[:, :, None, None] * vals[:, None, :, :]
    rows_i = np.broadcast_to(np.arange(n_out)[None, :, None, None], contrib.shape)
    rows_j = np.broadcast_to(np.arange(n_in)[None, None, :, None], contrib.shape)
    cols_k = np.broadcast_to(
        (span - p)[:, None, :, None] + np.arange(q)[None, None, None, :], contrib.shape
    )
    np.add.at(dbeta, (rows_i.ravel(), rows_j.ravel(), cols_k.ravel()), contrib.ravel())
    for j in range(n_in):
        base = span[:, j] - p
        acc = np.zeros(n)
        for i in range(n_out):
            t = np.zeros(n)
            for a in range(q):
                t = t + beta[i, j, base + a] * ders[:, j, a]
            acc = acc + ds[:, i] * t
        dz[:, j] = acc
    return dbeta, dz
