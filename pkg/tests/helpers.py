"""Shared test oracles: scalar-loop references and finite-difference checks.

These are written independently of the library kernels on purpose.  The
convolution and pooling references iterate one output element at a time with
plain python loops; the gradient check runs the same computation graph in
float64 and differentiates it numerically with central differences.
"""

import numpy as np

from streamst import autodiff as ad


def conv2d_loop(x, k, bias=None, stride=1, padding="same"):
    """Scalar-loop 2-d convolution oracle over (C_in, H, W)."""
    c_in, h, w = x.shape
    c_out, _, kh, kw = k.shape
    if padding == "same":
        ph, pw = (kh - 1) // 2, (kw - 1) // 2
    else:
        ph = pw = 0
    xp = np.zeros((c_in, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
    xp[:, ph:ph + h, pw:pw + w] = x
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (w + 2 * pw - kw) // stride + 1
    y = np.zeros((c_out, ho, wo), dtype=x.dtype)
    for co in range(c_out):
        for oi in range(ho):
            for oj in range(wo):
                acc = x.dtype.type(0) if bias is None else bias[co]
                for ci in range(c_in):
                    for i in range(kh):
                        for j in range(kw):
                            acc = acc + xp[ci, oi * stride + i, oj * stride + j] * k[co, ci, i, j]
                y[co, oi, oj] = acc
    return y


def maxpool2d_loop(x, pool=2):
    """Scalar-loop max pooling oracle; first maximum in row-major order wins."""
    c, h, w = x.shape
    ho, wo = h // pool, w // pool
    y = np.zeros((c, ho, wo), dtype=x.dtype)
    for ci in range(c):
        for oi in range(ho):
            for oj in range(wo):
                best = x[ci, oi * pool, oj * pool]
                for i in range(pool):
                    for j in range(pool):
                        v = x[ci, oi * pool + i, oj * pool + j]
                        if v > best:
                            best = v
                y[ci, oi, oj] = best
    return y


def matmul_loop(a, b):
    """Triple-loop matrix product oracle."""
    m, k = a.shape
    _, n = b.shape
    y = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = a.dtype.type(0)
            for p in range(k):
                acc = acc + a[i, p] * b[p, j]
            y[i, j] = acc
    return y


def fd_gradcheck(build, arrays, h=1e-3, rtol=1e-3, atol=1e-5, analytic_floor=1e-4):
    """Check analytic gradients of a scalar-valued graph against central
    differences.

    build(tensors) must construct the graph from a list of Tensors and return
    the scalar loss Tensor.  Analytic gradients come from running build on
    float32 tensors under a tape; the numeric reference evaluates the same
    build in float64 at x +/- h per coordinate.  Where the analytic gradient
    magnitude is below analytic_floor the comparison is absolute, elsewhere
    relative.  Returns the worst offending (index, analytic, numeric) triple
    or None when every coordinate passes.
    """
    tensors = [ad.Tensor(a, requires_grad=True) for a in arrays]
    with ad.Tape() as tape:
        loss = build(tensors)
    ad.backward(tape, loss)
    grads = [t.grad.copy() if t.grad is not None else np.zeros_like(t.data) for t in tensors]

    def loss64(arrs):
        ts = [ad.Tensor(a, dtype=np.float64) for a in arrs]
        return float(build(ts).data)

    base = [np.asarray(a, dtype=np.float64) for a in arrays]
    worst = None
    for ti, arr in enumerate(base):
        flat = arr.reshape(-1)
        gflat = grads[ti].reshape(-1)
        for i in range(flat.size):
            keep = flat[i]
            flat[i] = keep + h
            up = loss64(base)
            flat[i] = keep - h
            down = loss64(base)
            flat[i] = keep
            num = (up - down) / (2 * h)
            ana = float(gflat[i])
            if abs(ana) < analytic_floor:
                ok = abs(ana - num) <= atol
            else:
                ok = abs(ana - num) <= rtol * max(abs(ana), abs(num))
            if not ok:
                worst = ((ti, i), ana, num)
                return worst
    return worst
