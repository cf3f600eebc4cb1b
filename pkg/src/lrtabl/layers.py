"""Bilinear layers with optional temporal attention and low-rank weights.

Four kinds share one forward/backward implementation:

* ``BL``      ``Y = phi(W1 X W2 + B)``
* ``TABL``    bilinear layer with a softmax attention mask mixed in by ``lam``
* ``LRBL``    ``BL`` with ``W1 = L1 R1`` and ``W2 = L2 R2``
* ``LRTABL``  ``TABL`` with ``W1``, ``W2`` and the attention matrix ``W = L R``
  all kept in factored form

Parameters live in plain dicts keyed by ``W1, W2, W, B, L1, R1, L2, R2, L, R,
lam`` (``lam`` is a 0-d array so optimizers can treat every entry alike).
"""

import enum
from dataclasses import asdict, dataclass, replace

import numpy as np

from .tensor_core import (
    ShapeError,
    activation_grad,
    apply_elementwise,
    check_finite,
    hadamard,
    matmul,
    row_softmax,
    transpose,
)


class LayerKind(str, enum.Enum):
    BL = "BL"
    TABL = "TABL"
    LRBL = "LRBL"
    LRTABL = "LRTABL"


@dataclass(frozen=True)
class LayerSpec:
    kind: LayerKind
    d_in: int
    t_in: int
    d_out: int
    t_out: int
    rank: int | None = None
    activation: str = "identity"
    enforce_diag: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        for name in ("d_in", "t_in", "d_out", "t_out"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.lowrank:
            if self.rank is None or self.rank < 1:
                raise ValueError(f"{self.kind.value} layer needs rank >= 1, got {self.rank}")
        elif self.rank is not None:
            raise ValueError(f"{self.kind.value} layer takes no rank")
        if self.activation not in ("identity", "relu"):
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def lowrank(self):
        return self.kind in (LayerKind.LRBL, LayerKind.LRTABL)

    @property
    def attention(self):
        return self.kind in (LayerKind.TABL, LayerKind.LRTABL)

    @property
    def ranks(self):
        """Effective rank of each factored matrix (empty for full kinds)."""
        if not self.lowrank:
            return {}
        out = {
            "W1": effective_rank(self.rank, self.d_out, self.d_in),
            "W2": effective_rank(self.rank, self.t_in, self.t_out),
        }
        if self.attention:
            out["W"] = effective_rank(self.rank, self.t_in, self.t_in)
        return out

    def to_dict(self):
        d = asdict(self)
        d["kind"] = self.kind.value
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def lowrank_counterpart(spec, rank):
    kind = {LayerKind.BL: LayerKind.LRBL, LayerKind.TABL: LayerKind.LRTABL}.get(spec.kind, spec.kind)
    return replace(spec, kind=kind, rank=rank)


def effective_rank(requested_k, rows, cols):
    # The published parameter totals are only reproduced with this per-matrix cap.
    return min(requested_k, rows, cols)


def param_shapes(spec):
    d, t, dp, tp = spec.d_in, spec.t_in, spec.d_out, spec.t_out
    shapes = {}
    if spec.lowrank:
        r = spec.ranks
        shapes["L1"] = (dp, r["W1"])
        shapes["R1"] = (r["W1"], d)
        shapes["L2"] = (t, r["W2"])
        shapes["R2"] = (r["W2"], tp)
        if spec.attention:
            shapes["L"] = (t, r["W"])
            shapes["R"] = (r["W"], t)
    else:
        shapes["W1"] = (dp, d)
        shapes["W2"] = (t, tp)
        if spec.attention:
            shapes["W"] = (t, t)
    shapes["B"] = (dp, tp)
    if spec.attention:
        shapes["lam"] = ()
    return shapes


def _glorot(rng, shape, dtype):
    s = np.sqrt(6.0 / (shape[0] + shape[1]))
    return rng.uniform(-s, s, size=shape).astype(dtype)


def init_params(spec, seed, dtype=np.float32):
    """Deterministic initial parameters for ``spec``.

    ``seed`` may be an int or a ``numpy.random.SeedSequence``.
    """
    rng = np.random.default_rng(seed)
    shapes = param_shapes(spec)
    t = spec.t_in
    params = {}
    for name in ("W1", "L1", "R1", "W2", "L2", "R2"):
        if name in shapes:
            params[name] = _glorot(rng, shapes[name], dtype)
    if "W" in shapes:
        params["W"] = np.full((t, t), 1.0 / t, dtype=dtype)
    if "L" in shapes:
        # positive factors whose product averages 1/T per entry
        kw = shapes["L"][1]
        s = np.sqrt(1.0 / (t * kw))
        params["L"] = rng.uniform(0.0, 2 * s, size=shapes["L"]).astype(dtype)
        params["R"] = rng.uniform(0.0, 2 * s, size=shapes["R"]).astype(dtype)
    params["B"] = np.zeros(shapes["B"], dtype=dtype)
    if spec.attention:
        params["lam"] = np.asarray(0.5, dtype=dtype)
    return params


def diag_correction(L, R, t):
    """Per-column amount that moves diag(L R) onto 1/T."""
    return 1.0 / t - np.einsum("jk,kj->j", L, R)


def attention_matrix(spec, params):
    """Materialized T x T attention weights actually used by the layer."""
    if spec.kind is LayerKind.TABL:
        return params["W"].copy()
    if spec.kind is not LayerKind.LRTABL:
        raise ValueError(f"{spec.kind.value} layer has no attention matrix")
    m = materialize_lowrank(params["L"], params["R"])
    if spec.enforce_diag:
        idx = np.arange(spec.t_in)
        m[idx, idx] += diag_correction(params["L"], params["R"], spec.t_in)
    return m


def forward(spec, params, x):
    x = np.asarray(x)
    if x.ndim < 2 or x.shape[-2:] != (spec.d_in, spec.t_in):
        raise ShapeError(f"layer expects input (..., {spec.d_in}, {spec.t_in}), got {x.shape}")
    check_finite(x, "layer input")

    cache = {"spec": spec, "x": x}
    if spec.lowrank:
        cache["r1x"] = matmul(params["R1"], x)
        xbar = matmul(params["L1"], cache["r1x"])
    else:
        xbar = matmul(params["W1"], x)
    cache["xbar"] = xbar

    if spec.attention:
        if spec.lowrank:
            cache["xl"] = matmul(xbar, params["L"])
            e = matmul(cache["xl"], params["R"])
            if spec.enforce_diag:
                e = e + xbar * diag_correction(params["L"], params["R"], spec.t_in)
        else:
            e = matmul(xbar, params["W"])
        a = row_softmax(e)
        lam = params["lam"]
        xt = lam * hadamard(xbar, a) + (1 - lam) * xbar
        cache["e"] = e
        cache["a"] = a
    else:
        xt = xbar
    cache["xt"] = xt

    if spec.lowrank:
        cache["s"] = matmul(xt, params["L2"])
        z = matmul(cache["s"], params["R2"]) + params["B"]
    else:
        z = matmul(xt, params["W2"]) + params["B"]
    cache["z"] = z
    return apply_elementwise(z, spec.activation), cache


def _sum_batch(g):
    if g.ndim == 2:
        return g
    return g.reshape((-1,) + g.shape[-2:]).sum(axis=0)


def backward(spec, params, cache, dy):
    """Reverse pass of :func:`forward`; returns ``(dx, grads)``.

    Parameter gradients are summed over any leading batch axes. The frozen
    diagonal of a full TABL attention matrix gets a zero gradient.
    """
    if not cache or cache.get("spec") != spec or "z" not in cache:
        raise ValueError("backward needs the cache of a forward pass with the same layer spec")
    dy = np.asarray(dy)
    if dy.shape != cache["z"].shape:
        raise ShapeError(f"upstream gradient shape {dy.shape} does not match output {cache['z'].shape}")

    x, xbar, xt = cache["x"], cache["xbar"], cache["xt"]
    grads = {}
    dz = activation_grad(cache["z"], spec.activation, dy)
    grads["B"] = _sum_batch(dz)

    if spec.lowrank:
        grads["R2"] = _sum_batch(matmul(transpose(cache["s"]), dz))
        ds = matmul(dz, transpose(params["R2"]))
        grads["L2"] = _sum_batch(matmul(transpose(xt), ds))
        dxt = matmul(ds, transpose(params["L2"]))
    else:
        grads["W2"] = _sum_batch(matmul(transpose(xt), dz))
        dxt = matmul(dz, transpose(params["W2"]))

    if spec.attention:
        a, lam = cache["a"], params["lam"]
        grads["lam"] = np.asarray(np.sum(dxt * (xbar * a - xbar)), dtype=lam.dtype)
        dxbar = dxt * (lam * a + (1 - lam))
        da = lam * dxt * xbar
        # softmax Jacobian, row by row
        de = a * (da - np.sum(da * a, axis=-1, keepdims=True))
        if spec.lowrank:
            L, R = params["L"], params["R"]
            grads["R"] = _sum_batch(matmul(transpose(cache["xl"]), de))
            dxl = matmul(de, transpose(R))
            g_l = _sum_batch(matmul(transpose(xbar), dxl))
            dxbar = dxbar + matmul(dxl, transpose(L))
            if spec.enforce_diag:
                dxbar = dxbar + de * diag_correction(L, R, spec.t_in)
                dc = (de * xbar).reshape(-1, spec.t_in).sum(axis=0)
                g_l = g_l - dc[:, None] * R.T
                grads["R"] = grads["R"] - (L * dc[:, None]).T
            grads["L"] = g_l
        else:
            g_w = _sum_batch(matmul(transpose(xbar), de))
            np.fill_diagonal(g_w, 0)
            grads["W"] = g_w
            dxbar = dxbar + matmul(de, transpose(params["W"]))
    else:
        dxbar = dxt

    if spec.lowrank:
        grads["L1"] = _sum_batch(matmul(dxbar, transpose(cache["r1x"])))
        dp = matmul(transpose(params["L1"]), dxbar)
        grads["R1"] = _sum_batch(matmul(dp, transpose(x)))
        dx = matmul(transpose(params["R1"]), dp)
    else:
        grads["W1"] = _sum_batch(matmul(dxbar, transpose(x)))
        dx = matmul(transpose(params["W1"]), dxbar)
    return dx, grads


def param_count(spec):
    """Number of trainable scalars, counting the full T x T attention matrix and ``lam``."""
    d, t, dp, tp = spec.d_in, spec.t_in, spec.d_out, spec.t_out
    n = dp * tp
    if spec.lowrank:
        r = spec.ranks
        n += (d + dp) * r["W1"] + (t + tp) * r["W2"]
        if spec.attention:
            n += 2 * t * r["W"] + 1
    else:
        n += d * dp + t * tp
        if spec.attention:
            n += t * t + 1
    return n


def flop_count(spec):
    """Multiply-accumulate counts of the three main products.

    Bias, softmax and activation costs are not included. Layers without
    attention report ``e = 0``.
    """
    d, t, dp, tp = spec.d_in, spec.t_in, spec.d_out, spec.t_out
    if spec.lowrank:
        r = spec.ranks
        return {
            "xbar": (d + dp) * r["W1"] * t,
            "e": 2 * dp * r["W"] * t if spec.attention else 0,
            "y": (t + tp) * r["W2"] * dp + dp * tp,
        }
    return {
        "xbar": dp * d * t,
        "e": dp * t * t if spec.attention else 0,
        "y": dp * tp * t,
    }


def materialize_lowrank(L, R):
    return matmul(L, R)


def jacobi_svd(a, tol=None, max_sweeps=100):
    """Thin SVD by one-sided Jacobi rotations.

    Returns ``u, s, vt`` with singular values sorted in decreasing order.
    """
    a = np.array(a, dtype=np.float64)
    m, n = a.shape
    if m < n:
        u, s, vt = jacobi_svd(a.T, tol, max_sweeps)
        return vt.T, s, u.T
    tol = np.finfo(np.float64).eps * m if tol is None else tol
    u = a
    v = np.eye(n)
    for _ in range(max_sweeps):
        rotated = False
        for p in range(n - 1):
            for q in range(p + 1, n):
                alpha = u[:, p] @ u[:, p]
                beta = u[:, q] @ u[:, q]
                gamma = u[:, p] @ u[:, q]
                if abs(gamma) <= tol * np.sqrt(alpha * beta) or gamma == 0.0:
                    continue
                rotated = True
                zeta = (beta - alpha) / (2.0 * gamma)
                tan = np.copysign(1.0, zeta) / (abs(zeta) + np.sqrt(1.0 + zeta * zeta))
                cos = 1.0 / np.sqrt(1.0 + tan * tan)
                sin = cos * tan
                up, uq = u[:, p].copy(), u[:, q]
                u[:, p] = cos * up - sin * uq
                u[:, q] = sin * up + cos * uq
                vp, vq = v[:, p].copy(), v[:, q]
                v[:, p] = cos * vp - sin * vq
                v[:, q] = sin * vp + cos * vq
        if not rotated:
            break
    s = np.sqrt(np.einsum("ij,ij->j", u, u))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    u = u[:, order]
    v = v[:, order]
    nz = s > 0
    u[:, nz] /= s[nz]
    return u, s, v.T


def factor_from_full(w, k):
    """Best rank-``k`` factor pair ``(L, R)`` of ``w`` with ``L = U_k S_k``, ``R = V_k^T``.

    ``k`` is capped at ``min(w.shape)``.
    """
    w = np.asarray(w)
    k = effective_rank(k, *w.shape)
    u, s, vt = jacobi_svd(w)
    return u[:, :k] * s[:k], vt[:k, :].copy()


def factorize_params(lr_spec, full_params):
    """Low-rank parameters for ``lr_spec`` from the truncated SVD of full-layer weights."""
    if not lr_spec.lowrank:
        raise ValueError("factorize_params needs a low-rank spec")
    r = lr_spec.ranks
    dtype = full_params["W1"].dtype
    out = {}
    for full_name, (lname, rname) in (("W1", ("L1", "R1")), ("W2", ("L2", "R2")), ("W", ("L", "R"))):
        if full_name in r:
            L, R = factor_from_full(full_params[full_name], r[full_name])
            out[lname], out[rname] = L.astype(dtype), R.astype(dtype)
    out["B"] = full_params["B"].copy()
    if lr_spec.attention:
        out["lam"] = np.array(full_params["lam"], copy=True)
    return out
