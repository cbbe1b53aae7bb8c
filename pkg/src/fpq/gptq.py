"""Second-order post-training weight quantization (GPTQ).

Weights are ``[out, in]``; columns are quantized left to right.  After each
column is rounded, its error, divided by the matching diagonal entry of the
upper Cholesky factor of the inverse Hessian, is propagated onto the columns
not yet quantized.  Updates are applied lazily per block of columns.  Group
scales are fixed from the current (already error-corrected) weights at the
moment the solver first enters the group.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import scipy.linalg

from . import _backend, formats
from .quant import (
    QuantizedTensor,
    QuantizationError,
    constrain_scales,
    encode_with_scales,
    fp_scales,
    int_params,
    quantize,
    scale_grid_shape,
)
from .spec import QuantSpec, SpecError

_FP_MODE = 1
_INT_MODE = 0


class FactorizationError(np.linalg.LinAlgError):
    """The damped Hessian is not numerically positive definite."""


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    samples: np.ndarray
    source: str = "array"

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim == 1:
            x = x[None, :]
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValueError(f"calibration samples must be [n_samples, in_features], got {x.shape}")
        if not np.isfinite(x).all():
            raise ValueError("calibration samples contain non-finite values")
        object.__setattr__(self, "samples", x)

    @property
    def in_features(self) -> int:
        return self.samples.shape[1]


@dataclass(frozen=True, eq=False)
class HessianState:
    H: np.ndarray
    damping: float
    hinv_chol: np.ndarray
    dead: np.ndarray

    @property
    def in_features(self) -> int:
        return self.H.shape[0]


def build_hessian(calib: CalibrationSet | np.ndarray, damping_fraction: float = 0.01) -> HessianState:
    """H = 2 X^T X, damped by ``damping_fraction * mean(diag H)``."""
    if not isinstance(calib, CalibrationSet):
        calib = CalibrationSet(calib)
    if damping_fraction < 0 or not np.isfinite(damping_fraction):
        raise ValueError(f"damping_fraction must be nonnegative, got {damping_fraction}")
    X = calib.samples
    H = 2.0 * (X.T @ X)
    n = H.shape[0]
    diag = np.diag(H).copy()
    dead = diag == 0
    damping = float(damping_fraction * diag.mean())

    A = H.copy()
    A[dead, dead] = 1.0
    A[np.diag_indices(n)] += damping
    try:
        L = scipy.linalg.cholesky(A, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorizationError(f"damped Hessian is not positive definite ({exc}); increase damping") from None
    pivots = np.diag(L) ** 2
    if pivots.min() <= 10 * n * np.finfo(float).eps * np.diag(A).max():
        raise FactorizationError("damped Hessian is numerically singular; increase damping")
    Ainv = scipy.linalg.cho_solve((L, True), np.eye(n))
    Ainv = 0.5 * (Ainv + Ainv.T)
    U = scipy.linalg.cholesky(Ainv, lower=False)
    # dead columns neither send nor receive error
    U[(dead[:, None] | dead[None, :]) & ~np.eye(n, dtype=bool)] = 0.0
    return HessianState(H=H, damping=damping, hinv_chol=np.ascontiguousarray(U), dead=dead)


def proxy_loss(W, W_hat, X) -> float:
    """Calibration-weighted reconstruction error ||(W - W_hat) X^T||_F."""
    X = X.samples if isinstance(X, CalibrationSet) else np.asarray(X, dtype=np.float64)
    return float(np.linalg.norm((np.asarray(W) - np.asarray(W_hat)) @ X.T))


def rtn_baseline(W, spec: QuantSpec) -> QuantizedTensor:
    """Plain round-to-nearest; the control arm for every GPTQ comparison."""
    return quantize(W, spec)


def _row_spec(spec: QuantSpec) -> QuantSpec:
    return replace(spec, granularity="token", group_size=None, scale_constraint="none", group_rows=1)


def _group_bounds(spec: QuantSpec, cols: int):
    if spec.granularity == "group":
        gs = spec.group_size
        return [(g, g * gs, min(g * gs + gs, cols)) for g in range(-(-cols // gs))]
    return [(0, 0, cols)]


def _kernel_tables(spec: QuantSpec):
    if spec.is_int:
        dummy = np.zeros(2)
        return dummy, np.zeros(2, dtype=np.uint8), 0, dummy
    mags, mcodes = formats.magnitude_table(spec.fmt)
    return mags, mcodes, spec.fmt.sign_mask, formats.decode_table(spec.fmt)


class _Params:
    """Scale/zero-point bookkeeping shared by both solver modes."""

    def __init__(self, W, spec, fixed):
        self.spec = spec
        rows, cols = W.shape
        shape = scale_grid_shape(W.shape, spec)
        self.fixed = fixed is not None
        if fixed is not None:
            self.scales, self.zeros = fixed
        else:
            self.scales = np.empty(shape)
            self.zeros = None if (not spec.is_int or spec.symmetric) else np.empty(shape, dtype=np.int64)
        self.row_spec = _row_spec(spec)
        if spec.granularity == "tensor" and not self.fixed:
            # the only group is the whole tensor; enter it before any update
            if spec.is_int:
                s, z = int_params(W, spec)
                self.scales[:] = s
                if z is not None:
                    self.zeros[:] = z
            else:
                self.scales[:] = fp_scales(W, spec)

    def enter(self, g, current):
        """Fix the parameters of group ``g`` from its current weights ``current``."""
        if self.fixed or self.spec.granularity == "tensor":
            return
        if self.spec.is_int:
            s, z = int_params(current, self.row_spec)
            self.scales[:, g] = s[:, 0]
            if z is not None:
                self.zeros[:, g] = z[:, 0]
        else:
            self.scales[:, g] = fp_scales(current, self.row_spec)[:, 0]

    def rows(self, g, n_rows):
        col = 0 if self.spec.granularity == "tensor" else g
        s = np.ascontiguousarray(np.broadcast_to(self.scales[:, col], (n_rows,)), dtype=np.float64)
        if self.zeros is None:
            z = np.zeros(n_rows)
        else:
            z = np.ascontiguousarray(np.broadcast_to(self.zeros[:, col], (n_rows,)), dtype=np.float64)
        return s, z


def _solve_blocked(W, U, spec, block_size, params):
    rows, cols = W.shape
    kern = _backend.kernels
    mode = _INT_MODE if spec.is_int else _FP_MODE
    mags, mcodes, sign_mask, table = _kernel_tables(spec)
    qmin = float(spec.qmin) if spec.is_int else 0.0
    qmax = float(spec.qmax) if spec.is_int else 0.0
    groups = _group_bounds(spec, cols)
    group_of = np.empty(cols, dtype=np.intp)
    for g, c0, c1 in groups:
        group_of[c0:c1] = g

    Q = np.empty((rows, cols))
    codes = np.empty((rows, cols), dtype=np.int64)
    for i1 in range(0, cols, block_size):
        i2 = min(i1 + block_size, cols)
        b = i2 - i1
        W1 = np.ascontiguousarray(W[:, i1:i2])
        U1 = np.ascontiguousarray(U[i1:i2, i1:i2])
        Q1 = np.zeros((rows, b))
        Err1 = np.zeros((rows, b))
        C1 = np.zeros((rows, b), dtype=np.int64)
        i = 0
        while i < b:
            col = i1 + i
            g = group_of[col]
            _, g0, g1 = groups[g]
            if col == g0:
                current = W1[:, i:min(g1, i2) - i1]
                if g1 > i2:
                    pending = W[:, i2:g1] - Err1[:, :i] @ U[i1:i1 + i, i2:g1]
                    current = np.concatenate([current, pending], axis=1)
                params.enter(g, current)
            stop = min(g1, i2) - i1
            s, z = params.rows(g, rows)
            kern.gptq_columns(W1, U1, i, stop, s, z, mode, qmin, qmax,
                              mags, mcodes, sign_mask, table, Q1, Err1, C1)
            i = stop
        Q[:, i1:i2] = Q1
        codes[:, i1:i2] = C1
        if i2 < cols:
            W[:, i2:] -= Err1 @ U[i1:i2, i2:]
    return Q, codes


def _solve_sequential(W, U, spec, params):
    """Column-at-a-time reference solver (no blocking, no compiled kernel)."""
    rows, cols = W.shape
    groups = _group_bounds(spec, cols)
    Q = np.empty((rows, cols))
    codes = np.empty((rows, cols), dtype=np.int64)
    for g, g0, g1 in groups:
        params.enter(g, W[:, g0:g1])
        s, z = params.rows(g, rows)
        for j in range(g0, g1):
            w = W[:, j]
            if spec.is_int:
                c = np.clip(np.rint(w / s) + z, spec.qmin, spec.qmax)
                q = s * (c - z)
            else:
                c = formats.encode_nearest(w / s, spec.fmt)
                q = s * formats.decode(c, spec.fmt)
            err = (w - q) / U[j, j]
            W[:, j + 1:] -= np.outer(err, U[j, j + 1:])
            Q[:, j] = q
            codes[:, j] = c
    return Q, codes


def _solve(W, hess, spec, block_size, sequential, fixed=None):
    W = np.array(W, dtype=np.float64, order="C")
    params = _Params(W, spec, fixed)
    if sequential:
        _, codes = _solve_sequential(W, hess.hinv_chol, spec, params)
    else:
        _, codes = _solve_blocked(W, hess.hinv_chol, spec, block_size, params)
    return codes, params.scales, params.zeros


def gptq_quantize(W, hess: HessianState, spec: QuantSpec, block_size: int = 128,
                  sequential: bool = False) -> QuantizedTensor:
    """Quantize ``W`` [out, in] column by column with inverse-Hessian error feedback.

    With an M1/M2 scale constraint the solve runs twice: once with free scales,
    which are then constrained, and again with the constrained scales held
    fixed so the codes are re-optimized for them.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2:
        raise QuantizationError(f"weights must be a 2-D [out, in] matrix, got shape {W.shape}")
    if not np.isfinite(W).all():
        raise QuantizationError("weights contain non-finite values")
    if W.shape[1] != hess.in_features:
        raise ValueError(f"weights have {W.shape[1]} input features, Hessian has {hess.in_features}")
    if not isinstance(block_size, (int, np.integer)) or block_size < 1:
        raise ValueError(f"block_size must be a positive integer, got {block_size!r}")
    if spec.granularity == "token":
        raise SpecError("GPTQ quantizes weights; token granularity is for activations")

    base = spec.unconstrained()
    codes, scales, zeros = _solve(W, hess, base, block_size, sequential)
    q = QuantizedTensor(codes, scales, zeros, W.shape, base, meta={"solver": "gptq"})
    if spec.scale_constraint == "none":
        return q
    return gptq_constrain(W, hess, q, spec, block_size, sequential)


def gptq_constrain(W, hess: HessianState, q: QuantizedTensor, spec: QuantSpec,
                   block_size: int = 128, sequential: bool = False) -> QuantizedTensor:
    """Constrain the scales of a finished solve and re-solve with them held fixed."""
    if spec.scale_constraint == "none":
        raise SpecError("gptq_constrain needs an M1 or M2 spec")
    if q.spec.unconstrained() != spec.unconstrained():
        raise SpecError(f"tensor was quantized as {q.spec}, not {spec.unconstrained()}")
    constrained = constrain_scales(q.scales, spec)
    codes, _, _ = _solve(W, hess, spec.unconstrained(), block_size, sequential, fixed=(constrained, None))
    return QuantizedTensor(codes, constrained, None, q.shape, spec, raw_scales=q.scales,
                           meta={"solver": "gptq"})


def rtn_constrain(W, q: QuantizedTensor, spec: QuantSpec) -> QuantizedTensor:
    """Round-to-nearest counterpart of :func:`gptq_constrain`."""
    if spec.scale_constraint == "none":
        raise SpecError("rtn_constrain needs an M1 or M2 spec")
    constrained = constrain_scales(q.scales, spec)
    codes = encode_with_scales(W, spec, constrained)
    return QuantizedTensor(codes, constrained, None, q.shape, spec, raw_scales=q.scales)
