"""Low-rank compensation of weight quantization error.

The error ``E = W - dequantize(q)`` is replaced by its best rank-r
approximation ``left @ right`` (truncated SVD, singular values split evenly
between the two factors), which is added back to the quantized weight.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .quant import QuantizedTensor, dequantize

DEFAULT_RANK = 8
# above this many elements per side, randomized SVD is allowed on request
RANDOMIZED_MIN_DIM = 2048


@dataclass(frozen=True, eq=False)
class LorcFactors:
    left: np.ndarray
    right: np.ndarray
    rank: int
    captured_energy: float

    @property
    def shape(self) -> tuple[int, int]:
        return self.left.shape[0], self.right.shape[1]

    @property
    def n_params(self) -> int:
        return self.rank * (self.left.shape[0] + self.right.shape[1])

    def overhead(self) -> float:
        """Factor parameters as a fraction of the dense weight's."""
        out, inp = self.shape
        return self.n_params / (out * inp)

    def product(self) -> np.ndarray:
        return self.left @ self.right


def error_matrix(W, q: QuantizedTensor) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.shape != tuple(q.shape):
        raise ValueError(f"weight shape {W.shape} does not match quantized shape {tuple(q.shape)}")
    return W - dequantize(q)


def _randomized_svd(E, rank, oversample=10, n_iter=4, seed=0):
    rng = np.random.default_rng(seed)
    k = min(rank + oversample, min(E.shape))
    Y = E @ rng.standard_normal((E.shape[1], k))
    for _ in range(n_iter):
        Y, _ = np.linalg.qr(Y)
        Y = E @ (E.T @ Y)
    Qm, _ = np.linalg.qr(Y)
    Ub, s, Vt = np.linalg.svd(Qm.T @ E, full_matrices=False)
    return Qm @ Ub, s, Vt


def lorc_factorize(E, rank: int = DEFAULT_RANK, randomized: bool = False) -> LorcFactors:
    """Rank-``rank`` factors ``left [out, r]`` and ``right [r, in]`` of ``E``.

    ``randomized`` switches to a randomized range finder for matrices whose
    smaller side is at least RANDOMIZED_MIN_DIM; ``captured_energy`` is then
    measured against ``||E||_F^2`` directly.
    """
    E = np.asarray(E, dtype=np.float64)
    if E.ndim != 2:
        raise ValueError(f"error matrix must be 2-D, got shape {E.shape}")
    full = min(E.shape)
    if not 0 <= rank <= full:
        raise ValueError(f"rank must be in [0, {full}], got {rank}")
    total = float(np.sum(E * E))

    if randomized and full >= RANDOMIZED_MIN_DIM and rank > 0:
        U, s, Vt = _randomized_svd(E, rank)
    else:
        try:
            U, s, Vt = np.linalg.svd(E, full_matrices=False)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError(f"SVD did not converge: {exc}") from None

    root = np.sqrt(s[:rank])
    left = U[:, :rank] * root[None, :]
    right = root[:, None] * Vt[:rank, :]
    kept = float(np.sum(s[:rank] ** 2))
    energy = 1.0 if total == 0 else min(kept / total, 1.0)
    return LorcFactors(left=left, right=right, rank=rank, captured_energy=energy)


def apply_lorc(q: QuantizedTensor, factors: LorcFactors) -> np.ndarray:
    base = dequantize(q)
    if base.shape != factors.shape:
        raise ValueError(f"factor product shape {factors.shape} does not match weight shape {base.shape}")
    return base + factors.product()


def lorc(W, q: QuantizedTensor, rank: int = DEFAULT_RANK) -> tuple[LorcFactors, np.ndarray]:
    """Factorize the quantization error of ``q`` and return (factors, compensated weight)."""
    factors = lorc_factorize(error_matrix(W, q), rank)
    return factors, apply_lorc(q, factors)
