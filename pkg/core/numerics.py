"""Dense float64 primitives and their hand-derived reverse-mode kernels.

Every forward op has a matching ``*_backward`` that maps an upstream adjoint
to adjoints of the op's inputs. The graph is fixed, so there is no tape: the
model module calls the backward kernels in reverse order itself.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from core.errors import DimensionError, DomainError, GradCheckError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

NORM_EPS = 1e-12


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=np.float64)


@dataclass
class DualTensor:
    """A parameter value together with its accumulated adjoint."""
    value: Tensor
    grad: Tensor = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.value = as_tensor(self.value)
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        elif self.grad.shape != self.value.shape:
            raise DimensionError(f"grad shape {self.grad.shape} != value shape {self.value.shape}")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def zero_grad(self) -> None:
        self.grad.fill(0.0)


# ---------- linear ----------
def linear(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """out = W @ x + b for a vector x, or row-wise X @ W.T + b for a matrix X."""
    if W.ndim != 2 or b.shape != (W.shape[0],) or x.shape[-1] != W.shape[1]:
        raise DimensionError(
            f"linear: x{tuple(x.shape)} incompatible with W{tuple(W.shape)}, b{tuple(b.shape)}"
        )
    if x.ndim == 1:
        return W @ x + b
    return x @ W.T + b


def linear_backward(x: Tensor, W: Tensor, g: Tensor) -> tuple[Tensor, Tensor, Tensor]:
    """Adjoints (gx, gW, gb) of linear() given upstream g."""
    if x.ndim == 1:
        return W.T @ g, np.outer(g, x), g.copy()
    return g @ W, g.T @ x, g.sum(axis=0)


# ---------- sigmoid ----------
def sigmoid(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(s: Tensor, g: Tensor) -> Tensor:
    # takes the forward output s, not the input
    return g * s * (1.0 - s)


# ---------- tanh ----------
def tanh(x: Tensor) -> Tensor:
    return np.tanh(x)


def tanh_backward(t: Tensor, g: Tensor) -> Tensor:
    return g * (1.0 - t * t)


# ---------- softmax ----------
def softmax(x: Tensor) -> Tensor:
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        raise DomainError("softmax of an empty vector")
    e = np.exp(x - np.max(x))
    return e / np.sum(e)


def softmax_backward(p: Tensor, g: Tensor) -> Tensor:
    return p * (g - np.dot(p, g))


# ---------- cosine similarity ----------
# Norms above this are computed on v / max|v| so squares never overflow.
BIG_NORM = 1e150


def _norm(v: Tensor, axis: int | None = None) -> Tensor:
    with np.errstate(over="ignore"):
        return np.sqrt(np.sum(v * v, axis=axis))


def _rescaled(v: Tensor) -> tuple[Tensor, float]:
    """(v / s, s) with s = max|v| when the norm of v exceeds BIG_NORM, else (v, 1)."""
    if _norm(v) > BIG_NORM:
        s = float(np.max(np.abs(v)))
        return v / s, s
    return v, 1.0


def cosine_sim(a: Tensor, b: Tensor) -> float:
    """Cosine similarity with a zero-norm guard (similarity 0 if either norm < 1e-12)."""
    if a.shape != b.shape or a.ndim != 1 or a.size == 0:
        raise DimensionError(f"cosine_sim: shapes {a.shape} and {b.shape}")
    (a, _), (b, _) = _rescaled(a), _rescaled(b)
    na = np.sqrt(np.sum(a * a))
    nb = np.sqrt(np.sum(b * b))
    if na < NORM_EPS or nb < NORM_EPS:
        return 0.0
    c = np.sum(a * b) / (na * nb)
    return float(min(1.0, max(-1.0, c)))


def cosine_sim_backward(a: Tensor, b: Tensor, g: float) -> tuple[Tensor, Tensor]:
    (a, sa), (b, sb) = _rescaled(a), _rescaled(b)
    na = np.sqrt(np.sum(a * a))
    nb = np.sqrt(np.sum(b * b))
    if na < NORM_EPS or nb < NORM_EPS:
        return np.zeros_like(a), np.zeros_like(b)
    c = np.sum(a * b) / (na * nb)
    ga = g * (b / (na * nb) - c * a / (na * na))
    gb = g * (a / (na * nb) - c * b / (nb * nb))
    return ga / sa, gb / sb


def cosine_rows(E: Tensor, q: Tensor, row_norms: Tensor | None = None) -> Tensor:
    """cosine_sim(E[i], q) for every row; per-row values are bit-identical to cosine_sim."""
    if E.ndim != 2 or E.shape[1] != q.shape[0]:
        raise DimensionError(f"cosine_rows: E{E.shape} vs q{q.shape}")
    if row_norms is None:
        row_norms = _norm(E, axis=1)
    out = np.zeros(E.shape[0])
    if E.shape[0] == 0:
        return out
    if _norm(q) > BIG_NORM:
        return np.array([cosine_sim(e, q) for e in E])
    nq = np.sqrt(np.sum(q * q))
    if nq < NORM_EPS:
        return out
    big = row_norms > BIG_NORM
    ok = (row_norms >= NORM_EPS) & ~big
    dots = np.sum(E[ok] * q, axis=1)
    out[ok] = np.clip(dots / (row_norms[ok] * nq), -1.0, 1.0)
    for i in np.flatnonzero(big):
        out[i] = cosine_sim(E[i], q)
    return out


# ---------- gradient checking ----------
@dataclass
class GradCheckReport:
    """``floor`` is the denominator floor used, so small errors on near-zero gradients read as absolute."""
    max_rel_error: float = 0.0
    per_param: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    floor: float = 1e-2

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def grad_check(
    graph: Callable[[], float],
    params: Sequence[DualTensor],
    step: float = 1e-5,
    names: Sequence[str] | None = None,
    max_entries: int | None = None,
    seed: int = 0,
    floor: float = 1e-2,
) -> GradCheckReport:
    """Compare accumulated adjoints in ``params`` with central finite differences.

    ``graph`` re-evaluates the scalar objective from the current parameter
    values; entries are perturbed in place and restored. Relative error is
    |analytic - numeric| / max(|analytic|, |numeric|, floor), and the floor is
    recorded on the report. ``max_entries`` samples that many entries per
    tensor instead of checking all of them.
    """
    if step <= 0:
        raise DomainError(f"grad_check step must be positive, got {step}")
    if floor <= 0:
        raise DomainError(f"grad_check floor must be positive, got {floor}")
    report = GradCheckReport(floor=floor)
    if not params:
        return report

    f0 = graph()
    if graph() != f0:
        raise GradCheckError("graph is not deterministic: two evaluations at the same point differ")

    names = list(names) if names is not None else [f"param{i}" for i in range(len(params))]
    rng = np.random.default_rng(seed)
    for name, p in zip(names, params):
        flat_v = p.value.reshape(-1)
        flat_g = p.grad.reshape(-1)
        idx = np.arange(flat_v.size)
        if max_entries is not None and flat_v.size > max_entries:
            idx = np.sort(rng.choice(flat_v.size, size=max_entries, replace=False))
        worst = 0.0
        for i in idx:
            orig = flat_v[i]
            flat_v[i] = orig + step
            fp = graph()
            flat_v[i] = orig - step
            fm = graph()
            flat_v[i] = orig
            numeric = (fp - fm) / (2.0 * step)
            analytic = flat_g[i]
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)
            worst = max(worst, rel)
        report.per_param[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
        report.n_checked += len(idx)
    logger.debug(f"[GRADCHECK] {report.n_checked} entries, max rel err {report.max_rel_error:.3e} (floor {report.floor:g})")
    return report
