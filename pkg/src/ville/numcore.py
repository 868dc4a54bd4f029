"""Numeric substrate: torch tensors plus the shared similarity/NLL primitives.

Reverse-mode gradients come from torch autograd. ``grad_check`` is an
independent central-difference harness that never touches autograd for its
reference values.
"""
from __future__ import annotations

import math
from contextlib import contextmanager
from dataclasses import dataclass
from typing import Callable, Sequence

import torch


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class EvaluationError(RuntimeError):
    pass


TEST_DTYPE = torch.float64
TRAIN_DTYPE = torch.float32


@contextmanager
def precision(dtype: torch.dtype):
    """Temporarily switch torch's default float dtype (64-bit for checks)."""
    old = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(old)


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise EvaluationError(f"non-finite values in {what}")
    return t


def cosine_similarity(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """a.b / (|a||b|) for two 1-D tensors; differentiable in both."""
    if a.dim() != 1 or b.dim() != 1 or a.shape != b.shape:
        raise ShapeError(f"expected equal 1-D shapes, got {tuple(a.shape)} and {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a)
    nb = torch.linalg.vector_norm(b)
    if float(na.detach()) == 0.0 or float(nb.detach()) == 0.0:
        raise DomainError("cosine similarity of a zero-norm vector")
    return (a @ b) / (na * nb)


def cosine_matrix(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Pairwise cosine similarities between rows of ``a`` [N, d] and ``b`` [M, d]."""
    if a.dim() != 2 or b.dim() != 2 or a.shape[1] != b.shape[1]:
        raise ShapeError(f"row dims differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    na = torch.linalg.vector_norm(a, dim=1, keepdim=True)
    nb = torch.linalg.vector_norm(b, dim=1, keepdim=True)
    if bool((na == 0).any()) or bool((nb == 0).any()):
        raise DomainError("cosine similarity of a zero-norm vector")
    return (a / na) @ (b / nb).T


def log_softmax(logits: torch.Tensor, dim: int = -1) -> torch.Tensor:
    # max-shifted log-sum-exp
    shift = logits.max(dim=dim, keepdim=True).values.detach()
    z = logits - shift
    return z - torch.log(torch.exp(z).sum(dim=dim, keepdim=True))


def softmax_cross_entropy(logits: torch.Tensor, target_index: int) -> torch.Tensor:
    """-log softmax(logits)[target] for a single 1-D logit vector."""
    if logits.dim() != 1:
        raise ShapeError("logits must be 1-D")
    v = logits.shape[0]
    if not 0 <= int(target_index) < v:
        raise IndexError(f"target {target_index} outside [0, {v})")
    return -log_softmax(logits)[int(target_index)]


@dataclass
class GradCheckReport:
    max_rel_error: float
    n_coords: int
    worst: tuple[int, int] | None = None  # (input index, flat coordinate)

    def ok(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def grad_check(
    fn: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor],
    epsilon: float = 1e-5,
) -> GradCheckReport:
    """Compare autograd against central differences at every input coordinate.

    ``fn`` maps the input tensors to a scalar. Inputs are cloned to float64.
    Relative error per coordinate is |g_fd - g_an| / max(1e-8, |g_fd| + |g_an|).
    """
    xs = [x.detach().to(TEST_DTYPE).clone().requires_grad_(True) for x in inputs]
    out = fn(*xs)
    if out.numel() != 1:
        raise ShapeError("grad_check needs a scalar function")
    if not math.isfinite(float(out.detach())):
        raise EvaluationError("function value is not finite")
    analytic = torch.autograd.grad(out, xs, allow_unused=True)

    worst, worst_at, n = 0.0, None, 0
    with torch.no_grad():
        probe = [x.detach().clone() for x in xs]
        for k, x in enumerate(probe):
            flat = x.view(-1)
            g_an = analytic[k]
            g_an = torch.zeros_like(x) if g_an is None else g_an
            g_an = g_an.reshape(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + epsilon
                f_plus = float(fn(*probe))
                flat[i] = orig - epsilon
                f_minus = float(fn(*probe))
                flat[i] = orig
                if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                    raise EvaluationError("non-finite value under perturbation")
                fd = (f_plus - f_minus) / (2 * epsilon)
                an = float(g_an[i])
                rel = abs(fd - an) / max(1e-8, abs(fd) + abs(an))
                n += 1
                if rel > worst:
                    worst, worst_at = rel, (k, i)
    return GradCheckReport(worst, n, worst_at)
