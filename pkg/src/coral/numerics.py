"""Dense f32 tensor helpers on top of torch autograd.

torch supplies the tensor storage and the reverse-mode tape; this module pins
the handful of contracts the rest of the package relies on: shape-checked
matmul, max-shifted softmax, masked mean cross-entropy (losses reduced in
f64), an explicit ``backward`` and a seeded AdamW step.
"""

from __future__ import annotations

from collections.abc import Iterable, Sequence

import torch

DTYPE = torch.float32


class NumericsError(RuntimeError):
    """Non-finite values or misuse of the gradient tape."""


def generator(seed: int) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(seed))
    return g


def tensor(data, shape: Sequence[int] | None = None) -> torch.Tensor:
    t = torch.as_tensor(data, dtype=DTYPE)
    if shape is not None:
        t = t.reshape(tuple(shape))
    return t


def check_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise NumericsError(f"non-finite values in {what}")
    return t


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ValueError(f"matmul dimension mismatch: {tuple(a.shape)} x {tuple(b.shape)}")
    return a @ b


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - shifted.exp().sum(dim=axis, keepdim=True).log()


def cross_entropy(
    logits: torch.Tensor,
    targets: torch.Tensor | Sequence[int],
    mask: torch.Tensor | Sequence[bool] | None = None,
    *,
    normalized: bool = False,
) -> torch.Tensor:
    """Mean negative log-likelihood of ``targets`` over the masked rows.

    ``logits`` is ``[n, V]``. Pass ``normalized=True`` when the rows are
    already log-probabilities. Returns a 0-d f64 tensor; an empty mask gives 0.
    """
    targets = torch.as_tensor(targets, dtype=torch.long).reshape(-1)
    logits = logits.reshape(-1, logits.shape[-1])
    if targets.numel() != logits.shape[0]:
        raise ValueError("one target per logits row required")
    if mask is None:
        mask = torch.ones_like(targets, dtype=torch.bool)
    else:
        mask = torch.as_tensor(mask, dtype=torch.bool).reshape(-1)
        if mask.numel() != targets.numel():
            raise ValueError("mask length must match targets")
    vocab = logits.shape[-1]
    picked = targets[mask]
    if picked.numel() and (picked.min() < 0 or picked.max() >= vocab):
        raise IndexError(f"target outside [0, {vocab})")
    if not mask.any():
        return logits.sum().to(torch.float64) * 0.0
    rows = logits[mask]
    logp = rows if normalized else log_softmax(rows)
    nll = -logp.gather(1, picked[:, None]).squeeze(1)
    return nll.to(torch.float64).mean()


def backward(loss: torch.Tensor, params: Iterable[torch.Tensor] | None = None) -> list[torch.Tensor | None]:
    """Backpropagate a scalar loss; returns the gradients of ``params``."""
    if loss.numel() != 1:
        raise NumericsError("backward needs a scalar loss")
    if not loss.requires_grad:
        raise NumericsError("loss was not produced by taped operations")
    check_finite(loss.detach(), "loss")
    loss.backward()
    if params is None:
        return []
    grads = [p.grad for p in params]
    for g in grads:
        if g is not None:
            check_finite(g, "gradient")
    return grads


def make_optimizer(params: Iterable[torch.nn.Parameter], lr: float, weight_decay: float = 0.0) -> torch.optim.AdamW:
    return torch.optim.AdamW(list(params), lr=lr, betas=(0.9, 0.999), eps=1e-8, weight_decay=weight_decay)


def optimizer_step(optimizer: torch.optim.Optimizer, lr: float | None = None) -> None:
    """Apply one AdamW update (bias-corrected) and clear gradients."""
    if lr is not None:
        for group in optimizer.param_groups:
            group["lr"] = lr
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
