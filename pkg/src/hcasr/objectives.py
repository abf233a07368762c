"""CTC loss, attention (teacher-forced NLL) loss and their convex combination."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch

from . import kernels
from .errors import ConfigError

log = logging.getLogger(__name__)

BLANK = 0


@dataclass(frozen=True)
class HybridWeights:
    ctc_weight: float = 0.3

    def __post_init__(self):
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError(f"ctc weight must lie in [0, 1], got {self.ctc_weight}")


@dataclass
class Unalignable:
    """Diagnostic for a target that cannot fit in the available frames."""

    frames: int
    required: int
    target: tuple[int, ...]
    utt: str | None = None


def extend_with_blanks(target) -> np.ndarray:
    ext = np.zeros(2 * len(target) + 1, dtype=np.int64)
    ext[1::2] = np.asarray(target, dtype=np.int64)
    return ext


def min_frames(target) -> int:
    """Shortest input that can emit ``target``: one frame per label plus a blank between repeats."""
    target = list(target)
    repeats = sum(1 for a, b in zip(target, target[1:]) if a == b)
    return len(target) + repeats


class _CtcFunction(torch.autograd.Function):
    @staticmethod
    def forward(ctx, log_probs, ext):
        log_lik, grad = kernels.ctc_forward_backward(log_probs.detach().cpu().numpy(), ext)
        ctx.save_for_backward(torch.from_numpy(grad).to(log_probs.dtype))
        return log_probs.new_tensor(-log_lik)

    @staticmethod
    def backward(ctx, grad_out):
        (grad,) = ctx.saved_tensors
        if not torch.isfinite(grad_out):
            return None, None
        return grad_out * grad, None


def ctc_loss(log_probs, target, utt: str | None = None) -> torch.Tensor:
    """-log P(target | x) for one utterance.

    ``log_probs`` is ``(T, V + 1)`` with blank at column 0; ``target`` holds
    ids in ``[1, V]`` and may be empty. Targets that need more than ``T``
    frames return ``+inf``; the diagnostic is logged and attached to the
    returned tensor as ``.unalignable``.
    """
    lp = torch.as_tensor(log_probs, dtype=torch.float64) if isinstance(log_probs, np.ndarray) else log_probs
    target = [int(t) for t in target]
    if any(t == BLANK for t in target):
        raise ValueError("CTC targets must not contain blank")
    T = lp.shape[0]
    need = min_frames(target)
    if need > T:
        diag = Unalignable(T, need, tuple(target), utt)
        log.warning("unalignable target: %s", diag)
        out = lp.new_tensor(float("inf"))
        out.unalignable = diag
        return out
    return _CtcFunction.apply(lp, extend_with_blanks(target))


def ctc_loss_batch(log_probs, lengths, targets, utts=None):
    """Per-utterance CTC losses; unalignable utterances are reported, not raised.

    Returns ``(losses, skipped)`` where ``losses`` is a list of scalar tensors
    for the alignable utterances and ``skipped`` lists ``Unalignable`` records.
    """
    losses, keep, skipped = [], [], []
    for b, target in enumerate(targets):
        utt = utts[b] if utts is not None else None
        loss = ctc_loss(log_probs[b, : int(lengths[b])], target, utt)
        if torch.isinf(loss):
            skipped.append(loss.unalignable)
        else:
            losses.append(loss)
            keep.append(b)
    return losses, keep, skipped


def attention_loss(logits, target, count_eos: bool = True, label_smoothing: float = 0.0):
    """Teacher-forced NLL, ``-sum_u log P(y_u | x, y_<u)``.

    ``logits`` is ``(U + 1, V + 1)``: one row per target step plus the final
    eos step. ``target`` holds decoder-space indices (characters ``id - 1``)
    of length ``U``; eos is index ``V``.
    """
    logits = torch.as_tensor(logits)
    target = [int(t) for t in target]
    if logits.shape[0] != len(target) + 1:
        raise ValueError(
            f"expected {len(target) + 1} decoder steps for a length-{len(target)} target, "
            f"got {logits.shape[0]}"
        )
    eos = logits.shape[1] - 1
    labels = torch.tensor(target + [eos], dtype=torch.long)
    if not count_eos:
        logits, labels = logits[:-1], labels[:-1]
    logp = torch.log_softmax(logits, dim=-1)
    nll = -logp.gather(1, labels[:, None]).squeeze(1)
    if label_smoothing:
        nll = (1.0 - label_smoothing) * nll - label_smoothing * logp.mean(dim=-1)
    return nll.sum()


def attention_loss_batch(logits, targets, count_eos=True, label_smoothing=0.0):
    return [
        attention_loss(logits[b, : len(t) + 1], t, count_eos, label_smoothing)
        for b, t in enumerate(targets)
    ]


def hybrid_loss(ctc, att, weights: HybridWeights | float = HybridWeights()):
    lam = weights.ctc_weight if isinstance(weights, HybridWeights) else float(weights)
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"ctc weight must lie in [0, 1], got {lam}")
    if lam == 1.0:
        return ctc
    if lam == 0.0:
        return att
    return lam * ctc + (1.0 - lam) * att
