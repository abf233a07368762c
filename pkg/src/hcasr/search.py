"""Joint CTC/attention one-pass beam search with optional n-gram shallow fusion.

Hypotheses are ranked by ``lam * ctc + (1 - lam) * att + gamma * lm`` where
``ctc`` is the CTC prefix log-probability of the hypothesis (or, once eos is
emitted, of the complete sequence), ``att`` the summed decoder
log-probabilities and ``lm`` the summed LM log-probabilities. A term whose
weight is zero contributes exactly zero, even when its score is ``-inf``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from . import kernels
from .errors import ConfigError
from .model import HybridModel, length_mask

NEG_INF = float("-inf")


@dataclass
class BeamConfig:
    width: int = 16
    ctc_weight: float = 0.3
    lm_weight: float = 0.0
    max_output_length: int | None = None  # default: number of encoder frames
    early_stop: bool = True
    force_eos_at_max: bool = True
    length_bonus: float = 0.0

    def __post_init__(self):
        if self.width < 1:
            raise ConfigError("beam width must be >= 1")
        if not 0.0 <= self.ctc_weight <= 1.0:
            raise ConfigError("ctc_weight must lie in [0, 1]")
        if self.lm_weight < 0:
            raise ConfigError("lm_weight must be non-negative")


@dataclass
class PrefixState:
    """Per-frame log-probabilities of the prefix ending in non-blank / blank."""

    r_n: np.ndarray
    r_b: np.ndarray
    last: int  # last token id, -1 for the empty prefix
    log_prob: float = 0.0  # CTC prefix log-probability

    def final_log_prob(self) -> float:
        """Log-probability that the CTC output is exactly this prefix."""
        return float(np.logaddexp(self.r_n[-1], self.r_b[-1]))


def initial_prefix_state(ctc_log_probs: np.ndarray) -> PrefixState:
    T = ctc_log_probs.shape[0]
    return PrefixState(np.full(T, NEG_INF), np.cumsum(ctc_log_probs[:, 0]), -1, 0.0)


def ctc_prefix_score(next_token: int, ctc_log_probs: np.ndarray, state: PrefixState):
    """Extend ``state`` by ``next_token``; returns ``(new_state, increment)``.

    ``new_state.log_prob`` is log P(output starts with prefix + next_token);
    the increment is its difference from the current prefix's value.
    """
    if next_token == 0:
        raise ValueError("blank is never emitted by the search")
    new_n, new_b, psi = kernels.ctc_prefix_extend(
        ctc_log_probs, state.r_n[None], state.r_b[None],
        np.array([state.last]), np.array([next_token]),
    )
    new = PrefixState(new_n[0, 0], new_b[0, 0], int(next_token), float(psi[0, 0]))
    if state.log_prob == NEG_INF:
        return new, NEG_INF
    return new, new.log_prob - state.log_prob


def joint_score(ctc, att, lm, ctc_weight, lm_weight, length=0, length_bonus=0.0):
    total = 0.0
    if ctc_weight:
        total += ctc_weight * ctc
    if ctc_weight != 1.0:
        total += (1.0 - ctc_weight) * att
    if lm_weight:
        total += lm_weight * lm
    if length_bonus:
        total += length_bonus * length
    return total


@dataclass
class Hypothesis:
    tokens: tuple[int, ...]
    score_ctc: float
    score_att: float
    score_lm: float
    score_joint: float
    complete: bool = False
    ctc_state: PrefixState | None = field(default=None, repr=False)
    att_index: int = 0

    def sort_key(self):
        return (-self.score_joint, self.tokens)


@dataclass
class SearchResult:
    hypotheses: list[Hypothesis]
    status: str = "complete"  # or "incomplete": nothing reached eos

    @property
    def best(self) -> Hypothesis:
        return self.hypotheses[0]


def _decoder_inputs(tokens_batch, eos_index):
    # decoder-space index of the previous token; eos row serves as sos
    return torch.tensor([t[-1] - 1 if t else eos_index for t in tokens_batch], dtype=torch.long)


@torch.no_grad()
def joint_beam_search(h_enc, model: HybridModel, lm=None, cfg: BeamConfig | None = None) -> SearchResult:
    """Decode one utterance. ``h_enc`` is ``(T, D)`` encoder output."""
    cfg = cfg or BeamConfig()
    h_enc = torch.as_tensor(h_enc)
    T = h_enc.shape[0]
    V = model.cfg.vocab_size
    lam, gamma = cfg.ctc_weight, cfg.lm_weight if lm is not None else 0.0
    max_len = cfg.max_output_length if cfg.max_output_length is not None else T

    ctc_lp = model.ctc_log_probs(h_enc).cpu().numpy().astype(np.float64)
    decoder = model.decoder
    keys1 = decoder.key(h_enc[None])
    lengths1 = torch.tensor([T])
    state = decoder.init_state(h_enc[None], lengths1)
    chars = np.arange(1, V + 1)

    def score(ctc, att, lmv, n):
        return joint_score(ctc, att, lmv, lam, gamma, n, cfg.length_bonus)

    root = initial_prefix_state(ctc_lp)
    live = [Hypothesis((), 0.0, 0.0, 0.0, 0.0, ctc_state=root, att_index=0)]
    completed: list[Hypothesis] = []

    for step in range(max_len + 1):
        if step == max_len and not cfg.force_eos_at_max:
            break
        H = len(live)
        att_state = state.select(torch.tensor([h.att_index for h in live]))
        new_state, logits = decoder.step(
            att_state,
            h_enc[None].expand(H, -1, -1),
            keys1.expand(H, -1, -1),
            length_mask(lengths1, T).expand(H, -1),
            _decoder_inputs([h.tokens for h in live], decoder.eos),
        )
        att_lp = torch.log_softmax(logits, dim=-1).cpu().numpy().astype(np.float64)

        r_n = np.stack([h.ctc_state.r_n for h in live])
        r_b = np.stack([h.ctc_state.r_b for h in live])
        last = np.array([h.ctc_state.last for h in live])
        new_n, new_b, psi = kernels.ctc_prefix_extend(ctc_lp, r_n, r_b, last, chars)

        candidates = []
        for i, hyp in enumerate(live):
            lm_lp = lm.log_probs(hyp.tokens) if gamma else None
            # eos: complete-sequence CTC probability
            c_ctc = hyp.ctc_state.final_log_prob()
            c_att = hyp.score_att + att_lp[i, V]
            c_lm = hyp.score_lm + (lm_lp[V] if gamma else 0.0)
            candidates.append(Hypothesis(
                hyp.tokens, c_ctc, c_att, c_lm,
                score(c_ctc, c_att, c_lm, len(hyp.tokens)), complete=True,
            ))
            if step == max_len:
                continue
            for j, c in enumerate(chars):
                c = int(c)
                n_ctc = float(psi[i, j])
                n_att = hyp.score_att + att_lp[i, c - 1]
                n_lm = hyp.score_lm + (lm_lp[c - 1] if gamma else 0.0)
                tokens = hyp.tokens + (c,)
                candidates.append(Hypothesis(
                    tokens, n_ctc, n_att, n_lm, score(n_ctc, n_att, n_lm, len(tokens)),
                    ctc_state=PrefixState(new_n[i, j], new_b[i, j], c, n_ctc),
                    att_index=i,
                ))
        candidates.sort(key=lambda h: (-h.score_joint, h.complete, h.tokens))
        kept = candidates[: cfg.width]
        completed.extend(h for h in kept if h.complete)
        live = [h for h in kept if not h.complete]
        state = new_state
        if not live:
            break
        if cfg.early_stop and completed:
            best_done = max(h.score_joint for h in completed)
            # every component is non-increasing under extension
            if cfg.length_bonus <= 0 and best_done >= max(h.score_joint for h in live):
                break

    if not completed:
        live.sort(key=Hypothesis.sort_key)
        return SearchResult(live, status="incomplete")
    completed.sort(key=Hypothesis.sort_key)
    return SearchResult(completed)


def greedy_ctc_decode(log_probs) -> list[int]:
    """Frame-wise argmax, merge repeats, drop blanks."""
    best = np.asarray(torch.as_tensor(log_probs).argmax(dim=-1))
    out, prev = [], -1
    for k in best:
        k = int(k)
        if k != prev and k != 0:
            out.append(k)
        prev = k
    return out


def ctc_sequence_log_prob(ctc_log_probs: np.ndarray, tokens) -> float:
    """log P(exact output = tokens) via the prefix recursion."""
    state = initial_prefix_state(ctc_log_probs)
    for t in tokens:
        state, _ = ctc_prefix_score(int(t), ctc_log_probs, state)
    return state.final_log_prob()


def ranked_to_records(result: SearchResult, detok, utt: str, n_best: int = 1):
    rows = []
    for h in result.hypotheses[:n_best]:
        rows.append({
            "utt": utt,
            "hyp": detok(h.tokens),
            "score_joint": h.score_joint,
            "score_ctc": h.score_ctc,
            "score_att": h.score_att,
            "score_lm": h.score_lm,
        })
    return rows


__all__ = [
    "BeamConfig", "Hypothesis", "PrefixState", "SearchResult", "ctc_prefix_score",
    "ctc_sequence_log_prob", "greedy_ctc_decode", "initial_prefix_state",
    "joint_beam_search", "joint_score",
]
