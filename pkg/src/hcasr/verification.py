"""Definitional oracles and gradient checking.

The oracles here are written straight from the definitions (sum over every
alignment path; argmax over every output sequence) and deliberately share no
code with the dynamic programs they check.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import VerificationError

MAX_PATHS = 10**6
MAX_SEQUENCES = 10**5


def collapse(path) -> tuple[int, ...]:
    """Merge repeats, then drop blanks (index 0)."""
    out, prev = [], None
    for k in path:
        if k != prev and k != 0:
            out.append(int(k))
        prev = k
    return tuple(out)


def ctc_bruteforce(log_probs, target) -> float:
    """log sum over every path that collapses to ``target`` of prod_t p_t(path_t)."""
    lp = np.asarray(log_probs, dtype=np.float64)
    T, C = lp.shape
    if C**T > MAX_PATHS:
        raise VerificationError(f"{C}^{T} paths exceeds the brute-force limit {MAX_PATHS}")
    target = tuple(int(t) for t in target)
    terms = [
        sum(lp[t, k] for t, k in enumerate(path))
        for path in itertools.product(range(C), repeat=T)
        if collapse(path) == target
    ]
    if not terms:
        return -math.inf
    m = max(terms)
    return m + math.log(sum(math.exp(x - m) for x in terms))


def all_sequences(vocab_size: int, max_len: int):
    for n in range(max_len + 1):
        yield from itertools.product(range(1, vocab_size + 1), repeat=n)


@torch.no_grad()
def exhaustive_decode(h_enc, model, lm, ctc_weight, lm_weight, max_len):
    """argmax over all sequences up to ``max_len`` of the joint decoding score.

    CTC term: brute-force path sum of the complete sequence. Attention term:
    teacher-forced decoder log-likelihood including eos. LM term: summed
    conditional log-probabilities including eos. Zero-weight terms add 0.
    Ties go to the lexicographically smallest token sequence.
    """
    V = model.cfg.vocab_size
    n_seq = sum(V**n for n in range(max_len + 1))
    if n_seq > MAX_SEQUENCES:
        raise VerificationError(f"{n_seq} sequences exceeds the enumeration limit {MAX_SEQUENCES}")
    h_enc = torch.as_tensor(h_enc)
    T = h_enc.shape[0]
    ctc_lp = model.ctc_log_probs(h_enc).numpy().astype(np.float64)
    best = None
    for seq in all_sequences(V, max_len):
        ctc = ctc_bruteforce(ctc_lp, seq) if ctc_weight else 0.0
        dec_targets = torch.tensor([[t - 1 for t in seq]], dtype=torch.long).reshape(1, len(seq))
        logits = model.decoder.teacher_forced(h_enc[None], torch.tensor([T]), dec_targets)[0]
        logp = torch.log_softmax(logits, dim=-1)
        labels = [t - 1 for t in seq] + [V]
        att = float(sum(logp[u, k] for u, k in enumerate(labels)))
        lmv = 0.0
        if lm is not None and lm_weight:
            full = list(seq) + [V + 1]
            lmv = sum(lm.log_prob(full[:i], full[i]) for i in range(len(full)))
        total = 0.0
        if ctc_weight:
            total += ctc_weight * ctc
        if ctc_weight != 1.0:
            total += (1.0 - ctc_weight) * att
        if lm is not None and lm_weight:
            total += lm_weight * lmv
        if best is None or total > best[1]:
            best = (seq, total, ctc, att, lmv)
    return best


# -- gradient checking ------------------------------------------------------------


@dataclass
class GradCheckReport:
    eps: float
    threshold: float
    max_rel_error: dict[str, float] = field(default_factory=dict)
    checked: dict[str, int] = field(default_factory=dict)
    failure: str | None = None
    # |a - n| / (threshold * max(|a|, |n|) + fd_floor); <= 1 means the mismatch
    # is explained by the loss rounding seen through a step of size eps
    max_excess: dict[str, float] = field(default_factory=dict)
    fd_floor: float = 0.0

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values(), default=0.0)

    @property
    def within_resolution(self) -> bool:
        return self.failure is None and max(self.max_excess.values(), default=0.0) <= 1.0

    @property
    def passed(self) -> bool:
        return self.failure is None and self.worst <= self.threshold


def rel_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), 1e-12)


def grad_check(fn, params, eps=1e-6, threshold=1e-4, max_coords=200, seed=0, corrupt=None):
    """Compare autograd gradients with central differences.

    ``fn()`` returns a scalar tensor computed from ``params`` (a dict of
    leaf tensors, or a module). Tensors with more than ``max_coords`` entries
    are checked on a random subset of ``max_coords`` coordinates.
    ``corrupt`` scales the analytic gradient (test hook for failure paths).
    """
    if isinstance(params, torch.nn.Module):
        params = dict(params.named_parameters())
    report = GradCheckReport(eps, threshold)
    for p in params.values():
        p.grad = None
    loss = fn()
    if not torch.isfinite(loss):
        report.failure = f"non-finite loss {loss.item()} at the base point"
        return report
    grads = torch.autograd.grad(loss, list(params.values()), allow_unused=True)
    # a few ulps of the loss on each side of the central difference
    report.fd_floor = floor = 4.0 * float(np.spacing(abs(loss.item()))) / eps
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        for (name, p), g in zip(params.items(), grads):
            g = torch.zeros_like(p) if g is None else g
            if corrupt is not None:
                g = g * corrupt
            flat, gflat = p.view(-1), g.reshape(-1)
            n = flat.numel()
            idx = np.arange(n) if n <= max_coords else rng.choice(n, max_coords, replace=False)
            worst = excess = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = fn().item()
                flat[i] = orig - eps
                down = fn().item()
                flat[i] = orig
                if not (math.isfinite(up) and math.isfinite(down)):
                    report.failure = f"non-finite loss perturbing {name}[{i}]"
                    return report
                a, num = gflat[i].item(), (up - down) / (2 * eps)
                worst = max(worst, rel_error(a, num))
                excess = max(excess, abs(a - num) / (threshold * max(abs(a), abs(num)) + floor))
            report.max_rel_error[name] = worst
            report.max_excess[name] = excess
            report.checked[name] = len(idx)
    return report


@dataclass
class SuiteResult:
    name: str
    passed: bool
    cases: int
    detail: dict
    seconds: float

    def to_dict(self):
        return {"suite": self.name, "passed": self.passed, "cases": self.cases,
                "seconds": round(self.seconds, 3), **self.detail}


def _timed(name, body):
    start = time.perf_counter()
    passed, cases, detail = body()
    return SuiteResult(name, passed, cases, detail, time.perf_counter() - start)


def random_ctc_case(rng, max_T=6, max_V=3, max_U=3):
    """Random normalized log-probs plus a target that fits in T frames."""
    from .objectives import min_frames

    V = int(rng.integers(1, max_V + 1))
    while True:
        T = int(rng.integers(1, max_T + 1))
        U = int(rng.integers(0, max_U + 1))
        target = [int(x) for x in rng.integers(1, V + 1, size=U)]
        if min_frames(target) <= T:
            break
    logits = rng.normal(size=(T, V + 1)) * 2.0
    lp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    return lp, target


def ctc_oracle_suite(n_cases=200, seed=0, tol=1e-10):
    from .objectives import ctc_loss

    def body():
        rng = np.random.default_rng(seed)
        worst = 0.0
        for _ in range(n_cases):
            lp, target = random_ctc_case(rng)
            got = float(ctc_loss(lp, target))
            worst = max(worst, abs(got - (-ctc_bruteforce(lp, target))))
        return bool(worst <= tol), n_cases, {"max_abs_error": float(worst), "tolerance": tol}

    return _timed("ctc_oracle", body)


def tiny_model_config(vocab_size, attention_variant="location"):
    from .model import LspcConfig, ModelConfig

    small = dict(conv1_channels=2, conv2_channels=2, parallel_channels_each=2, projection_dim=8)
    return ModelConfig(
        vocab_size=vocab_size,
        fbank=LspcConfig(input_dim=80, pool_feature_size=2, **small),
        spectrogram=LspcConfig(input_dim=201, pool_feature_size=3, **small),
        encoder_layers=1, encoder_hidden=4, post_hidden=6, encoder_dim=6,
        decoder_embed=4, decoder_hidden=6, attention_dim=5,
        attention_variant=attention_variant, location_channels=2, location_kernel=3,
    )


def random_decode_case(rng, model_seed):
    """Tiny random model + encoder output with |V| <= 3, T' <= 5."""
    from .corpus import Vocabulary
    from .lm import train_char_lm
    from .model import build_model

    V = int(rng.integers(1, 4))
    T = int(rng.integers(1, 6))
    max_len = int(rng.integers(1, 5)) if V < 3 else int(rng.integers(1, 4))
    model = build_model(tiny_model_config(V), seed=model_seed)
    # sharpen the untrained heads so cases are not near-ties
    with torch.no_grad():
        for p in list(model.ctc.parameters()) + list(model.decoder.out.parameters()):
            p.mul_(4.0)
    h_enc = torch.as_tensor(rng.normal(size=(T, model.cfg.encoder_dim)))
    vocab = Vocabulary([chr(ord("a") + i) for i in range(V)])
    corpus = [list(rng.integers(1, V + 1, size=int(rng.integers(1, 4)))) for _ in range(5)]
    lm = train_char_lm(corpus, vocab, order=2, k=0.1)
    return model, h_enc, lm, max_len


def decode_oracle_suite(n_cases=20, seed=0, tol=1e-9):
    from .search import BeamConfig, joint_beam_search

    def body():
        rng = np.random.default_rng(seed)
        mismatches, worst = [], 0.0
        for case in range(n_cases):
            model, h_enc, lm, max_len = random_decode_case(rng, model_seed=seed * 1000 + case)
            lam = float(rng.choice([0.0, 0.3, 0.5, 1.0]))
            gamma = float(rng.choice([0.0, 0.5]))
            V = model.cfg.vocab_size
            width = sum(V**n for n in range(max_len + 1))
            cfg = BeamConfig(width=width, ctc_weight=lam, lm_weight=gamma, max_output_length=max_len)
            got = joint_beam_search(h_enc, model, lm, cfg).best
            seq, total, *_ = exhaustive_decode(h_enc, model, lm, lam, gamma, max_len)
            err = abs(got.score_joint - total)
            worst = max(worst, err)
            if got.tokens != seq or err > tol:
                mismatches.append({"case": case, "beam": list(got.tokens), "oracle": list(seq),
                                   "score_diff": err})
        return not mismatches, n_cases, {"max_score_diff": worst, "mismatches": mismatches}

    return _timed("decode_oracle", body)


def gradient_suite(seed=0, threshold=1e-4, corrupt=None, max_coords=200):
    """Gradient checks for each layer family and for the end-to-end hybrid loss.

    The verdict uses the plain relative error. ``within_resolution`` is reported
    alongside it: coordinates whose gradient is below what a step of ``eps`` can
    resolve against the loss rounding fail the relative test without any
    analytic error.
    """

    def body():
        reports = {name: _seeded(check, seed, corrupt, max_coords) for name, check in GRAD_CASES.items()}
        detail = {
            name: {"max_rel_error": r.worst, "within_resolution": r.within_resolution,
                   "fd_floor": r.fd_floor, "failure": r.failure}
            for name, r in reports.items()
        }
        passed = all(r.failure is None and r.worst <= threshold for r in reports.values())
        return passed, len(reports), detail

    return _timed("gradients", body)


# -- individual gradient cases ------------------------------------------------------


def _seeded(check, seed, corrupt, max_coords):
    # default module init draws from the global generator; pin it per case
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        return check(seed, corrupt, max_coords)


def _gc(fn, params, seed, corrupt, max_coords):
    return grad_check(fn, params, eps=1e-6, threshold=1e-4, max_coords=max_coords, seed=seed,
                      corrupt=corrupt)


def _case_linear(seed, corrupt, max_coords=200):
    g = torch.Generator().manual_seed(seed)
    lin = torch.nn.Linear(5, 3).double()
    x = torch.randn(4, 5, generator=g, dtype=torch.float64)
    return _gc(lambda: (torch.tanh(lin(x)) ** 2).sum(), lin, seed, corrupt, max_coords)


def _case_conv_pool(seed, corrupt, max_coords=200):
    from .model import Lspc, LspcConfig

    g = torch.Generator().manual_seed(seed)
    lspc = Lspc(LspcConfig(input_dim=6, conv1_channels=2, conv2_channels=2,
                           parallel_channels_each=2, pool_feature_size=2, projection_dim=4)).double()
    x = torch.randn(1, 6, 6, generator=g, dtype=torch.float64)
    w = torch.randn(1, 3, 4, generator=g, dtype=torch.float64)
    lengths = torch.tensor([6])
    return _gc(lambda: (lspc(x, lengths)[0] * w).sum(), lspc, seed, corrupt, max_coords)


def _case_ligru(seed, corrupt, max_coords=200):
    from .model import BiLiGRU

    g = torch.Generator().manual_seed(seed)
    layer = BiLiGRU(4, 3).double()
    with torch.no_grad():
        for p in layer.parameters():
            p.add_(0.1 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    x = torch.randn(2, 5, 4, generator=g, dtype=torch.float64)
    w = torch.randn(2, 5, 6, generator=g, dtype=torch.float64)
    lengths = torch.tensor([5, 3])
    return _gc(lambda: (layer(x, lengths) * w).sum(), layer, seed, corrupt, max_coords)


def _case_attention(seed, corrupt, max_coords=200):
    from .model import AttentionDecoder, length_mask

    g = torch.Generator().manual_seed(seed)
    cfg = tiny_model_config(3)
    dec = AttentionDecoder(cfg).double()
    with torch.no_grad():
        for p in dec.parameters():
            p.copy_(0.5 * torch.randn(p.shape, generator=g, dtype=torch.float64))
    h = torch.randn(2, 4, cfg.encoder_dim, generator=g, dtype=torch.float64)
    lengths = torch.tensor([4, 3])
    prev = torch.tensor([3, 1])

    def fn():
        state = dec.init_state(h, lengths)
        mask = length_mask(lengths, 4)
        keys = dec.key(h)
        state, logits = dec.step(state, h, keys, mask, prev)
        state, logits2 = dec.step(state, h, keys, mask, torch.tensor([0, 2]))
        return torch.log_softmax(logits2, -1)[:, 1].sum() + (state.weights ** 2).sum()

    return _gc(fn, dec, seed, corrupt, max_coords)


def _case_fusion(seed, corrupt, max_coords=200):
    from .model import Fusion

    g = torch.Generator().manual_seed(seed)
    fusion = Fusion("trainable").double()
    with torch.no_grad():
        fusion.b.fill_(0.3)
    f1 = torch.randn(3, 4, generator=g, dtype=torch.float64, requires_grad=True)
    f2 = torch.randn(3, 4, generator=g, dtype=torch.float64, requires_grad=True)
    w = torch.randn(3, 4, generator=g, dtype=torch.float64)
    params = {"b": fusion.b, "f1": f1, "f2": f2}
    return _gc(lambda: (fusion(f1, f2) * w).sum() ** 2, params, seed, corrupt, max_coords)


def _case_ctc(seed, corrupt, max_coords=200):
    from .objectives import ctc_loss

    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(6, 4, generator=g, dtype=torch.float64, requires_grad=True)
    return _gc(lambda: ctc_loss(torch.log_softmax(logits, -1), [1, 2, 2]), {"logits": logits},
               seed, corrupt, max_coords)


def _case_hybrid(seed, corrupt, max_coords=200):
    """Desk-preset model on a 2-frame input with a 2-symbol vocabulary."""
    from .model import ModelConfig, build_model
    from .training import utterance_loss

    model = build_model(ModelConfig(vocab_size=2), seed=seed)
    g = torch.Generator().manual_seed(seed)
    fbank = torch.randn(1, 2, 80, generator=g, dtype=torch.float64)
    spec = torch.randn(1, 2, 201, generator=g, dtype=torch.float64)
    lengths = torch.tensor([2])

    def fn():
        return utterance_loss(model, fbank, spec, lengths, [[1]], ctc_weight=0.3)[0]

    return _gc(fn, model, seed, corrupt, max_coords)


GRAD_CASES = {
    "linear": _case_linear,
    "conv_pool": _case_conv_pool,
    "ligru": _case_ligru,
    "attention": _case_attention,
    "fusion": _case_fusion,
    "ctc": _case_ctc,
    "hybrid_desk": _case_hybrid,
}


def run_all(quick=False, corrupt=None, seed=0):
    suites = [
        ctc_oracle_suite(n_cases=40 if quick else 200, seed=seed),
        decode_oracle_suite(n_cases=5 if quick else 20, seed=seed),
        gradient_suite(seed=seed, corrupt=corrupt, max_coords=20 if quick else 200),
    ]
    return suites
