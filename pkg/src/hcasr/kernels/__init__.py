"""Hot DP kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time. Set ``HCASR_NUMBA=0`` to force the
numpy path (useful when numba is unavailable or when debugging); both paths
expose identical signatures and agree to floating-point round-off.

Kernels
-------
ctc_forward_backward(log_probs, ext) -> (log_likelihood, grad)
    Log-space CTC forward/backward over the blank-extended label sequence
    ``ext``. ``grad`` is d(-log P)/d(log_probs). Blank is index 0.
ctc_prefix_extend(log_probs, r_n, r_b, last, tokens) -> (new_n, new_b, psi)
    One step of the CTC prefix-probability recursion for H hypotheses times
    K candidate tokens. ``last[h] < 0`` marks an empty prefix.
edit_ops(ref, hyp) -> (substitutions, deletions, insertions)
    Unit-cost Levenshtein counts. Among minimum-cost alignments the one with
    the fewest insertions plus deletions is taken, which pins down all three
    counts and makes them mirror exactly when ref and hyp are swapped.
"""

import os

import numpy as np

from . import _numpy

BACKEND = "numpy"

if os.environ.get("HCASR_NUMBA", "1") != "0":
    try:
        from . import _numba as _impl

        BACKEND = "numba"
    except ImportError:  # pragma: no cover - numba missing
        _impl = _numpy
else:
    _impl = _numpy


def ctc_forward_backward(log_probs, ext):
    log_probs = np.ascontiguousarray(log_probs, dtype=np.float64)
    ext = np.ascontiguousarray(ext, dtype=np.int64)
    log_lik, grad = _impl.ctc_forward_backward(log_probs, ext)
    return float(log_lik), grad


def ctc_prefix_extend(log_probs, r_n, r_b, last, tokens):
    return _impl.ctc_prefix_extend(
        np.ascontiguousarray(log_probs, dtype=np.float64),
        np.ascontiguousarray(r_n, dtype=np.float64),
        np.ascontiguousarray(r_b, dtype=np.float64),
        np.ascontiguousarray(last, dtype=np.int64),
        np.ascontiguousarray(tokens, dtype=np.int64),
    )


def edit_ops(ref, hyp):
    s, d, i = _impl.edit_ops(
        np.ascontiguousarray(ref, dtype=np.int64), np.ascontiguousarray(hyp, dtype=np.int64)
    )
    return int(s), int(d), int(i)


__all__ = ["BACKEND", "ctc_forward_backward", "ctc_prefix_extend", "edit_ops"]
