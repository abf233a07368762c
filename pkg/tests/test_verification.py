import math

import numpy as np
import pytest
import torch

from hcasr.errors import VerificationError
from hcasr.verification import (
    GRAD_CASES,
    _seeded,
    all_sequences,
    collapse,
    ctc_bruteforce,
    ctc_oracle_suite,
    decode_oracle_suite,
    exhaustive_decode,
    grad_check,
    random_decode_case,
    rel_error,
)


def test_finite_difference_of_square():
    x = torch.tensor([3.0], dtype=torch.float64, requires_grad=True)
    rep = grad_check(lambda: (x**2).sum(), {"x": x})
    assert rep.passed and rep.within_resolution
    assert rep.max_rel_error["x"] <= 1e-7


def test_constant_function_has_zero_gradient():
    x = torch.tensor([1.0, 2.0], dtype=torch.float64, requires_grad=True)
    rep = grad_check(lambda: x.sum() * 0 + 5.0, {"x": x})
    assert rep.passed and rep.worst == 0.0


def test_corrupted_gradient_is_caught():
    x = torch.tensor([0.5, -1.5], dtype=torch.float64, requires_grad=True)
    rep = grad_check(lambda: torch.sin(x).sum(), {"x": x}, corrupt=1.01)
    assert not rep.passed and not rep.within_resolution


def test_nonfinite_base_point():
    x = torch.tensor([0.0], dtype=torch.float64, requires_grad=True)
    rep = grad_check(lambda: torch.log(x).sum(), {"x": x})
    assert rep.failure is not None and not rep.passed


def test_rel_error_guard():
    assert rel_error(0.0, 0.0) == 0.0
    assert rel_error(1.0, 1.1) == pytest.approx(0.1 / 1.1)


def test_collapse_and_bruteforce():
    assert collapse([0, 1, 1, 0, 1, 2, 2, 0]) == (1, 1, 2)
    lp = np.full((2, 2), math.log(0.5))
    assert ctc_bruteforce(lp, [1]) == pytest.approx(math.log(0.75))
    assert ctc_bruteforce(lp, [1, 1]) == -math.inf


def test_all_sequences_count():
    assert len(list(all_sequences(3, 2))) == 1 + 3 + 9


def test_enumeration_limit():
    model, h, lm, _ = random_decode_case(np.random.default_rng(0), 0)
    with pytest.raises(VerificationError):
        exhaustive_decode(h, model, lm, 0.3, 0.0, max_len=40)


def test_ctc_oracle_suite_small():
    res = ctc_oracle_suite(n_cases=20, seed=3)
    assert res.passed and res.cases == 20


def test_decode_oracle_suite_small():
    res = decode_oracle_suite(n_cases=3, seed=1)
    assert res.passed, res.detail


@pytest.mark.parametrize("name", ["linear", "conv_pool", "fusion", "ctc"])
def test_cheap_gradient_cases_pass(name):
    rep = _seeded(GRAD_CASES[name], 0, None, 30)
    assert rep.passed, rep.max_rel_error
