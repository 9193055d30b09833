import numpy as np
import pytest

from quadtrack import gradcheck as gc

CHEAP = [name for name, _ in gc.CHECKS if not name.startswith("train_step")]


@pytest.mark.parametrize("bits", [64, 32])
def test_component_checks_pass(bits):
    results = gc.run_suite(seed=0, bits=bits, names=CHEAP)
    assert [r.name for r in results] == CHEAP
    for r in results:
        assert r.passed, f"{r.name}: {r.error:.3e}"


def test_component_table_is_reproducible():
    a = gc.format_table(gc.run_suite(seed=7, names=CHEAP), 64)
    b = gc.format_table(gc.run_suite(seed=7, names=CHEAP), 64)
    assert a == b and a.count("PASS") == len(CHEAP)


def test_seed_changes_inputs():
    a = gc.run_suite(seed=1, names=["conv2d"])[0].error
    b = gc.run_suite(seed=2, names=["conv2d"])[0].error
    assert a != b


def test_check_result_threshold():
    assert gc.CheckResult("x", 1e-7, 1e-6).passed
    assert not gc.CheckResult("x", 2e-6, 1e-6).passed
    assert not gc.CheckResult("x", float("nan"), 1e-6).passed


def test_wrong_gradient_is_caught():
    rng = np.random.default_rng(0)
    x = rng.standard_normal(10)
    numeric = gc._fd(lambda t: float(np.sum(t ** 3)), x, 1e-6)
    assert gc._cmp(3 * x ** 2, numeric) < 1e-8
    assert gc._cmp(2 * x ** 2, numeric) > 1e-2


def test_bad_bits_rejected():
    with pytest.raises(ValueError):
        gc.run_suite(bits=16)


def test_training_step_check_passes():
    results = gc.run_suite(seed=0, names=["train_step_sampled", "train_step_direction"])
    for r in results:
        assert r.passed, f"{r.name}: {r.error:.3e}"
