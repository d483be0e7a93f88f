import numpy as np
import pytest

from ctdrl import _kernels as kernels
from ctdrl._kernels import _fallback

native = pytest.importorskip(
    "ctdrl._kernels._native", reason="compiled kernels not built"
)


def test_backends_agree_on_quantile_huber():
    rng = np.random.default_rng(0)
    for _ in range(50):
        b = int(rng.integers(1, 5))
        m = int(rng.integers(1, 12))
        mp = int(rng.integers(1, 12))
        pred = np.ascontiguousarray(rng.normal(size=(b, m)) * 3)
        target = np.ascontiguousarray(rng.normal(size=(b, mp)) * 3)
        kappa = float(rng.uniform(0.2, 2.0))
        l_n, g_n = native.quantile_huber_batch(pred, target, kappa)
        l_p, g_p = _fallback.quantile_huber_batch(pred, target, kappa)
        assert l_n == pytest.approx(l_p, rel=1e-12, abs=1e-15)
        np.testing.assert_allclose(g_n, g_p, rtol=1e-12, atol=1e-15)


def test_backends_agree_on_wasserstein_sorted():
    rng = np.random.default_rng(1)
    for p in (1, 2):
        for _ in range(30):
            n = int(rng.integers(1, 200))
            a = np.sort(rng.normal(size=n))
            b = np.sort(rng.normal(size=n))
            w_n = native.wasserstein_sorted(a, b, p)
            w_p = _fallback.wasserstein_sorted(a, b, p)
            assert w_n == pytest.approx(w_p, rel=1e-12, abs=1e-15)


def test_wrapper_rejects_bad_kappa():
    with pytest.raises(ValueError):
        kernels.quantile_huber_batch(np.zeros((1, 2)), np.zeros((1, 2)), 0.0)
    with pytest.raises(ValueError):
        kernels.quantile_huber_batch(np.zeros((1, 2)), np.zeros((1, 2)), -1.0)


def test_wrapper_rejects_bad_shapes():
    with pytest.raises(ValueError):
        kernels.quantile_huber_batch(np.zeros((2, 3)), np.zeros((1, 3)), 1.0)
    with pytest.raises(ValueError):
        kernels.wasserstein_sorted(np.zeros(3), np.zeros(4), 1)


def test_wrapper_accepts_noncontiguous_input():
    base = np.arange(12.0).reshape(3, 4)
    loss, grad = kernels.quantile_huber_batch(base[:, ::2], base[:, 1::2], 1.0)
    ref_loss, ref_grad = _fallback.quantile_huber_batch(
        np.ascontiguousarray(base[:, ::2]), np.ascontiguousarray(base[:, 1::2]), 1.0
    )
    assert loss == pytest.approx(ref_loss, rel=1e-12)
    np.testing.assert_allclose(grad, ref_grad, rtol=1e-12)


def test_env_var_forces_python_backend():
    import subprocess
    import sys

    code = (
        "import ctdrl._kernels as k; import numpy as np; "
        "print(k.BACKEND); "
        "print(k.quantile_huber_batch(np.array([[0.0]]), np.array([[0.4]]), 1.0)[0])"
    )
    out = subprocess.run(
        [sys.executable, "-c", code],
        env={"CTDRL_PURE_PYTHON": "1", "PATH": "/usr/bin:/bin"},
        capture_output=True,
        text=True,
        check=True,
    )
    lines = out.stdout.strip().splitlines()
    assert lines[0] == "python"
    assert float(lines[1]) == pytest.approx(0.04)
