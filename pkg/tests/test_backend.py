import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kband import _backend, _pykernels

ckernels = pytest.importorskip("kband._ckernels")


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), cin=st.integers(1, 4), cout=st.integers(1, 4),
       h=st.integers(1, 12), w=st.integers(1, 12), dtype=st.sampled_from([np.float32, np.float64]))
def test_conv_parity(seed, cin, cout, h, w, dtype):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(cin, h, w)).astype(dtype)
    k = rng.normal(size=(cout, cin, 3, 3)).astype(dtype)
    b = rng.normal(size=cout).astype(dtype)
    g = rng.normal(size=(cout, h, w)).astype(dtype)
    tol = 1e-12 if dtype == np.float64 else 1e-4
    np.testing.assert_allclose(ckernels.conv3x3_forward(x, k, b), _pykernels.conv3x3_forward(x, k, b),
                               rtol=tol, atol=tol)
    for a, c in zip(ckernels.conv3x3_backward(x, k, g), _pykernels.conv3x3_backward(x, k, g)):
        np.testing.assert_allclose(a, c, rtol=tol, atol=tol)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), h=st.integers(4, 24), w=st.integers(4, 24))
def test_poisson_parity(seed, h, w):
    rng = np.random.default_rng(seed)
    radius = rng.uniform(0.5, 3.0, size=(h, w))
    order = rng.permutation(h * w).astype(np.int64)
    init = (rng.random((h, w)) < 0.05).astype(np.uint8)
    np.testing.assert_array_equal(ckernels.poisson_disc_2d(radius, order, init),
                                  _pykernels.poisson_disc_2d(radius, order, init))
    r1 = rng.uniform(0.5, 3.0, size=w)
    o1 = rng.permutation(w).astype(np.int64)
    i1 = np.zeros(w, np.uint8)
    np.testing.assert_array_equal(ckernels.poisson_disc_1d(r1, o1, i1), _pykernels.poisson_disc_1d(r1, o1, i1))


def test_env_forces_fallback():
    code = "import kband._backend as b; print(b.BACKEND)"
    env = dict(os.environ, KBAND_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
    assert _backend.BACKEND in ("cython", "python")


def test_masks_identical_across_backends():
    code = ("import numpy as np, kband.grid as g; "
            "print(g.vd_mask_2d((32, 32), 3, (4, 4), 2.0, 5).bits.tobytes().hex())")
    outs = []
    for flag in ("0", "1"):
        env = dict(os.environ, KBAND_PURE_PYTHON=flag)
        outs.append(subprocess.run([sys.executable, "-c", code], env=env, capture_output=True,
                                   text=True, check=True).stdout)
    assert outs[0] == outs[1]
