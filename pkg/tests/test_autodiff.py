import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from kband import autodiff as ad
from kband import operators as op
from kband.autodiff import Architecture, ModelParams, UnrollConfig
from kband.errors import CorruptRecord, InvalidArgument, UnsupportedVersion
from kband.operators import DCConfig


def _cplx(rng, *shape):
    return rng.normal(size=shape) + 1j * rng.normal(size=shape)


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def _mask(rng, shape, p=0.4):
    return (rng.random(shape) < p).astype(np.uint8)


def test_zero_params_residual_identity():
    rng = np.random.default_rng(0)
    x = _cplx(rng, 12, 10)
    p = ad.zero_params(Architecture(3, 4))
    np.testing.assert_array_equal(ad.cnn_forward(p, x), x)
    q = ad.zero_params(Architecture(3, 4, residual=False))
    assert not np.any(ad.cnn_forward(q, x))


def test_identity_kernel():
    arch = Architecture(1, 2, activation="linear", residual=False)
    w = np.zeros((2, 2, 3, 3))
    w[0, 0, 1, 1] = w[1, 1, 1, 1] = 1
    p = ModelParams(arch, np.concatenate([w.ravel(), np.zeros(2)]))
    x = _cplx(np.random.default_rng(1), 8, 8)
    np.testing.assert_allclose(ad.cnn_forward(p, x), x, atol=1e-15)


def _direct_conv(x, w, b):
    cin, h, wd = x.shape
    pad = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((w.shape[0], h, wd))
    for o in range(w.shape[0]):
        out[o] = b[o]
        for i in range(cin):
            for dy in range(3):
                for dx in range(3):
                    out[o] += w[o, i, dy, dx] * pad[i, dy:dy + h, dx:dx + wd]
    return out


def test_conv_against_loops():
    rng = np.random.default_rng(2)
    x, w, b = rng.normal(size=(3, 7, 9)), rng.normal(size=(4, 3, 3, 3)), rng.normal(size=4)
    out = ad.conv3x3(ad.constant(x), ad.constant(w), ad.constant(b)).value
    np.testing.assert_allclose(out, _direct_conv(x, w, b), atol=1e-12)


def test_cnn_shape_error():
    p = ad.zero_params(Architecture(2, 4))
    with pytest.raises(InvalidArgument):
        ad.cnn_forward(p, np.zeros((2, 8, 8), complex))


def test_unrolled_closed_form():
    rng = np.random.default_rng(3)
    y = _cplx(rng, 16, 16)
    p = ad.zero_params(Architecture(2, 4, residual=False))
    for eta in (0.1, 1.0, 7.0):
        out = ad.unrolled_forward(p, y, np.ones((16, 16)), UnrollConfig(1, eta))
        np.testing.assert_allclose(out, op.ifft2c(y) / (1 + eta), atol=1e-12)


def test_unrolled_large_eta_returns_x0():
    rng = np.random.default_rng(4)
    mask = _mask(rng, (16, 16))
    y = op.forward_op(_cplx(rng, 16, 16), mask)
    p = ad.zero_params(Architecture(2, 4))
    out = ad.unrolled_forward(p, y, mask, UnrollConfig(3, 1e9))
    assert _rel(out, op.adjoint_op(y, mask)) <= 1e-7


def test_unrolled_ignores_unset_pixels():
    rng = np.random.default_rng(5)
    mask = _mask(rng, (16, 16))
    y = _cplx(rng, 16, 16)
    junk = np.where(mask != 0, y, _cplx(rng, 16, 16) * 100)
    p = ad.init_params(Architecture(2, 4), seed=1)
    cfg = UnrollConfig(2, 0.5)
    np.testing.assert_array_equal(ad.unrolled_forward(p, np.where(mask != 0, y, 0), mask, cfg),
                                  ad.unrolled_forward(p, junk, mask, cfg))


def _loss_builder(arch, y, mask, target, lmask, cfg, kind):
    def build(theta):
        x = ad.unrolled_node(theta, arch, y, mask, cfg)
        return ad.kspace_loss(ad.fft2c_node(x), target, lmask, kind=kind)
    return build


def _fd(params, build, step=1e-5):
    return ad.finite_diff_grad(params, lambda v: float(build(ad.constant(v)).value), step)


@pytest.mark.parametrize("kind", ["l2", "l1"])
def test_grad_matches_finite_differences(kind):
    rng = np.random.default_rng(6)
    arch = Architecture(2, 4)
    p = ad.init_params(arch, seed=3)
    mask = _mask(rng, (16, 16))
    y = op.forward_op(_cplx(rng, 16, 16), mask)
    target = _cplx(rng, 16, 16)
    build = _loss_builder(arch, y, mask, target, 1 - mask, UnrollConfig(2, 0.8), kind)
    _, g = ad.value_and_grad(p, build)
    fd = _fd(p, build)
    assert _rel(g, fd) <= 1e-4


def test_component_fd_small():
    rng = np.random.default_rng(7)
    arch = Architecture(2, 2)
    p = ad.init_params(arch, seed=0)
    mask = _mask(rng, (8, 8))
    y = op.forward_op(_cplx(rng, 8, 8), mask)
    build = _loss_builder(arch, y, mask, _cplx(rng, 8, 8), np.ones((8, 8)), UnrollConfig(1, 1.0), "l2")
    _, g = ad.value_and_grad(p, build)
    fd = _fd(p, build)
    big = np.abs(fd) > 1e-6 * np.abs(fd).max()
    assert np.all(np.abs(g[big] - fd[big]) <= 1e-4 * np.abs(fd[big]) + 1e-8)


def test_dc_node_vjp_black_box():
    rng = np.random.default_rng(8)
    mask = _mask(rng, (10, 10))
    maps = op.normalize_maps(_cplx(rng, 2, 10, 10))
    y = op.forward_op(_cplx(rng, 10, 10), mask, maps)
    cfg = DCConfig(eta=0.6, cg_tolerance=1e-13)
    z0, c = _cplx(rng, 10, 10), _cplx(rng, 10, 10)

    def f(z):
        return np.real(np.vdot(c, op.dc_solve(y, z, mask, cfg, maps)))

    z = ad.constant(z0)
    out = ad.dc_node(z, y, mask, cfg, maps)
    g = ad.backward(out, z, seed=c)
    h = 1e-6
    fd = np.zeros_like(z0)
    for idx in np.ndindex(z0.shape):
        for unit in (1, 1j):
            e = np.zeros_like(z0)
            e[idx] = unit * h
            d = (f(z0 + e) - f(z0 - e)) / (2 * h)
            fd[idx] += d if unit == 1 else 1j * d
    assert _rel(g, fd) <= 1e-6


def test_zero_loss_and_linearity():
    rng = np.random.default_rng(9)
    arch = Architecture(2, 4)
    p = ad.init_params(arch, seed=2)
    theta = ad.constant(p.values)
    unrelated = ad.constant(np.zeros(3))
    assert not np.any(ad.backward(ad.scale(unrelated, 1.0), theta, seed=np.ones(3)))
    mask = _mask(rng, (8, 8))
    y = op.forward_op(_cplx(rng, 8, 8), mask)
    build = _loss_builder(arch, y, mask, _cplx(rng, 8, 8), 1 - mask, UnrollConfig(1), "l1")
    _, g1 = ad.value_and_grad(p, build)
    _, g2 = ad.value_and_grad(p, lambda t: ad.scale(build(t), 2.0))
    np.testing.assert_allclose(g2, 2 * g1, rtol=1e-12, atol=1e-15)
    zero = ad.kspace_loss(ad.fft2c_node(ad.unrolled_node(theta, arch, y, mask, UnrollConfig(1))),
                          0, np.zeros((8, 8)))
    assert float(zero.value) == 0
    assert not np.any(ad.backward(zero, theta))


def test_shared_equals_sum_of_unshared():
    rng = np.random.default_rng(10)
    shared = Architecture(2, 3)
    unshared = Architecture(2, 3, n_blocks=3)
    p = ad.init_params(shared, seed=5)
    tied = ModelParams(unshared, np.tile(p.values, 3))
    mask = _mask(rng, (8, 8))
    y = op.forward_op(_cplx(rng, 8, 8), mask)
    t = _cplx(rng, 8, 8)
    l_s, g_s = ad.value_and_grad(p, _loss_builder(shared, y, mask, t, 1 - mask, UnrollConfig(3), "l2"))
    l_u, g_u = ad.value_and_grad(tied, _loss_builder(unshared, y, mask, t, 1 - mask,
                                                     UnrollConfig(3, weight_sharing=False), "l2"))
    assert abs(l_s - l_u) <= 1e-12 * abs(l_s)
    np.testing.assert_allclose(g_u.reshape(3, -1).sum(axis=0), g_s, rtol=1e-10, atol=1e-14)


def test_block_count_mismatch():
    p = ad.zero_params(Architecture(2, 2, n_blocks=2))
    with pytest.raises(InvalidArgument):
        ad.unrolled_forward(p, np.zeros((4, 4), complex), np.ones((4, 4)), UnrollConfig(2))


def test_l1_sign_zero():
    x = ad.constant(np.array([[0j, 1 + 0j]]))
    loss = ad.kspace_loss(x, np.zeros((1, 2)), np.ones((1, 2)), kind="l1")
    np.testing.assert_array_equal(ad.backward(loss, x), [[0, 1]])


def test_finite_diff_quadratic():
    arch = Architecture(1, 1)
    v = np.random.default_rng(0).normal(size=arch.n_values)
    g = ad.finite_diff_grad(ModelParams(arch, v), lambda t: float(t @ t), 1e-5)
    np.testing.assert_allclose(g, 2 * v, atol=1e-8)
    with pytest.raises(InvalidArgument):
        ad.finite_diff_grad(ModelParams(arch, v), lambda t: 0.0, 0.0)


def test_init_determinism_and_variance():
    arch = Architecture(3, 24)
    a, b, c = ad.init_params(arch, 7), ad.init_params(arch, 7), ad.init_params(arch, 8)
    np.testing.assert_array_equal(a.values, b.values)
    assert np.any(a.values != c.values)
    # middle layer: fan_in = 24 * 9; more than 10k kernel entries
    off = 2 * 24 * 9 + 24
    n = 24 * 24 * 9
    w = a.values[off:off + n]
    assert abs(w.var() / (2 / (24 * 9)) - 1) <= 0.3
    assert not np.any(a.values[off + n:off + n + 24])


def test_params_validation():
    arch = Architecture(2, 2)
    with pytest.raises(InvalidArgument):
        ModelParams(arch, np.zeros(3))
    with pytest.raises(InvalidArgument):
        ModelParams(arch, np.full(arch.n_values, np.nan))
    with pytest.raises(InvalidArgument):
        Architecture(0, 2)
    with pytest.raises(InvalidArgument):
        Architecture(2, 2, activation="tanh")
    with pytest.raises(InvalidArgument):
        UnrollConfig(0)
    with pytest.raises(InvalidArgument):
        UnrollConfig(1, eta=0)


def test_checkpoint_roundtrip(tmp_path):
    p = ad.init_params(Architecture(2, 3, residual=False), seed=11)
    path = ad.save_checkpoint(p, tmp_path / "model")
    q = ad.load_checkpoint(path)
    assert q.arch == p.arch and q.seed == 11
    np.testing.assert_array_equal(q.values, p.values)
    assert q.checksum() == p.checksum()


def test_checkpoint_corruption(tmp_path):
    p = ad.init_params(Architecture(2, 3), seed=0)
    path = ad.save_checkpoint(p, tmp_path / "model")
    blob = bytearray((tmp_path / "model.bin").read_bytes())
    blob[5] ^= 1
    (tmp_path / "model.bin").write_bytes(bytes(blob))
    with pytest.raises(CorruptRecord):
        ad.load_checkpoint(path)
    text = path.read_text().replace("KBND-CKPT-1", "KBND-CKPT-9")
    path.write_text(text)
    with pytest.raises(UnsupportedVersion):
        ad.load_checkpoint(path)


@settings(max_examples=10, deadline=None)
@given(seed=st.integers(0, 2**31 - 1), activation=st.sampled_from(["relu", "linear"]),
       residual=st.booleans())
def test_grad_fd_property(seed, activation, residual):
    rng = np.random.default_rng(seed)
    arch = Architecture(2, 2, activation=activation, residual=residual)
    p = ad.init_params(arch, seed=seed)
    mask = _mask(rng, (6, 6), 0.5)
    y = op.forward_op(_cplx(rng, 6, 6), mask)
    build = _loss_builder(arch, y, mask, _cplx(rng, 6, 6), np.ones((6, 6)), UnrollConfig(2, 1.3), "l2")
    _, g = ad.value_and_grad(p, build)
    fd = _fd(p, build)
    assert np.linalg.norm(g - fd) <= 1e-4 * np.linalg.norm(fd) + 1e-9
