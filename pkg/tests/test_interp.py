import numpy as np
import pytest

from unitax.interp import bilinear_adjoint, bilinear_upsample, interp_matrix, resize


def scalar_bilinear(x, out_h, out_w):
    """Half-pixel-centre bilinear interpolation written out pixel by pixel."""
    c, h, w = x.shape
    out = np.zeros((c, out_h, out_w))
    for i in range(out_h):
        sy = max((i + 0.5) * h / out_h - 0.5, 0.0)
        y0 = min(int(np.floor(sy)), h - 1)
        y1 = min(y0 + 1, h - 1)
        wy = sy - y0
        for j in range(out_w):
            sx = max((j + 0.5) * w / out_w - 0.5, 0.0)
            x0 = min(int(np.floor(sx)), w - 1)
            x1 = min(x0 + 1, w - 1)
            wx = sx - x0
            out[:, i, j] = (
                (1 - wy) * (1 - wx) * x[:, y0, x0] + (1 - wy) * wx * x[:, y0, x1]
                + wy * (1 - wx) * x[:, y1, x0] + wy * wx * x[:, y1, x1]
            )
    return out


def test_constant_preserved():
    x = np.full((2, 3, 4), 3.5)
    np.testing.assert_allclose(bilinear_upsample(x), 3.5, rtol=0, atol=1e-12)


def test_single_pixel():
    out = bilinear_upsample(np.array([[[1.25]]]))
    assert out.shape == (1, 8, 8)
    np.testing.assert_array_equal(out, 1.25)


def test_matches_scalar_formula(rng):
    x = rng.normal(size=(1, 2, 2))
    np.testing.assert_allclose(bilinear_upsample(x), scalar_bilinear(x, 16, 16), atol=1e-12)


@pytest.mark.parametrize("shape,out", [((2, 3, 5), (7, 4)), ((1, 4, 4), (4, 9)), ((3, 6, 2), (24, 16))])
def test_resize_matches_scalar_formula(rng, shape, out):
    x = rng.normal(size=shape)
    np.testing.assert_allclose(resize(x, *out), scalar_bilinear(x, *out), atol=1e-12)


def test_matches_torch(rng):
    torch = pytest.importorskip("torch")
    x = rng.normal(size=(2, 3, 5))
    ref = torch.nn.functional.interpolate(
        torch.from_numpy(x)[None], scale_factor=8, mode="bilinear", align_corners=False
    )[0].numpy()
    np.testing.assert_allclose(bilinear_upsample(x), ref, atol=1e-12)


def test_interp_rows_sum_to_one():
    for n_in, n_out in [(1, 8), (3, 24), (7, 5), (10, 10)]:
        np.testing.assert_allclose(interp_matrix(n_in, n_out).sum(axis=1), 1.0)


def test_adjoint_of_zero():
    np.testing.assert_array_equal(bilinear_adjoint(np.zeros((2, 16, 24))), 0)


def test_adjoint_dot_product(rng):
    for _ in range(20):
        x = rng.normal(size=(2, 3, 3))
        g = rng.normal(size=(2, 24, 24))
        lhs = np.vdot(bilinear_upsample(x), g)
        rhs = np.vdot(x, bilinear_adjoint(g))
        assert lhs == pytest.approx(rhs, rel=1e-6)


def test_adjoint_matrix_is_transpose():
    h = w = 2
    n_in, n_out = h * w, 64 * h * w
    up = np.zeros((n_out, n_in))
    adj = np.zeros((n_in, n_out))
    for k in range(n_in):
        e = np.zeros(n_in)
        e[k] = 1
        up[:, k] = bilinear_upsample(e.reshape(1, h, w)).ravel()
    for k in range(n_out):
        e = np.zeros(n_out)
        e[k] = 1
        adj[:, k] = bilinear_adjoint(e.reshape(1, 8 * h, 8 * w)).ravel()
    np.testing.assert_allclose(adj, up.T, atol=1e-15)


def test_adjoint_rejects_non_multiple():
    with pytest.raises(ValueError):
        bilinear_adjoint(np.zeros((1, 10, 16)))
