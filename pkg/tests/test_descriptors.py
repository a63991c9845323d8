import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from retinal_landmarks import InvalidInputError
from retinal_landmarks.descriptors import BLOCK_DIM, N_BINS, WINDOW_SHAPE, cell_histograms, gradients, hog


def test_length_and_geometry():
    d = hog(np.zeros(WINDOW_SHAPE))
    assert (d.blocks_x, d.blocks_y) == (13, 14)
    assert len(d) == 13 * 14 * 36 == 6552
    assert d.blocks().shape == (182, BLOCK_DIM)


def test_constant_window_is_zero():
    assert not hog(np.full(WINDOW_SHAPE, 0.37)).values.any()


@pytest.mark.parametrize("shape", [(112, 122), (121, 112), (122, 112, 3)])
def test_wrong_size_rejected(shape):
    with pytest.raises(InvalidInputError):
        hog(np.zeros(shape))


def test_vertical_step_edge():
    window = np.zeros(WINDOW_SHAPE)
    window[:, 56:] = 1.0
    d = hog(window)
    blocks = d.blocks().reshape(d.blocks_y, d.blocks_x, 4, N_BINS)
    # the horizontal gradient has orientation 0 degrees: all mass in bin 0
    assert blocks[..., 1:].max() == 0.0
    assert blocks[..., 0].max() > 0.0
    # columns 55 and 56 carry the gradient; cells 6 and 7 -> blocks 5..7 are the only nonzero ones
    touched = np.flatnonzero(blocks.reshape(d.blocks_y, d.blocks_x, -1).any(axis=(0, 2)))
    assert touched.tolist() == [5, 6, 7]


def test_block_normalisation():
    rng = np.random.default_rng(4)
    window = rng.random(WINDOW_SHAPE)
    window[:40, :40] = 0.5
    norms = np.linalg.norm(hog(window).blocks(), axis=1)
    for n in norms:
        assert n == pytest.approx(1.0, abs=1e-6) or n == 0.0
    assert (norms == 0).any()


def test_gradients_are_centred_differences():
    img = np.arange(20.0).reshape(4, 5) ** 2
    gx, gy = gradients(img)
    assert gx[2, 2] == img[2, 3] - img[2, 1]
    assert gy[2, 2] == img[3, 2] - img[1, 2]
    assert not gx[:, 0].any() and not gy[0].any()


def test_orientation_vote_split():
    # 10 degree gradient: half the magnitude to bin 0, half to bin 1
    y, x = np.mgrid[0:24, 0:24].astype(float)
    angle = np.radians(10.0)
    img = x * np.cos(angle) + y * np.sin(angle)
    cell = cell_histograms(img)[1, 1]
    assert cell[0] == pytest.approx(cell[1], rel=1e-9)
    assert cell[2:].sum() == pytest.approx(0.0, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([0.5, 2.0]), st.floats(-0.5, 0.5))
def test_gain_and_bias_invariance(seed, gain, bias):
    window = np.random.default_rng(seed).random(WINDOW_SHAPE)
    ref = hog(window).values
    np.testing.assert_allclose(hog(gain * window).values, ref, atol=1e-6)
    np.testing.assert_allclose(hog(window + bias).values, ref, atol=1e-6)


def test_deterministic():
    window = np.random.default_rng(1).random(WINDOW_SHAPE)
    assert hog(window).values.tobytes() == hog(window.copy()).values.tobytes()
