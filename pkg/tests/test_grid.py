import numpy as np
import pytest

from pwl.grid import Grid


def test_spacing_and_axis():
    g = Grid(2, 12.0, 48)
    assert g.spacing == 0.25
    assert g.axis.shape == (48,)
    # cell centers are symmetric about the origin
    np.testing.assert_allclose(g.axis, -g.axis[::-1], atol=1e-14)
    assert g.axis[0] == pytest.approx(-6.0 + 0.125)


def test_centers_shape():
    g = Grid(3, 6.0, 12)
    assert g.centers.shape == (12, 12, 12, 3)
    assert g.n_cells == 12**3
    assert g.shape == (12, 12, 12)


def test_contains():
    g = Grid(2, 10.0, 10)
    assert g.contains([4.9, -4.9])
    assert not g.contains([5.1, 0.0])


def test_cell_index_round_trip():
    g = Grid(2, 12.0, 48)
    idx = g.cell_index([1.3, -2.7])
    center = g.centers[idx]
    assert np.max(np.abs(center - [1.3, -2.7])) <= 0.5 * g.spacing + 1e-12
    assert g.flat_index(idx) == idx[0] * 48 + idx[1]


def test_periodic_wrap_and_displacement():
    g = Grid(1, 8.0, 16, periodic=True)
    np.testing.assert_allclose(g.wrap([4.5]), [-3.5])
    # shortest representative goes around the seam
    np.testing.assert_allclose(g.displacement([3.5], [-3.5]), [1.0])
    assert g.cell_index([4.25]) == g.cell_index([-3.75])


def test_non_periodic_wrap_is_identity():
    g = Grid(1, 8.0, 16)
    np.testing.assert_allclose(g.wrap([4.5]), [4.5])
    np.testing.assert_allclose(g.displacement([3.5], [-3.5]), [-7.0])


def test_validation():
    with pytest.raises(ValueError):
        Grid(4, 1.0, 16)
    with pytest.raises(ValueError):
        Grid(2, 1.0, 4)
    with pytest.raises(ValueError):
        Grid(2, -1.0, 16)
