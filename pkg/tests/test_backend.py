import math

import numpy as np
import pytest

from _oracles import monte_carlo_iou, shapely_iou
from coopadapt import _numpyops, backend


def _random_boxes(rng, n, span=10.0):
    out = np.empty((n, 5))
    out[:, 0] = rng.uniform(-span, span, n)
    out[:, 1] = rng.uniform(-span, span, n)
    out[:, 2] = rng.uniform(0.5, 4.0, n)
    out[:, 3] = rng.uniform(0.5, 6.0, n)
    out[:, 4] = rng.uniform(-math.pi, math.pi, n)
    return out


def _fastops_or_skip():
    try:
        from coopadapt import _fastops
    except ImportError:
        pytest.skip("compiled backend not built")
    return _fastops


def test_im2col_backend_parity():
    fast = _fastops_or_skip()
    rng = np.random.default_rng(0)
    for shape in ((1, 1, 1), (3, 4, 5), (8, 7, 7), (16, 12, 9)):
        x = rng.normal(size=shape)
        np.testing.assert_array_equal(fast.im2col3(x), _numpyops.im2col3(x))


def test_iou_backend_parity():
    fast = _fastops_or_skip()
    rng = np.random.default_rng(1)
    a = _random_boxes(rng, 500, span=4.0)
    b = _random_boxes(rng, 500, span=4.0)
    np.testing.assert_allclose(
        fast.rotated_iou_pairs(a, b), _numpyops.rotated_iou_pairs(a, b), atol=1e-12
    )


@pytest.mark.parametrize("impl", ["numpy", "cython"])
def test_iou_matches_shapely_oracle(impl):
    fn = _numpyops.rotated_iou_pairs if impl == "numpy" else _fastops_or_skip().rotated_iou_pairs
    rng = np.random.default_rng(2)
    a = _random_boxes(rng, 300, span=3.0)
    b = _random_boxes(rng, 300, span=3.0)
    got = fn(a, b)
    want = np.array([shapely_iou(a[i], b[i]) for i in range(len(a))])
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_iou_unit_square_rotated_45_degrees():
    # Concentric unit squares, one rotated 45 deg: the overlap is a regular
    # octagon of area 2*sqrt(2)-2, so IoU = (2*sqrt(2)-2)/(2-(2*sqrt(2)-2)),
    # which simplifies to sqrt(2)/2.  Cross-checked by Monte Carlo below.
    inter = 2.0 * math.sqrt(2.0) - 2.0
    analytic = inter / (2.0 - inter)
    a = np.array([[0.0, 0.0, 1.0, 1.0, 0.0]])
    b = np.array([[0.0, 0.0, 1.0, 1.0, math.pi / 4.0]])
    got = float(backend.rotated_iou_pairs(a, b)[0])
    assert abs(analytic - math.sqrt(2.0) / 2.0) <= 1e-15
    assert abs(got - analytic) <= 1e-12
    assert abs(got - monte_carlo_iou(a[0], b[0])) <= 1e-3


def test_iou_degenerate_box_is_zero():
    a = np.array([[0.0, 0.0, 0.0, 2.0, 0.3]])
    b = np.array([[0.0, 0.0, 1.0, 2.0, 0.0]])
    assert backend.rotated_iou_pairs(a, b)[0] == 0.0
    assert backend.rotated_iou_pairs(b, a)[0] == 0.0


def test_active_backend_reports_a_known_name():
    assert backend.active_backend() in {"numpy", "cython"}
