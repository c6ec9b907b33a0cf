import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from ctxtrack import ContextTracker
from ctxtrack.synthetic import SequenceSpec, generate_sequence, make_pool

SMALL = dict(steps=2, batch_size=2, depth=3, insertion_layers=(1, 2, 3), d_enc=16)


@pytest.fixture(scope="module")
def pool():
    return make_pool("easy", 3, length=15, seed=2)


def test_params_round_trip():
    est = ContextTracker(**SMALL)
    assert est.get_params()["depth"] == 3
    twin = clone(est)
    assert twin.get_params() == est.get_params()
    est.set_params(n_context=2)
    assert est.run_config().model.n_context == 2


def test_unfitted():
    seq = generate_sequence(SequenceSpec(length=3))
    with pytest.raises(NotFittedError):
        ContextTracker().predict(seq)


def test_fit_predict_score(pool):
    est = ContextTracker(**SMALL).fit(pool)
    assert est.loss_curve_.shape == (2,)
    boxes = est.predict(pool[0])
    assert boxes.shape == (15, 4)
    np.testing.assert_array_equal(boxes[0], pool[0].boxes[0])
    assert len(est.predict(pool[:2])) == 2
    assert 0.0 <= est.score(pool[:2]) <= 1.0


def test_fit_is_deterministic(pool):
    a = ContextTracker(**SMALL).fit(pool)
    b = ContextTracker(**SMALL).fit(pool)
    np.testing.assert_array_equal(a.loss_curve_, b.loss_curve_)
    np.testing.assert_array_equal(a.predict(pool[1]), b.predict(pool[1]))


def test_bad_input():
    with pytest.raises(TypeError):
        ContextTracker(**SMALL).fit([np.zeros((3, 4))])
    with pytest.raises(ValueError):
        ContextTracker(**SMALL).fit([])
