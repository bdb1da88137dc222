import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from noopdc.dc import (
    batch_distances,
    class_distances,
    classify_ensemble,
    instability_probe,
    predict_from_distances,
)
from noopdc.datasets import gen_shapes
from noopdc.diffusion import Denoiser
from noopdc.ndgrad import Tensor


class OracleModel:
    """Returns the reference noise exactly for one class and noise + 1 for the others."""

    dtype = np.float64

    def __init__(self, eps, good_class):
        self.eps = np.asarray(eps)
        self.good = good_class

    def __call__(self, x, c, t, class_offsets=None):
        k = len(c) // len(self.eps)
        out = np.repeat(self.eps, k, axis=0) + (np.asarray(c) != self.good)[:, None, None, None]
        return Tensor(out)


class CountingModel:
    def __init__(self, inner):
        self.inner = inner
        self.rows = 0
        self.dtype = inner.dtype

    def __call__(self, x, c, t, class_offsets=None):
        self.rows += x.shape[0]
        return self.inner(x, c, t, class_offsets)


@pytest.fixture(scope="module")
def probe_images():
    ds = gen_shapes(12, seed=21)
    return ds.nchw(), ds.labels


def test_oracle_model_prediction(sched, rng):
    x0 = rng.normal(size=(1, 4, 4))
    eps = rng.normal(size=(1, 4, 4))
    scores = class_distances(OracleModel(eps[None], 2), sched, x0, 500, eps, range(4))
    assert scores.predicted == 2
    assert scores.distances[2] == 0
    assert np.all(scores.distances[[0, 1, 3]] == 16)


def test_class_permutation_equivariance(trained_small, sched, probe_images, rng):
    model, _ = trained_small
    x = probe_images[0][:1][0]
    eps = rng.standard_normal(x.shape).astype(np.float32)
    base = class_distances(model, sched, x, 500, eps, [0, 1, 2, 3])
    perm = [2, 0, 3, 1]
    permuted = class_distances(model, sched, x, 500, eps, perm)
    assert permuted.distances.tobytes() == base.distances[perm].tobytes()
    assert perm[permuted.predicted] == base.predicted


def test_per_class_equals_batched_bitwise(trained_small, sched, probe_images, rng):
    model, _ = trained_small
    x = probe_images[0][3]
    eps = rng.standard_normal(x.shape).astype(np.float32)
    one_by_one = class_distances(model, sched, x, 500, eps, range(4)).distances
    batched = batch_distances(model, sched, x[None], 500, eps[None], range(4))[0]
    assert one_by_one.tobytes() == batched.tobytes()


def test_class_distances_errors(trained_small, sched):
    model, _ = trained_small
    x = np.zeros((1, 16, 16), np.float32)
    with pytest.raises(ValueError):
        class_distances(model, sched, x, 500, x, [])
    with pytest.raises(ValueError):
        class_distances(model, sched, x, 500, np.zeros((1, 8, 8), np.float32), [0])


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.integers(1, 8), elements=st.floats(0, 1e6)), st.floats(-1e3, 1e3))
def test_argmin_shift_invariance_and_totality(d, c):
    pred = predict_from_distances(d)
    assert np.ndim(pred) == 0 and 0 <= pred < len(d)
    assert predict_from_distances(d + c) == pred or np.isclose(d[predict_from_distances(d + c)], d[pred])
    assert d[pred] == d.min() and np.all(d[:pred] > d.min())


def test_tie_breaks_to_lowest_index():
    assert predict_from_distances(np.array([3.0, 1.0, 1.0, 2.0])) == 1


def test_ensemble_of_repeats_equals_single(trained_small, sched, probe_images, rng):
    model, _ = trained_small
    x = probe_images[0][:6]
    eps = rng.standard_normal(x.shape).astype(np.float32)
    single = batch_distances(model, sched, x, 500, eps, range(4))
    preds, mean = classify_ensemble(model, sched, x, [500], [eps, eps, eps], range(4))
    assert np.array_equal(preds, predict_from_distances(single))
    one_pred, one_mean = classify_ensemble(model, sched, x, [500], [eps], range(4))
    assert np.array_equal(one_mean, single.astype(np.float64))


def test_timestep_ensemble_costs_five_passes(trained_small, sched, probe_images, rng):
    model, _ = trained_small
    counting = CountingModel(model)
    x = probe_images[0][:2]
    eps = rng.standard_normal(x.shape).astype(np.float32)
    preds, _ = classify_ensemble(counting, sched, x, [300, 400, 500, 600, 700], [eps], range(4))
    assert counting.rows == 5 * 4 * 2
    assert preds.shape == (2,)


def test_ensemble_empty_lists(trained_small, sched, probe_images):
    model, _ = trained_small
    with pytest.raises(ValueError):
        classify_ensemble(model, sched, probe_images[0][:1], [], [np.zeros((1, 1, 16, 16))], range(4))
    with pytest.raises(ValueError):
        classify_ensemble(model, sched, probe_images[0][:1], [500], [], range(4))


def test_instability_noise_independent_oracle(sched, probe_images):
    untrained = Denoiser(4, base=4, emb_dim=8)
    report = instability_probe(untrained, sched, *probe_images, 500, [0, 1, 2], range(4))
    assert report.flip_rate == 0 and report.std == 0


def test_instability_identical_seeds(trained_small, sched, probe_images):
    model, _ = trained_small
    report = instability_probe(model, sched, *probe_images, 500, [5, 5], range(4))
    assert report.flip_rate == 0
    again = instability_probe(model, sched, *probe_images, 500, [5, 5], range(4))
    assert np.array_equal(report.accuracies, again.accuracies)


def test_instability_exists_on_trained_model(trained_small, sched, probe_images):
    model, _ = trained_small
    report = instability_probe(model, sched, *probe_images, 500, [0, 1, 2], range(4))
    assert report.std > 0
    assert 0 < report.flip_rate <= 1
    assert np.all((report.accuracies >= 0) & (report.accuracies <= 1))


def test_instability_errors(trained_small, sched):
    model, _ = trained_small
    with pytest.raises(ValueError):
        instability_probe(model, sched, np.zeros((0, 1, 16, 16)), np.zeros(0), 500, [0, 1], range(4))
    with pytest.raises(ValueError):
        instability_probe(model, sched, np.zeros((1, 1, 16, 16)), np.zeros(1), 500, [0], range(4))
