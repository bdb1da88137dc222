import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from noopdc.dc import batch_distances, predict_from_distances
from noopdc.datasets import few_shot_split, gen_shapes
from noopdc.diffusion import Denoiser
from noopdc.ndgrad import Tensor, grad_check, load_checkpoint
from noopdc.noop import (
    NoOpState,
    classify_noop,
    compose_noise,
    init_noop_state,
    noop_distances,
    noop_logits,
    noop_loss,
    normalized_logits,
    train_noop,
    train_prompt,
    transfer_state,
    zscore,
)


@pytest.fixture(scope="module")
def split_data():
    ds = gen_shapes(24, seed=5)
    sp = few_shot_split(ds, 8, seed=0)
    return ds.nchw(sp.train), ds.labels[sp.train], ds.nchw(sp.test), ds.labels[sp.test]


@pytest.fixture(scope="module")
def trained_state(trained_small, sched, split_data):
    model, _ = trained_small
    tx, ty, _, _ = split_data
    state = init_noop_state((1, 16, 16), seed=0)
    state, curve = train_noop(tx, ty, model, sched, state, range(4), epochs=6, batch_size=16, seed=0)
    return state, curve


def micro_instance(seed=0):
    """Tiny float64 denoiser and NoOp state with non-zero heads, 8x8 inputs, batch 4."""
    rng = np.random.default_rng(seed)
    model = Denoiser(3, base=2, emb_dim=4, seed=seed, dtype=np.float64)
    model.conv_out.weight.data[...] = rng.normal(size=model.conv_out.weight.shape)
    model.freeze()
    state = init_noop_state((1, 8, 8), seed=seed, meta_channels=(2, 2, 2), dtype=np.float64)
    state.meta.head.weight.data[...] = rng.normal(size=state.meta.head.weight.shape) * 0.5
    state.meta.train()
    x0 = rng.uniform(-1, 1, size=(4, 1, 8, 8))
    y = rng.integers(0, 3, size=4)
    return model, state, x0, y


def full_loss(model, sched, state, x0, y):
    eps_star = compose_noise(state, Tensor(x0))
    return noop_loss(zscore(noop_logits(model, sched, x0, eps_star, 500, range(3))), y)


# ---------------------------------------------------------------- composition


def test_fresh_state_composes_to_eps(rng):
    state = init_noop_state((1, 16, 16), seed=3)
    x = rng.normal(size=(5, 1, 16, 16)).astype(np.float32)
    out = compose_noise(state, x).data
    assert out.shape == (5, 1, 16, 16)
    assert out.tobytes() == np.broadcast_to(state.eps.data, out.shape).tobytes()


def test_compose_linear_in_eps(rng):
    state = init_noop_state((1, 16, 16), seed=1, dtype=np.float64)
    state.meta.head.weight.data[...] = 0.3
    x = rng.normal(size=(2, 1, 16, 16))
    offset = compose_noise(state, x).data - state.eps.data
    state.eps.data *= 2
    np.testing.assert_allclose(compose_noise(state, x).data - offset, 2 * np.broadcast_to(state.eps.data / 2, x.shape))


def test_compose_shape_mismatch():
    state = init_noop_state((1, 16, 16), seed=0)
    with pytest.raises(ValueError):
        compose_noise(state, np.zeros((1, 1, 8, 8), np.float32))


def test_trained_meta_gives_image_specific_noise(trained_state, split_data):
    state, _ = trained_state
    x = split_data[2][:2]
    out = compose_noise(state, x).data
    assert not np.array_equal(out[0], out[1])


# ---------------------------------------------------------------- logits


def test_logits_oracle(sched, rng):
    eps_star = rng.normal(size=(1, 1, 4, 4))

    class Oracle:
        dtype = np.float64

        def __call__(self, x, c, t, class_offsets=None):
            return Tensor(np.repeat(eps_star, len(c), axis=0) + (np.asarray(c) != 1)[:, None, None, None])

    p = noop_logits(Oracle(), sched, rng.normal(size=(1, 1, 4, 4)), Tensor(eps_star), 500, range(3)).data[0]
    assert p[1] == 0 and np.all(p[[0, 2]] < 0)


def test_logits_are_negated_dc_distances(trained_small, sched, split_data, rng):
    model, _ = trained_small
    x = split_data[2][:10]
    eps = rng.standard_normal(x.shape).astype(np.float32)
    p = noop_logits(model, sched, x, Tensor(eps), 500, range(4)).data
    d = batch_distances(model, sched, x, 500, eps, range(4))
    assert (-p).tobytes() == d.tobytes()


def test_logits_gradient_wrt_eps_star(sched):
    model, _, x0, _ = micro_instance(1)
    r = np.random.default_rng(2).normal(size=(4, 3))
    for i in range(10):
        e = Tensor(np.random.default_rng(10 + i).normal(size=x0.shape))
        err = grad_check(lambda v: (noop_logits(model, sched, x0, v, 500, range(3)) * Tensor(r)).sum(), e)
        assert err < 1e-4


# ---------------------------------------------------------------- z-score


def test_zscore_examples():
    z = zscore(Tensor(np.array([1.0, 2.0, 3.0]))).data
    np.testing.assert_allclose(z, [-math.sqrt(1.5), 0, math.sqrt(1.5)], atol=1e-9)
    np.testing.assert_allclose(zscore(Tensor(np.array([-4.0, 7.5]))).data, [-1, 1], atol=1e-9)


def test_zscore_constant_row_zero_output_and_gradient():
    p = Tensor(np.full((2, 4), 3.0), requires_grad=True)
    z = zscore(p)
    assert np.all(z.data == 0)
    (z * Tensor(np.arange(8.0).reshape(2, 4))).sum().backward()
    assert np.all(p.grad == 0)


def test_zscore_needs_two_classes():
    with pytest.raises(ValueError):
        zscore(Tensor(np.ones((3, 1))))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(2, 10)), elements=st.floats(-1e3, 1e3)))
def test_zscore_standardises(p):
    sigma = p.std(axis=-1)
    z = zscore(Tensor(p)).data
    ok = sigma > 1e-8
    assert np.all(np.abs(z.mean(axis=-1)[ok]) < 1e-6)
    assert np.all(np.abs(z.std(axis=-1)[ok] - 1) < 1e-6)


def test_zscore_preserves_argmax_on_random_logits():
    rng = np.random.default_rng(0)
    p = rng.normal(size=(1000, 6)) * rng.uniform(0.01, 100, size=(1000, 1))
    assert np.array_equal(np.argmax(zscore(Tensor(p)).data, axis=-1), np.argmax(p, axis=-1))


def test_zscore_gradient():
    rng = np.random.default_rng(4)
    for i in range(10):
        r = Tensor(rng.normal(size=(3, 5)))
        assert grad_check(lambda v: (zscore(v) * r).sum(), Tensor(rng.normal(size=(3, 5)))) < 1e-4


def test_normalized_logits_record():
    rec = normalized_logits(np.array([[1.0, 2.0, 3.0]]))
    assert rec.mu[0] == 2 and rec.sigma[0] == pytest.approx(math.sqrt(2 / 3))
    assert rec.z.shape == (1, 3)


# ---------------------------------------------------------------- loss


def test_loss_uniform_is_log_k():
    assert noop_loss(Tensor(np.zeros((3, 5))), [0, 2, 4]).item() == pytest.approx(math.log(5))


def test_loss_two_class_closed_form():
    assert noop_loss(Tensor(np.array([[1.0, -1.0]])), [0]).item() == pytest.approx(math.log(1 + math.exp(-2)), abs=1e-9)
    assert math.log(1 + math.exp(-2)) == pytest.approx(0.126928, abs=1e-6)


def test_loss_saturates():
    assert noop_loss(Tensor(np.array([[50.0, -50.0, -50.0]])), [0]).item() < 1e-20
    assert noop_loss(Tensor(np.array([[-50.0, 50.0]])), [0]).item() == pytest.approx(100)


def test_loss_label_errors():
    with pytest.raises(ValueError):
        noop_loss(Tensor(np.zeros((2, 3))), [0, 3])
    with pytest.raises(ValueError):
        noop_loss(Tensor(np.zeros((2, 3))), [0])


def test_full_loss_gradient_wrt_eps(sched):
    for seed in range(10):
        model, state, x0, y = micro_instance(seed)
        assert grad_check(lambda e: full_loss(model, sched, state, x0, y), state.eps) < 1e-4


def test_full_loss_gradient_wrt_meta_weights(sched):
    model, state, x0, y = micro_instance(3)
    params = state.meta.parameters()
    assert len(params) >= 10
    for name, w in params.items():
        err = grad_check(lambda _: full_loss(model, sched, state, x0, y), w)
        assert err < 1e-4, name


# ---------------------------------------------------------------- training


def test_zero_epochs_is_identity(trained_small, sched, split_data):
    model, _ = trained_small
    state = init_noop_state((1, 16, 16), seed=2)
    before = {k: v.copy() for k, v in state.to_tensors().items()}
    state, curve = train_noop(split_data[0], split_data[1], model, sched, state, range(4), epochs=0)
    assert curve == []
    after = state.to_tensors()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_requires_frozen_denoiser(sched, split_data):
    model = Denoiser(4, base=4, emb_dim=8)
    with pytest.raises(ValueError):
        train_noop(split_data[0], split_data[1], model, sched, init_noop_state((1, 16, 16), 0), range(4), epochs=1)


def test_empty_training_set(trained_small, sched):
    model, _ = trained_small
    with pytest.raises(ValueError):
        train_noop(np.zeros((0, 1, 16, 16)), np.zeros(0, int), model, sched, init_noop_state((1, 16, 16), 0), range(4))


def test_training_reduces_loss(trained_state):
    _, curve = trained_state
    assert curve[-1] < curve[0]


def test_backbone_bit_identical_after_training(trained_small, sched, split_data):
    model, _ = trained_small
    before = {k: v.copy() for k, v in model.state_dict().items()}
    state = init_noop_state((1, 16, 16), seed=9)
    train_noop(split_data[0][:16], split_data[1][:16], model, sched, state, range(4), epochs=1, batch_size=16)
    after = model.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)


def test_learning_rates_are_separate():
    state = init_noop_state((1, 8, 8), seed=0, meta_channels=(2, 2, 2), lr_eps=1e-2, lr_meta=1e-3)
    e0 = state.eps.data.copy()
    w = state.meta.down1.conv.weight
    w0 = w.data.copy()
    state.eps.grad = np.ones_like(state.eps.data)
    for p in state.meta.parameters().values():
        p.grad = np.ones_like(p.data)
    state.adam_eps.step()
    state.adam_meta.step()
    # a first Adam step moves every coordinate by lr * g / (|g| + eps)
    np.testing.assert_allclose(e0 - state.eps.data, 1e-2, rtol=1e-4)
    np.testing.assert_allclose(w0 - w.data, 1e-3, rtol=1e-4)


def test_training_deterministic(trained_small, sched, split_data):
    model, _ = trained_small
    runs = []
    for _ in range(2):
        state = init_noop_state((1, 16, 16), seed=4)
        state, curve = train_noop(split_data[0][:16], split_data[1][:16], model, sched, state, range(4),
                                  epochs=2, batch_size=8, seed=1)
        runs.append((state.eps.data.tobytes(), curve))
    assert runs[0] == runs[1]


def test_on_epoch_callback_sees_every_epoch(trained_small, sched, split_data):
    model, _ = trained_small
    seen = []
    state = init_noop_state((1, 16, 16), seed=4, use_meta=False)
    meta_before = state.meta.head.weight.data.copy()
    train_noop(split_data[0][:16], split_data[1][:16], model, sched, state, range(4), epochs=2, batch_size=16,
               on_epoch=lambda e, s: seen.append(e))
    assert seen == [0, 1, 2]
    assert np.array_equal(state.meta.head.weight.data, meta_before)


# ---------------------------------------------------------------- inference


def test_init_identity_with_dc(trained_small, sched, split_data):
    model, _ = trained_small
    state = init_noop_state((1, 16, 16), seed=6)
    x = split_data[2]
    eps = np.broadcast_to(state.eps.data, x.shape)
    dc = batch_distances(model, sched, x, 500, eps, range(4))
    nd = noop_distances(model, sched, state, x, 500, range(4))
    assert nd.tobytes() == dc.tobytes()
    assert np.array_equal(classify_noop(model, sched, state, x, 500, range(4)), predict_from_distances(dc))


def test_checkpoint_round_trip(tmp_path, trained_state, trained_small, sched, split_data):
    state, _ = trained_state
    model, _ = trained_small
    state.save(tmp_path / "s.nock")
    names = set(load_checkpoint(tmp_path / "s.nock"))
    assert "noop.eps" in names and all(n == "noop.eps" or n.startswith("meta.") for n in names)
    back = NoOpState.load(tmp_path / "s.nock")
    x = split_data[2][:8]
    a = noop_distances(model, sched, state, x, 500, range(4))
    b = noop_distances(model, sched, back, x, 500, range(4))
    assert a.tobytes() == b.tobytes()


# ---------------------------------------------------------------- prompt and transfer


def test_prompt_zero_epochs_gives_zero_offsets(trained_small, sched, split_data):
    model, _ = trained_small
    offsets, curve = train_prompt(split_data[0], split_data[1], model, sched, epochs=0)
    assert curve == [] and offsets.shape == (4, model.emb_dim) and np.all(offsets.data == 0)


def test_prompt_backbone_untouched_and_loss_trend(trained_small, sched, split_data):
    model, _ = trained_small
    before = {k: v.copy() for k, v in model.state_dict().items()}
    offsets, curve = train_prompt(split_data[0], split_data[1], model, sched, n_tokens=2, epochs=12,
                                  batch_size=8, lr=5e-2)
    after = model.state_dict()
    assert all(before[k].tobytes() == after[k].tobytes() for k in before)
    assert np.any(offsets.data != 0)
    assert np.mean(curve[-4:]) < np.mean(curve[:4])


def test_prompt_errors(trained_small, sched, split_data):
    model, _ = trained_small
    with pytest.raises(ValueError):
        train_prompt(split_data[0], split_data[1], model, sched, n_tokens=0)
    with pytest.raises(ValueError):
        train_prompt(split_data[0], split_data[1], Denoiser(4, base=4, emb_dim=8), sched)


def test_transfer_to_same_set_matches_classify(trained_state, trained_small, sched, split_data):
    state, _ = trained_state
    model, _ = trained_small
    x, y = split_data[2], split_data[3]
    acc = transfer_state(state, x, y, model, sched, range(4))
    assert acc == (classify_noop(model, sched, state, x, 500, range(4)) == y).mean()


def test_transfer_untrained_state_is_plain_dc(trained_small, sched, split_data):
    model, _ = trained_small
    state = init_noop_state((1, 16, 16), seed=8)
    x, y = split_data[2], split_data[3]
    eps = np.broadcast_to(state.eps.data, x.shape)
    base = (predict_from_distances(batch_distances(model, sched, x, 500, eps, range(4))) == y).mean()
    assert transfer_state(state, x, y, model, sched, range(4)) == base


def test_transfer_shape_mismatch(trained_state, trained_small, sched):
    state, _ = trained_state
    model, _ = trained_small
    with pytest.raises(ValueError):
        transfer_state(state, np.zeros((2, 1, 8, 8), np.float32), np.zeros(2, int), model, sched, range(4))
