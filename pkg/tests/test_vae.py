import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tfczsl.errors import CheckpointError, ShapeError
from tfczsl.nncore import DenseNet, Layer
from tfczsl.vae import (Batch, CadaVae, DarkKnowledge, GaussianLatent, LossOptions, LossWeights,
                        VaeOptimizer, Warmup, cada_loss, cross_alignment_loss, dark_kd_loss,
                        distribution_alignment_loss, encode_attribute, encode_visual, kl_loss,
                        loss_and_grads, reconstruction_loss, reparameterize, total_loss)

from oracles import central_difference, kl_closed, mean_abs, relative_error, w2_closed


def linear(W, b=None):
    W = np.atleast_2d(np.array(W, float))
    return DenseNet([Layer(W, np.zeros(len(W)) if b is None else np.array(b, float), "identity")])


def hand_model():
    """1-d nets: E_v(x) = (2x, 0), E_a(a) = (a/5, 0), both decoders the identity."""
    return CadaVae(linear([[2.0], [0.0]]), linear([[0.2], [0.0]]), linear([[1.0]]), linear([[1.0]]))


def random_model(seed, dx=4, da=3, dz=2, hidden=(5,)):
    rng = np.random.default_rng(seed)
    m = CadaVae.create(dx, da, dz, rng, hidden=hidden)
    for net in m.nets().values():
        for layer in net.layers:
            layer.bias[:] = rng.normal(scale=0.3, size=layer.bias.shape)
    return m, rng


latent_vec = st.lists(st.floats(-3, 3), min_size=3, max_size=3)


# -- encoders ----------------------------------------------------------------------

def test_zero_encoders_give_standard_normal():
    m = CadaVae(DenseNet.zeros([3, 4]), DenseNet.zeros([2, 4]), DenseNet.zeros([2, 3]),
                DenseNet.zeros([2, 2]))
    for g in (encode_visual(m, np.ones(3)), encode_attribute(m, np.ones(2))):
        assert not g.mean.any() and not g.log_var.any()
        assert np.array_equal(g.std, np.ones(2))


def test_encoders_are_deterministic():
    m, _ = random_model(0)
    x = np.arange(4.0)
    assert encode_visual(m, x).mean.tobytes() == encode_visual(m, x).mean.tobytes()
    a = np.arange(3.0)
    assert encode_attribute(m, a).log_var.tobytes() == encode_attribute(m, a).log_var.tobytes()


def test_hand_set_encoders_are_affine_maps():
    W = np.array([[1.0, 2.0], [0.5, -1.0]])
    b = np.array([0.1, -0.3])
    m = CadaVae(linear(W, b), linear(W, b), linear([[1.0], [1.0]]), linear([[1.0], [1.0]]))
    x = np.array([3.0, -1.0])
    g = encode_visual(m, x)
    assert g.mean.tolist() == [3.0 * 1 + -1.0 * 2 + 0.1]
    assert g.log_var.tolist() == [3.0 * 0.5 + 1.0 - 0.3]
    ga = encode_attribute(m, x)
    assert ga.mean.tolist() == g.mean.tolist()


def test_encoder_dimension_mismatch():
    m, _ = random_model(0)
    with pytest.raises(ShapeError):
        encode_visual(m, np.ones(5))


def test_model_shape_validation():
    with pytest.raises(ShapeError):
        CadaVae(DenseNet.zeros([3, 4]), DenseNet.zeros([2, 6]), DenseNet.zeros([2, 3]),
                DenseNet.zeros([2, 2]))


# -- reparameterization ---------------------------------------------------------------

def test_vanishing_variance_returns_mean(rng):
    g = GaussianLatent([0.3, -1.2], [-50.0, -50.0])
    assert np.abs(reparameterize(g, rng) - g.mean).max() < 1e-10


def test_reparameterize_moments():
    g = GaussianLatent(np.zeros((100_000, 3)), np.zeros((100_000, 3)))
    z = reparameterize(g, np.random.default_rng(0))
    assert np.abs(z.mean(axis=0)).max() < 0.02
    assert np.abs(z.var(axis=0) - 1).max() < 0.05


def test_fixed_noise_is_affine():
    eps = np.array([0.5, -2.0])
    g = GaussianLatent([1.0, 2.0], [math.log(4.0), 0.0])
    assert reparameterize(g, eps=eps).tolist() == [1.0 + 2.0 * 0.5, 2.0 - 2.0]


# -- closed-form loss values ----------------------------------------------------------

def test_kl_examples():
    assert kl_loss(GaussianLatent([0.0, 0.0], [0.0, 0.0])) == 0.0
    assert kl_loss(GaussianLatent([1.0], [0.0])) == 0.5
    assert abs(kl_loss(GaussianLatent([0.0], [1.0])) - 0.5 * (math.e - 2)) < 1e-12


@settings(max_examples=60, deadline=None)
@given(latent_vec, latent_vec)
def test_kl_matches_closed_form_and_is_nonnegative(mean, log_var):
    val = kl_loss(GaussianLatent(mean, log_var))
    assert abs(val - kl_closed(mean, log_var)) < 1e-9
    assert val >= -1e-12
    if any(abs(v) > 1e-3 for v in mean + log_var):
        assert val > 0


def test_reconstruction_examples(rng):
    assert reconstruction_loss([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert reconstruction_loss([1.0, 2.0], [0.0, 0.0]) == 1.5
    u, v = rng.normal(size=6), rng.normal(size=6)
    assert reconstruction_loss(u, v) == reconstruction_loss(v, u)
    assert abs(reconstruction_loss(u, v) - mean_abs(u, v)) < 1e-15
    with pytest.raises(ShapeError):
        reconstruction_loss([1.0], [1.0, 2.0])


def test_distribution_alignment_examples():
    g = GaussianLatent([0.2, -0.1], [0.3, 0.0])
    assert distribution_alignment_loss(g, g) == 0.0
    shifted = GaussianLatent([3.2, 3.9], [0.3, 0.0])
    assert abs(distribution_alignment_loss(g, shifted) - 5.0) < 1e-12
    assert abs(distribution_alignment_loss(GaussianLatent([0.0], [0.0]),
                                           GaussianLatent([0.0], [math.log(4.0)])) - 1.0) < 1e-12
    with pytest.raises(ShapeError):
        distribution_alignment_loss(GaussianLatent([0.0], [0.0]), g)


@settings(max_examples=80, deadline=None)
@given(latent_vec, latent_vec, latent_vec, latent_vec, latent_vec, latent_vec)
def test_distribution_alignment_is_a_metric(m1, l1, m2, l2, m3, l3):
    a, b, c = GaussianLatent(m1, l1), GaussianLatent(m2, l2), GaussianLatent(m3, l3)
    ab = distribution_alignment_loss(a, b)
    assert ab == distribution_alignment_loss(b, a)
    assert abs(ab - w2_closed(m1, l1, m2, l2)) < 1e-9
    assert ab <= distribution_alignment_loss(a, c) + distribution_alignment_loss(c, b) + 1e-9


def test_dark_kd_examples():
    cur_a = GaussianLatent([1.0, 2.0], [0.1, 0.2])
    cur_v = GaussianLatent([0.0, 0.0], [0.4, -0.3])
    same = DarkKnowledge(cur_v.mean, cur_v.log_var, cur_a.mean, cur_a.log_var)
    assert dark_kd_loss(cur_a, cur_v, same) == 0.0
    zero_mean = DarkKnowledge(cur_v.mean, cur_v.log_var, [0.0, 0.0], cur_a.log_var)
    assert dark_kd_loss(cur_a, cur_v, zero_mean) == 3.0
    one_d = dark_kd_loss(GaussianLatent([0.5], [0.0]), GaussianLatent([0.0], [0.4]),
                         DarkKnowledge([0.0], [0.2], [0.0], [0.0]))
    assert abs(one_d - (0.5 + math.exp(0.4) - math.exp(0.2))) < 1e-12
    assert abs(one_d - 0.770422) < 1e-6


def test_dark_kd_reads_only_attribute_mean_and_visual_variance():
    cur_a = GaussianLatent([0.0], [0.0])
    cur_v = GaussianLatent([0.0], [0.0])
    ignored = DarkKnowledge([9.0], [0.0], [0.0], [7.0])
    assert dark_kd_loss(cur_a, cur_v, ignored) == 0.0
    sym = dark_kd_loss(cur_a, cur_v, ignored, symmetric=True)
    assert abs(sym - (9.0 + abs(1 - math.exp(7.0)))) < 1e-9


def test_dark_kd_dimension_mismatch():
    g = GaussianLatent([0.0, 0.0], [0.0, 0.0])
    with pytest.raises(ShapeError):
        dark_kd_loss(g, g, DarkKnowledge([0.0], [0.0], [0.0], [0.0]))


def test_cross_alignment_zero_for_exact_inverse():
    m = CadaVae(linear([[1.0], [0.0]]), linear([[1.0], [0.0]]), linear([[1.0]]), linear([[1.0]]))
    zero = np.zeros(1)
    assert cross_alignment_loss(m, [2.0], [2.0], eps_v=zero, eps_a=zero) == 0.0


def test_cross_alignment_hand_example():
    zero = np.zeros(1)
    assert cross_alignment_loss(hand_model(), [1.0], [5.0], eps_v=zero, eps_a=zero) == 3.0
    assert cross_alignment_loss(hand_model(), [1.0], [5.0], use_mean=True) == 3.0


# -- total loss -------------------------------------------------------------------------

def test_total_equals_hand_sum_of_terms():
    m = hand_model()
    stored = DarkKnowledge([0.0], [0.2], [0.5], [0.0])
    batch = Batch([[1.0]], [[5.0]], [True], DarkKnowledge.stack([stored]))
    w = LossWeights(beta=0.5, gamma=2.0, delta=3.0, alpha=1.0)
    noise = (np.zeros((1, 1)), np.zeros((1, 1)))
    total, terms = total_loss(m, batch, w, noise=noise)
    # z_v = 2, z_a = 1; reconstructions 2 and 1
    re = abs(1 - 2) + abs(5 - 1)
    kl = kl_closed([2.0], [0.0]) + kl_closed([1.0], [0.0])
    ca = 3.0
    da = w2_closed([2.0], [0.0], [1.0], [0.0])
    kd = abs(1.0 - 0.5) + abs(1.0 - math.exp(0.2))
    assert terms == pytest.approx({"re": re, "kl": kl, "ca": ca, "da": da, "kd": kd}, abs=1e-12)
    assert abs(total - (re + 0.5 * kl + 2 * ca + 3 * da + kd)) < 1e-12


def test_zero_weights_leave_reconstruction(rng):
    m, _ = random_model(1)
    batch = Batch(rng.normal(size=(3, 4)), rng.normal(size=(3, 3)))
    total, terms = total_loss(m, batch, LossWeights(0, 0, 0, 0), rng=rng)
    assert total == terms["re"]


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("use_mean", [False, True])
def test_alpha_zero_matches_independent_objective(seed, use_mean):
    m, rng = random_model(seed)
    X, A = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
    noise = (rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
    w = LossWeights(0.3, 1.7, 0.6, alpha=0.0)
    dark = DarkKnowledge(*(rng.normal(size=(4, 2)) for _ in range(4)))
    batch = Batch(X, A, [False, True, True, False], dark)
    total, _ = total_loss(m, batch, w, noise=noise, options=LossOptions(ca_use_mean=use_mean))
    assert abs(total - cada_loss(m, X, A, w, noise, ca_use_mean=use_mean)) < 1e-12


def test_kd_averaged_over_replayed_rows_only(rng):
    m, _ = random_model(2)
    X, A = rng.normal(size=(4, 4)), rng.normal(size=(4, 3))
    dark = DarkKnowledge(*(rng.normal(size=(4, 2)) for _ in range(4)))
    mask = np.array([False, True, False, True])
    noise = (rng.normal(size=(4, 2)), rng.normal(size=(4, 2)))
    _, terms = total_loss(m, Batch(X, A, mask, dark), LossWeights(), noise=noise)
    gv, ga = m.encode_visual(X), m.encode_attribute(A)
    rows = [dark_kd_loss(ga.row(i), gv.row(i), DarkKnowledge(*(getattr(dark, f)[i] for f in
            ("mu_vf", "log_var_vf", "mu_af", "log_var_af")))) for i in (1, 3)]
    assert abs(terms["kd"] - np.mean(rows)) < 1e-12
    _, none = total_loss(m, Batch(X, A), LossWeights(), noise=noise)
    assert none["kd"] == 0.0


def test_empty_batch_rejected():
    with pytest.raises(ShapeError):
        Batch(np.zeros((0, 4)), np.zeros((0, 3)))


def _check_gradients(m, batch, weights, noise, options, tol=1e-4):
    _, _, grads = loss_and_grads(m, batch, weights, noise=noise, options=options)

    def f():
        return total_loss(m, batch, weights, noise=noise, options=options)[0]

    worst = 0.0
    for name, net in m.nets().items():
        analytic = {}
        for (dW, db), layer in zip(grads[name], net.layers):
            analytic[id(layer.weight)], analytic[id(layer.bias)] = dW, db
        for p, idx, num in central_difference(f, net.parameters()):
            worst = max(worst, relative_error(analytic[id(p)][idx], num))
    assert worst < tol
    return worst


@pytest.mark.parametrize("seed", range(4))
@pytest.mark.parametrize("options", [LossOptions(), LossOptions(kd_symmetric=True),
                                     LossOptions(ca_use_mean=True)])
def test_gradients_match_finite_differences(seed, options):
    m, rng = random_model(seed)
    n = 3
    dark = DarkKnowledge(*(rng.normal(size=(n, 2)) for _ in range(4)))
    batch = Batch(rng.normal(size=(n, 4)), rng.normal(size=(n, 3)), [True, False, True], dark)
    noise = (rng.normal(size=(n, 2)), rng.normal(size=(n, 2)))
    _check_gradients(m, batch, LossWeights(0.7, 1.3, 0.9, 1.1), noise, options)


def test_log_var_clamp_has_zero_gradient_outside_range(rng):
    m, _ = random_model(0)
    head = m.visual_encoder.layers[-1]
    head.bias[2:] = 40.0  # log-variance outputs far above the clamp
    batch = Batch(rng.normal(size=(2, 4)), rng.normal(size=(2, 3)))
    total, terms, grads = loss_and_grads(m, batch, LossWeights(), rng=rng)
    assert np.isfinite(total)
    _, db = grads["visual_encoder"][-1]
    assert np.all(db[2:] == 0.0)


def test_warmup_schedule():
    w = Warmup(10, 20)
    factors = [w.factor(s) for s in range(30)]
    assert factors[0] == 0.0 and factors[15] == 0.5 and factors[25] == 1.0
    assert all(a <= b for a, b in zip(factors, factors[1:]))
    lw = LossWeights(beta=2.0, warmup={"beta": w})
    assert lw.at(15)["beta"] == 1.0 and lw.at(15)["gamma"] == 1.0
    with pytest.raises(ValueError):
        LossWeights(beta=-1.0)


def test_optimizer_reduces_loss(rng):
    m, _ = random_model(5, hidden=(8,))
    X, A = rng.normal(size=(16, 4)), rng.normal(size=(16, 3))
    batch = Batch(X, A)
    opt = VaeOptimizer(m, lr=1e-2)
    noise = (np.zeros((16, 2)), np.zeros((16, 2)))
    w = LossWeights(0.01)
    first = total_loss(m, batch, w, noise=noise)[0]
    for _ in range(200):
        opt.step(loss_and_grads(m, batch, w, noise=noise)[2])
    assert total_loss(m, batch, w, noise=noise)[0] < first
    assert opt.step_count == 200 and m.all_finite()


def test_model_checkpoint_round_trip(tmp_path):
    m, _ = random_model(3)
    m.save(tmp_path / "m.npz")
    back = CadaVae.load(tmp_path / "m.npz")
    for a, b in zip(m.nets().values(), back.nets().values()):
        assert all(p.tobytes() == q.tobytes() for p, q in zip(a.parameters(), b.parameters()))
    from tfczsl import nncore
    nncore.save_net(m.visual_encoder, tmp_path / "net.npz")
    with pytest.raises(CheckpointError):
        CadaVae.load(tmp_path / "net.npz")
