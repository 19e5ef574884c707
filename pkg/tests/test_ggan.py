import time

import numpy as np
import pytest

from brainevo import ggan
from brainevo import tensor as tn
from brainevo.errors import ContractError, DimensionError
from brainevo.ggan import EVAL, EdgeConvLayer, Pass, TrainConfig
from brainevo.graph import BrainGraph
from oracles import central_difference, edge_conv_loops, random_graph, relative_error


def _sparse_graph(rng, n_r, density=0.6):
    w = random_graph(rng, n_r)
    keep = np.triu(rng.random((n_r, n_r)) < density, 1)
    return w * (keep | keep.T)


# edge-conditioned convolution


def test_edge_conv_matches_triple_loop_oracle():
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(100):
        n_r = int(rng.integers(1, 9))
        d_in, d_out = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        layer = EdgeConvLayer("l", d_in, d_out, rng)
        layer.bias.value = rng.normal(size=(1, d_out))
        w = _sparse_graph(rng, n_r)
        x = rng.normal(size=(n_r, d_in))
        got = ggan.edge_conv_forward(layer, x, w, pre_activation=True)
        want = edge_conv_loops(x, w, layer.f_bias.value, layer.f_weight.value, layer.bias.value)
        worst = max(worst, np.abs(got - want).max())
    assert worst < 1e-12


def test_identity_filter_gives_neighbourhood_mean(rng):
    n_r, d = 5, 3
    layer = EdgeConvLayer("l", d, d, rng)
    layer.f_bias.value = np.eye(d)
    layer.f_weight.value = np.zeros((d, d))
    w = random_graph(rng, n_r, 0.1, 1.0)  # full graph
    x = rng.normal(size=(n_r, d))
    out = ggan.edge_conv_forward(layer, x, w, pre_activation=True)
    np.testing.assert_allclose(out, np.tile(x.mean(axis=0), (n_r, 1)), rtol=0, atol=1e-14)


def test_isolated_node_sees_only_itself(rng):
    layer = EdgeConvLayer("l", 2, 3, rng)
    layer.bias.value = rng.normal(size=(1, 3))
    x = rng.normal(size=(1, 2))
    out = ggan.edge_conv_forward(layer, x, np.zeros((1, 1)), pre_activation=True)
    theta = layer.filter_matrix(0.0)
    np.testing.assert_allclose(out[0], theta @ x[0] + layer.bias.value[0], rtol=0, atol=1e-14)


def test_edge_conv_width_mismatch(rng):
    layer = EdgeConvLayer("l", 3, 2, rng)
    with pytest.raises(DimensionError):
        ggan.edge_conv_forward(layer, np.ones((4, 2)), random_graph(rng, 4))


def test_full_layer_output_in_activation_range(rng):
    layer = EdgeConvLayer("l", 4, 3, rng, activation="sigmoid")
    out = ggan.edge_conv_forward(layer, rng.normal(size=(6, 4)), random_graph(rng, 6))
    assert ((out > 0) & (out < 1)).all()


# networks


@pytest.fixture
def model():
    return ggan.init_model(6, TrainConfig(hidden=5, disc_hidden=4, seed=11))


def test_normalizer_output_is_a_valid_graph(model, rng):
    g = BrainGraph(random_graph(rng, 6))
    out = ggan.normalize(model, g)
    off = out.weights[~np.eye(6, dtype=bool)]
    assert ((off > 0) & (off < 1)).all()
    assert not np.diag(out.weights).any()


def test_normalizer_symmetrises_exactly(model, rng):
    x = tn.constant(random_graph(rng, 6))
    norm = model.normalizer
    mask = ggan.neighborhood(x.value)
    h1 = norm.enc1(x, x, mask)
    z = norm.enc2(h1, x, mask)
    raw = norm.dec(tn.concat_cols(z, h1), x, mask).value
    expected = (raw + raw.T) * 0.5 * (1 - np.eye(6))
    np.testing.assert_array_equal(norm.forward(x).value, expected)


def test_evaluation_mode_is_deterministic(model, rng):
    g = BrainGraph(random_graph(rng, 6))
    assert ggan.normalize(model, g) == ggan.normalize(model, g)
    np.testing.assert_array_equal(ggan.embed(model, g), ggan.embed(model, g))
    assert ggan.discriminate(model, g, g) == ggan.discriminate(model, g, g)


def test_same_seed_same_initialisation():
    a = ggan.init_model(5, TrainConfig(hidden=4, seed=3))
    b = ggan.init_model(5, TrainConfig(hidden=4, seed=3))
    for (ka, pa), (kb, pb) in zip(a.parameters().items(), b.parameters().items()):
        assert ka == kb
        np.testing.assert_array_equal(pa.value, pb.value)


def test_normalizer_rejects_wrong_size(model, rng):
    with pytest.raises(DimensionError):
        ggan.normalize(model, BrainGraph(random_graph(rng, 5)))


def test_discriminator_score_in_open_interval(model, rng):
    cbt = random_graph(rng, 6)
    for _ in range(5):
        s = ggan.discriminate(model, random_graph(rng, 6), cbt)
        assert 0.0 < s < 1.0
    assert 0.0 < ggan.discriminate(model, cbt, cbt) < 1.0


def test_discriminator_shape_mismatch(model, rng):
    with pytest.raises(DimensionError):
        ggan.discriminate(model, random_graph(rng, 6), random_graph(rng, 5))


def test_embedding_has_one_value_per_roi(model, rng):
    g = BrainGraph(random_graph(rng, 6))
    z = ggan.embed(model, g)
    assert z.shape == (6,)
    assert ((z > 0) & (z < 1)).all()
    assert ggan.embed_many(model, [g, g]).shape == (2, 6)


# losses


def test_identity_normalisation_has_zero_l1(model, rng):
    x = random_graph(rng, 6)
    _, l1 = ggan.normalizer_loss(model.discriminator, tn.constant(x), x, random_graph(rng, 6), 100.0)
    assert l1.item() == 0.0


@pytest.mark.parametrize("adversarial", ["saturating", "non-saturating"])
def test_zero_lambda_leaves_adversarial_term(model, rng, adversarial):
    x = random_graph(rng, 6)
    cbt = random_graph(rng, 6)
    fake = tn.constant(random_graph(rng, 6))
    total, _ = ggan.normalizer_loss(model.discriminator, fake, x, cbt, 0.0, adversarial=adversarial)
    d = ggan.discriminate(model, fake.value, cbt)
    expected = np.log(1 - d) if adversarial == "saturating" else -np.log(d)
    assert total.item() == pytest.approx(expected, rel=1e-12)


def test_losses_average_over_batch(model, rng):
    cbt = random_graph(rng, 6)
    batch = [BrainGraph(random_graph(rng, 6)) for _ in range(3)]
    d, n, l1 = ggan.losses(model.normalizer, model.discriminator, batch, cbt)
    singles = [ggan.losses(model.normalizer, model.discriminator, [g], cbt) for g in batch]
    for got, k in zip((d, n, l1), range(3)):
        assert got.item() == pytest.approx(np.mean([s[k].item() for s in singles]), rel=1e-12)
    assert d.item() > 0 and l1.item() > 0


def test_empty_batch_is_refused(model, rng):
    with pytest.raises(ContractError):
        ggan.losses(model.normalizer, model.discriminator, [], random_graph(rng, 6))


def test_gradients_of_both_losses_match_finite_differences(rng):
    t0 = time.perf_counter()
    model = ggan.init_model(4, TrainConfig(hidden=5, disc_hidden=5, seed=5))
    # sparse graphs: on a complete graph batch norm cancels enc1's f_bias exactly
    cbt = _sparse_graph(rng, 4)
    batch = [BrainGraph(_sparse_graph(rng, 4)) for _ in range(2)]
    params = list(model.parameters().values())
    names = list(model.parameters())
    for which in (0, 1):  # L_D, L_N

        def loss():
            return ggan.losses(model.normalizer, model.discriminator, batch, cbt)[which]

        value = loss()
        grads = tn.backward(value, params)
        # roundoff in a central difference is about 1e-16 * |f| / eps per entry
        floor = 1e-6 * max(1.0, abs(value.item()))
        for name, p in zip(names, params):
            fd = central_difference(lambda: loss().item(), p.value, eps=1e-5)
            assert relative_error(grads[p], fd, floor) < 1e-4, (which, name)
            # biases feeding batch norm are cancelled by it; everything else must be live
            if which == 1 and name.startswith("normalizer") and not name.endswith(".bias"):
                assert np.linalg.norm(grads[p]) > 100 * floor, name
    assert time.perf_counter() - t0 < 60


# training


def _toy_population(rng, n=4, n_r=5):
    return [BrainGraph(random_graph(rng, n_r, 0.2, 0.8)) for _ in range(n)], BrainGraph(random_graph(rng, n_r))


@pytest.mark.parametrize("epochs", [0, -1, 2.5])
def test_epochs_must_be_positive_integer(epochs):
    with pytest.raises(ContractError):
        TrainConfig(epochs=epochs)


@pytest.mark.parametrize("kw", [{"lam": -1.0}, {"keep_prob": 0.0}, {"adversarial": "x"}, {"bn_eval": "x"}])
def test_bad_training_configuration(kw):
    with pytest.raises(ContractError):
        TrainConfig(**kw)


def test_default_hyperparameters():
    c = TrainConfig()
    assert (c.lam, c.lr_n, c.lr_d, c.beta1, c.beta2, c.epochs) == (100.0, 0.001, 0.01, 0.5, 0.999, 700)


def test_training_needs_two_subjects(rng):
    graphs, cbt = _toy_population(rng, 1)
    with pytest.raises(ContractError):
        ggan.train(graphs, cbt, TrainConfig(epochs=1, hidden=3))


def test_training_is_reproducible(rng):
    graphs, cbt = _toy_population(rng)
    cfg = TrainConfig(epochs=3, hidden=4, disc_hidden=3, seed=2)
    seen = []
    m1, t1 = ggan.train(graphs, cbt, cfg, callback=seen.append)
    m2, t2 = ggan.train(graphs, cbt, cfg)
    assert t1 == t2 == seen
    assert [r.epoch for r in t1] == [1, 2, 3]
    for p, q in zip(m1.parameters().values(), m2.parameters().values()):
        np.testing.assert_array_equal(p.value, q.value)


def test_training_changes_parameters_and_running_stats(rng):
    graphs, cbt = _toy_population(rng)
    cfg = TrainConfig(epochs=2, hidden=4, disc_hidden=3, seed=2)
    before = ggan.init_model(5, cfg)
    after, _ = ggan.train(graphs, cbt, cfg)
    assert not np.array_equal(before.normalizer.enc1.f_bias.value, after.normalizer.enc1.f_bias.value)
    assert not np.array_equal(after.normalizer.enc1.running_var, np.ones((1, 4)))


def test_training_mode_dropout_needs_rng(rng):
    layer = EdgeConvLayer("l", 2, 2, rng, keep_prob=0.5)
    with pytest.raises(ContractError):
        ggan.edge_conv_forward(layer, np.ones((3, 2)), random_graph(rng, 3), Pass(training=True))


def test_running_statistics_mode(rng):
    graphs, cbt = _toy_population(rng)
    model, _ = ggan.train(graphs, cbt, TrainConfig(epochs=2, hidden=4, disc_hidden=3, bn_eval="running"))
    out = ggan.normalize(model, graphs[0])
    assert out == ggan.normalize(model, graphs[0])


def test_save_and_load_round_trip(tmp_path, rng):
    graphs, cbt = _toy_population(rng)
    model, _ = ggan.train(graphs, cbt, TrainConfig(epochs=2, hidden=4, disc_hidden=3, seed=9, lam=50.0))
    path = tmp_path / "model.txt"
    ggan.save_model(model, path)
    back = ggan.load_model(path)
    assert back.config == model.config
    for (ka, pa), (kb, pb) in zip(model.parameters().items(), back.parameters().items()):
        assert ka == kb
        np.testing.assert_array_equal(pa.value, pb.value)
    np.testing.assert_array_equal(back.normalizer.enc1.running_mean, model.normalizer.enc1.running_mean)
    for g in graphs:
        np.testing.assert_array_equal(ggan.embed(back, g), ggan.embed(model, g))
    ggan.save_model(back, tmp_path / "again.txt")
    assert (tmp_path / "again.txt").read_bytes() == path.read_bytes()
