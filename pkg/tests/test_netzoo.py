import numpy as np
import pytest

from mqproxy import hessian, netzoo
from mqproxy import tensor as T


def test_dataset_deterministic():
    a, b = netzoo.make_dataset(0), netzoo.make_dataset(0)
    assert a.x.tobytes() == b.x.tobytes() and a.y.tobytes() == b.y.tobytes()
    assert (a.split == b.split).all()


def test_dataset_counts():
    d = netzoo.make_dataset(3, n_classes=4, n_per_class=256)
    assert len(d) == 1024
    assert np.bincount(d.y).tolist() == [256] * 4
    for name in ("train", "calib", "eval"):
        assert len(np.unique(d.part(name)[1])) == 4


def test_dataset_needs_two_classes():
    with pytest.raises(ValueError):
        netzoo.make_dataset(0, n_classes=1)


def test_class_means_vanish():
    # random template signs: no class is linearly separable by its mean
    d = netzoo.make_dataset(0)
    for k in range(4):
        m = d.x[d.y == k].mean(axis=0)
        assert np.abs(m).max() < 0.1


def test_build_net_deterministic_and_seeded():
    a, b, c = netzoo.build_net("cnn-s", 0), netzoo.build_net("cnn-s", 0), netzoo.build_net("cnn-s", 1)
    for la, lb, lc in zip(a.layers, b.layers, c.layers):
        assert la.weight.tobytes() == lb.weight.tobytes()
        assert not np.array_equal(la.weight, lc.weight)
    assert a.n_layers >= 4 and all(n > 0 for n in a.numels())


def test_layer_sizes():
    assert netzoo.build_net("mlp-s").numels() == [2048, 1024, 512, 64]
    assert netzoo.build_net("cnn-s").numels() == [72, 576, 1152, 2304, 512, 128]


def test_unknown_spec():
    with pytest.raises(KeyError):
        netzoo.build_net("resnet-18")


def test_macs_hand_count():
    # conv MACs = numel * output pixels: 64 px for the first two convs, 16 after the 2x2 pool
    assert netzoo.build_net("cnn-s").macs() == [72 * 64, 576 * 64, 1152 * 16, 2304 * 16, 512, 128]


def test_untrained_net_is_near_chance():
    d = netzoo.make_dataset(0)
    accs = [netzoo.accuracy(netzoo.build_net("cnn-s", s), *d.part("eval")) for s in range(5)]
    assert abs(np.mean(accs) - 0.25) < 0.1


def test_train_rejects_zero_epochs():
    with pytest.raises(ValueError):
        netzoo.train(netzoo.build_net("mlp-s"), netzoo.make_dataset(0, n_per_class=64), epochs=0)


def test_train_divergence_names_epoch():
    with pytest.raises(netzoo.TrainingDiverged, match="epoch"):
        netzoo.train(netzoo.build_net("mlp-s"), netzoo.make_dataset(0, n_per_class=64), epochs=3, lr=1e300)


def test_train_deterministic():
    d = netzoo.make_dataset(0, n_per_class=64)
    a, acc_a = netzoo.train(netzoo.build_net("mlp-s"), d, epochs=2)
    b, acc_b = netzoo.train(netzoo.build_net("mlp-s"), d, epochs=2)
    assert acc_a == acc_b
    assert all(x.weight.tobytes() == y.weight.tobytes() for x, y in zip(a.layers, b.layers))


def test_desk_nets_reach_ninety_percent(desk, mlp_desk):
    # measured at bring-up: cnn-s 0.9375, mlp-s 0.984
    assert desk.float_accuracy >= 0.90
    assert mlp_desk.float_accuracy >= 0.90


def test_stats_shapes_and_finiteness(desk, desk_stats):
    assert len(desk_stats) == desk.net.n_layers
    for st, layer in zip(desk_stats, desk.net.layers):
        for kind in "WGHV":
            assert st.get(kind).shape == layer.weight.shape
        assert st.A.shape[0] == 64
        assert all(np.isfinite(st.get(k)).all() for k in "WGAHV")


def test_stats_idempotent(desk, desk_stats):
    again = netzoo.extract_stats(desk.net, desk.dataset, seed=0)
    for a, b in zip(desk_stats, again):
        for k in "WGAHV":
            assert a.get(k).tobytes() == b.get(k).tobytes()


def test_gradient_matches_loss_and_grads(desk, desk_stats):
    x, y = netzoo.calibration_batch(desk.dataset, 0)
    _, grads, _ = netzoo.loss_and_grads(desk.net, x, y)
    for st, g in zip(desk_stats, grads):
        np.testing.assert_allclose(st.G, g, rtol=1e-12, atol=1e-15)


def test_synflow_single_layer_by_hand():
    # R = sum_o |W| @ 1 = sum |W| for one linear layer with zero bias, so dR/d|W| = 1
    layer = netzoo.Layer("linear0", "linear", np.array([[1.0, -2.0]]), np.zeros(1), act="none")
    net = netzoo.ReferenceNet("mlp-x", 0, (2,), [layer])
    (v,) = netzoo.synflow_grads(net)
    np.testing.assert_array_equal(v, [[1.0, 1.0]])


def test_synflow_two_layers_by_hand():
    # R = sum_k |W2|_k * sum_i |W1|_{k,i}: dR/d|W1|_{k,i} = |W2|_k
    l1 = netzoo.Layer("linear0", "linear", np.array([[1.0, -2.0], [3.0, 0.5]]), np.zeros(2))
    l2 = netzoo.Layer("linear1", "linear", np.array([[-4.0, 5.0]]), np.zeros(1), act="none")
    v1, v2 = netzoo.synflow_grads(netzoo.ReferenceNet("mlp-x", 0, (2,), [l1, l2]))
    np.testing.assert_allclose(v1, [[4.0, 4.0], [5.0, 5.0]])
    np.testing.assert_allclose(v2, [[3.0, 3.5]])
    assert (v1 >= 0).all() and (v2 >= 0).all()


def test_hessian_diagonal_trace_oracle():
    a = np.array([1.0, 2.0, 3.0, 0.5])
    loss = lambda t: T.sum_(T.mul(T.Tensor(a), T.square(t)))
    h = hessian.hutchinson_diagonal(lambda v: T.hvp(loss, np.ones(4), v), (4,), 64, np.random.default_rng(0))
    assert np.mean(h) * 4 == pytest.approx(2 * a.sum(), rel=0.05)


def test_statistic_error_names_layer(desk):
    bad = desk.net.with_weights([w * (np.inf if i == 2 else 1.0) for i, w in enumerate(desk.net.weights())])
    with pytest.raises((netzoo.StatisticError, FloatingPointError)):
        netzoo.extract_stats(bad, desk.dataset, seed=0, n_probes=1)
