import json

import numpy as np
import pytest

from nuc import nuc_model as nm
from nuc.exceptions import DegenerateTaskError, FormatError, ShapeError
from nuc.knn_index import NeighborQuery, build_index
from nuc.metrics import auroc
from nuc.neigh_stats import neighbor_table
from nuc.repr_store import ReprSet, correctness_labels

from oracles import adam_textbook, forward_loop, grad_check_error, random_case


def test_featurize():
    q = NeighborQuery(np.array([5, 6]), np.array([1.0, 3.0]), np.array([4, 7]), np.array([0, 1]))
    f = nm.featurize(q, 4, 0.9)
    assert f.per_neighbor.tolist() == [[1.0, 1.0], [3.0, 0.0]]
    assert f.global_.tolist() == [0.9]
    assert f.k == 2
    q = NeighborQuery(np.arange(3), np.ones(3), np.array([2, 2, 2]), np.arange(3))
    assert nm.featurize(q, 2, 0.5).per_neighbor[:, 1].tolist() == [1, 1, 1]


def test_featurize_matches_stats(small_data, small_index):
    rs = small_data.test_in
    dist, lab = neighbor_table(small_index, rs, 10)
    X = nm.batch_features(dist, lab, rs.pred_labels)
    for i in (0, 5, 33):
        f = nm.featurize(small_index.query(rs.vectors[i], 10), rs.pred_labels[i], rs.confidences[i])
        assert np.array_equal(f.per_neighbor, X[i])


def test_zero_network_gives_half():
    net = nm.init_network(3, hidden_width=4, rng=0)
    net = net.with_params([np.zeros_like(p) for p in net.params()])
    f = nm.NeighborhoodFeatures(np.random.default_rng(0).random((3, 2)), np.array([0.7]))
    logits, u = nm.forward(net, f)
    assert u == 0.5 and logits.tolist() == [0.0, 0.0]


def test_forward_matches_loop_oracle():
    rng = np.random.default_rng(11)
    for use_conf in (True, False):
        for _ in range(20):
            net, X, s, _ = random_case(rng, use_conf)
            u = nm.error_probability(nm.forward_batch(net, X, s)[0])
            for i in range(len(X)):
                ref = forward_loop(net.layers, net.head, X[i].tolist(), s[i], use_conf)
                assert u[i] == pytest.approx(ref, rel=1e-10, abs=1e-14)


def test_forward_shape_errors():
    net = nm.init_network(3, hidden_width=4, rng=0)
    with pytest.raises(ShapeError):
        nm.forward_batch(net, np.zeros((2, 3, 3)), [0.1, 0.2])
    with pytest.raises(ShapeError):
        nm.forward_batch(net, np.zeros((2, 3, 2)), [0.1])


def test_forward_accepts_any_k():
    net = nm.init_network(10, hidden_width=4, rng=0)
    for k in (1, 10, 50):
        u = nm.score_features(net, np.ones((1, k, 2)), [0.5])
        assert 0 < u[0] < 1


def test_permutation_invariance():
    rng = np.random.default_rng(4)
    net, X, s, _ = random_case(rng)
    u = nm.score_features(net, X, s)
    for _ in range(50):
        perm = rng.permutation(X.shape[1])
        np.testing.assert_allclose(nm.score_features(net, X[:, perm], s), u, rtol=1e-6)


def test_loss_values():
    assert nm.loss(0.5, 1) == pytest.approx(np.log(2))
    assert nm.loss(0.5, 0) == pytest.approx(np.log(2))
    assert nm.loss(1 - 1e-12, 0) < 1e-11
    assert nm.loss(1.0, 0) == 0.0
    assert nm.loss(0.0, 0) == np.inf
    rng = np.random.default_rng(0)
    for u, t in zip(rng.uniform(0.01, 0.99, 50), rng.integers(0, 2, 50)):
        ref = -t * np.log(1 - u) - (1 - t) * np.log(u)
        assert nm.loss(u, t) == pytest.approx(ref, rel=1e-12)
        assert nm.loss(u, t) >= 0


def test_loss_from_logits_consistent():
    logits = np.array([[0.3, -1.2], [2.0, 2.5]])
    u = nm.error_probability(logits)
    t = [1, 0]
    assert nm.cross_entropy(logits, t) == pytest.approx(np.mean([nm.loss(u[0], 1), nm.loss(u[1], 0)]))


def test_gradients_match_finite_differences():
    rng = np.random.default_rng(21)
    for use_conf in (True, False):
        for _ in range(10):
            assert grad_check_error(*random_case(rng, use_conf)) <= 1e-4


def test_zero_gradient_at_symmetric_point():
    net = nm.init_network(3, hidden_width=4, rng=0)
    ps = net.params()
    ps = [np.zeros_like(p) for p in ps[:-2]] + [np.ones_like(ps[-2]), np.zeros(2)]
    net = net.with_params(ps)
    value, grads = nm.backward_batch(net, np.zeros((4, 3, 2)), np.zeros(4), [1, 0, 1, 0])
    assert value == pytest.approx(np.log(2))
    assert all(np.all(g == 0) for g in grads)


def test_confidence_weight_gradient_zero_when_input_zero():
    rng = np.random.default_rng(3)
    net, X, s, t = random_case(rng)
    _, grads = nm.backward_batch(net, X, np.zeros_like(s), t)
    assert np.all(grads[-2][-1] == 0)  # head row fed by the confidence input
    assert np.any(grads[-2][:-1] != 0)


def test_single_point_backward_matches_batch():
    rng = np.random.default_rng(8)
    net, X, s, t = random_case(rng)
    f = nm.NeighborhoodFeatures(X[0], s[:1])
    one = nm.backward(net, f, t[0])
    ref = nm.backward_batch(net, X[:1], s[:1], t[:1])[1]
    assert all(np.array_equal(a, b) for a, b in zip(one, ref))


def test_adam_matches_textbook():
    rng = np.random.default_rng(0)
    p = [rng.standard_normal((3, 2)), rng.standard_normal(2)]
    state = nm.AdamState.zeros_like(p)
    ref_p, ref_m, ref_v = [a.copy() for a in p], [np.zeros_like(a) for a in p], [np.zeros_like(a) for a in p]
    for t in range(1, 6):
        g = [rng.standard_normal(a.shape) for a in p]
        p, state = nm.adam_step(state, p, g, 1e-2)
        for i in range(2):
            ref_p[i], ref_m[i], ref_v[i] = adam_textbook(ref_p[i], g[i], ref_m[i], ref_v[i], t, 1e-2)
            np.testing.assert_allclose(p[i], ref_p[i], rtol=1e-14, atol=1e-15)
    assert state.step == 5


def test_adam_first_step_is_signed_lr():
    p = [np.array([1.0, -2.0, 3.0])]
    g = [np.array([0.5, -4.0, 1e-3])]
    new, _ = nm.adam_step(nm.AdamState.zeros_like(p), p, g, 0.1)
    expected = p[0] - 0.1 * g[0] / (np.abs(g[0]) + 1e-8)
    np.testing.assert_allclose(new[0], expected, rtol=1e-12)


def test_adam_zero_gradient_and_statefulness():
    p = [np.array([1.0, 2.0])]
    state = nm.AdamState.zeros_like(p)
    p1, state1 = nm.adam_step(state, p, [np.array([1.0, -1.0])], 0.1)
    p2, state2 = nm.adam_step(state1, p1, [np.zeros(2)], 0.1)
    np.testing.assert_array_less(np.abs(state2.m[0]), np.abs(state1.m[0]))
    assert np.all(state2.v[0] < state1.v[0])
    # zero gradient from a fresh state leaves parameters untouched
    p3, _ = nm.adam_step(nm.AdamState.zeros_like(p), p, [np.zeros(2)], 0.1)
    assert np.array_equal(p3[0], p[0])
    g = [np.array([0.3, -0.7])]
    two, st = nm.adam_step(nm.AdamState.zeros_like(p), p, g, 0.1)
    two, _ = nm.adam_step(st, two, g, 0.1)
    one, _ = nm.adam_step(nm.AdamState.zeros_like(p), p, g, 0.2)
    assert not np.array_equal(two[0], one[0])


def test_train_config_schedule():
    cfg = nm.TrainConfig()
    assert (cfg.k, cfg.epochs, cfg.learning_rate, cfg.annealed_learning_rate, cfg.anneal_step) == \
        (10, 1, 1e-3, 1e-4, 40000)
    assert cfg.lr_at(39999) == 1e-3 and cfg.lr_at(40000) == 1e-4
    with pytest.raises(ValueError):
        nm.TrainConfig(k=0)


def test_train_deterministic_and_improves(small_data, small_index):
    cfg = nm.TrainConfig(k=5, epochs=3, batch_size=16, hidden_width=8)
    a = nm.train(small_data.train, small_index, cfg)
    b = nm.train(small_data.train, small_index, cfg)
    assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))
    dist, lab = neighbor_table(small_index, small_data.train, 5, self_exclude=True)
    X = nm.batch_features(dist, lab, small_data.train.pred_labels)
    t = correctness_labels(small_data.train)
    rows = X.reshape(-1, 2)
    init = nm.init_network(5, 8, 2, True, np.random.default_rng(cfg.seed),
                           rows.mean(0), rows.std(0))
    untrained = nm.cross_entropy(nm.forward_batch(init, X, small_data.train.confidences)[0], t)
    assert a.history[0] < untrained
    assert a.history[-1] < a.history[0]


def test_degenerate_task():
    rs = ReprSet(np.random.default_rng(0).random((6, 2)), [0] * 6, [0] * 6, [0.9] * 6)
    with pytest.raises(DegenerateTaskError, match="mistakes"):
        nm.train(rs, build_index(rs), nm.TrainConfig(k=2))


def test_score_properties(small_data, small_index):
    net = nm.train(small_data.train, small_index, nm.TrainConfig(k=5, hidden_width=8, epochs=2))
    u = nm.score(net, small_index, small_data.test_in)
    assert np.all((u > 0) & (u < 1))
    single = [nm.score(net, small_index, small_data.test_in.subset([i]))[0] for i in range(10)]
    np.testing.assert_allclose(single, u[:10], rtol=1e-12)
    # a training point scored without self-exclusion sees itself at distance 0
    dist, _ = neighbor_table(small_index, small_data.train.subset([0]), 5)
    assert dist[0, 0] == 0.0


def test_ood_above_median(default_data, default_index):
    net = nm.train(default_data.train, default_index, nm.TrainConfig())
    u_in = nm.score(net, default_index, default_data.test_in)
    u_ood = nm.score(net, default_index, default_data.test_ood)
    assert np.all(u_ood > np.median(u_in))
    errors = 1 - correctness_labels(default_data.test_in)
    assert auroc(u_in, errors) >= 0.85


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    net, X, s, _ = random_case(rng)
    nm.save_checkpoint(tmp_path / "c.json", net)
    back = nm.load_checkpoint(tmp_path / "c.json")
    assert all(np.array_equal(a, b) for a, b in zip(net.params(), back.params()))
    assert back.use_confidence and back.k == net.k
    d = json.loads((tmp_path / "c.json").read_text())
    assert d["format_version"] == 1 and d["feature_spec"] == "dist+flag+conf"
    assert d["L"] == net.n_layers and d["hidden_width"] == net.hidden_width


def test_checkpoint_rejects(tmp_path):
    net = nm.init_network(3, hidden_width=4, rng=0)
    d = nm.network_to_dict(net)
    for bad in ({**d, "feature_spec": "raw+flag"}, {**d, "format_version": 2},
                {**d, "hidden_width": 5}):
        (tmp_path / "c.json").write_text(json.dumps(bad))
        with pytest.raises(FormatError):
            nm.load_checkpoint(tmp_path / "c.json")
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(FormatError):
        nm.load_checkpoint(tmp_path / "c.json")


def test_estimator(small_data):
    from sklearn.base import clone

    tr, te = small_data.train, small_data.test_in
    est = nm.NUCClassifier(k=5, hidden_width=8, epochs=2)
    assert clone(est).get_params() == est.get_params()
    est.fit(tr.vectors, tr.labels, tr.pred_labels, tr.confidences)
    proba = est.predict_proba(te.vectors, te.pred_labels, te.confidences)
    np.testing.assert_allclose(proba.sum(1), 1.0)
    index = build_index(tr)
    u = nm.score(est.network_, index, te)
    np.testing.assert_allclose(proba[:, 1], u, rtol=1e-12)
    assert set(est.predict(te.vectors, te.pred_labels, te.confidences)) <= {0, 1}
