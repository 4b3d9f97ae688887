"""Prototype classification, cross-entropy, and meta-learner adaptation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from fewshot_ibp import layers as L
from fewshot_ibp import learners as LR
from fewshot_ibp import tensor as T
from fewshot_ibp.episodes import Task, TaskSpec, sample_task, synth_dataset
from fewshot_ibp.optim import adam


class TestPrototypes:
    def test_one_shot_prototype_is_the_embedding(self):
        emb = np.array([[1.0, 2.0], [3.0, 4.0]])
        protos = LR.compute_prototypes(emb, np.array([0, 1]), 2)
        np.testing.assert_array_equal(protos, emb)

    def test_mean_of_class_embeddings(self):
        emb = np.array([[0.0, 0.0], [2.0, 2.0], [5.0, 5.0]])
        protos = LR.compute_prototypes(emb, np.array([0, 0, 1]), 2)
        np.testing.assert_array_equal(protos[0], [1.0, 1.0])
        np.testing.assert_array_equal(protos[1], [5.0, 5.0])

    def test_missing_class_rejected(self):
        with pytest.raises(ValueError):
            LR.compute_prototypes(np.ones((2, 2)), np.array([0, 1]), 5)


class TestProtonetProbs:
    def test_equidistant_gives_uniform(self):
        protos = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        probs = LR.protonet_probs(np.zeros((1, 2)), protos)
        np.testing.assert_allclose(probs, 0.25)

    def test_extreme_distance_gap(self):
        # distances (0, 100): p ~= (1/(1+e^-100), e^-100/(1+e^-100))
        query = np.zeros((1, 1))
        protos = np.array([[0.0], [10.0]])  # squared distances 0 and 100
        probs = LR.protonet_probs(query, protos)
        expected0 = 1.0 / (1.0 + math.exp(-100.0))
        assert probs[0, 0] == pytest.approx(expected0, rel=1e-12)
        assert probs[0, 1] == pytest.approx(math.exp(-100.0), rel=1e-6)

    @given(
        emb=hnp.arrays(
            np.float64,
            (3, 4),
            elements=st.floats(min_value=-50, max_value=50),
        ),
        protos=hnp.arrays(
            np.float64,
            (5, 4),
            elements=st.floats(min_value=-50, max_value=50),
        ),
    )
    @settings(max_examples=50, deadline=None)
    def test_rows_sum_to_one(self, emb, protos):
        probs = LR.protonet_probs(emb, protos)
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)

    def test_shift_invariance_of_distance_softmax(self):
        rng = np.random.default_rng(0)
        d = rng.uniform(0, 5, size=(4, 3))
        for c in (-2.0, 0.5, 100.0):
            p1 = T.value_of(LR.softmax(-d))
            p2 = T.value_of(LR.softmax(-(d + c)))
            np.testing.assert_allclose(p1, p2, atol=1e-12)

    def test_argmax_is_nearest_prototype(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            emb = rng.standard_normal((6, 3))
            protos = rng.standard_normal((4, 3))
            probs = LR.protonet_probs(emb, protos)
            d = ((emb[:, None, :] - protos[None, :, :]) ** 2).sum(-1)
            np.testing.assert_array_equal(np.argmax(probs, 1), np.argmin(d, 1))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            LR.protonet_probs(np.zeros((1, 3)), np.zeros((2, 4)))

    def test_euclidean_distance_flag(self):
        query = np.array([[0.0, 0.0]])
        protos = np.array([[3.0, 4.0], [0.0, 1.0]])  # distances 5 and 1
        logits = T.value_of(LR.protonet_logits(query, protos, distance="euclidean"))
        np.testing.assert_allclose(logits, [[-5.0, -1.0]])


class TestCrossEntropy:
    def test_uniform_five_class_is_log_five(self):
        probs = np.full((1, 5), 0.2)
        loss = T.value_of(LR.cross_entropy(probs, np.array([2]), from_logits=False))
        assert loss == pytest.approx(math.log(5.0), rel=1e-12)

    def test_certain_correct_prediction_is_zero(self):
        probs = np.array([[0.0, 1.0, 0.0]])
        loss = T.value_of(LR.cross_entropy(probs, np.array([1]), from_logits=False))
        assert loss == pytest.approx(0.0, abs=1e-15)

    def test_batch_mean(self):
        probs = np.array([[0.5, 0.5], [0.25, 0.75]])
        a = -math.log(0.5)
        b = -math.log(0.75)
        loss = T.value_of(LR.cross_entropy(probs, np.array([0, 1]), from_logits=False))
        assert loss == pytest.approx((a + b) / 2, rel=1e-12)

    def test_logits_match_probability_path(self):
        rng = np.random.default_rng(2)
        logits = rng.standard_normal((4, 3))
        labels = rng.integers(0, 3, size=4)
        probs = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        l1 = T.value_of(LR.cross_entropy(logits, labels))
        l2 = T.value_of(LR.cross_entropy(probs, labels, from_logits=False))
        assert l1 == pytest.approx(l2, rel=1e-12)

    def test_out_of_range_label_rejected(self):
        with pytest.raises(ValueError):
            LR.cross_entropy(np.zeros((1, 3)), np.array([3]))


def linear_model_inner_loss(x, y):
    """Inner objective (w*x - y)^2 for a single fully-connected weight."""

    def loss_fn(params, tape):
        w = params[0]["weight"]
        r = T.sub(T.mul(w, x), y)
        return T.sum_(T.mul(r, r))

    return loss_fn


def tiny_linear_network(w0):
    return L.Network(
        [L.fully_connected(np.array([[w0]]), np.zeros(1))], split_index=1
    )


class TestMamlAdapt:
    def test_zero_steps_or_zero_lr_is_identity(self):
        net = tiny_linear_network(1.0)
        for lr, steps in ((0.0, 3), (0.1, 0)):
            adapted = LR.maml_adapt(
                net, None, None, lr, steps, inner_loss=linear_model_inner_loss(1.0, 0.0)
            )
            assert T.value_of(adapted.params[0]["weight"])[0, 0] == 1.0

    def test_hand_computed_single_step(self):
        # loss (w*x - y)^2 at w=1, x=1, y=0: gradient 2, so w' = 1 - 0.1*2 = 0.8
        net = tiny_linear_network(1.0)
        adapted = LR.maml_adapt(
            net, None, None, 0.1, 1, inner_loss=linear_model_inner_loss(1.0, 0.0)
        )
        assert T.value_of(adapted.params[0]["weight"])[0, 0] == pytest.approx(0.8)

    def test_step_composition(self):
        rng = np.random.default_rng(3)
        net = L.Network(
            [L.init_fully_connected(3, 4, rng), L.relu(), L.init_fully_connected(4, 2, rng)],
            split_index=2,
        )
        x = rng.standard_normal((6, 3))
        y = rng.integers(0, 2, size=6)
        once = LR.maml_adapt(net, x, y, 0.05, 4)
        first = LR.maml_adapt(net, x, y, 0.05, 2)
        second = LR.maml_adapt(net, x, y, 0.05, 2, start_params=first.params)
        for a, b in zip(once.as_arrays(), second.as_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_first_order_outer_gradient_matches_finite_differences(self):
        # the outer gradient of the query loss at the adapted weight, treated
        # as a function of the initial weight through a detached update
        x_s, y_s = 1.3, 0.4
        x_q, y_q = -0.7, 0.9
        lr = 0.05

        def query_loss_after_adapt(w0):
            net = tiny_linear_network(w0)
            adapted = LR.maml_adapt(
                net, None, None, lr, 1, inner_loss=linear_model_inner_loss(x_s, y_s)
            )
            w1 = T.value_of(adapted.params[0]["weight"])[0, 0]
            return (w1 * x_q - y_q) ** 2

        w0 = 1.1
        net = tiny_linear_network(w0)
        adapted = LR.maml_adapt(
            net, None, None, lr, 1, inner_loss=linear_model_inner_loss(x_s, y_s)
        )
        tape = T.Tape()
        phi = [{n: tape.leaf(a) for n, a in e.items()} for e in adapted.params]
        r = T.sub(T.mul(phi[0]["weight"], x_q), y_q)
        loss = T.sum_(T.mul(r, r))
        grads = tape.backward(loss, [phi[0]["weight"]])
        g_first_order = float(np.ravel(grads[phi[0]["weight"]])[0])
        # detached-update oracle: d/dphi only (the first-order reading)
        w1 = T.value_of(adapted.params[0]["weight"])[0, 0]
        expected = 2 * (w1 * x_q - y_q) * x_q
        assert g_first_order == pytest.approx(expected, rel=1e-12)
        # and it differs from the full derivative when the inner step matters
        h = 1e-6
        full = (query_loss_after_adapt(w0 + h) - query_loss_after_adapt(w0 - h)) / (2 * h)
        assert full == pytest.approx(g_first_order * (1 - 2 * lr * x_s * x_s), rel=1e-4)

    def test_second_order_matches_full_finite_differences(self):
        x_s, y_s = 1.3, 0.4
        x_q, y_q = -0.7, 0.9
        lr, w0 = 0.05, 1.1

        def query_loss_after_adapt(wv):
            w1 = wv - lr * 2 * x_s * (wv * x_s - y_s)
            return (w1 * x_q - y_q) ** 2

        net = tiny_linear_network(w0)
        tape = T.Tape()
        theta = L.make_param_nodes(net.layers, tape)
        adapted = LR.maml_adapt(
            net,
            None,
            None,
            lr,
            1,
            first_order=False,
            tape=tape,
            theta_params=theta,
            inner_loss=linear_model_inner_loss(x_s, y_s),
        )
        r = T.sub(T.mul(adapted.params[0]["weight"], x_q), y_q)
        loss = T.sum_(T.mul(r, r))
        grads = tape.backward(loss, [theta[0]["weight"]])
        got = float(np.ravel(grads[theta[0]["weight"]])[0])
        h = 1e-6
        fd = (query_loss_after_adapt(w0 + h) - query_loss_after_adapt(w0 - h)) / (2 * h)
        assert got == pytest.approx(fd, rel=1e-6)

    def test_second_order_rejected_for_unsupported_layers(self):
        rng = np.random.default_rng(4)
        net = L.Network(
            [L.init_conv(1, 2, 3, rng), L.flatten(), L.init_fully_connected(32, 2, rng)],
            split_index=2,
        )
        tape = T.Tape()
        theta = L.make_param_nodes(net.layers, tape)
        with pytest.raises(ValueError):
            LR.maml_adapt(
                net,
                np.zeros((2, 1, 6, 6)),
                np.array([0, 1]),
                0.1,
                1,
                first_order=False,
                tape=tape,
                theta_params=theta,
            )


class TestMamlOuterStep:
    def make_task(self, rng, dim=3, ways=2, shots=2, queries=3):
        ds = synth_dataset(4, 12, (dim,), 2.0, 0.5, seed=int(rng.integers(1e6)))
        return sample_task(ds, TaskSpec(ways, shots, queries), rng)

    def test_constant_loss_leaves_parameters_unchanged(self):
        rng = np.random.default_rng(5)
        net = L.Network([L.init_fully_connected(3, 2, rng)], split_index=1)
        before = [a.copy() for a in net.parameter_arrays()]

        def frozen_loss(tape, theta, phi, task):
            const = tape.leaf(np.array(1.0))
            return T.mul(const, 1.0), {"losses": (1.0, 0.0, 0.0), "weights": (1, 0, 0), "total": 1.0}

        task = self.make_task(rng)
        LR.maml_outer_step(net, [task], frozen_loss, adam(0.01), 0.1, 1)
        for a, b in zip(before, net.parameter_arrays()):
            np.testing.assert_array_equal(a, b)

    def test_batch_of_one_equals_single_task_step(self):
        rng = np.random.default_rng(6)
        task = self.make_task(rng)

        def run(batch):
            rng_net = np.random.default_rng(7)
            net = L.Network(
                [L.init_fully_connected(3, 4, rng_net), L.relu(), L.init_fully_connected(4, 2, rng_net)],
                split_index=2,
            )

            def task_loss(tape, theta, phi, t):
                logits = L.forward(net.layers, t.query_x, params=phi)
                loss = LR.cross_entropy(logits, t.query_y)
                return loss, {"total": float(T.value_of(loss))}

            LR.maml_outer_step(net, batch, task_loss, adam(0.01), 0.05, 2)
            return net.parameter_arrays()

        a = run([task])
        b = run([task])
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)


class TestPredictAccuracy:
    def test_separable_clusters_are_perfect_for_protonet(self):
        ds = synth_dataset(6, 10, (4,), 20.0, 0.05, seed=8)
        rng = np.random.default_rng(9)
        net = L.Network([L.fully_connected(np.eye(4), np.zeros(4))], split_index=1)
        for _ in range(10):
            task = sample_task(ds, TaskSpec(3, 1, 4), rng)
            assert LR.predict_accuracy("protonet", net, task) == 1.0

    def test_permuted_labels_hit_chance_level(self):
        # binomial oracle: random guessing over 5 ways has mean accuracy 0.2
        ds = synth_dataset(8, 12, (4,), 3.0, 0.5, seed=10)
        rng = np.random.default_rng(11)
        net_rng = np.random.default_rng(12)
        net = L.Network([L.init_fully_connected(4, 4, net_rng)], split_index=1)
        accs = []
        for _ in range(1000):
            task = sample_task(ds, TaskSpec(5, 1, 3), rng)
            perm = rng.permutation(5)
            task.query_y = perm[task.query_y]
            accs.append(LR.predict_accuracy("protonet", net, task))
        assert abs(np.mean(accs) - 0.2) < 0.05

    def test_empty_query_rejected(self):
        net = L.Network([L.fully_connected(np.eye(2), np.zeros(2))], split_index=1)
        task = Task(
            support_x=np.zeros((2, 2)),
            support_y=np.array([0, 1]),
            query_x=np.zeros((0, 2)),
            query_y=np.zeros(0, dtype=int),
            class_ids=[0, 1],
        )
        with pytest.raises(ValueError):
            LR.predict_accuracy("protonet", net, task)

    def test_maml_eval_fine_tunes_to_separable_task(self):
        ds = synth_dataset(4, 10, (3,), 10.0, 0.1, seed=13)
        rng = np.random.default_rng(14)
        net_rng = np.random.default_rng(15)
        net = L.Network(
            [L.init_fully_connected(3, 8, net_rng), L.relu(), L.init_fully_connected(8, 2, net_rng)],
            split_index=2,
        )
        accs = [
            LR.predict_accuracy(
                "maml", net, sample_task(ds, TaskSpec(2, 5, 5), rng),
                eval_steps=20, inner_lr=0.5,
            )
            for _ in range(5)
        ]
        assert np.mean(accs) > 0.8
