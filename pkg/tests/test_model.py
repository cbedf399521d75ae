import math

import numpy as np
import pytest

from oracles import eq8_mean
from masr.data import Sample
from masr.errors import ConfigError, ContractError, ParseError, SchemaError, ShapeError
from masr.gradcheck import check_problem, random_problem
from masr.model import (
    ArlLayer,
    MasrParams,
    ModelShape,
    RegularizerTable,
    arl_cascade,
    arl_forward,
    attribute_forward,
    attribute_loss,
    batch_loss,
    compute_regularizer,
    forward,
    loss_and_grad,
    masr_backward,
    masr_loss,
    read_checkpoint,
    scene_forward,
    write_checkpoint,
)
from masr.numerics import finite_diff_gradient, softmax_cross_entropy


def random_params(rng, d=6, m=4, K=3, depth=2, **kw):
    shape = ModelShape(d=d, m=m, K=K, depth=depth, **kw)
    params = MasrParams.init(shape, rng)
    for name in params:
        params.arrays[name] = params[name] * 2.0
    return params


def random_sample(rng, d, m, K):
    a = rng.uniform(0, 1, m) * (rng.random(m) < 0.7)
    return Sample("s", rng.normal(size=d), int(rng.integers(K)), a, (a > 0.5).astype(float))


def random_layer(rng, m, scale=2.0):
    return ArlLayer(
        rng.normal(0, scale, (m, m)), rng.normal(0, scale, (m, m)), rng.normal(0, scale, m), rng.normal(0, scale, m)
    )


class TestRegularizer:
    def test_two_classes(self):
        # attribute positive in 3 class-0 samples and 1 class-1 sample
        ahat = np.array([[1], [1], [1], [0], [1], [0]], dtype=float)
        y = np.array([0, 0, 0, 0, 1, 1])
        beta = compute_regularizer(ahat, y, 2).beta
        assert beta[0, 0] == 3.0
        assert beta[0, 1] == pytest.approx(1 / 3, abs=1e-15)

    def test_absent_attribute(self):
        beta = compute_regularizer(np.zeros((6, 2)), np.array([0, 1, 2, 0, 1, 2]), 3).beta
        np.testing.assert_array_equal(beta, 0.0)

    def test_uniform_positives(self):
        y = np.repeat(np.arange(4), 5)
        ahat = np.ones((20, 1))
        beta = compute_regularizer(ahat, y, 4).beta
        assert np.all(beta == beta[0, 0])
        assert beta[0, 0] == pytest.approx(5 / 15)

    def test_single_class_attribute_smoothed(self):
        ahat = np.array([[1.0], [1.0], [0.0]])
        beta = compute_regularizer(ahat, np.array([0, 0, 1]), 2).beta
        np.testing.assert_array_equal(beta[0], [2.0, 0.0])

    def test_requires_two_classes(self):
        with pytest.raises(ConfigError):
            compute_regularizer(np.zeros((2, 1)), np.zeros(2, dtype=int), 1)

    def test_rejects_non_binary(self):
        with pytest.raises(ContractError):
            compute_regularizer(np.full((2, 1), 0.5), np.array([0, 1]), 2)


class TestAttributeHead:
    def test_zero_weights(self):
        params = MasrParams.zeros(ModelShape(5, 3, 2))
        np.testing.assert_array_equal(attribute_forward(np.ones(5), params), [0.5, 0.5, 0.5])

    def test_branch_independence(self, rng):
        params = random_params(rng)
        f = rng.normal(size=6)
        before = attribute_forward(f, params)
        w = params["attr.weight"].copy()
        w[2] += rng.normal(size=6)
        after = attribute_forward(f, params.with_array("attr.weight", w))
        changed = np.flatnonzero(before != after)
        assert changed.tolist() == [2]

    def test_matches_per_branch_loop(self, rng):
        for hidden in (0, 3):
            params = random_params(rng, attr_hidden=hidden)
            f = rng.normal(size=6)
            expected = []
            for j in range(params.shape.m):
                if hidden:
                    h = [max(0.0, sum(params["attr.hidden_weight"][j, u, i] * f[i] for i in range(6))
                             + params["attr.hidden_bias"][j, u]) for u in range(hidden)]
                    z = sum(params["attr.weight"][j, u] * h[u] for u in range(hidden)) + params["attr.bias"][j]
                else:
                    z = sum(params["attr.weight"][j, i] * f[i] for i in range(6)) + params["attr.bias"][j]
                expected.append(1 / (1 + math.exp(-z)))
            np.testing.assert_allclose(attribute_forward(f, params), expected, rtol=1e-13)

    def test_shape_error(self):
        with pytest.raises(ShapeError):
            attribute_forward(np.ones(4), MasrParams.zeros(ModelShape(5, 3, 2)))


class TestAttributeLoss:
    def test_unit_beta_half_probability(self):
        reg = RegularizerTable.ones(3, 2)
        for ahat in ([0, 0, 0], [1, 0, 1], [1, 1, 1]):
            assert attribute_loss(np.full(3, 0.5), np.array(ahat, float), 0, reg) == pytest.approx(math.log(2))

    def test_beta_inert_without_positives(self, rng):
        probs = rng.uniform(0.05, 0.95, 5)
        a = attribute_loss(probs, np.zeros(5), 1, RegularizerTable(rng.uniform(0, 9, (5, 2))))
        b = attribute_loss(probs, np.zeros(5), 1, RegularizerTable.ones(5, 2))
        assert a == b

    def test_weighted_example(self):
        # (3 ln 2 + ln 2) / 2 = 2 ln 2
        reg = RegularizerTable(np.array([[3.0, 1.0], [1.0, 1.0]]))
        loss = attribute_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), 0, reg)
        assert loss == pytest.approx(2 * math.log(2), abs=1e-15)
        assert loss == pytest.approx(1.3863, abs=5e-5)

    def test_negative_mode_scales_negatives(self):
        reg = RegularizerTable(np.array([[1.0, 1.0], [3.0, 1.0]]))
        loss = attribute_loss(np.array([0.5, 0.5]), np.array([1.0, 0.0]), 0, reg, beta_mode="negative")
        assert loss == pytest.approx(2 * math.log(2), abs=1e-15)

    def test_sum_instead_of_mean(self):
        reg = RegularizerTable.ones(4, 2)
        total = attribute_loss(np.full(4, 0.5), np.zeros(4), 0, reg, mean_over_attributes=False)
        assert total == pytest.approx(4 * math.log(2))

    def test_degenerates_to_unweighted_mean(self, rng):
        for _ in range(200):
            m = int(rng.integers(1, 12))
            p = rng.uniform(0, 1, m)
            t = (rng.random(m) < 0.5).astype(float)
            got = attribute_loss(p, t, 0, RegularizerTable.ones(m, 3))
            assert got == pytest.approx(eq8_mean(p, t), abs=1e-12)

    def test_rejects_soft_labels(self):
        with pytest.raises(ContractError):
            attribute_loss(np.full(2, 0.5), np.array([0.2, 1.0]), 0, RegularizerTable.ones(2, 2))


class TestArl:
    def test_zero_scores(self, rng):
        layer = random_layer(rng, 4)
        np.testing.assert_array_equal(arl_forward(np.zeros(4), rng.normal(size=4), layer), np.zeros(4))

    def test_zero_params_halves(self):
        z = np.zeros((2, 2))
        layer = ArlLayer(z, z, np.zeros(2), np.zeros(2))
        np.testing.assert_array_equal(arl_forward(np.array([0.8, 0.4]), np.array([3.0, -1.0]), layer), [0.4, 0.2])

    def test_bound_random_draws(self, rng):
        for _ in range(1000):
            m = int(rng.integers(1, 10))
            a = rng.uniform(0, 1, m) * (rng.random(m) < 0.7)
            v = arl_forward(a, rng.normal(0, 3, m), random_layer(rng, m))
            assert np.all(v >= 0)
            assert np.all(v[a > 0] < a[a > 0])
            assert np.all(v[a == 0] == 0)

    def test_cascade_depth_one_is_single_layer(self, rng):
        layer = random_layer(rng, 5)
        a, at = rng.uniform(0, 1, 5), rng.normal(size=5)
        np.testing.assert_array_equal(arl_cascade(a, at, [layer]), arl_forward(a, at, layer))

    def test_cascade_zero_params_quarter(self):
        z = np.zeros((3, 3))
        layer = ArlLayer(z, z, np.zeros(3), np.zeros(3))
        a = np.array([0.8, 0.4, 1.0])
        np.testing.assert_array_equal(arl_cascade(a, np.ones(3), [layer, layer]), 0.25 * a)

    def test_cascade_zero_scores_any_depth(self, rng):
        for depth in range(1, 5):
            layers = [random_layer(rng, 3) for _ in range(depth)]
            np.testing.assert_array_equal(arl_cascade(np.zeros(3), rng.normal(size=3), layers), 0.0)

    def test_empty_cascade(self):
        with pytest.raises(ConfigError):
            arl_cascade(np.ones(2), np.ones(2), [])

    def test_shape_error(self, rng):
        with pytest.raises(ShapeError):
            arl_forward(np.ones(3), np.ones(4), random_layer(rng, 3))

    def test_jacobian_at_zero_is_gate_diagonal(self, rng):
        m = 5
        layer = random_layer(rng, m, scale=1.0)
        at = rng.normal(size=m)
        jac = np.stack([
            finite_diff_gradient(lambda a, i=i: float(arl_forward(a, at, layer)[i]), np.zeros(m), 1e-6)
            for i in range(m)
        ])
        # at a = 0: dv/da = diag(sigmoid(w_c + relu(W_at a~ + b)))
        gate = 1 / (1 + np.exp(-(layer.w_c + np.maximum(layer.w_at @ at + layer.b, 0))))
        np.testing.assert_allclose(jac, np.diag(gate), atol=1e-9)


class TestSceneHead:
    def test_zero_head_uniform(self):
        params = MasrParams.zeros(ModelShape(4, 3, 5))
        logits = scene_forward(np.ones(4), np.ones(3), params)
        np.testing.assert_array_equal(logits, np.zeros(5))
        assert softmax_cross_entropy(logits, 2) == pytest.approx(math.log(5))

    def test_permuting_v_with_columns(self, rng):
        params = random_params(rng)
        f, v = rng.normal(size=6), rng.uniform(size=4)
        perm = rng.permutation(4)
        W = params["scene.weight"].copy()
        W[:, 6:] = W[:, 6:][:, perm]
        permuted = params.with_array("scene.weight", W)
        np.testing.assert_allclose(scene_forward(f, v[perm], permuted), scene_forward(f, v, params), rtol=1e-14)

    def test_matches_loop(self, rng):
        params = random_params(rng)
        f, v = rng.normal(size=6), rng.uniform(size=4)
        h = list(f) + list(v)
        W, b = params["scene.weight"], params["scene.bias"]
        expected = [sum(W[k, i] * h[i] for i in range(10)) + b[k] for k in range(3)]
        np.testing.assert_allclose(scene_forward(f, v, params), expected, rtol=1e-13)

    def test_feature_only_mode(self, rng):
        params = random_params(rng)
        W = params["scene.weight"].copy()
        W[:, 6:] = 0.0
        params = params.with_array("scene.weight", W)
        f = rng.normal(size=6)
        np.testing.assert_allclose(scene_forward(f, None, params), scene_forward(f, np.zeros(4), params), atol=1e-14)

    def test_baseline_matches_masr_when_v_columns_zero(self, rng):
        params = random_params(rng)
        W = params["scene.weight"].copy()
        W[:, 6:] = 0.0
        params = params.with_array("scene.weight", W)
        X = rng.normal(size=(8, 6))
        A = rng.uniform(size=(8, 4))
        y = rng.integers(0, 3, 8)
        reg = RegularizerTable.ones(4, 3)
        joint = batch_loss(params, X, A, (A > 0.5).astype(float), y, reg, "joint")
        scene = batch_loss(params, X, A, (A > 0.5).astype(float), y, reg, "scene_only")
        assert joint.cls == scene.cls


class TestMasrLoss:
    def test_additive(self, rng):
        for _ in range(100):
            params = random_params(rng)
            s = random_sample(rng, 6, 4, 3)
            total, cls, att = masr_loss(s, params, RegularizerTable(rng.uniform(0, 3, (4, 3))))
            assert abs(total - (cls + att)) <= 1e-12
            assert cls >= 0 and att >= 0 and total >= max(cls, att)

    def test_near_perfect_attributes(self, rng):
        params = random_params(rng)
        s = random_sample(rng, 6, 4, 3)
        # saturate every attribute logit towards its label
        params.arrays["attr.weight"] = np.zeros((4, 6))
        params.arrays["attr.bias"] = np.where(s.ahat == 1, 40.0, -40.0)
        total, cls, att = masr_loss(s, params, RegularizerTable.ones(4, 3))
        assert att == pytest.approx(0.0, abs=1e-6)
        assert total == pytest.approx(cls, abs=1e-6)

    def test_scene_only_has_no_attribute_term(self, rng):
        params = random_params(rng)
        s = random_sample(rng, 6, 4, 3)
        total, cls, att = masr_loss(s, params, RegularizerTable.ones(4, 3), mode="scene_only")
        assert att == 0.0 and total == cls


class TestGradients:
    @pytest.mark.parametrize("seed", range(10))
    def test_random_configuration(self, seed):
        problem = random_problem(np.random.default_rng(1000 + seed))
        for r in check_problem(problem):
            assert r.rel_error < 1e-4, (r.group, r.rel_error)

    @pytest.mark.parametrize("variant", [dict(attr_hidden=2), dict(adapter=True), dict(depth=3)])
    def test_variants(self, rng, variant):
        params = random_params(rng, **{"depth": 2, **variant})
        X = rng.normal(size=(3, 6))
        A = rng.uniform(size=(3, 4)) * (rng.random((3, 4)) < 0.7)
        Ahat = (rng.random((3, 4)) < 0.5).astype(float)
        y = rng.integers(0, 3, 3)
        reg = RegularizerTable(rng.uniform(0.1, 3, (4, 3)))
        _, grads = loss_and_grad(params, X, A, Ahat, y, reg)
        for name, value in params.items():
            f = lambda w, name=name: batch_loss(params.with_array(name, w), X, A, Ahat, y, reg).total
            np.testing.assert_allclose(grads[name], finite_diff_gradient(f, value), rtol=1e-5, atol=1e-8)

    def test_single_sample_backward(self, rng):
        params = random_params(rng)
        s = random_sample(rng, 6, 4, 3)
        reg = RegularizerTable.ones(4, 3)
        grads = masr_backward(s, params, reg)
        f = lambda w: masr_loss(s, params.with_array("arl.0.w_a", w), reg)[0]
        np.testing.assert_allclose(grads["arl.0.w_a"], finite_diff_gradient(f, params["arl.0.w_a"]), atol=1e-9)

    def test_dead_path(self, rng):
        # head j: beta = 0, label 0, all scores 0 -> no route from head j to the loss
        params = random_params(rng)
        j = 2
        beta = rng.uniform(0.5, 2, (4, 3))
        beta[j, :] = 0.0
        s = Sample("s", rng.normal(size=6), 1, np.zeros(4), np.array([1.0, 0.0, 0.0, 1.0]))
        grads = masr_backward(s, params, RegularizerTable(beta), beta_mode="negative")
        assert np.all(grads["attr.weight"][j] == 0) and grads["attr.bias"][j] == 0
        for t in range(2):
            for part in ("w_a", "w_at", "w_c", "b"):
                assert np.all(grads[f"arl.{t}.{part}"] == 0)

    def test_scene_only_freezes_attribute_and_arl(self, rng):
        params = random_params(rng)
        s = random_sample(rng, 6, 4, 3)
        grads = masr_backward(s, params, RegularizerTable.ones(4, 3), mode="scene_only")
        for name, g in grads.items():
            if name.startswith(("attr.", "arl.")):
                assert np.all(g == 0), name
        assert np.all(grads["scene.weight"][:, 6:] == 0)
        assert np.any(grads["scene.weight"][:, :6] != 0)


class TestCheckpoint:
    @pytest.mark.parametrize("kw", [{}, dict(attr_hidden=2, adapter=True, depth=3)])
    def test_round_trip(self, rng, tmp_path, kw):
        params = random_params(rng, **kw)
        write_checkpoint(tmp_path / "p.ckpt", params, {"note": "x"})
        loaded, extra = read_checkpoint(tmp_path / "p.ckpt")
        assert loaded == params and extra == {"note": "x"}
        assert loaded.tobytes() == params.tobytes()

    def test_truncated(self, rng, tmp_path):
        write_checkpoint(tmp_path / "p.ckpt", random_params(rng))
        data = (tmp_path / "p.ckpt").read_bytes()
        (tmp_path / "p.ckpt").write_bytes(data[:-8])
        with pytest.raises(SchemaError):
            read_checkpoint(tmp_path / "p.ckpt")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "p.ckpt").write_bytes(b"hello\n{}\n")
        with pytest.raises(ParseError):
            read_checkpoint(tmp_path / "p.ckpt")

    def test_bad_version(self, rng, tmp_path):
        write_checkpoint(tmp_path / "p.ckpt", random_params(rng))
        data = (tmp_path / "p.ckpt").read_bytes().replace(b"MASRCKPT 1", b"MASRCKPT 9", 1)
        (tmp_path / "p.ckpt").write_bytes(data)
        with pytest.raises(SchemaError, match="version"):
            read_checkpoint(tmp_path / "p.ckpt")


class TestShapes:
    def test_k_below_two(self):
        with pytest.raises(ConfigError):
            ModelShape(3, 2, 1)

    def test_wrong_array_shape(self):
        shape = ModelShape(3, 2, 2, depth=1)
        arrays = {k: np.zeros(s) for k, s in shape.param_shapes().items()}
        arrays["arl.0.w_a"] = np.zeros((3, 3))
        with pytest.raises(ShapeError):
            MasrParams(shape, arrays)

    def test_forward_determinism(self, rng):
        params = random_params(rng)
        X, A = rng.normal(size=(5, 6)), rng.uniform(size=(5, 4))
        assert forward(params, X, A).logits.tobytes() == forward(params, X.copy(), A.copy()).logits.tobytes()
