import math
from dataclasses import replace

import numpy as np
import pytest

from mlcl.data import Standardizer, gen_hierarchical
from mlcl.gradcheck import central_difference, check_model_gradients, relative_error
from mlcl.labels import expand_array
from mlcl.loss import HeadConfig, Level
from mlcl.network import (
    DegenerateInputError,
    ModelParams,
    ModelSpec,
    TrainConfig,
    backward,
    batch_objective,
    build_model,
    checkpoint_bytes,
    embed,
    forward,
    load_checkpoint,
    normalize_rows,
    params_from_bytes,
    save_checkpoint,
    sgd_step,
    train,
)

TWO_HEADS = (HeadConfig(Level(0), 0.1, 0.5), HeadConfig(Level(1), 0.5, 0.5))


def small_spec(**kw):
    base = dict(input_dim=3, n_heads=2, n_classes=4, hidden_dim=6, embed_dim=5, head_hidden=4, proj_dim=3)
    base.update(kw)
    return ModelSpec(**base)


def toy_data(seed=0, per_class=10):
    ds = gen_hierarchical(2, 2, per_class, 4, seed=seed)
    ds.features = Standardizer.fit(ds.features)(ds.features)
    return ds


def naive_forward(params, x):
    """Scalar loops over neurons, independent of the vectorized code."""
    t = params.tensors
    spec = params.spec

    def dense(vec, W, b, act):
        out = []
        for j in range(W.shape[1]):
            s = float(b[j])
            for i in range(W.shape[0]):
                s += float(vec[i]) * float(W[i, j])
            out.append(math.tanh(s) if act else s)
        return out

    embs, projs, logits = [], [[] for _ in range(spec.n_heads)], []
    for row in x:
        h = dense(row, t["enc.W1"], t["enc.b1"], True)
        e = dense(h, t["enc.W2"], t["enc.b2"], True)
        embs.append(e)
        for k in range(spec.n_heads):
            u = dense(e, t[f"head{k}.W1"], t[f"head{k}.b1"], True)
            v = dense(u, t[f"head{k}.W2"], t[f"head{k}.b2"], False)
            norm = math.sqrt(sum(c * c for c in v))
            projs[k].append([c / norm for c in v])
        logits.append(dense(e, t["clf.W"], t["clf.b"], False))
    return np.array(embs), [np.array(p) for p in projs], np.array(logits)


class TestNormalizeRows:
    def test_three_four_five(self):
        z, _ = normalize_rows(np.array([[3.0, 4.0]]))
        assert np.allclose(z, [[0.6, 0.8]], atol=1e-15)

    def test_unit_row_unchanged(self):
        row = np.array([[0.0, 1.0, 0.0]])
        assert np.array_equal(normalize_rows(row)[0], row)

    def test_zero_row_names_row(self):
        with pytest.raises(DegenerateInputError, match="row 1"):
            normalize_rows(np.array([[1.0, 0.0], [0.0, 0.0]]))

    def test_jacobian(self, rng):
        m = rng.standard_normal((3, 4))
        g = rng.standard_normal((3, 4))
        _, back = normalize_rows(m)
        work = m.copy()
        num = central_difference(lambda: float((normalize_rows(work)[0] * g).sum()), work, 1e-6)
        assert relative_error(back(g), num) <= 1e-8


class TestForward:
    def test_zero_network_is_degenerate(self):
        params = ModelParams.init(small_spec(), 0)
        for k in params.tensors:
            params.tensors[k][...] = 0.0
        with pytest.raises(DegenerateInputError):
            forward(params, np.ones((2, 3)))

    def test_projection_rows_unit_norm(self, rng):
        params = ModelParams.init(small_spec(), 1)
        cache = forward(params, rng.standard_normal((7, 3)) * 5)
        for z in cache.projections:
            assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-6)

    def test_matches_naive_oracle(self, rng):
        params = ModelParams.init(small_spec(), 2)
        x = rng.standard_normal((4, 3))
        cache = forward(params, x)
        emb, projs, logits = naive_forward(params, x)
        assert np.allclose(cache.embeddings, emb, atol=1e-12)
        for a, b in zip(cache.projections, projs):
            assert np.allclose(a, b, atol=1e-12)
        assert np.allclose(cache.logits, logits, atol=1e-12)
        assert np.array_equal(embed(params, x), cache.embeddings)

    def test_input_dim_checked(self):
        params = ModelParams.init(small_spec(), 0)
        with pytest.raises(ValueError, match="input dim"):
            forward(params, np.ones((2, 4)))


class TestInit:
    def test_glorot_bounds(self):
        params = ModelParams.init(small_spec(), 3)
        for name, shape in params.spec.shapes():
            if len(shape) == 2:
                limit = math.sqrt(6 / sum(shape))
                assert np.abs(params.tensors[name]).max() <= limit

    def test_components_independent_of_head_count(self):
        one = ModelParams.init(small_spec(n_heads=1), 5)
        three = ModelParams.init(small_spec(n_heads=3), 5)
        for name in one.tensors:
            assert np.array_equal(one.tensors[name], three.tensors[name])


class TestBackward:
    def test_zero_upstream(self, rng):
        params = ModelParams.init(small_spec(), 0)
        cache = forward(params, rng.standard_normal((4, 3)))
        zeros = [np.zeros_like(z) for z in cache.projections]
        grads = backward(params, cache, zeros, np.zeros_like(cache.logits))
        assert all(not np.any(g) for g in grads.values())

    @pytest.mark.parametrize("mode", ["heads", "heads+ce"])
    def test_end_to_end_gradients(self, mode):
        assert check_model_gradients(mode)["overall"] <= 1e-5

    def test_zero_weight_head_matches_single_head(self, rng):
        single_cfg = TrainConfig(heads=(HeadConfig(Level(0), 0.1, 1.0),))
        double_cfg = TrainConfig(heads=(HeadConfig(Level(0), 0.1, 1.0), HeadConfig(Level(1), 0.5, 0.0)))
        single = ModelParams.init(small_spec(n_heads=1), 4)
        double = ModelParams.init(small_spec(n_heads=2), 4)
        x = rng.standard_normal((6, 3))
        levels = expand_array(np.array([[0, 0], [1, 0], [2, 1]]), (4, 2)).levels
        _, g1 = batch_objective(single, x, levels, (4, 2), single_cfg)
        _, g2 = batch_objective(double, x, levels, (4, 2), double_cfg)
        for name in ("enc.W1", "enc.b1", "enc.W2", "enc.b2", "head0.W1", "head0.W2"):
            assert np.array_equal(g1[name], g2[name])


class TestSgd:
    def test_plain_step(self):
        params = ModelParams.init(small_spec(), 0)
        before = params.copy()
        grads = {k: np.ones_like(v) for k, v in params.tensors.items()}
        sgd_step(params, grads, 0.1, 0.0)
        for k in grads:
            assert np.allclose(params.tensors[k], before.tensors[k] - 0.1)

    def test_two_step_displacement(self):
        params = ModelParams.init(small_spec(), 0)
        before = params.copy()
        g = {k: np.full_like(v, 0.5) for k, v in params.tensors.items()}
        lr, m = 0.2, 0.9
        sgd_step(params, g, lr, m)
        sgd_step(params, g, lr, m)
        for k in g:
            assert np.allclose(before.tensors[k] - params.tensors[k], lr * 0.5 * (2 + m), atol=1e-14)

    def test_zero_gradient(self):
        params = ModelParams.init(small_spec(), 0)
        before = params.flat().copy()
        sgd_step(params, {k: np.zeros_like(v) for k, v in params.tensors.items()}, 0.5, 0.9)
        assert np.array_equal(params.flat(), before)

    def test_non_finite_aborts(self):
        params = ModelParams.init(small_spec(), 0)
        before = params.flat().copy()
        grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
        grads["enc.b1"][0] = np.inf
        with pytest.raises(FloatingPointError, match="enc.b1"):
            sgd_step(params, grads, 0.1, 0.9)
        assert np.array_equal(params.flat(), before)


class TestTrainConfig:
    def test_weight_sum_named(self):
        with pytest.raises(ValueError, match="sum to 1"):
            TrainConfig(heads=(HeadConfig(Level(0), 0.1, 0.5), HeadConfig(Level(1), 0.5, 0.4)))

    def test_ce_allows_residual(self):
        cfg = TrainConfig(heads=(HeadConfig(Level(0), 0.1, 0.3),), ce=True)
        assert cfg.ce_coefficient == pytest.approx(0.7)

    def test_ce_weight_rescales(self):
        heads = (HeadConfig(Level(0), 0.1, 0.2), HeadConfig(Level(1), 0.1, 0.2))
        cfg = TrainConfig(heads=heads, ce=True, ce_weight=0.7)
        assert [h.weight for h in cfg.heads] == pytest.approx([0.15, 0.15])


class TestTrain:
    def test_zero_lr_keeps_params(self):
        ds = toy_data()
        cfg = TrainConfig(heads=TWO_HEADS, epochs=1, lr=0.0, batch_size=8)
        params = build_model(ds, cfg, hidden_dim=8, embed_dim=6, head_hidden=6, proj_dim=4)
        trained, history = train(params, ds, cfg)
        assert np.array_equal(trained.flat(), params.flat())
        assert len(history) == 1 and np.isfinite(history[0].total)

    def test_does_not_mutate_input(self):
        ds = toy_data()
        cfg = TrainConfig(heads=TWO_HEADS, epochs=2, batch_size=8)
        params = build_model(ds, cfg, hidden_dim=8, embed_dim=6, head_hidden=6, proj_dim=4)
        before = params.flat().copy()
        train(params, ds, cfg)
        assert np.array_equal(params.flat(), before)

    def test_deterministic(self):
        ds = toy_data()
        cfg = TrainConfig(heads=TWO_HEADS, epochs=3, batch_size=8)
        params = build_model(ds, cfg, hidden_dim=8, embed_dim=6, head_hidden=6, proj_dim=4)
        a, ha = train(params, ds, cfg)
        b, hb = train(params, ds, cfg)
        assert [r.to_dict() for r in ha] == [r.to_dict() for r in hb]
        assert np.array_equal(a.flat(), b.flat())

    def test_loss_decreases(self):
        ds = toy_data(per_class=20)
        cfg = TrainConfig(heads=TWO_HEADS, epochs=50, batch_size=16)
        params = build_model(ds, cfg, hidden_dim=32, embed_dim=16, head_hidden=16, proj_dim=8)
        _, history = train(params, ds, cfg)
        assert history[-1].total < history[0].total

    def test_single_view_mode(self):
        ds = toy_data()
        cfg = TrainConfig(heads=TWO_HEADS, epochs=2, batch_size=8, two_views=False)
        params = build_model(ds, cfg, hidden_dim=8, embed_dim=6, head_hidden=6, proj_dim=4)
        _, history = train(params, ds, cfg)
        assert all(np.isfinite(r.total) for r in history)

    def test_zero_weight_head_training_matches_single_head(self):
        ds = toy_data()
        one = TrainConfig(heads=(HeadConfig(Level(0), 0.1, 1.0),), epochs=3, batch_size=8)
        two = replace(one, heads=(HeadConfig(Level(0), 0.1, 1.0), HeadConfig(Level(1), 0.5, 0.0)))
        dims = dict(hidden_dim=8, embed_dim=6, head_hidden=6, proj_dim=4)
        a, ha = train(build_model(ds, one, **dims), ds, one)
        b, hb = train(build_model(ds, two, **dims), ds, two)
        assert [r.total for r in ha] == [r.total for r in hb]
        for name in ("enc.W1", "enc.b1", "enc.W2", "enc.b2"):
            assert np.array_equal(a.tensors[name], b.tensors[name])

    def test_head_count_mismatch(self):
        ds = toy_data()
        cfg = TrainConfig(heads=TWO_HEADS, epochs=1)
        params = ModelParams.init(ModelSpec(input_dim=ds.dim, n_heads=1, n_classes=4), 0)
        with pytest.raises(ValueError, match="heads"):
            train(params, ds, cfg)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        params = ModelParams.init(small_spec(), 11)
        save_checkpoint(params, tmp_path / "m.bin")
        back = load_checkpoint(tmp_path / "m.bin")
        assert back.spec == params.spec and back.seed == 11
        assert np.array_equal(back.flat(), params.flat())

    def test_layout(self):
        spec = small_spec()
        raw = checkpoint_bytes(ModelParams.init(spec, 0))
        n_values = sum(int(np.prod(s)) for _, s in spec.shapes())
        assert raw[:8] == b"MLCLCKPT"
        assert len(raw) == 8 + 4 + 7 * 4 + 8 + 8 * n_values

    def test_truncated(self):
        raw = checkpoint_bytes(ModelParams.init(small_spec(), 0))
        with pytest.raises(ValueError, match="truncated"):
            params_from_bytes(raw[:-8])
        with pytest.raises(ValueError, match="header"):
            params_from_bytes(raw[:10])

    def test_bad_magic(self):
        raw = checkpoint_bytes(ModelParams.init(small_spec(), 0))
        with pytest.raises(ValueError, match="magic"):
            params_from_bytes(b"X" + raw[1:])
