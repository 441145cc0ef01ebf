"""Model assembly: layer weighting, message passing, readout, counts."""

import numpy as np
import pytest

from graphpool import attention as att
from graphpool import diffcore as dc
from graphpool import model as mdl
from graphpool.dataio import FeatureStack
from graphpool.diffcore import Tape, constant, grad_check, no_tape, parameter
from graphpool.errors import DegenerateWeightsError, ShapeError, UsageError
from graphpool.model import ModelConfig

rng = np.random.default_rng(42)

TINY = ModelConfig(feature_dim=6, mlp_hidden=8, rounds=2, n_layers=13)


def tiny_stack(n_frames=5, layers=13, dim=6, seed=0):
    r = np.random.default_rng(seed)
    return FeatureStack(r.normal(size=(layers, n_frames, dim)))


class TestLayerWeighting:
    def test_one_hot_selects_single_layer(self):
        layers = [constant(rng.normal(size=(4, 3))) for _ in range(5)]
        weights = [parameter(np.array([[1.0 if i == 2 else 0.0]])) for i in range(5)]
        out = mdl.weight_layers(layers, weights)
        np.testing.assert_allclose(out.data, layers[2].data, atol=1e-15)

    def test_uniform_weights_average(self):
        data = [rng.normal(size=(3, 2)) for _ in range(4)]
        layers = [constant(d) for d in data]
        weights = [parameter(np.array([[1.0]])) for _ in range(4)]
        out = mdl.weight_layers(layers, weights)
        np.testing.assert_allclose(out.data, np.mean(data, axis=0), atol=1e-14)

    def test_weight_scale_invariance(self):
        """Multiplying all weights by a constant leaves the output fixed."""
        data = [rng.normal(size=(3, 2)) for _ in range(3)]
        w_raw = [0.7, -0.2, 1.4]
        out1 = mdl.weight_layers([constant(d) for d in data],
                                 [parameter(np.array([[w]])) for w in w_raw])
        out2 = mdl.weight_layers([constant(d) for d in data],
                                 [parameter(np.array([[w * 37.0]])) for w in w_raw])
        np.testing.assert_allclose(out1.data, out2.data, atol=1e-12)

    def test_degenerate_sum_rejected(self):
        layers = [constant(rng.normal(size=(2, 2))) for _ in range(2)]
        weights = [parameter(np.array([[1.0]])), parameter(np.array([[-1.0]]))]
        with pytest.raises(DegenerateWeightsError):
            mdl.weight_layers(layers, weights)

    def test_count_mismatch_rejected(self):
        layers = [constant(rng.normal(size=(2, 2)))] * 3
        weights = [parameter(np.array([[1.0]]))] * 2
        with pytest.raises(ShapeError):
            mdl.weight_layers(layers, weights)

    def test_gradients_match_finite_differences(self):
        data = [rng.normal(size=(3, 4)) for _ in range(3)]
        weights = [parameter(np.array([[w]])) for w in (0.9, 1.2, 0.6)]
        probe = constant(rng.normal(size=(3, 4)))

        def f():
            out = mdl.weight_layers([constant(d) for d in data], weights)
            return dc.sum_all(dc.mul(out, probe))

        report = grad_check(f, weights)
        assert report.passed, report.worst

    def test_gradients_flow_to_layers_too(self):
        layers = [parameter(rng.normal(size=(2, 3))) for _ in range(3)]
        weights = [parameter(np.array([[w]])) for w in (0.5, 1.5, 1.0)]
        probe = constant(rng.normal(size=(2, 3)))

        def f():
            return dc.sum_all(dc.mul(mdl.weight_layers(layers, weights), probe))

        report = grad_check(f, layers + weights)
        assert report.passed, report.worst


class TestMessage:
    def test_swap_adjacency_hand_case(self):
        """A = [[0,1],[1,0]] on states [[2],[3]] yields [[3],[2]]."""
        a = constant(np.array([[0.0, 1.0], [1.0, 0.0]]))
        h = constant(np.array([[2.0], [3.0]]))
        np.testing.assert_array_equal(mdl.message(a, h).data, [[3.0], [2.0]])

    def test_mean_shift_adjacency_reproduces_mean_pooling(self):
        """With the averaging matrix as adjacency, one message round
        equals classical mean pooling at every vertex."""
        from graphpool.classical import make_shift
        h = rng.normal(size=(6, 4))
        a = constant(make_shift("mean", 6).matrix)
        out = mdl.message(a, constant(h)).data
        np.testing.assert_allclose(out, np.tile(h.mean(axis=0), (6, 1)), atol=1e-12)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            mdl.message(constant(np.zeros((3, 3))), constant(np.zeros((4, 2))))
        with pytest.raises(ShapeError):
            mdl.message(constant(np.zeros((3, 4))), constant(np.zeros((4, 2))))


class TestUpdateAndReadout:
    def test_round_index_is_one_based(self):
        params = mdl.init_params(TINY, seed=0)
        m = constant(rng.normal(size=(4, 6)))
        mdl.update(m, 1, params, TINY)
        mdl.update(m, 2, params, TINY)
        with pytest.raises(UsageError):
            mdl.update(m, 0, params, TINY)
        with pytest.raises(UsageError):
            mdl.update(m, 3, params, TINY)

    def test_zeroed_update_mlp_gives_zero_state(self):
        """Zero MLP output flows through layer norm (zero row stays zero)
        and relu to a zero state."""
        params = mdl.init_params(TINY, seed=0)
        block = params.updates[0]
        for v in (block.mlp.w1, block.mlp.b1, block.mlp.w2, block.mlp.b2,
                  block.ln_bias):
            v.data[...] = 0.0
        out = mdl.update(constant(rng.normal(size=(4, 6))), 1, params, TINY)
        np.testing.assert_array_equal(out.data, np.zeros((4, 6)))

    def test_readout_requires_full_history(self):
        params = mdl.init_params(TINY, seed=0)
        h = constant(rng.normal(size=(4, 6)))
        with pytest.raises(UsageError):
            mdl.readout([h, h], params, TINY)  # rounds=2 needs T+1 = 3

    def test_thin_variant_has_no_gate(self):
        thin = ModelConfig(feature_dim=6, mlp_hidden=8, thin=True)
        params = mdl.init_params(thin, seed=0)
        assert params.readout_gate is None
        names = mdl.named_parameters(params)
        assert not any("readout_gate" in n for n in names)


class TestForward:
    def test_embedding_shape(self):
        params = mdl.init_params(TINY, seed=0)
        out = mdl.forward(tiny_stack(), params, TINY)
        assert out.shape == (1, 6)

    def test_matches_manual_composition(self):
        """forward() is exactly: weight layers, project, one adjacency,
        T message/update rounds, readout over the full history."""
        params = mdl.init_params(TINY, seed=3)
        stack = tiny_stack(seed=4)
        expected = mdl.forward(stack, params, TINY)

        layers = [constant(stack.values[i]) for i in range(13)]
        x = mdl.weight_layers(layers, params.layer_weights)
        adj = att.attend(x, params.attention)
        h = adj.projected
        history = [h]
        for t in (1, 2):
            h = mdl.update(mdl.message(adj.matrix, h), t, params, TINY)
            history.append(h)
        manual = mdl.readout(history, params, TINY)
        np.testing.assert_array_equal(expected.data, manual.data)

    def test_permutation_invariance(self):
        """Frame order never changes the embedding (graph readout is
        symmetric) to 1e-10 at 64-bit."""
        params = mdl.init_params(TINY, seed=1)
        stack = tiny_stack(n_frames=9, seed=2)
        base = mdl.forward(stack, params, TINY).data
        perm_rng = np.random.default_rng(0)
        for _ in range(10):
            p = perm_rng.permutation(9)
            permuted = FeatureStack(stack.values[:, p, :])
            out = mdl.forward(permuted, params, TINY).data
            np.testing.assert_allclose(out, base, atol=1e-10)

    def test_layer_count_mismatch_rejected(self):
        params = mdl.init_params(TINY, seed=0)
        with pytest.raises(ShapeError):
            mdl.forward(tiny_stack(layers=5), params, TINY)

    def test_single_layer_mode(self):
        cfg = ModelConfig(feature_dim=6, mlp_hidden=8, use_layer_weighting=False,
                          n_layers=1)
        params = mdl.init_params(cfg, seed=0)
        assert params.layer_weights == []
        out = mdl.forward(tiny_stack(layers=1), params, cfg)
        assert out.shape == (1, 6)

    def test_feature_dim_mismatch_rejected(self):
        params = mdl.init_params(TINY, seed=0)
        with pytest.raises(ShapeError):
            mdl.forward(tiny_stack(dim=4), params, TINY)

    def test_every_parameter_receives_gradient(self):
        params = mdl.init_params(TINY, seed=5)
        stack = tiny_stack(seed=6)
        with Tape() as tape:
            out = mdl.forward(stack, params, TINY)
            tape.backward(dc.sum_all(out))
        for name, v in mdl.named_parameters(params).items():
            assert np.any(v.grad != 0), f"no gradient reached {name}"


class TestParameterCounts:
    def test_default_full_model(self):
        """768-dim, 1024-hidden, 2-round full model with gate and 13
        layer weights: 6,891,534 trainable scalars."""
        params = mdl.init_params(ModelConfig(), seed=0)
        n = mdl.param_count(params)
        assert n == 6_891_534
        assert 6_850_000 <= n <= 6_950_000

    def test_default_thin_model(self):
        params = mdl.init_params(ModelConfig(thin=True), seed=0)
        n = mdl.param_count(params)
        assert n == 5_316_878
        assert 5_250_000 <= n <= 5_350_000

    def test_gate_branch_delta_is_one_mlp(self):
        """Full minus thin is exactly the gate MLP: 768*1024 + 1024 +
        1024*768 + 768."""
        full = mdl.param_count(mdl.init_params(ModelConfig(), seed=0))
        thin = mdl.param_count(mdl.init_params(ModelConfig(thin=True), seed=0))
        assert full - thin == 768 * 1024 + 1024 + 1024 * 768 + 768 == 1_574_656

    def test_count_composition(self):
        """Count decomposes into projection, temperature, update blocks,
        readout MLPs and layer weights."""
        cfg = ModelConfig()
        params = mdl.init_params(cfg, seed=0)
        f, h = 768, 1024
        mlp = f * h + h + h * f + f
        expected = (f * f + 1  # projection + temperature
                    + 2 * (mlp + 2 * f)  # update MLPs + layer norm affines
                    + 2 * mlp  # readout value + gate
                    + 13)
        assert mdl.param_count(params) == expected
