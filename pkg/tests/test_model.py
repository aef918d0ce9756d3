"""Architecture blocks: patching, rotary encoding, attention, layers."""

import numpy as np
import pytest

from retlab import autodiff as ad
from retlab import model as M
from retlab.model import AblationFlags, ConfigError, ModelConfig


def tiny_config(**kw) -> ModelConfig:
    defaults = dict(image_size=8, channels=1, patch_size=4, d_model=6,
                    n_layers=1, n_heads=2, n_groups=1, mlp_hidden_1=5, mlp_hidden_2=4)
    defaults.update(kw)
    return ModelConfig(**defaults)


class TestConfig:
    def test_indivisible_head_grouping_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(n_heads=12, n_groups=5)

    def test_odd_head_width_rejected(self):
        with pytest.raises(ConfigError):
            tiny_config(d_head=3)

    def test_default_head_width(self):
        assert ModelConfig.oct_default(20).d_head == 4      # 2*floor(62/24)
        assert ModelConfig.fundus_default(20).d_head == 16  # 2*floor(32/4)

    def test_padding_arithmetic(self):
        cfg = ModelConfig.oct_default(50)
        assert cfg.padded_size == 52
        assert cfg.n_patches == 169

    def test_oct_default_head_widths(self):
        cfg = ModelConfig.oct_default()
        assert (cfg.mlp_hidden_1, cfg.mlp_hidden_2) == (47, 31)
        assert (cfg.d_model, cfg.n_heads, cfg.n_groups, cfg.n_layers) == (62, 12, 3, 1)

    def test_fundus_default_fields(self):
        cfg = ModelConfig.fundus_default()
        assert (cfg.d_model, cfg.n_layers, cfg.n_heads, cfg.n_groups) == (32, 4, 2, 1)
        assert (cfg.mlp_hidden_1, cfg.mlp_hidden_2) == (31, 28)

    def test_unknown_ablation_value_rejected(self):
        with pytest.raises(ConfigError):
            AblationFlags(attention="linear")


class TestPatches:
    def test_single_patch_is_flattened_image(self):
        img = np.arange(16.0).reshape(4, 4, 1)
        patches = M.extract_patches(img, 4)
        assert patches.shape == (1, 16)
        np.testing.assert_array_equal(patches[0], img.ravel())

    def test_raster_order_and_top_left_row(self):
        img = np.arange(64.0).reshape(8, 8, 1)
        patches = M.extract_patches(img, 4)
        assert patches.shape == (4, 16)
        np.testing.assert_array_equal(patches[0], img[:4, :4, :].ravel())
        np.testing.assert_array_equal(patches[1], img[:4, 4:, :].ravel())

    def test_indivisible_size_rejected(self):
        with pytest.raises(ConfigError):
            M.extract_patches(np.zeros((50, 50, 1)), 4)

    def test_padding_yields_169_patches(self):
        padded = M.pad_to_multiple(np.zeros((50, 50, 1)), 4)
        assert padded.shape == (52, 52, 1)
        assert M.extract_patches(padded, 4).shape[0] == 169

    def test_edge_replication_values(self):
        img = np.arange(9.0).reshape(3, 3, 1)
        padded = M.pad_to_multiple(img, 2)
        np.testing.assert_array_equal(padded[3, :, 0], padded[2, :, 0])
        np.testing.assert_array_equal(padded[:, 3, 0], padded[:, 2, 0])

    def test_lossless_reassembly(self):
        rng = np.random.default_rng(3)
        img = rng.uniform(size=(12, 8, 3))
        patches = M.extract_patches(img, 4)
        np.testing.assert_array_equal(M.assemble_patches(patches, img.shape, 4), img)


class TestEmbedding:
    def test_zero_image_replicates_bias(self):
        cfg = tiny_config()
        params = M.init_parameters(cfg, np.random.default_rng(0))
        params.arrays["patch.bias"][:] = np.arange(cfg.d_model, dtype=float)
        out = M.embed_patches(np.zeros((8, 8, 1)), params, cfg).value
        assert out.shape == (4, 6)
        np.testing.assert_array_equal(out, np.tile(np.arange(6.0), (4, 1)))

    def test_conv_and_dense_variants_agree_on_equivalent_weights(self):
        cfg_conv = tiny_config(channels=3)
        cfg_mlp = cfg_conv.with_ablation(patch_embedding="mlp")
        rng = np.random.default_rng(1)
        p_conv = M.init_parameters(cfg_conv, rng)
        p_mlp = M.init_parameters(cfg_mlp, np.random.default_rng(2))
        p_mlp.arrays["patch.weight"] = M.conv_kernel_as_matrix(p_conv["patch.kernel"])
        p_mlp.arrays["patch.bias"] = p_conv["patch.bias"].copy()
        img = np.random.default_rng(3).uniform(size=(8, 8, 3))
        out_conv = M.embed_patches(img, p_conv, cfg_conv).value
        out_mlp = M.embed_patches(img, p_mlp, cfg_mlp).value
        np.testing.assert_allclose(out_conv, out_mlp, atol=1e-12)

    def test_oct_default_embedding_shape(self):
        cfg = ModelConfig.oct_default(50)
        params = M.init_parameters(cfg, np.random.default_rng(0))
        img = np.random.default_rng(1).uniform(size=(50, 50, 1))
        assert M.embed_patches(img, params, cfg).value.shape == (169, 62)


class TestRope:
    def test_angle_schedule(self):
        angles = M.rope_angles(4)
        np.testing.assert_allclose(angles, [1.0, 0.01])
        many = M.rope_angles(64)
        assert np.all(np.diff(many) <= 0)

    def test_position_zero_is_identity(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 6))
        out = M.rope_rotate(x, positions=[0]).value
        np.testing.assert_allclose(out, x, atol=1e-15)

    def test_row_norms_preserved(self):
        rng = np.random.default_rng(1)
        x = rng.normal(size=(10, 8))
        out = M.rope_rotate(x).value
        np.testing.assert_allclose(np.linalg.norm(out, axis=1),
                                   np.linalg.norm(x, axis=1), atol=1e-12)

    def test_second_pair_rotation_at_position_two(self):
        # width 4: pair-2 angle is 0.01, so position 2 rotates that pair by 0.02 rad
        x = np.array([[0.0, 0.0, 1.0, 0.0]])
        out = M.rope_rotate(x, positions=[2]).value[0]
        np.testing.assert_allclose(out[2:], [np.cos(0.02), np.sin(0.02)], atol=1e-15)

    def test_odd_width_rejected(self):
        with pytest.raises(ConfigError):
            M.rope_rotate(np.zeros((2, 5)))

    def test_dot_products_depend_only_on_relative_position(self):
        rng = np.random.default_rng(7)
        worst = 0.0
        for _ in range(200):
            d = 2 * rng.integers(1, 9)
            q = rng.normal(size=(1, d))
            k = rng.normal(size=(1, d))
            i, j, s = rng.integers(0, 40, size=3)
            qi = M.rope_rotate(q, positions=[i]).value
            kj = M.rope_rotate(k, positions=[j]).value
            qs = M.rope_rotate(q, positions=[i + s]).value
            ks = M.rope_rotate(k, positions=[j + s]).value
            worst = max(worst, abs((qi @ kj.T).item() - (qs @ ks.T).item()))
        assert worst < 1e-9


class TestAttention:
    def test_single_token_returns_value_row(self):
        rng = np.random.default_rng(0)
        q, k, v = rng.normal(size=(3, 1, 4))
        np.testing.assert_allclose(M.attention_head(q, k, v).value, v, atol=1e-15)

    def test_zero_queries_average_values(self):
        rng = np.random.default_rng(1)
        k = rng.normal(size=(5, 4))
        v = rng.normal(size=(5, 4))
        out = M.attention_head(np.zeros((3, 4)), k, v).value
        np.testing.assert_allclose(out, np.tile(v.mean(axis=0), (3, 1)), atol=1e-12)

    def test_sharp_diagonal_attention_recovers_values(self):
        eye10 = 10.0 * np.eye(2)
        v = np.array([[1.0, 0.0], [0.0, 1.0]])
        out = M.attention_head(eye10, eye10, v).value
        np.testing.assert_allclose(out, v, atol=1e-3)


def _naive_gqa(x: np.ndarray, params: M.ModelParameters, cfg: ModelConfig) -> np.ndarray:
    """Head-by-head oracle built from the public single-head op."""
    wq, wk, wv, wo = (params[f"layer0.{n}"] for n in ("wq", "wk", "wv", "wo"))
    n = x.shape[0]
    heads = []
    for h in range(cfg.n_heads):
        g = h // cfg.heads_per_group if cfg.ablation.attention == "gqa" else h
        q = M.rope_rotate(x @ wq[h], positions=np.arange(n)).value
        k = M.rope_rotate(x @ wk[g], positions=np.arange(n)).value
        v = x @ wv[g]
        heads.append(M.attention_head(q, k, v).value)
    return np.concatenate(heads, axis=1) @ wo


class TestGroupedQueryAttention:
    def test_matches_naive_head_loop(self):
        cfg = tiny_config(d_model=8, n_heads=4, n_groups=2)
        params = M.init_parameters(cfg, np.random.default_rng(5))
        x = np.random.default_rng(6).normal(size=(4, 8))
        out = M.grouped_query_attention(x, params, cfg).value
        np.testing.assert_allclose(out, _naive_gqa(x, params, cfg), atol=1e-12)

    def test_grouped_with_full_groups_equals_multihead(self):
        cfg_g = tiny_config(d_model=8, n_heads=4, n_groups=4)
        cfg_m = cfg_g.with_ablation(attention="multihead")
        params = M.init_parameters(cfg_g, np.random.default_rng(8))
        x = np.random.default_rng(9).normal(size=(4, 8))
        out_g = M.grouped_query_attention(x, params, cfg_g).value
        out_m = M.grouped_query_attention(x, params, cfg_m).value
        np.testing.assert_allclose(out_g, out_m, atol=1e-12)

    def test_shared_kv_pair_when_one_group(self):
        # both heads in one group read the same k/v projections
        cfg = tiny_config(d_model=8, n_heads=2, n_groups=1)
        params = M.init_parameters(cfg, np.random.default_rng(10))
        assert params["layer0.wk"].shape[0] == 1
        assert params["layer0.wv"].shape[0] == 1

    def test_oct_grouping_shapes(self):
        cfg = ModelConfig.oct_default(20)
        params = M.init_parameters(cfg, np.random.default_rng(11))
        assert params["layer0.wk"].shape[0] == 3
        x = np.random.default_rng(12).normal(size=(25, 62))
        assert M.grouped_query_attention(x, params, cfg).value.shape == (25, 62)

    def test_attention_none_is_identity(self):
        cfg = tiny_config().with_ablation(attention="none")
        params = M.init_parameters(cfg, np.random.default_rng(13))
        x = np.random.default_rng(14).normal(size=(4, 6))
        np.testing.assert_array_equal(
            M.grouped_query_attention(x, params, cfg).value, x)


class TestLayerNorm:
    def test_constant_row_maps_to_zero(self):
        out = M.layer_norm(np.array([2.0, 2.0, 2.0]), np.ones(3), np.zeros(3), 1e-5)
        np.testing.assert_allclose(out.value, np.zeros(3), atol=1e-12)

    def test_hand_computed_row(self):
        out = M.layer_norm(np.array([1.0, 2.0, 3.0]), np.ones(3), np.zeros(3), 1e-5)
        np.testing.assert_allclose(out.value, [-1.2247, 0.0, 1.2247], atol=1e-3)

    def test_normalization_property(self):
        rng = np.random.default_rng(2)
        rows = rng.normal(size=(50, 64)) * 3.0 + 1.0
        out = M.layer_norm(rows, np.ones(64), np.zeros(64), 1e-6).value
        assert np.abs(out.mean(axis=1)).max() < 1e-12
        assert np.abs(out.std(axis=1) - 1.0).max() < 1e-5


class TestFeedForward:
    def test_swish_values(self):
        assert ad.swish(ad.constant([0.0])).value[0] == 0.0
        np.testing.assert_allclose(ad.swish(ad.constant([1.0])).value[0], 0.7311, atol=1e-4)

    def test_closed_gate_zeroes_output(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(3, 6))
        out = M.swiglu(x, np.zeros((6, 6)), np.zeros(6),
                       rng.normal(size=(6, 6)), rng.normal(size=6))
        np.testing.assert_array_equal(out.value, np.zeros((3, 6)))

    def test_feedforward_none_is_identity(self):
        cfg = tiny_config().with_ablation(feedforward="none")
        params = M.init_parameters(cfg, np.random.default_rng(1))
        x = np.random.default_rng(2).normal(size=(4, 6))
        np.testing.assert_array_equal(M.feed_forward(x, params, cfg).value, x)

    def test_gelu_variant_runs(self):
        cfg = tiny_config().with_ablation(feedforward="gelu_mlp")
        params = M.init_parameters(cfg, np.random.default_rng(3))
        x = np.random.default_rng(4).normal(size=(4, 6))
        assert M.feed_forward(x, params, cfg).value.shape == (4, 6)


class TestTransformerLayer:
    def test_identity_block_algebra_triples_input(self):
        cfg = tiny_config().with_ablation(attention="none", feedforward="none",
                                          norm1_enabled=False, norm2_enabled=False)
        params = M.init_parameters(cfg, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 6))
        out = M.transformer_layer(x, params, cfg).value
        np.testing.assert_allclose(out, 3.0 * x, atol=1e-15)

    def test_first_residual_removal_drops_direct_path(self):
        cfg = tiny_config().with_ablation(attention="none", feedforward="none",
                                          norm1_enabled=False, norm2_enabled=False,
                                          residual1_enabled=False)
        params = M.init_parameters(cfg, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 6))
        np.testing.assert_allclose(M.transformer_layer(x, params, cfg).value, 2.0 * x,
                                   atol=1e-15)

    def test_second_residual_removal_drops_attention_term(self):
        cfg = tiny_config().with_ablation(attention="none", feedforward="none",
                                          norm1_enabled=False, norm2_enabled=False,
                                          residual2_enabled=False)
        params = M.init_parameters(cfg, np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(4, 6))
        np.testing.assert_allclose(M.transformer_layer(x, params, cfg).value, 2.0 * x,
                                   atol=1e-15)


class TestGradientFidelity:
    """Analytic gradients of every block match central finite differences."""

    WEIGHTS = np.random.default_rng(99).normal(size=(4, 6))

    @pytest.mark.parametrize("builder", [
        lambda cfg, params, x, w=WEIGHTS: (M.rope_rotate(x) * w).sum(),
        lambda cfg, params, x, w=WEIGHTS: (M.layer_norm(
            x, params["layer0.norm1.gain"], params["layer0.norm1.bias"], 1e-5) * w).sum(),
        lambda cfg, params, x, w=WEIGHTS: (M.grouped_query_attention(x, params, cfg) * w).sum(),
        lambda cfg, params, x, w=WEIGHTS: (M.feed_forward(x, params, cfg) * w).sum(),
        lambda cfg, params, x, w=WEIGHTS: (M.transformer_layer(x, params, cfg) * w).sum(),
        lambda cfg, params, x: M.classifier_head(x, params, cfg),
    ], ids=["rope", "norm", "gqa", "swiglu", "layer", "head"])
    def test_block_gradients_wrt_tokens(self, builder):
        cfg = tiny_config(d_model=6, n_heads=2, n_groups=1)
        params = M.init_parameters(cfg, np.random.default_rng(0))
        rng = np.random.default_rng(1)
        for point in range(10):
            x = rng.normal(size=(4, 6))
            report = ad.gradient_check(lambda t: builder(cfg, params, t), x, rel_tol=1e-4)
            assert report.passed, f"point {point}: max rel err {report.max_rel_error}"

    def test_embedding_gradients_wrt_kernel(self):
        cfg = tiny_config()
        params = M.init_parameters(cfg, np.random.default_rng(0))
        img = np.random.default_rng(1).uniform(size=(8, 8, 1))

        def f(kernel_t):
            leaves = {n: ad.constant(a) for n, a in params.named()}
            leaves["patch.kernel"] = kernel_t
            patches = M.extract_patches(img, 4)[None, ...]
            return (M._embed(patches, leaves, cfg) * 0.3).sum()

        report = ad.gradient_check(f, params["patch.kernel"], rel_tol=1e-4)
        assert report.passed

    def test_full_model_gradients_both_default_configs(self):
        for cfg in (ModelConfig.oct_default(12), ModelConfig.fundus_default(12)):
            report = M.full_model_gradient_check(cfg, np.random.default_rng(5),
                                                 coords_per_tensor=6)
            assert report.within(1e-4), report.per_parameter


class TestClassifierHead:
    def test_zero_weights_give_half(self):
        cfg = tiny_config()
        params = M.init_parameters(cfg, np.random.default_rng(0))
        for name in ("head.w1", "head.b1", "head.w2", "head.b2", "head.w3", "head.b3"):
            params.arrays[name][:] = 0.0
        tokens = np.random.default_rng(1).normal(size=(4, 6))
        assert M.classifier_head(tokens, params, cfg).value == 0.5

    def test_output_strictly_inside_unit_interval(self):
        cfg = tiny_config()
        params = M.init_parameters(cfg, np.random.default_rng(2))
        rng = np.random.default_rng(3)
        for _ in range(20):
            p = float(M.classifier_head(rng.normal(size=(4, 6)) * 50, params, cfg).value)
            assert 0.0 < p < 1.0


class TestModelForward:
    def test_bit_identical_repeat_calls(self):
        cfg = tiny_config()
        params = M.init_parameters(cfg, np.random.default_rng(0))
        img = np.random.default_rng(1).uniform(size=(8, 8, 1))
        a = float(M.model_forward(img, params, cfg).value)
        b = float(M.model_forward(img, params, cfg).value)
        assert a == b

    def test_fundus_defaults_run_end_to_end(self):
        cfg = ModelConfig.fundus_default(52)
        params = M.init_parameters(cfg, np.random.default_rng(2))
        img = np.random.default_rng(3).uniform(size=(52, 52, 3))
        p = float(M.model_forward(img, params, cfg).value)
        assert 0.0 < p < 1.0

    def test_batch_agrees_with_single(self):
        cfg = tiny_config()
        params = M.init_parameters(cfg, np.random.default_rng(4))
        imgs = np.random.default_rng(5).uniform(size=(3, 8, 8, 1))
        batch = M.model_forward(imgs, params, cfg).value
        singles = [float(M.model_forward(imgs[i], params, cfg).value) for i in range(3)]
        np.testing.assert_allclose(batch, singles, atol=1e-12)

    def test_patch_permutation_changes_output_with_rope(self):
        cfg = tiny_config(image_size=12)
        params = M.init_parameters(cfg, np.random.default_rng(6))
        rng = np.random.default_rng(7)
        img = rng.uniform(size=(12, 12, 1))
        patches = M.extract_patches(img, 4)
        perm = rng.permutation(patches.shape[0])
        img_perm = M.assemble_patches(patches[perm], img.shape, 4)
        p0 = float(M.model_forward(img, params, cfg).value)
        p1 = float(M.model_forward(img_perm, params, cfg).value)
        assert abs(p0 - p1) > 1e-9

    def test_wrong_input_size_rejected(self):
        cfg = tiny_config()
        params = M.init_parameters(cfg, np.random.default_rng(8))
        with pytest.raises(ConfigError):
            M.model_forward(np.zeros((9, 9, 1)), params, cfg)


class TestParameterCount:
    def test_degenerate_config_hand_enumeration(self):
        cfg = ModelConfig(image_size=4, channels=1, patch_size=4, d_model=2,
                          n_layers=1, n_heads=1, n_groups=1, d_head=2,
                          mlp_hidden_1=2, mlp_hidden_2=2)
        # patch 16*2+2=34; attn q 2*2*1=4, kv 2*4=8, out 2*2=4; norms 2*4=8;
        # swiglu 2*(4+2)=12; head 2*2+2 + 2*2+2 + 2+1 = 15
        assert M.parameter_count(cfg) == 34 + 4 + 8 + 4 + 8 + 12 + 15

    def test_doubling_first_hidden_layer_changes_two_blocks(self):
        base = tiny_config()
        wider = tiny_config(mlp_hidden_1=2 * base.mlp_hidden_1)
        delta = M.parameter_count(wider) - M.parameter_count(base)
        h1 = base.mlp_hidden_1
        assert delta == (base.d_model * h1 + h1) + (h1 * base.mlp_hidden_2)

    @pytest.mark.parametrize("changes", [
        {}, {"position_encoding": "learned"}, {"patch_embedding": "mlp"},
        {"attention": "multihead"}, {"attention": "none"},
        {"feedforward": "gelu_mlp"}, {"feedforward": "none"},
        {"norm1_enabled": False}, {"norm2_enabled": False},
        {"residual1_enabled": False}, {"residual2_enabled": False},
    ])
    def test_closed_form_matches_initialized_arrays(self, changes):
        cfg = ModelConfig.oct_default(20).with_ablation(**changes)
        params = M.init_parameters(cfg, np.random.default_rng(0))
        assert params.total_count == M.parameter_count(cfg)

    def test_toggle_directions(self):
        base = ModelConfig.oct_default(20)
        count = M.parameter_count
        assert count(base.with_ablation(position_encoding="learned")) > count(base)
        assert count(base.with_ablation(attention="multihead")) > count(base)
        assert count(base.with_ablation(attention="none")) < count(base)
        assert count(base.with_ablation(feedforward="gelu_mlp")) < count(base)
        assert count(base.with_ablation(feedforward="none")) < count(base)
        assert count(base.with_ablation(norm1_enabled=False)) < count(base)
        assert count(base.with_ablation(norm2_enabled=False)) < count(base)

    def test_residual_toggles_change_forward_output(self):
        base = tiny_config()
        params = M.init_parameters(base, np.random.default_rng(0))
        img = np.random.default_rng(1).uniform(size=(8, 8, 1))
        p_base = float(M.model_forward(img, params, base).value)
        for flag in ("residual1_enabled", "residual2_enabled"):
            variant = base.with_ablation(**{flag: False})
            p_var = float(M.model_forward(img, params, variant).value)
            assert p_var != p_base


class TestParameterSerialization:
    def test_npz_roundtrip(self, tmp_path):
        cfg = tiny_config()
        params = M.init_parameters(cfg, np.random.default_rng(0))
        path = str(tmp_path / "model.npz")
        params.save(path)
        loaded = M.ModelParameters.load(path)
        assert set(loaded.arrays) == set(params.arrays)
        for name, arr in params.named():
            np.testing.assert_array_equal(loaded[name], arr)
