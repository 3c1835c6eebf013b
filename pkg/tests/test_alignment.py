"""Cross-attention alignment, similarity heads and key/value selection."""
import numpy as np
import pytest

from app.config import ModelConfig
from app.exceptions import ConfigError, UnavailableError
from app.model.alignment import (
    CrossAttentionAlignment,
    GlobalCosineAlignment,
    cosine,
    count_zero_norms,
    select_kv,
)
from app.models import FeatureBundle
from app.tensor import Tensor, float64_mode


def _features(rng, n_img=3, n_txt=3, l=4, m=5, dim=8, lengths=None):
    x_local = rng.standard_normal((n_img, l, dim))
    y_local = rng.standard_normal((n_txt, m, dim))
    if lengths is None:
        lengths = rng.integers(1, m + 1, size=n_txt)
    valid = np.arange(m)[None, :] < np.asarray(lengths)[:, None]
    y_local = y_local * valid[..., None]
    y_global = y_local.sum(axis=1) / valid.sum(axis=1, keepdims=True)
    return FeatureBundle(
        Tensor(x_local), Tensor(x_local.mean(axis=1)), Tensor(y_local), Tensor(y_global), valid
    )


def _alignment(seed=0, **overrides):
    config = ModelConfig(**{"dim": 8, "heads": 2, "enc_heads": 1, **overrides})
    return CrossAttentionAlignment(config, np.random.default_rng(seed))


@pytest.mark.parametrize("kv_choice, image_len, text_len", [("global", 1, 1), ("local", 16, 5), ("both", 17, 6)])
def test_select_kv_token_counts(rng, kv_choice, image_len, text_len):
    kv = select_kv(_features(rng, l=16, m=5), kv_choice)
    assert kv.image.shape[1] == image_len and kv.text.shape[1] == text_len
    assert kv.image_valid.shape == kv.image.shape[:2]


def test_select_kv_rejects_unknown_choice(rng):
    with pytest.raises(ConfigError):
        select_kv(_features(rng), "patches")


def test_attention_weights_are_a_simplex_in_both_directions(rng):
    with float64_mode():
        for trial in range(50):
            kv_choice = ("global", "local", "both")[trial % 3]
            alignment = _alignment(seed=trial, kv_choice=kv_choice)
            features = _features(rng, n_img=int(rng.integers(1, 4)), n_txt=int(rng.integers(1, 4)))
            out = alignment(features)
            for attn in (out.attn_t2i, out.attn_i2t):
                assert np.all(attn >= 0)
                np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)
            if kv_choice != "global":
                pads = ~features.y_valid
                pad_weights = out.attn_i2t[..., : pads.shape[1]] * pads[None, :, None, :]
                assert not pad_weights.any()


def test_output_shapes_single_pair(rng):
    alignment = _alignment(kv_choice="both")
    out = alignment(_features(rng, n_img=1, n_txt=1))
    assert out.sr_t2i.shape == (1, 1, 8) and out.sr_i2t.shape == (1, 1, 8)
    assert out.s_t2i.shape == (1, 1) and out.attn_t2i.shape == (1, 1, 2, 5)


def test_identical_image_tokens_give_uniform_attention_independent_of_length(rng):
    token = rng.standard_normal(8)
    with float64_mode():
        alignment = _alignment(kv_choice="local")
        features = _features(rng, n_img=1, n_txt=2, l=5)
        srs = []
        for l in (2, 5):
            features.x_local = Tensor(np.tile(token, (1, l, 1)))
            features.x_global = Tensor(token[None, :])
            sr, attn = alignment.cross_attend_t2i(features)
            np.testing.assert_allclose(attn, 1.0 / l, atol=1e-12)
            srs.append(sr.numpy())
    np.testing.assert_allclose(srs[0], srs[1], atol=1e-10)


def test_single_head_attention_matches_hand_computation():
    with float64_mode():
        alignment = _alignment(dim=2, heads=1, kv_choice="local")
        for proj in (alignment.attn.q_proj, alignment.attn.k_proj, alignment.attn.v_proj):
            proj.weight.data[:] = np.eye(2)
        x_local = np.array([[[1.0, 0.0], [0.0, 1.0]]])
        features = FeatureBundle(
            Tensor(x_local), Tensor(x_local.mean(axis=1)),
            Tensor([[[1.0, 0.0]]]), Tensor([[1.0, 0.0]]), np.array([[True]]),
        )
        _, attn = alignment.cross_attend_t2i(features)
    logits = np.array([1.0, 0.0]) / np.sqrt(2.0)
    expected = np.exp(logits) / np.exp(logits).sum()
    np.testing.assert_allclose(attn[0, 0, 0], expected, atol=1e-12)


def test_single_valid_text_token_takes_all_attention(rng):
    alignment = _alignment(kv_choice="local")
    features = _features(rng, n_img=2, n_txt=1, lengths=[1])
    _, attn = alignment.cross_attend_i2t(features)
    np.testing.assert_allclose(attn[..., 0], 1.0, atol=1e-6)
    assert not attn[..., 1:].any()


def test_role_swap_mirror(rng):
    a = rng.standard_normal((2, 8))
    b = rng.standard_normal((3, 4, 8))
    with float64_mode():
        alignment = _alignment(kv_choice="local")
        as_i2t = FeatureBundle(
            Tensor(rng.standard_normal((2, 4, 8))), Tensor(a), Tensor(b), Tensor(b.mean(axis=1)),
            np.ones((3, 4), bool),
        )
        as_t2i = FeatureBundle(
            Tensor(b), Tensor(b.mean(axis=1)), Tensor(rng.standard_normal((2, 4, 8))), Tensor(a),
            np.ones((2, 4), bool),
        )
        sr_i2t, attn_i2t = alignment.cross_attend_i2t(as_i2t)
        sr_t2i, attn_t2i = alignment.cross_attend_t2i(as_t2i)
    np.testing.assert_allclose(sr_i2t.numpy(), sr_t2i.numpy(), atol=1e-10)
    np.testing.assert_allclose(attn_i2t, attn_t2i, atol=1e-12)


def test_permutation_equivariance(rng):
    with float64_mode():
        for trial in range(50):
            alignment = _alignment(seed=trial, head_kind=("linear", "mlp")[trial % 2], kv_choice="both")
            features = _features(rng, n_img=4, n_txt=3)
            base = alignment(features)
            perm = rng.permutation(4)
            permuted = FeatureBundle(
                Tensor(features.x_local.numpy()[perm]), Tensor(features.x_global.numpy()[perm]),
                features.y_local, features.y_global, features.y_valid,
            )
            out = alignment(permuted)
            np.testing.assert_allclose(out.s_t2i.numpy(), base.s_t2i.numpy()[:, perm], atol=1e-9)
            np.testing.assert_allclose(out.s_i2t.numpy(), base.s_i2t.numpy()[perm], atol=1e-9)

            tperm = rng.permutation(3)
            permuted = FeatureBundle(
                features.x_local, features.x_global, Tensor(features.y_local.numpy()[tperm]),
                Tensor(features.y_global.numpy()[tperm]), features.y_valid[tperm],
            )
            out = alignment(permuted)
            np.testing.assert_allclose(out.s_t2i.numpy(), base.s_t2i.numpy()[tperm], atol=1e-9)
            np.testing.assert_allclose(out.s_i2t.numpy(), base.s_i2t.numpy()[:, tperm], atol=1e-9)


def test_one_parameter_set_serves_both_directions(rng):
    alignment = _alignment(kv_choice="both")
    features = _features(rng)
    before = alignment(features)
    alignment.attn.v_proj.weight.data *= 2.0
    after = alignment(features)
    assert not np.allclose(before.s_t2i.numpy(), after.s_t2i.numpy())
    assert not np.allclose(before.s_i2t.numpy(), after.s_i2t.numpy())


def test_global_keys_equal_local_keys_for_single_token(rng):
    x_local = rng.standard_normal((3, 1, 8))
    y_local = rng.standard_normal((2, 1, 8))
    features = FeatureBundle(
        Tensor(x_local), Tensor(x_local[:, 0]), Tensor(y_local), Tensor(y_local[:, 0]), np.ones((2, 1), bool)
    )
    with float64_mode():
        global_out = _alignment(seed=4, kv_choice="global")(features)
        local_out = _alignment(seed=4, kv_choice="local")(features)
    np.testing.assert_allclose(global_out.s_t2i.numpy(), local_out.s_t2i.numpy(), atol=1e-6)
    np.testing.assert_allclose(global_out.s_i2t.numpy(), local_out.s_i2t.numpy(), atol=1e-6)


def test_zero_linear_head_returns_bias(rng):
    alignment = _alignment(head_kind="linear")
    alignment.head.weight.data[:] = 0.0
    alignment.head.bias.data[:] = 0.75
    s = alignment.project_similarity(Tensor(rng.standard_normal((3, 2, 8))))
    np.testing.assert_allclose(s.numpy(), np.full((3, 2), 0.75))


def test_linear_head_on_ones(rng):
    alignment = _alignment(head_kind="linear")
    s = alignment.project_similarity(Tensor(np.ones((2, 3, 8))))
    expected = alignment.head.weight.numpy().sum() + alignment.head.bias.numpy()[0]
    np.testing.assert_allclose(s.numpy(), np.full((2, 3), expected), rtol=1e-5)


def test_mlp_head_matches_two_layer_hand_computation(rng):
    sr = rng.standard_normal((2, 2, 3))
    with float64_mode():
        alignment = _alignment(dim=3, heads=1, head_kind="mlp", mlp_hidden=2)
        s = alignment.project_similarity(Tensor(sr)).numpy()
    fc1, fc2 = alignment.head.fc1, alignment.head.fc2
    hidden = sr @ fc1.weight.numpy() + fc1.bias.numpy()
    c = np.sqrt(2.0 / np.pi)
    hidden = 0.5 * hidden * (1.0 + np.tanh(c * (hidden + 0.044715 * hidden ** 3)))
    expected = (hidden @ fc2.weight.numpy() + fc2.bias.numpy())[..., 0]
    np.testing.assert_allclose(s, expected, atol=1e-12)


def test_project_similarity_needs_a_learned_head(rng):
    with pytest.raises(ConfigError):
        _alignment(head_kind="cos_proj_proj").project_similarity(Tensor(np.ones((1, 1, 8))))


def test_cosine_values():
    with float64_mode():
        assert cosine(Tensor([1.0, 2.0, 2.0]), Tensor([2.0, 1.0, 2.0])).item() == pytest.approx(8 / 9)
        assert cosine(Tensor([1.0, 2.0]), Tensor([1.0, 2.0])).item() == pytest.approx(1.0)
        assert cosine(Tensor([1.0, 0.0]), Tensor([0.0, 3.0])).item() == pytest.approx(0.0)
        assert cosine(Tensor([0.0, 0.0]), Tensor([1.0, 1.0])).item() == 0.0


@pytest.mark.parametrize("variant", ["cos_proj_proj", "cos_proj_orig"])
def test_cosine_variants_are_symmetric_and_bounded(rng, variant):
    alignment = _alignment(head_kind=variant)
    out = alignment(_features(rng, n_img=3, n_txt=2))
    np.testing.assert_allclose(out.s_i2t.numpy(), out.s_t2i.numpy().T)
    bound = 1.0 if variant == "cos_proj_proj" else 2.0
    assert np.all(np.abs(out.s_t2i.numpy()) <= bound + 1e-5)


def test_cosine_variant_matches_definition(rng):
    with float64_mode():
        alignment = _alignment(head_kind="cos_proj_orig")
        features = _features(rng, n_img=2, n_txt=2)
        out = alignment(features)
    sr_t2i, sr_i2t = out.sr_t2i.numpy(), out.sr_i2t.numpy()
    x_g, y_g = features.x_global.numpy(), features.y_global.numpy()
    cos = lambda u, v: u @ v / (np.linalg.norm(u) * np.linalg.norm(v))  # noqa: E731
    for t in range(2):
        for i in range(2):
            expected = cos(sr_i2t[i, t], y_g[t]) + cos(sr_t2i[t, i], x_g[i])
            assert out.s_t2i.numpy()[t, i] == pytest.approx(expected, abs=1e-10)


def test_zero_norm_vectors_are_counted(rng):
    alignment = _alignment(head_kind="cos_proj_orig")
    features = _features(rng, n_img=2, n_txt=2)
    features.x_global = Tensor(np.zeros((2, 8)))
    sr = Tensor(rng.standard_normal((2, 2, 8)))
    s_t2i, _ = alignment.cosine_variant_scores(features, sr, sr, "cos_proj_orig")
    assert np.all(np.isfinite(s_t2i.numpy()))
    assert count_zero_norms(sr, features.x_global) == 2


def test_zero_norm_count_is_reported_per_call_without_shared_state(rng):
    alignment = _alignment(head_kind="cos_proj_orig")
    features = _features(rng, n_img=2, n_txt=2)
    features.x_global = Tensor(np.zeros((2, 8)))
    before = alignment.state_dict()
    counts = [alignment(features).zero_norm_count for _ in range(3)]
    assert counts == [2, 2, 2]
    assert not hasattr(alignment, "zero_norm_count")
    for name, value in alignment.state_dict().items():
        np.testing.assert_array_equal(value, before[name])


def test_cross_attention_off_baseline(rng):
    alignment = GlobalCosineAlignment(ModelConfig(dim=8, heads=2, cross_attention=False))
    out = alignment(_features(rng, n_img=3, n_txt=2))
    np.testing.assert_allclose(out.s_i2t.numpy(), out.s_t2i.numpy().T)
    assert np.all(np.abs(out.s_t2i.numpy()) <= 10.0 + 1e-4)
    assert out.attn_t2i is None
    with pytest.raises(UnavailableError):
        alignment.cross_attend_t2i(None)


def test_residual_flag_changes_the_block(rng):
    features = _features(rng)
    with_res = _alignment(seed=2, residual=True)(features).s_t2i.numpy()
    without = _alignment(seed=2, residual=False)(features).s_t2i.numpy()
    assert with_res.shape == without.shape and not np.allclose(with_res, without)
