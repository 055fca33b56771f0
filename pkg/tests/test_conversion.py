import numpy as np
import pytest
from _factories import random_mha

from mlakit.attention import AttentionConfig, mha_attend, mla_attend
from mlakit.checkpoint import Checkpoint
from mlakit.conversion import (
    ConversionSpec,
    choose_selections,
    convert_layer,
    convert_model,
    joint_relative_error,
    joint_svd_factorize,
    split_key_projection,
)
from mlakit.errors import ArgumentError, ConfigurationError
from mlakit.selection import SubspaceSelection


def test_split_key_projection(rng):
    w_k = rng.standard_normal((8, 8))
    w_kp, w_kc = split_key_projection(w_k, np.array([[0, 1], [2, 3]]))
    np.testing.assert_array_equal(w_kp, w_k[:, [0, 1, 6, 7]])
    np.testing.assert_array_equal(w_kc, w_k[:, [2, 3, 4, 5]])
    w_kp, w_kc = split_key_projection(w_k, np.zeros((2, 0), int))
    assert w_kp.shape == (8, 0) and np.array_equal(w_kc, w_k)


@pytest.mark.parametrize("dims", [[[0, 4]], [[1, 1]], [[-1, 0]]])
def test_split_key_projection_rejects(rng, dims):
    with pytest.raises(ArgumentError):
        split_key_projection(rng.standard_normal((4, 4)), np.array(dims))


def test_joint_svd_factorize_against_numpy(rng):
    w_kc, w_v = rng.standard_normal((12, 6)), rng.standard_normal((12, 12))
    w_dkv, w_uk, w_uv = joint_svd_factorize(w_kc, w_v, 5)
    assert w_dkv.shape == (12, 5) and w_uk.shape == (5, 6) and w_uv.shape == (5, 12)
    joint = np.hstack([w_kc, w_v])
    u, s, vt = np.linalg.svd(joint)
    best = (u[:, :5] * s[:5]) @ vt[:5]
    np.testing.assert_allclose(w_dkv @ np.hstack([w_uk, w_uv]), best, atol=1e-10)
    # balanced split of the singular values between the two factors
    np.testing.assert_allclose(np.linalg.norm(w_dkv, axis=0) ** 2, s[:5], rtol=1e-10)


def test_joint_svd_lossless_at_full_rank(rng):
    w_kc, w_v = rng.standard_normal((8, 4)), rng.standard_normal((8, 8))
    w_dkv, w_uk, w_uv = joint_svd_factorize(w_kc, w_v, 8)
    np.testing.assert_allclose(w_dkv @ w_uk, w_kc, atol=1e-12)
    np.testing.assert_allclose(w_dkv @ w_uv, w_v, atol=1e-12)


def test_joint_svd_factorize_rejects(rng):
    with pytest.raises(ArgumentError):
        joint_svd_factorize(np.ones((4, 2)), np.ones((4, 4)), 5)
    with pytest.raises(ArgumentError):
        joint_svd_factorize(np.ones((4, 2)), np.ones((3, 4)), 2)


@pytest.mark.parametrize("variant, r", [("mla_full", 0), ("mla_preserving", 1)])
def test_convert_layer_lossless(rng, variant, r):
    w = random_mha(rng, 16, 2)
    sel = (SubspaceSelection.empty(2, 8) if r == 0 else SubspaceSelection.uniform(2, 8, r))
    mla = convert_layer(w, AttentionConfig(16, 2, variant, 16, r), sel)
    assert joint_relative_error(w, mla) < 1e-13
    x = rng.standard_normal((3, 5, 16))
    np.testing.assert_allclose(mla_attend(x, x, mla, causal=True),
                               mha_attend(x, x, w, causal=True), atol=1e-12)
    assert np.array_equal(mla.w_q, w.w_q) and np.array_equal(mla.b_o, w.b_o)


def test_convert_layer_truncation_error_decreases(rng):
    w = random_mha(rng, 16, 2)
    sel = SubspaceSelection.uniform(2, 8, 1)
    errors = [joint_relative_error(w, convert_layer(
        w, AttentionConfig(16, 2, "mla_preserving", k, 1), sel)) for k in range(1, 17)]
    assert all(a >= b - 1e-12 for a, b in zip(errors, errors[1:]))
    assert errors[-1] < 1e-13


def test_preserved_keys_are_exact(rng):
    w = random_mha(rng, 16, 2)
    sel = SubspaceSelection.uniform(2, 8, 2)
    mla = convert_layer(w, AttentionConfig(16, 2, "mla_preserving", 1, 2), sel)
    x = rng.standard_normal((4, 16))
    np.testing.assert_array_equal(x @ mla.w_kp, x @ w.w_k[:, sel.global_dims()])


def test_convert_layer_rejects_mismatch(rng):
    w = random_mha(rng, 16, 2)
    with pytest.raises(ConfigurationError):
        convert_layer(w, AttentionConfig(16, 2, "mla_preserving", 4, 2),
                      SubspaceSelection.uniform(2, 8, 1))
    with pytest.raises(ConfigurationError):
        convert_layer(w, AttentionConfig(16, 2), SubspaceSelection.empty(2, 8))


def test_conversion_spec_validation():
    with pytest.raises(ConfigurationError, match="calibration required"):
        ConversionSpec("two_norm", 8, 1)
    with pytest.raises(ConfigurationError):
        ConversionSpec("full_compression", 8, 1)
    with pytest.raises(ConfigurationError):
        ConversionSpec("uniform", 8, 0)
    with pytest.raises(ConfigurationError):
        ConversionSpec("uniform", 8, 1, placement="encoder")
    with pytest.raises(ConfigurationError):
        ConversionSpec("uniform", 8, 1, calibration=(([3], [3]),))


def test_placements(small_model):
    dso = list(ConversionSpec(placement="dso").sites(small_model.spec))
    full = list(ConversionSpec(placement="full").sites(small_model.spec))
    assert dso == ["decoder.layers.0.self_attn", "decoder.layers.1.self_attn"]
    assert full == list(small_model.spec.site_names())


def test_convert_model_dso_leaves_other_tensors(small_model):
    ckpt = Checkpoint.from_model(small_model)
    out = convert_model(ckpt, ConversionSpec("uniform", 4, 1, "dso"))
    variants = out.site_variants()
    assert {s for s, v in variants.items() if v != "mha"} == {
        "decoder.layers.0.self_attn", "decoder.layers.1.self_attn"}
    for name, arr in ckpt.tensors.items():
        if name.startswith("decoder") and name.endswith(("self_attn.w_k", "self_attn.w_v")):
            assert name not in out.tensors
        else:
            assert np.array_equal(out.tensors[name], arr)
    assert set(out.conversion["sites"]) == set(variants) - {
        s for s, v in variants.items() if v == "mha"}
    assert out.to_model().selections["decoder.layers.0.self_attn"].r == 1


def test_convert_model_full_rank_equivalence(small_model):
    out = convert_model(small_model, ConversionSpec("full_compression", 16, 0, "full"),
                        float_dtype="f64").to_model()
    src, tgt = np.array([3, 4, 5, 6]), np.array([1, 7, 8])
    np.testing.assert_allclose(out.forward(src, tgt), small_model.forward(src, tgt), atol=1e-10)


def test_convert_model_rejects_mla_input(small_model):
    once = convert_model(small_model, ConversionSpec()).to_model()
    with pytest.raises(ConfigurationError):
        convert_model(once, ConversionSpec())


def test_two_norm_selection_uses_calibration(small_model):
    rng = np.random.default_rng(0)
    calib = tuple((rng.integers(3, 16, 6), rng.integers(3, 16, 5)) for _ in range(4))
    spec = ConversionSpec("two_norm", 4, 2, "full", calib)
    sels = choose_selections(small_model, spec)
    assert set(sels) == set(small_model.spec.site_names())
    assert all(s.r == 2 for s in sels.values())
    out = convert_model(small_model, spec)
    assert out.conversion["calibration_samples"] == 4
