import numpy as np
import pytest

from selectmae import numerics as nm
from selectmae.backbone import (
    BackboneConfig,
    LatentBatch,
    ModelParams,
    decode,
    encode,
    encode_visible,
)
from selectmae.errors import ConfigError, ContractError
from selectmae.masking import MaskSpec, sample_visible
from selectmae.numerics.gradcheck import check_param_gradients
from selectmae.tokenizer import TokenizerConfig

TOK = TokenizerConfig(tubelet=(2, 2, 2), dim=16)
BB = BackboneConfig(enc_depth=2, enc_dim=16, enc_heads=2, dec_depth=2, dec_dim=8, dec_heads=2)


def _model(seed=0):
    return ModelParams(TOK, BB, np.random.default_rng(seed))


def _tokens(n=16, seed=1):
    rng = np.random.default_rng(seed)
    return nm.Tensor(rng.standard_normal((n, 16)).astype(np.float32))


def test_encode_output_shape():
    model = _model()
    spec = sample_visible(np.full(16, 1 / 16), 0.5, np.random.default_rng(2))
    latents = encode_visible(_tokens(), spec, model)
    assert latents.features.shape == (spec.n_visible, 16)


def test_encode_depth_zero_is_final_norm_only():
    cfg = BackboneConfig(enc_depth=0, enc_dim=16, enc_heads=2, dec_depth=1, dec_dim=8, dec_heads=2)
    model = ModelParams(TOK, cfg, np.random.default_rng(0))
    x = _tokens(4)
    out = encode(x, model)
    expected = nm.layer_norm(x, model.enc_norm.gain, model.enc_norm.bias)
    np.testing.assert_allclose(out.data, expected.data, atol=1e-6)


def test_encode_permutation_equivariance():
    model = _model()
    x = _tokens(10)
    perm = np.random.default_rng(3).permutation(10)
    base = encode(x, model).data
    permuted = encode(nm.Tensor(x.data[perm]), model).data
    np.testing.assert_allclose(permuted, base[perm], atol=1e-5)


def test_encode_requires_matching_dim():
    model = _model()
    with pytest.raises(ConfigError):
        encode(nm.Tensor(np.zeros((4, 8), dtype=np.float32)), model)


def test_decode_shapes_and_order():
    model = _model()
    spec = sample_visible(np.full(16, 1 / 16), 0.75, np.random.default_rng(4))
    latents = encode_visible(_tokens(), spec, model)
    preds = decode(latents, spec, model)
    assert preds.values.shape == (spec.n_masked, TOK.patch_len())
    np.testing.assert_array_equal(preds.masked_ids, spec.masked_ids)


def test_decode_mismatched_spec_rejected():
    model = _model()
    spec_a = MaskSpec(16, 0.5, np.arange(8))
    spec_b = MaskSpec(16, 0.75, np.arange(4))
    latents = LatentBatch(nm.Tensor(np.zeros((8, 16), dtype=np.float32)), spec_a)
    with pytest.raises(ContractError):
        decode(latents, spec_b, model)


def test_masked_positions_receive_distinct_predictions():
    model = _model(7)
    spec = MaskSpec(16, 0.875, np.array([0, 5]))
    latents = encode_visible(_tokens(16, 8), spec, model)
    preds = decode(latents, spec, model).values.data
    diffs = np.abs(preds[:, None, :] - preds[None, :, :]).max(axis=-1)
    off_diag = diffs[~np.eye(diffs.shape[0], dtype=bool)]
    assert off_diag.min() > 1e-6  # mask token identical, positions differ


def test_mask_token_gradient_flows():
    model = _model()
    spec = MaskSpec(16, 0.75, np.arange(4))
    tokens = _tokens()

    def loss():
        latents = encode_visible(tokens, spec, model)
        preds = decode(latents, spec, model)
        return nm.reduce_mean(preds.values)

    with nm.Tape() as tape:
        value = loss()
    nm.backward(value, tape)
    assert model.mask_token.grad is not None
    assert np.abs(model.mask_token.grad).max() > 0

    check_param_gradients(
        loss, {"model.decoder.mask_token": model.mask_token}, rel_tol=1e-3, max_entries=8
    )


def test_every_parameter_reachable_from_reconstruction_loss():
    # coverage assertion: no dead parameters after one backward pass
    from selectmae.data import SynthConfig, generate_clip, patch_normalize_targets
    from selectmae.tokenizer import tokenize
    from selectmae.training import reconstruction_loss

    cfg = SynthConfig(frames=4, height=8, width=8)
    clip = generate_clip(cfg, 0, 0)
    tok_cfg = TokenizerConfig(tubelet=(2, 2, 2), dim=16)
    model = ModelParams(tok_cfg, BB, np.random.default_rng(1))
    targets = patch_normalize_targets(clip, tok_cfg)
    spec = sample_visible(np.full(32, 1 / 32), 0.75, np.random.default_rng(2))
    with nm.Tape() as tape:
        grid = tokenize(clip, tok_cfg, model.proj.weight, model.proj.bias)
        latents = encode_visible(grid.tokens, spec, model)
        preds = decode(latents, spec, model)
        loss, _ = reconstruction_loss(preds, targets, spec, "mse")
    nm.backward(loss, tape)
    missing = [name for name, t in model.named().items() if t.grad is None]
    assert missing == []


def test_full_visibility_mode_for_downstream():
    model = _model()
    spec = MaskSpec.full(16)
    latents = encode_visible(_tokens(), spec, model)
    assert latents.features.shape == (16, 16)


def test_backbone_config_validation():
    with pytest.raises(ConfigError):
        BackboneConfig(enc_dim=10, enc_heads=4)
    with pytest.raises(ConfigError):
        BackboneConfig(dec_dim=9, dec_heads=3)
