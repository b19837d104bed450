import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from micro import codec_problem
from oracles import central_difference, relative_error
from sparsenvs.codec import (
    TokenSequence,
    VQCodec,
    codec_loss,
    decode_tokens,
    encode_image,
    encode_images,
    quantize,
    reconstruct,
    train_codec,
)
from sparsenvs.config import CodecConfig


def brute_nearest(latents, codebook):
    out = []
    for z in latents:
        best, best_j = np.inf, -1
        for j, c in enumerate(codebook):
            d = float(np.sum((z - c) ** 2))
            if d < best:
                best, best_j = d, j
        out.append(best_j)
    return out


# -- quantisation ---------------------------------------------------------------


def test_exact_codeword_maps_to_its_index(rng):
    codebook = torch.as_tensor(rng.normal(size=(16, 4)))
    tokens, q = quantize(codebook[7][None], codebook)
    assert tokens.tolist() == [7]
    assert torch.equal(q[0], codebook[7])


def test_tie_goes_to_lowest_index():
    codebook = torch.zeros(8, 2, dtype=torch.float64)
    codebook[:] = 10.0
    codebook[2] = torch.tensor([1.0, 0.0])
    codebook[5] = torch.tensor([-1.0, 0.0])
    tokens, _ = quantize(torch.zeros(1, 2, dtype=torch.float64), codebook)
    assert tokens.tolist() == [2]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 100_000))
def test_quantize_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    codebook = rng.normal(size=(16, 3))
    latents = rng.normal(size=(20, 3))
    tokens, _ = quantize(torch.as_tensor(latents), torch.as_tensor(codebook))
    assert tokens.tolist() == brute_nearest(latents, codebook)


def test_quantized_codewords_are_fixed_points(rng):
    codebook = torch.as_tensor(rng.normal(size=(32, 4)))
    tokens = torch.as_tensor(rng.integers(32, size=50))
    again, _ = quantize(codebook[tokens], codebook)
    assert torch.equal(again, tokens)


def test_straight_through_passes_gradient(rng):
    codebook = torch.as_tensor(rng.normal(size=(4, 2)))
    z = torch.tensor(rng.normal(size=(3, 2)), requires_grad=True)
    _, q = quantize(z, codebook)
    (q * torch.arange(6.0, dtype=torch.float64).view(3, 2)).sum().backward()
    assert torch.equal(z.grad, torch.arange(6.0, dtype=torch.float64).view(3, 2))


# -- encode / decode --------------------------------------------------------------------


@pytest.fixture(scope="module")
def codec():
    torch.manual_seed(0)
    return VQCodec(codebook_size=32, code_dim=8, downsample=8, hidden=8)


def test_token_grid_shape(codec, rng):
    seq = encode_image(rng.uniform(size=(64, 64, 3)), codec)
    assert seq.grid_shape == (8, 8) and len(seq) == 64
    assert seq.tokens.min() >= 0 and seq.tokens.max() < 32


def test_encoding_is_deterministic(codec, rng):
    img = rng.uniform(size=(32, 48, 3))
    assert np.array_equal(encode_image(img, codec).tokens, encode_image(img, codec).tokens)


def test_batch_and_single_encoding_agree(codec, rng):
    imgs = rng.uniform(size=(3, 16, 16, 3))
    batch = encode_images(imgs, codec)
    for img, row in zip(imgs, batch):
        assert np.array_equal(encode_image(img, codec).tokens, row)


def test_indivisible_size_reports_padding(codec):
    with pytest.raises(ValueError, match=r"pad by \(4, 0\)"):
        encode_image(np.zeros((60, 64, 3)), codec)


def test_decode_shape(codec, rng):
    seq = encode_image(rng.uniform(size=(32, 48, 3)), codec)
    out = decode_tokens(seq, codec)
    assert out.shape == (32, 48, 3)
    assert out.min() >= 0 and out.max() <= 1


def test_invalid_token_rejected(codec):
    with pytest.raises(ValueError, match="out of range"):
        decode_tokens(TokenSequence(np.full(4, 32), (2, 2)), codec)
    with pytest.raises(ValueError, match="out of range"):
        decode_tokens(TokenSequence(np.full(4, -1), (2, 2)), codec)


def test_token_count_must_fill_grid():
    with pytest.raises(ValueError):
        TokenSequence(np.zeros(5), (2, 2))


def test_non_power_of_two_factor_rejected():
    with pytest.raises(ValueError):
        VQCodec(downsample=6)


# -- loss and gradients -------------------------------------------------------------


def micro_codec(seed=0, beta=0.25):
    torch.manual_seed(seed)
    return VQCodec(codebook_size=4, code_dim=2, downsample=2, hidden=2, beta=beta).double()


def test_loss_zero_at_global_minimum():
    torch.manual_seed(0)
    params = VQCodec(codebook_size=16, code_dim=2, downsample=4, hidden=4).double()
    last = params.decoder.net[-1]
    with torch.no_grad():
        last.weight.zero_()
        last.bias.zero_()  # decoder outputs sigmoid(0) = 0.5 everywhere
    images = np.full((1, 16, 16, 3), 0.5)
    with torch.no_grad():
        z = params.encode_latents(torch.as_tensor(images).permute(0, 3, 1, 2))
        params.codebook.copy_(z.reshape(16, 2))
    out = codec_loss(images, params)
    assert out["loss"].item() == 0.0


def test_beta_zero_drops_commitment(rng):
    params = micro_codec(beta=0.0)
    out = codec_loss(rng.uniform(size=(2, 4, 4, 3)), params)
    assert out["commitment"].item() == 0.0
    assert out["loss"].item() == pytest.approx(out["recon"].item() + out["codebook"].item(), abs=1e-15)


def test_straight_through_gradient_matches_surrogate():
    params, real, surrogate, unchanged = codec_problem()
    assert sum(p.numel() for p in params.parameters()) < 500
    params.zero_grad()
    real().backward()
    numeric = central_difference(surrogate, list(params.parameters()), h=1e-6)
    assert unchanged()
    for (name, p), n in zip(params.named_parameters(), numeric):
        assert relative_error(p.grad, n) < 1e-4, name


def test_decoder_gradient_matches_finite_differences(rng):
    params = micro_codec(2)
    images = rng.uniform(size=(2, 4, 4, 3))
    dec = list(params.decoder.parameters())
    params.zero_grad()
    codec_loss(images, params)["loss"].backward()
    numeric = central_difference(lambda: codec_loss(images, params)["loss"], dec)
    for p, n in zip(dec, numeric):
        assert relative_error(p.grad, n) < 1e-5


def test_encoder_receives_gradient(rng):
    params = micro_codec(3, beta=0.0)
    codec_loss(rng.uniform(size=(2, 4, 4, 3)), params)["loss"].backward()
    assert all(p.grad.abs().sum() > 0 for p in params.encoder.parameters())


# -- training --------------------------------------------------------------------


def test_zero_steps_is_noop(rng):
    cfg = CodecConfig(codebook_size=8, code_dim=4, downsample=4, hidden=4)
    torch.manual_seed(0)
    params = VQCodec.from_config(cfg)
    before = {k: v.clone() for k, v in params.state_dict().items()}
    train_codec(rng.uniform(size=(4, 8, 8, 3)), cfg, steps=0, params=params)
    assert all(torch.equal(before[k], v) for k, v in params.state_dict().items())


def test_training_reduces_reconstruction_error():
    rng = np.random.default_rng(0)
    images = rng.uniform(size=(8, 16, 16, 3)) * 0.3 + np.linspace(0.2, 0.6, 16)[None, None, :, None]
    cfg = CodecConfig(codebook_size=16, code_dim=4, downsample=4, hidden=8, lr=3e-3, batch_size=8)
    torch.manual_seed(0)
    params = VQCodec.from_config(cfg)
    before = np.mean((reconstruct(list(images), params) - images) ** 2)
    train_codec(images, cfg, steps=150, params=params)
    after = np.mean((reconstruct(list(images), params) - images) ** 2)
    assert after < 0.5 * before


def test_dead_codes_are_reseeded(rng):
    cfg = CodecConfig(codebook_size=8, code_dim=2, downsample=4, hidden=4, batch_size=2, lr=0.0)
    torch.manual_seed(0)
    params = VQCodec.from_config(cfg)
    with torch.no_grad():
        params.codebook[1:] = 1e6  # unreachable entries
    train_codec(rng.uniform(size=(2, 8, 8, 3)), cfg, steps=1, params=params)
    assert params.codebook.abs().max() < 1e3


def test_default_hyperparameters():
    cfg = CodecConfig()
    assert cfg.lr == 1e-4 and cfg.batch_size == 16 and cfg.train_steps == 5000
