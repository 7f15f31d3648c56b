import math

import numpy as np
import pytest
import torch

from medchat import codec
from medchat.checkpoint import Checkpoint, LossCurve
from medchat.codec import (
    AdaptiveNorm,
    AugmentRanges,
    CodecConfig,
    CodecMode,
    CodecTrainConfig,
    LatentCodec,
    adaptive_norm,
    apply_affine,
    augment_image,
    codec_total_loss,
    kl_loss,
    l1_loss,
    latent_noise_augment,
    reparameterize,
    train_codec,
)
from medchat.errors import (
    EmptyDatasetError,
    InvalidConfigError,
    NumericError,
    ShapeError,
)

from oracles import finite_diff_grad


def small_codec(mode=CodecMode.TANH_ADANORM, **kw) -> LatentCodec:
    torch.manual_seed(0)
    return LatentCodec(CodecConfig(mode=mode, base_channels=4, **kw))


# --- adaptive normalization -------------------------------------------------


def test_adaptive_norm_identity_at_init():
    torch.manual_seed(1)
    layer = AdaptiveNorm((1, 3, 1, 1))
    x = torch.randn(2, 3, 5, 5)
    y = layer(x)
    torch.testing.assert_close(y, x / math.sqrt(1.0 + 1e-5), rtol=0, atol=1e-6)


def test_adaptive_norm_centered_constant_returns_bias():
    m = torch.full((1, 2, 1, 1), 0.7)
    v = torch.ones(1, 2, 1, 1)
    g = torch.randn(1, 2, 1, 1)
    b = torch.tensor([[[[1.5]], [[-2.0]]]])
    x = torch.full((1, 2, 4, 4), 0.7)
    y = adaptive_norm(x, m, v, g, b)
    torch.testing.assert_close(y, b.expand_as(y), rtol=0, atol=1e-6)


def test_adaptive_norm_shape_mismatch():
    layer = AdaptiveNorm((1, 3, 1, 1))
    with pytest.raises(ShapeError):
        layer(torch.randn(2, 4, 5, 5))


def test_adaptive_norm_rejects_nonpositive_variance():
    m = torch.zeros(1, 1, 1, 1)
    v = torch.full((1, 1, 1, 1), -1.0)
    g = torch.ones(1, 1, 1, 1)
    b = torch.zeros(1, 1, 1, 1)
    with pytest.raises(NumericError):
        adaptive_norm(torch.randn(1, 1, 2, 2), m, v, g, b)


def test_adaptive_norm_gradients_match_finite_differences():
    torch.manual_seed(3)
    x = torch.randn(2, 3, 2, 2, dtype=torch.float64)
    params = {
        "m": torch.randn(1, 3, 1, 1, dtype=torch.float64),
        "v": torch.rand(1, 3, 1, 1, dtype=torch.float64) + 0.5,
        "g": torch.randn(1, 3, 1, 1, dtype=torch.float64),
        "b": torch.randn(1, 3, 1, 1, dtype=torch.float64),
    }

    def loss_fn():
        return adaptive_norm(x, params["m"], params["v"], params["g"], params["b"]).square().sum()

    for name, p in params.items():
        p.requires_grad_(True)
        loss = loss_fn()
        (analytic,) = torch.autograd.grad(loss, p)
        p.requires_grad_(False)
        numeric = finite_diff_grad(loss_fn, p)
        np.testing.assert_allclose(
            analytic.numpy(), numeric.numpy(), rtol=1e-4, atol=1e-6, err_msg=name
        )


# --- reparameterization and losses -------------------------------------------


def test_reparameterize_eps_zero_returns_mu():
    mu = torch.randn(4, 6, 2, 2)
    lv = torch.randn(4, 6, 2, 2)
    torch.testing.assert_close(reparameterize(mu, lv, torch.zeros_like(mu)), mu)


def test_reparameterize_formula_value():
    z = reparameterize(torch.tensor([1.0]), torch.tensor([0.0]), torch.tensor([2.0]))
    assert z.item() == pytest.approx(3.0)


def test_reparameterize_sigma_zero_limit():
    mu = torch.randn(8)
    z = reparameterize(mu, torch.full((8,), -60.0), torch.randn(8))
    torch.testing.assert_close(z, mu, rtol=0, atol=1e-9)


def test_reparameterize_shape_mismatch():
    with pytest.raises(ShapeError):
        reparameterize(torch.zeros(3), torch.zeros(4), torch.zeros(3))


def test_kl_loss_zero_at_prior():
    assert kl_loss(torch.zeros(2, 6, 4, 4), torch.zeros(2, 6, 4, 4)).item() == 0.0


def test_kl_loss_single_element_values():
    # mu=1, sigma=1
    assert kl_loss(torch.tensor([1.0]), torch.tensor([0.0])).item() == pytest.approx(0.5)
    # mu=0, sigma^2=e
    got = kl_loss(torch.tensor([0.0]), torch.tensor([1.0])).item()
    assert got == pytest.approx(-0.5 * (1 + 1 - 0 - math.e), abs=1e-6)
    assert got == pytest.approx(0.3591, abs=1e-4)


def test_kl_loss_batch_mean_of_per_sample_sums():
    mu = torch.ones(4, 6, 2, 2)
    lv = torch.zeros(4, 6, 2, 2)
    # each of 24 elements contributes 0.5 per sample
    assert kl_loss(mu, lv).item() == pytest.approx(0.5 * 24)


def test_kl_loss_nonnegative_property():
    g = torch.Generator().manual_seed(5)
    for _ in range(50):
        mu = torch.randn(2, 3, 2, 2, generator=g) * 2
        lv = torch.randn(2, 3, 2, 2, generator=g)
        assert kl_loss(mu, lv).item() >= 0.0


def test_kl_loss_rejects_nonfinite():
    with pytest.raises(NumericError):
        kl_loss(torch.tensor([float("nan")]), torch.tensor([0.0]))


def test_kl_gradients_match_finite_differences():
    mu = torch.randn(1, 2, 2, 2, dtype=torch.float64)
    lv = torch.randn(1, 2, 2, 2, dtype=torch.float64) * 0.5

    for p in (mu, lv):
        p.requires_grad_(True)
        (analytic,) = torch.autograd.grad(kl_loss(mu, lv), p)
        p.requires_grad_(False)
        numeric = finite_diff_grad(lambda: kl_loss(mu, lv), p)
        np.testing.assert_allclose(analytic.numpy(), numeric.numpy(), rtol=1e-4, atol=1e-7)


def test_l1_loss_examples():
    x = torch.rand(3, 8, 8) * 2 - 1
    assert l1_loss(x, x).item() == 0.0
    assert l1_loss(x, x + 0.25).item() == pytest.approx(0.25, abs=1e-6)


def test_l1_loss_matches_elementwise_oracle():
    g = torch.Generator().manual_seed(9)
    x = torch.randn(2, 3, 6, 6, generator=g)
    y = torch.randn(2, 3, 6, 6, generator=g)
    oracle = float(np.mean(np.abs(x.numpy() - y.numpy())))
    assert l1_loss(x, y).item() == pytest.approx(oracle, abs=1e-7)


def test_l1_gradient_matches_finite_differences():
    x = torch.randn(2, 2, 3, 3, dtype=torch.float64)
    y = torch.randn(2, 2, 3, 3, dtype=torch.float64)
    y.requires_grad_(True)
    (analytic,) = torch.autograd.grad(l1_loss(x, y), y)
    y.requires_grad_(False)
    numeric = finite_diff_grad(lambda: l1_loss(x, y), y)
    np.testing.assert_allclose(analytic.numpy(), numeric.numpy(), rtol=1e-4, atol=1e-7)


# --- encode / decode ----------------------------------------------------------


def test_encode_shape_contract():
    c = small_codec()
    out = c.encode(torch.rand(3, 64, 64) * 2 - 1)
    assert out.z.shape == (6, 8, 8)


def test_encode_rejects_bad_spatial_size():
    c = small_codec()
    with pytest.raises(ShapeError):
        c.encode(torch.zeros(3, 60, 60))


def test_tanh_mode_bounds_latents():
    c = small_codec()
    out = c.encode(torch.rand(4, 3, 32, 32) * 2 - 1)
    assert out.z.abs().max().item() <= 1.0
    assert out.mu is None and out.log_var is None


def test_vae_mode_emits_distribution():
    c = small_codec(mode=CodecMode.VAE)
    out = c.encode(torch.rand(2, 3, 32, 32) * 2 - 1)
    assert out.mu is not None and out.log_var is not None
    assert out.mu.shape == out.z.shape == (2, 6, 4, 4)
    assert torch.isfinite(out.log_var).all()


def test_vae_encode_deterministic_under_generator():
    c = small_codec(mode=CodecMode.VAE)
    x = torch.rand(2, 3, 32, 32) * 2 - 1
    z1 = c.encode(x, generator=torch.Generator().manual_seed(11)).z
    z2 = c.encode(x, generator=torch.Generator().manual_seed(11)).z
    torch.testing.assert_close(z1, z2, rtol=0, atol=0)


def test_unconstrained_mode_raw_projection():
    c = small_codec(mode=CodecMode.UNCONSTRAINED)
    out = c.encode(torch.rand(2, 3, 32, 32) * 2 - 1)
    assert out.mu is None and out.log_var is None
    assert out.z.shape == (2, 6, 4, 4)


def test_decode_shape_and_range():
    c = small_codec()
    img = c.decode(torch.rand(6, 8, 8) * 2 - 1)
    assert img.shape == (3, 64, 64)
    assert img.abs().max().item() <= 1.0


def test_decode_shape_mismatch():
    c = small_codec()
    with pytest.raises(ShapeError):
        c.decode(torch.zeros(5, 8, 8))


@pytest.mark.parametrize("n", [16, 40, 64])
def test_resolution_agnostic_roundtrip(n):
    c = small_codec()
    out = c.encode(torch.rand(1, 3, n, n) * 2 - 1)
    assert out.z.shape == (1, 6, n // 8, n // 8)
    assert c.decode(out.z).shape == (1, 3, n, n)


def test_compression_factor_is_32_at_default_channels():
    assert CodecConfig().compression_factor() == pytest.approx(32.0)


def test_codec_total_loss_modes():
    x = torch.rand(2, 3, 16, 16) * 2 - 1
    plain = small_codec()
    total, parts = codec_total_loss(x, plain)
    assert total.item() == pytest.approx(parts["l1"])
    assert "kl" not in parts

    vae_zero = small_codec(mode=CodecMode.VAE, kl_weight=0.0)
    total, parts = codec_total_loss(x, vae_zero, generator=torch.Generator().manual_seed(0))
    assert total.item() == pytest.approx(parts["l1"], abs=1e-7)
    assert parts["kl"] >= 0.0

    vae = small_codec(mode=CodecMode.VAE, kl_weight=0.01)
    total, parts = codec_total_loss(x, vae, generator=torch.Generator().manual_seed(0))
    assert total.item() == pytest.approx(parts["l1"] + 0.01 * parts["kl"], abs=1e-6)


# --- augmentation --------------------------------------------------------------


def test_latent_noise_augment_zero_sigma_is_identity():
    z = torch.randn(2, 6, 4, 4)
    out = latent_noise_augment(z, torch.Generator().manual_seed(0), 0.0)
    torch.testing.assert_close(out, z, rtol=0, atol=0)


def test_latent_noise_augment_statistics():
    # Reproduce the per-sample sigma draw with an identically seeded generator,
    # then check the injected noise has that std and zero mean.
    sigma_max = 0.2
    z = torch.zeros(1, 1, 320, 320)
    gen = torch.Generator().manual_seed(77)
    out = latent_noise_augment(z, gen, sigma_max)
    ref = torch.Generator().manual_seed(77)
    sigma = float(torch.rand(1, 1, 1, 1, generator=ref) * sigma_max)
    diff = (out - z).flatten()
    assert diff.std().item() == pytest.approx(sigma, abs=0.01 * max(1.0, sigma / 0.2))
    assert abs(diff.mean().item()) <= 3 * sigma / math.sqrt(diff.numel())


def test_augment_identity_ranges():
    x = torch.rand(3, 16, 16)
    ranges = AugmentRanges(0.0, 0.0, 1.0, 1.0, 0.0)
    out = augment_image(x, torch.Generator().manual_seed(0), ranges)
    torch.testing.assert_close(out, x, rtol=0, atol=1e-6)


def test_affine_translation_moves_lit_pixel_exactly():
    img = torch.zeros(1, 16, 16)
    img[0, 8, 4] = 1.0
    out = apply_affine(img, translate_px=(5.0, 0.0))
    assert out[0, 8, 9].item() == pytest.approx(1.0, abs=1e-6)
    out[0, 8, 9] = 0.0
    assert out.abs().max().item() < 1e-6


def test_affine_vertical_translation():
    img = torch.zeros(1, 16, 16)
    img[0, 3, 7] = 1.0
    out = apply_affine(img, translate_px=(0.0, 4.0))
    assert out[0, 7, 7].item() == pytest.approx(1.0, abs=1e-6)


def test_affine_rotation_zero_fills_corners():
    img = torch.ones(1, 33, 33)
    out = apply_affine(img, rotate_deg=45.0)
    assert out[0, 0, 0].item() == pytest.approx(0.0, abs=1e-6)
    assert out[0, 16, 16].item() == pytest.approx(1.0, abs=1e-4)


def test_augment_preserves_shape_over_draws():
    gen = torch.Generator().manual_seed(123)
    x = torch.rand(3, 16, 16)
    for _ in range(200):
        assert augment_image(x, gen).shape == x.shape


# --- training -------------------------------------------------------------------


def tiny_dataset(n=8, size=16, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(n, 3, size, size, generator=g) * 2 - 1


def test_train_codec_curve_and_checkpoint(tmp_path):
    torch.manual_seed(0)
    c = LatentCodec(CodecConfig(mode=CodecMode.TANH_ADANORM, base_channels=4))
    cfg = CodecTrainConfig(epochs=2, learning_rate=1e-3, batch_size=4, seed=1)
    ckpt, curve = train_codec(tiny_dataset(), c, cfg)
    assert len(curve) == 2
    assert ckpt.manifest["mode"] == "tanh_adanorm"
    assert ckpt.manifest["seed"] == 1

    d = ckpt.save(tmp_path / "ck")
    restored = codec.codec_from_checkpoint(d)
    x = tiny_dataset(2)
    torch.testing.assert_close(restored.encode(x).z, c.encode(x).z, rtol=0, atol=1e-6)


def test_train_codec_deterministic_same_seed():
    torch.set_num_threads(1)
    data = tiny_dataset()
    curves = []
    for _ in range(2):
        torch.manual_seed(42)
        c = LatentCodec(CodecConfig(base_channels=4))
        cfg = CodecTrainConfig(epochs=2, learning_rate=1e-3, batch_size=4, seed=3)
        _, curve = train_codec(data, c, cfg)
        curves.append(curve.losses)
    assert curves[0] == curves[1]


def test_train_codec_rejects_small_dataset():
    c = small_codec()
    with pytest.raises(EmptyDatasetError):
        train_codec(tiny_dataset(2), c, CodecTrainConfig(epochs=1, batch_size=4))


def test_vae_training_records_kl():
    torch.manual_seed(0)
    c = LatentCodec(CodecConfig(mode=CodecMode.VAE, base_channels=4, kl_weight=1e-4))
    _, curve = train_codec(
        tiny_dataset(), c, CodecTrainConfig(epochs=1, learning_rate=1e-3, batch_size=4, seed=0)
    )
    assert curve.rows[0].kl is not None and curve.rows[0].kl >= 0.0


def test_loss_curve_csv_roundtrip(tmp_path):
    curve = LossCurve()
    curve.append(1, 0.5, l1=0.4, kl=10.0)
    curve.append(2, 0.3, l1=0.25, kl=5.0)
    path = tmp_path / "loss.csv"
    curve.save_csv(path)
    back = LossCurve.load_csv(path)
    assert [r.epoch for r in back.rows] == [1, 2]
    assert back.losses == pytest.approx(curve.losses)
    assert back.rows[1].kl == pytest.approx(5.0)


def test_config_validation():
    with pytest.raises(InvalidConfigError):
        CodecConfig(latent_channels=0)
    with pytest.raises(InvalidConfigError):
        CodecConfig(base_channels=5)
    with pytest.raises(InvalidConfigError):
        CodecTrainConfig(epochs=0)
