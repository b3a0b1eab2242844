import numpy as np
import pytest
import torch

from gmmit.networks import (
    ArchConfig,
    Networks,
    attribute_point,
    build_networks,
    compose_attention,
    default_arch,
)

torch.set_num_threads(1)


def miniature_arch(**overrides):
    # 8x8 images, 8-channel content code (base 2 -> 4*base = 8)
    kw = dict(image_size=8, code_dim=4, n_domains=2, base_channels=2,
              ec_blocks=1, gen_blocks=1, ez_downsamples=2, disc_downsamples=2,
              mlp_hidden=8)
    kw.update(overrides)
    return ArchConfig(**kw)


@pytest.fixture(scope="module")
def nets32():
    return build_networks(default_arch(32, code_dim=8, n_domains=3), seed=0)


class TestShapes:
    def test_content_code_shape(self, nets32):
        x = torch.randn(2, 3, 32, 32).clamp(-1, 1)
        c = nets32.e_c(x)
        assert c.shape == (2, 256, 8, 8)

    def test_attribute_posterior_shape(self, nets32):
        x = torch.randn(2, 3, 32, 32).clamp(-1, 1)
        p = nets32.e_z(x)
        assert p.mean.shape == (2, 8) and p.logvar.shape == (2, 8)
        assert torch.all(p.logvar.abs() <= 10.0)

    def test_generator_output_shape(self, nets32):
        c = torch.randn(2, 256, 8, 8)
        z = torch.randn(2, 8)
        raw, mask = nets32.gen(c, z)
        assert raw.shape == (2, 3, 32, 32)
        assert mask is None  # attention disabled by default

    def test_reduced_depth_discriminator(self, nets32):
        x = torch.randn(2, 3, 32, 32).clamp(-1, 1)
        out = nets32.disc(x)
        # 32px digits variant: three downsamplings -> 4x4 patch map
        assert out.rf_map.shape == (2, 1, 4, 4)
        assert out.domain_logits.shape == (2, 3)

    def test_full_depth_discriminator(self):
        nets = build_networks(default_arch(64, code_dim=8, n_domains=5), seed=1)
        x = torch.randn(2, 3, 64, 64).clamp(-1, 1)
        out = nets.disc(x)
        assert out.rf_map.shape == (2, 1, 4, 4)
        assert out.domain_logits.shape == (2, 5)

    @pytest.mark.parametrize("size", [32, 64, 128])
    def test_shape_contracts_across_sizes(self, size):
        nets = build_networks(default_arch(size, code_dim=8, n_domains=2,
                                           base_channels=8), seed=2)
        x = torch.randn(1, 3, size, size).clamp(-1, 1)
        c = nets.e_c(x)
        assert c.shape == (1, 32, size // 4, size // 4)
        p = nets.e_z(x)
        assert p.mean.shape == (1, 8)
        raw, _ = nets.gen(c, torch.randn(1, 8))
        assert raw.shape == (1, 3, size, size)
        down = nets.arch.disc_downsamples
        assert nets.disc(x).rf_map.shape == (1, 1, size // 2 ** down, size // 2 ** down)

    def test_indivisible_size_rejected(self, nets32):
        x = torch.randn(1, 3, 24, 24)
        with pytest.raises(ValueError, match="divisible"):
            nets32.e_c(x)
        with pytest.raises(ValueError, match="divisible"):
            nets32.e_z(x)

    def test_discriminator_size_contract(self, nets32):
        with pytest.raises(ValueError):
            nets32.disc(torch.randn(1, 3, 64, 64))
        with pytest.raises(ValueError):
            ArchConfig(image_size=8, code_dim=4, n_domains=2, disc_downsamples=4).validate()

    def test_batch_mismatch_rejected(self, nets32):
        with pytest.raises(ValueError, match="batch"):
            nets32.gen(torch.randn(2, 256, 8, 8), torch.randn(3, 8))


class TestDeterminismAndBatching:
    def test_identical_inputs_identical_outputs(self, nets32):
        x = torch.randn(2, 3, 32, 32).clamp(-1, 1)
        c1, c2 = nets32.e_c(x), nets32.e_c(x)
        assert torch.equal(c1, c2)
        p1, p2 = nets32.e_z(x), nets32.e_z(x)
        assert torch.equal(p1.mean, p2.mean) and torch.equal(p1.logvar, p2.logvar)
        o1, o2 = nets32.disc(x), nets32.disc(x)
        assert torch.equal(o1.rf_map, o2.rf_map)

    def test_batched_equals_per_item(self, nets32):
        torch.manual_seed(3)
        x = torch.randn(4, 3, 32, 32).clamp(-1, 1)
        c_batch = nets32.e_c(x)
        p_batch = nets32.e_z(x)
        for i in range(4):
            c_one = nets32.e_c(x[i : i + 1])
            assert torch.allclose(c_batch[i], c_one[0], atol=1e-5)
            p_one = nets32.e_z(x[i : i + 1])
            assert torch.allclose(p_batch.mean[i], p_one.mean[0], atol=1e-5)

    def test_same_seed_same_weights(self):
        arch = miniature_arch()
        a, b = build_networks(arch, seed=9), build_networks(arch, seed=9)
        pa = {f"{m}.{n}": p for m, mod in a.modules().items()
              for n, p in mod.named_parameters()}
        pb = {f"{m}.{n}": p for m, mod in b.modules().items()
              for n, p in mod.named_parameters()}
        assert pa.keys() == pb.keys()
        for key in pa:
            assert torch.equal(pa[key], pb[key]), key

    def test_shifted_input_preserves_posterior_shape(self, nets32):
        x = torch.randn(1, 3, 32, 32).clamp(-1, 1)
        p = nets32.e_z(x)
        p_shift = nets32.e_z(torch.roll(x, shifts=4, dims=3))
        assert p.mean.shape == p_shift.mean.shape


class TestGeneratorBehaviour:
    def test_output_range(self, nets32):
        c = 3 * torch.randn(2, 256, 8, 8)
        raw, _ = nets32.gen(c, 3 * torch.randn(2, 8))
        assert raw.min() >= -1.0 and raw.max() <= 1.0

    def test_attribute_sensitivity_at_init(self):
        nets = build_networks(default_arch(32, code_dim=8, n_domains=2,
                                           base_channels=8), seed=4)
        c = torch.randn(1, 32, 8, 8)
        raw_a, _ = nets.gen(c, torch.full((1, 8), 1.0))
        raw_b, _ = nets.gen(c, torch.full((1, 8), -1.0))
        assert (raw_a - raw_b).abs().mean() > 0

    def test_mask_range(self):
        nets = build_networks(default_arch(32, code_dim=8, n_domains=2,
                                           base_channels=8, attention=True), seed=5)
        c = torch.randn(2, 32, 8, 8)
        raw, mask = nets.gen(c, torch.randn(2, 8))
        assert mask.shape == (2, 1, 32, 32)
        assert mask.min() >= 0.0 and mask.max() <= 1.0

    def test_no_disent_generator(self):
        arch = default_arch(32, code_dim=8, n_domains=2, base_channels=8, no_disent=True)
        nets = build_networks(arch, seed=6)
        assert nets.e_c is None
        x = torch.randn(2, 3, 32, 32).clamp(-1, 1)
        raw, _ = nets.gen(x, torch.randn(2, 8))
        assert raw.shape == x.shape

    def test_translate_roundtrip_shapes(self, nets32):
        x = torch.randn(2, 3, 32, 32).clamp(-1, 1)
        y = nets32.translate(x, torch.randn(2, 8))
        assert y.shape == x.shape


class TestComposeAttention:
    def test_identity_masks_bit_exact(self):
        torch.manual_seed(0)
        a = torch.rand(2, 3, 8, 8) * 2 - 1
        b = torch.rand(2, 3, 8, 8) * 2 - 1
        ones = torch.ones(2, 1, 8, 8)
        assert torch.equal(compose_attention(a, b, ones), b)
        assert torch.equal(compose_attention(a, b, torch.zeros(2, 1, 8, 8)), a)

    def test_midpoint(self):
        a = torch.full((1, 3, 4, 4), -1.0)
        b = torch.full((1, 3, 4, 4), 1.0)
        m = torch.full((1, 1, 4, 4), 0.5)
        assert torch.equal(compose_attention(a, b, m), torch.zeros(1, 3, 4, 4))

    def test_range_preserved(self):
        torch.manual_seed(1)
        a = torch.rand(2, 3, 8, 8) * 2 - 1
        b = torch.rand(2, 3, 8, 8) * 2 - 1
        m = torch.rand(2, 1, 8, 8)
        out = compose_attention(a, b, m)
        assert out.min() >= -1.0 and out.max() <= 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            compose_attention(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 4, 4),
                              torch.zeros(1, 1, 8, 8))
        with pytest.raises(ValueError):
            compose_attention(torch.zeros(1, 3, 8, 8), torch.zeros(1, 3, 8, 8),
                              torch.zeros(1, 2, 8, 8))


class TestAttributePoint:
    def test_mean_mode_bit_exact(self, nets32):
        x = torch.randn(2, 3, 32, 32).clamp(-1, 1)
        p = nets32.e_z(x)
        assert attribute_point(p, "mean") is p.mean

    def test_clamped_floor_noise_vanishes(self):
        from gmmit.networks import AttributePosterior
        p = AttributePosterior(mean=torch.zeros(1, 4), logvar=torch.full((1, 4), -10.0))
        z = attribute_point(p, "reparameterized", np.random.default_rng(0))
        assert torch.all((z - p.mean).abs() < np.exp(-5.0) * 5)

    def test_reparameterized_sample_mean(self):
        from gmmit.networks import AttributePosterior
        p = AttributePosterior(mean=torch.tensor([[0.5, -0.25]]),
                               logvar=torch.log(torch.tensor([[0.09, 0.04]])))
        rng = np.random.default_rng(7)
        n = 100_000
        draws = torch.cat([attribute_point(p, "reparameterized", rng) for _ in range(n)])
        std = torch.tensor([0.3, 0.2])
        tol = 4 * std / np.sqrt(n)
        assert torch.all((draws.mean(dim=0) - p.mean[0]).abs() < tol)


def fd_gradient_check(params, scalar_fn, n_coords=20, n_dirs=3, h=1e-5,
                      rtol=1e-4, atol=1e-7, seed=0):
    """Central finite differences vs autograd for a scalar-valued closure."""
    loss = scalar_fn()
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    grads = [torch.zeros_like(p) if g is None else g for p, g in zip(params, grads)]
    rng = np.random.default_rng(seed)

    def eval_scalar():
        with torch.no_grad():
            return float(scalar_fn())

    # per-coordinate checks
    sizes = np.array([p.numel() for p in params])
    for _ in range(n_coords):
        pi = int(rng.integers(len(params)))
        ci = int(rng.integers(sizes[pi]))
        flat = params[pi].data.view(-1)
        orig = float(flat[ci])
        flat[ci] = orig + h
        f_plus = eval_scalar()
        flat[ci] = orig - h
        f_minus = eval_scalar()
        flat[ci] = orig
        fd = (f_plus - f_minus) / (2 * h)
        an = float(grads[pi].view(-1)[ci])
        assert abs(fd - an) <= rtol * max(abs(fd), abs(an)) + atol, \
            f"param {pi} coord {ci}: fd={fd} analytic={an}"

    # directional-derivative checks
    for _ in range(n_dirs):
        dirs = [torch.from_numpy(rng.standard_normal(tuple(p.shape))) for p in params]
        norm = float(torch.sqrt(sum((d ** 2).sum() for d in dirs)))
        dirs = [d / norm for d in dirs]
        for p, d in zip(params, dirs):
            p.data += h * d
        f_plus = eval_scalar()
        for p, d in zip(params, dirs):
            p.data -= 2 * h * d
        f_minus = eval_scalar()
        for p, d in zip(params, dirs):
            p.data += h * d
        fd = (f_plus - f_minus) / (2 * h)
        an = float(sum((g * d).sum() for g, d in zip(grads, dirs)))
        assert abs(fd - an) <= rtol * max(abs(fd), abs(an)) + atol


class TestGradients:
    """Analytic vs central-finite-difference gradients, 64-bit miniature nets."""

    def _probe(self, t, seed):
        g = torch.Generator().manual_seed(seed)
        return torch.randn(t.shape, generator=g, dtype=t.dtype)

    def test_content_encoder_gradients(self):
        nets = build_networks(miniature_arch(), seed=10).to(dtype=torch.float64)
        x = torch.randn(2, 3, 8, 8, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(0)).clamp(-1, 1)
        params = list(nets.e_c.parameters())
        probe = None

        def scalar():
            nonlocal probe
            out = nets.e_c(x)
            if probe is None:
                probe = self._probe(out, 1)
            return (out * probe).sum()

        fd_gradient_check(params, scalar, seed=1)

    def test_attribute_encoder_gradients(self):
        nets = build_networks(miniature_arch(), seed=11).to(dtype=torch.float64)
        x = torch.randn(2, 3, 8, 8, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(2)).clamp(-1, 1)
        params = list(nets.e_z.parameters())
        probe = {}

        def scalar():
            p = nets.e_z(x)
            if not probe:
                probe["m"] = self._probe(p.mean, 3)
                probe["v"] = self._probe(p.logvar, 4)
            return (p.mean * probe["m"]).sum() + (p.logvar * probe["v"]).sum()

        fd_gradient_check(params, scalar, seed=2)

    def test_generator_gradients(self):
        nets = build_networks(miniature_arch(attention=True), seed=12).to(dtype=torch.float64)
        g = torch.Generator().manual_seed(5)
        c = torch.randn(2, 8, 2, 2, dtype=torch.float64, generator=g)
        z = torch.randn(2, 4, dtype=torch.float64, generator=g)
        params = list(nets.gen.parameters())
        probe = {}

        def scalar():
            raw, mask = nets.gen(c, z)
            if not probe:
                probe["r"] = self._probe(raw, 6)
                probe["m"] = self._probe(mask, 7)
            return (raw * probe["r"]).sum() + (mask * probe["m"]).sum()

        fd_gradient_check(params, scalar, seed=3)

    def test_discriminator_gradients(self):
        nets = build_networks(miniature_arch(), seed=13).to(dtype=torch.float64)
        x = torch.randn(2, 3, 8, 8, dtype=torch.float64,
                        generator=torch.Generator().manual_seed(8)).clamp(-1, 1)
        params = list(nets.disc.parameters())
        probe = {}

        def scalar():
            out = nets.disc(x)
            if not probe:
                probe["rf"] = self._probe(out.rf_map, 9)
                probe["dom"] = self._probe(out.domain_logits, 10)
            return (out.rf_map * probe["rf"]).sum() + (out.domain_logits * probe["dom"]).sum()

        fd_gradient_check(params, scalar, seed=4)
