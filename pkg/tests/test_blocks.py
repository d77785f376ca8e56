import pytest
import torch

from vaex.blocks import (
    BlockConfig,
    ResidualBlock,
    SqueezeExcite,
    adain,
    condition_channels,
    hard_swish,
)


def zero_main_path(block: ResidualBlock):
    with torch.no_grad():
        for conv in block.convs:
            conv.weight.zero_()
            conv.bias.zero_()


class TestHardSwish:
    def test_values(self):
        x = torch.tensor([0.0, 3.0, -3.0, 1.0, 10.0, -10.0])
        out = hard_swish(x)
        expected = torch.tensor([0.0, 3.0, 0.0, 4.0 / 6.0, 10.0, 0.0])
        assert torch.allclose(out, expected)

    def test_gradient_finite_differences(self):
        x = torch.randn(2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
        hard_swish(x).sum().backward()
        eps = 1e-6
        idx = (1, 2, 3, 0)
        with torch.no_grad():
            bump = torch.zeros_like(x)
            bump[idx] = eps
            fd = (hard_swish(x + bump).sum() - hard_swish(x - bump).sum()).item() / (2 * eps)
        assert abs(fd - x.grad[idx].item()) < 1e-3


class TestSqueezeExcite:
    def test_gate_forced_open_is_identity(self):
        se = SqueezeExcite(8, reduction=4)
        with torch.no_grad():
            se.fc2.weight.zero_()
            se.fc2.bias.fill_(30.0)  # sigmoid(30) ~ 1
        x = torch.randn(2, 8, 5, 5)
        assert torch.allclose(se(x), x, atol=1e-6)

    def test_gate_forced_closed_is_zero(self):
        se = SqueezeExcite(8, reduction=4)
        with torch.no_grad():
            se.fc2.weight.zero_()
            se.fc2.bias.fill_(-30.0)
        x = torch.randn(2, 8, 5, 5)
        assert torch.allclose(se(x), torch.zeros_like(x), atol=1e-6)

    def test_output_is_gated_input(self):
        se = SqueezeExcite(4, reduction=4).double()
        x = torch.randn(3, 4, 6, 6, dtype=torch.float64)
        gate = se.gate(x)
        out = se(x)
        for b in range(3):
            for c in range(4):
                assert torch.allclose(out[b, c], gate[b, c] * x[b, c])

    def test_reduction_must_divide(self):
        with pytest.raises(ValueError):
            SqueezeExcite(6, reduction=4)

    def test_gradient_finite_differences(self):
        se = SqueezeExcite(4, reduction=4).double()
        x = torch.randn(2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
        se(x).pow(2).sum().backward()
        eps = 1e-6
        idx = (0, 1, 2, 3)
        with torch.no_grad():
            bump = torch.zeros_like(x)
            bump[idx] = eps
            fd = ((se(x + bump).pow(2).sum() - se(x - bump).pow(2).sum()) / (2 * eps)).item()
        rel = abs(fd - x.grad[idx].item()) / max(abs(fd), 1e-8)
        assert rel < 1e-3


class TestResidualBlock:
    def test_zero_transform_is_identity(self):
        block = ResidualBlock(BlockConfig(8, 8))
        zero_main_path(block)
        block.eval()
        x = torch.randn(2, 8, 4, 4)
        assert torch.allclose(block(x), x, atol=1e-6)

    def test_upsample_shape(self):
        block = ResidualBlock(BlockConfig(8, 4, resolution_change="up"))
        out = block(torch.randn(3, 8, 4, 4))
        assert out.shape == (3, 4, 8, 8)

    def test_downsample_shape(self):
        block = ResidualBlock(BlockConfig(4, 8, resolution_change="down"))
        out = block(torch.randn(3, 4, 8, 8))
        assert out.shape == (3, 8, 4, 4)

    def test_skip_of_constant_map_is_constant(self):
        block = ResidualBlock(BlockConfig(4, 4, resolution_change="up"))
        x = torch.full((1, 4, 4, 4), 0.37)
        skipped = block.skip(x)
        assert skipped.shape == (1, 4, 8, 8)
        assert torch.allclose(skipped, torch.full_like(skipped, 0.37), atol=1e-6)

    def test_batch_preserved(self):
        for change in ("none", "up", "down"):
            block = ResidualBlock(BlockConfig(4, 8, resolution_change=change))
            out = block(torch.randn(5, 4, 8, 8))
            assert out.shape[0] == 5


class TestAdain:
    def test_own_statistics_is_identity(self):
        x = torch.randn(2, 4, 8, 8)
        mean = x.mean(dim=(2, 3))
        std = x.std(dim=(2, 3), unbiased=False)
        out = adain(x, mean, std)
        assert torch.allclose(out, x, atol=1e-4)

    def test_epsilon_style_std_gives_constant(self):
        x = torch.randn(1, 4, 8, 8)
        mean = torch.full((1, 4), 0.7)
        std = torch.full((1, 4), 1e-7)
        out = adain(x, mean, std)
        assert torch.allclose(out, torch.full_like(out, 0.7), atol=1e-4)

    @pytest.mark.parametrize("channels", [4, 8, 16])
    def test_output_statistics_match_targets(self, channels):
        gen = torch.Generator().manual_seed(channels)
        x = torch.randn(3, channels, 16, 16, generator=gen) * 2.0 + 1.0
        mean = torch.randn(3, channels, generator=gen)
        std = torch.rand(3, channels, generator=gen) + 0.5
        out = adain(x, mean, std)
        assert torch.allclose(out.mean(dim=(2, 3)), mean, atol=1e-4)
        assert torch.allclose(out.std(dim=(2, 3), unbiased=False), std, atol=1e-4)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            adain(torch.randn(1, 4, 4, 4), torch.zeros(3), torch.ones(3))

    def test_gradient_finite_differences(self):
        x = torch.randn(2, 4, 4, 4, dtype=torch.float64, requires_grad=True)
        mean = torch.randn(2, 4, dtype=torch.float64)
        std = torch.rand(2, 4, dtype=torch.float64) + 0.5
        adain(x, mean, std).pow(2).sum().backward()
        eps = 1e-6
        idx = (1, 3, 0, 2)
        with torch.no_grad():
            bump = torch.zeros_like(x)
            bump[idx] = eps
            hi = adain(x + bump, mean, std).pow(2).sum().item()
            lo = adain(x - bump, mean, std).pow(2).sum().item()
        fd = (hi - lo) / (2 * eps)
        rel = abs(fd - x.grad[idx].item()) / max(abs(fd), 1e-8)
        assert rel < 1e-3


class TestConditionChannels:
    def test_two_class_plane(self):
        f = torch.zeros(2, 3, 4, 4)
        out = condition_channels(f, torch.tensor([[0.7, 0.3], [0.7, 0.3]]))
        assert out.shape == (2, 4, 4, 4)
        assert torch.allclose(out[:, 3], torch.full((2, 4, 4), 0.7))

    def test_zero_probability_plane(self):
        f = torch.ones(1, 2, 3, 3)
        out = condition_channels(f, torch.tensor([0.0, 1.0]))
        assert torch.allclose(out[:, 2], torch.zeros(1, 3, 3))

    def test_only_appended_planes_differ(self):
        f = torch.randn(1, 3, 4, 4)
        a = condition_channels(f, torch.tensor([0.2, 0.8]))
        b = condition_channels(f, torch.tensor([0.9, 0.1]))
        assert torch.equal(a[:, :3], b[:, :3])
        assert not torch.equal(a[:, 3], b[:, 3])
        assert torch.allclose(a[:, 3], torch.full((1, 4, 4), 0.2))

    def test_three_classes_appends_two_planes(self):
        f = torch.zeros(1, 2, 2, 2)
        out = condition_channels(f, torch.tensor([0.5, 0.3, 0.2]))
        assert out.shape == (1, 4, 2, 2)
        assert torch.allclose(out[0, 2], torch.full((2, 2), 0.5))
        assert torch.allclose(out[0, 3], torch.full((2, 2), 0.3))
