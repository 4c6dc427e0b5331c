import pytest
import torch

from neuflow.upsampler import MaskHead, convex_upsample


def uniform_mask(h, w, b=1):
    return torch.full((b, 64, 9, h, w), 1.0 / 9)


def centre_mask(h, w):
    m = torch.zeros(1, 64, 9, h, w)
    m[:, :, 4] = 1.0
    return m


def random_mask(g, h, w):
    return torch.softmax(torch.randn(1, 64, 9, h, w, generator=g) * 3, dim=2)


class TestMaskHead:
    def test_shape_and_normalisation(self):
        head = MaskHead(64, 128)
        mask = head(torch.randn(1, 64, 48, 64), torch.randn(1, 2, 48, 64))
        assert mask.shape == (1, 64, 9, 48, 64)
        assert (mask >= 0).all()
        assert torch.allclose(mask.sum(2), torch.ones(1, 64, 48, 64), atol=1e-6)

    def test_deterministic(self):
        head = MaskHead(8, 16)
        x, f = torch.randn(1, 8, 6, 6), torch.randn(1, 2, 6, 6)
        assert torch.equal(head(x, f), head(x, f))


class TestConvexUpsample:
    def test_uniform_mask_constant_flow(self):
        flow = torch.tensor([1.5, -2.0])[None, :, None, None].expand(1, 2, 4, 5)
        up = convex_upsample(flow, uniform_mask(4, 5))
        assert up.shape == (1, 2, 32, 40)
        assert torch.allclose(up, (8 * flow[:, :, :1, :1]).expand_as(up), atol=1e-5)

    def test_centre_mask_is_nearest_replication(self):
        flow = torch.randn(1, 2, 3, 4)
        up = convex_upsample(flow, centre_mask(3, 4))
        ref = 8 * flow.repeat_interleave(8, dim=2).repeat_interleave(8, dim=3)
        assert torch.allclose(up, ref, atol=1e-6)

    def test_subpixel_index_layout(self):
        # weight only the right neighbour for sub-pixel (sy=0, sx=7)
        flow = torch.arange(12.0).view(1, 1, 3, 4).expand(1, 2, 3, 4).contiguous()
        mask = centre_mask(3, 4)
        mask[:, 7, 4] = 0
        mask[:, 7, 5] = 1
        up = convex_upsample(flow, mask)
        assert up[0, 0, 8, 8 + 7] == 8 * flow[0, 0, 1, 2]
        # right edge replicates
        assert up[0, 0, 8, 31] == 8 * flow[0, 0, 1, 3]

    def test_zero_flow(self):
        g = torch.Generator().manual_seed(0)
        assert torch.equal(convex_upsample(torch.zeros(1, 2, 3, 3), random_mask(g, 3, 3)), torch.zeros(1, 2, 24, 24))

    def test_linear_in_flow(self):
        g = torch.Generator().manual_seed(1)
        flow = torch.randn(1, 2, 4, 4, generator=g, dtype=torch.float64)
        mask = random_mask(g, 4, 4).double()
        assert torch.allclose(convex_upsample(-2.5 * flow, mask), -2.5 * convex_upsample(flow, mask), atol=1e-12)

    def test_mask_shape_mismatch(self):
        with pytest.raises(ValueError):
            convex_upsample(torch.zeros(1, 2, 3, 3), uniform_mask(3, 4))
