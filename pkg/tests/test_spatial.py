import numpy as np
import pytest
import torch
from torch.autograd import gradcheck

from gapcast.spatial import (N_PLANES, ContractError, PairFusion, ResidualEncoder, SpatialBlock,
                             encode_channel, fuse_pairs, spatial_representation)


def _zero_convs(enc):
    with torch.no_grad():
        for layer in enc.layers:
            for conv in (layer.conv1, layer.conv2):
                conv.weight.zero_()
                conv.bias.zero_()


def test_encode_channel_shape():
    torch.manual_seed(0)
    enc = ResidualEncoder(1, 5, 32).double()
    out = encode_channel(torch.rand(5, 5, dtype=torch.float64), enc)
    assert out.shape == (32,)
    assert encode_channel(torch.rand(7, 5, 5, dtype=torch.float64), enc).shape == (7, 32)


def test_weather_encoder_takes_onehot_stack():
    enc = ResidualEncoder(4, 5, 8).double()
    assert encode_channel(torch.rand(4, 5, 5, dtype=torch.float64), enc).shape == (8,)
    with pytest.raises(ContractError):
        enc(torch.rand(2, 3, 5, 5, dtype=torch.float64))


def test_zero_convolutions_make_residual_stack_identity():
    torch.manual_seed(1)
    enc = ResidualEncoder(1, 5, 6).double()
    _zero_convs(enc)
    p = torch.rand(5, 5, dtype=torch.float64)
    expected = enc.proj(p.reshape(1, -1))[0]
    torch.testing.assert_close(encode_channel(p, enc), expected, rtol=0, atol=1e-15)


def test_skip_path_linear_difference():
    torch.manual_seed(2)
    enc = ResidualEncoder(1, 5, 6).double()
    _zero_convs(enc)
    p1, p2 = torch.rand(5, 5, dtype=torch.float64), torch.rand(5, 5, dtype=torch.float64)
    diff = encode_channel(p1, enc) - encode_channel(p2, enc)
    torch.testing.assert_close(diff, enc.proj.weight @ (p1 - p2).reshape(-1), rtol=0, atol=1e-13)


def test_encoder_kernel_gradient_matches_finite_difference():
    torch.manual_seed(3)
    enc = ResidualEncoder(1, 5, 4).double()
    p = torch.rand(5, 5, dtype=torch.float64)
    w = enc.layers[1].conv1.weight
    (encode_channel(p, enc).norm()).backward()
    g = w.grad[0, 0, 1, 2].item()
    eps = 1e-6
    with torch.no_grad():
        w[0, 0, 1, 2] += eps
        up = encode_channel(p, enc).norm().item()
        w[0, 0, 1, 2] -= 2 * eps
        down = encode_channel(p, enc).norm().item()
    fd = (up - down) / (2 * eps)
    assert abs(fd - g) <= 1e-4 * max(abs(g), 1e-8)


def test_same_patch_same_encoding():
    torch.manual_seed(4)
    block = SpatialBlock(3, 4).double()
    x = torch.rand(1, N_PLANES, 3, 3, dtype=torch.float64)
    two = block(torch.cat([x, x]))
    torch.testing.assert_close(two[0], two[1], rtol=0, atol=0)


def test_fuse_pairs_selector_and_zero():
    d = 5
    fuse = PairFusion(d).double()
    with torch.no_grad():
        fuse.fc.weight.copy_(torch.cat([torch.eye(d), torch.zeros(d, d)], dim=1))
        fuse.fc.bias.zero_()
    a = torch.randn(d, dtype=torch.float64)
    torch.testing.assert_close(fuse(a, torch.randn(d, dtype=torch.float64)), torch.relu(a))
    with torch.no_grad():
        fuse.fc.weight.zero_()
    assert torch.count_nonzero(fuse(a, a)) == 0


def test_fuse_pairs_matches_matrix_oracle(rng):
    d = 6
    f1, f2 = PairFusion(d).double(), PairFusion(d).double()
    g = [torch.tensor(rng.normal(size=d)) for _ in range(4)]
    tsv, jud = fuse_pairs(*g, f1, f2)
    for out, fuse, (a, b) in ((tsv, f1, g[:2]), (jud, f2, g[2:])):
        W, c = fuse.fc.weight.detach().numpy(), fuse.fc.bias.detach().numpy()
        ref = np.maximum(W @ np.concatenate([a.numpy(), b.numpy()]) + c, 0)
        np.testing.assert_allclose(out.detach().numpy(), ref, atol=1e-10)


def test_fuse_dimension_contract():
    with pytest.raises(ContractError):
        PairFusion(4)(torch.zeros(4), torch.zeros(3))


def test_spatial_representation_layout():
    parts = [torch.randn(32, dtype=torch.float64) for _ in range(4)]
    g = spatial_representation(*parts)
    assert g.shape == (128,)
    assert g[32] == parts[1][0]
    assert torch.count_nonzero(spatial_representation(*[torch.zeros(32)] * 4)) == 0


def test_spatial_block_gradients_match_finite_differences():
    torch.manual_seed(5)
    block = SpatialBlock(3, 2, n_layers=4).double()
    x = torch.rand(2, N_PLANES, 3, 3, dtype=torch.float64)
    for name, p in block.named_parameters():
        def f(q, name=name):
            params = dict(block.named_parameters())
            params[name] = q
            return torch.func.functional_call(block, params, (x,))
        assert gradcheck(f, (p.detach().clone().requires_grad_(),), eps=1e-6, atol=1e-6, rtol=1e-4), name


def test_fused_scalar_path_matches_separate_encoders():
    torch.manual_seed(6)
    block = SpatialBlock(5, 3).double()
    x = torch.rand(4, N_PLANES, 5, 5, dtype=torch.float64)
    fused = block._encode_scalar_groups(x[:, 4:])
    for j, name in enumerate(("speed", "volume", "journey_up", "journey_down", "gap")):
        torch.testing.assert_close(fused[name], block.encoders[name](x[:, 4 + j:5 + j]), rtol=0, atol=1e-14)
