import numpy as np
import pytest
import torch
from torch import nn
from torch.autograd import gradcheck

from gapcast.data import FeatureStore
from gapcast.grid import normalize
from gapcast.spatial import ContractError
from gapcast.temporal import (ModelConfig, PredictHead, build_feature_sequence, build_model,
                              day_attention, long_term, lstm_encode, zero_parameters)

D64 = torch.float64


def test_feature_sequence_layout():
    g = torch.randn(5, 128, dtype=D64)
    F = build_feature_sequence(g, torch.zeros(5, dtype=D64))
    assert F.shape == (5, 129)
    assert torch.all(F[:, -1] == 0)
    perm = torch.tensor([3, 1, 4, 0, 2])
    s = torch.randn(5, dtype=D64)
    torch.testing.assert_close(build_feature_sequence(g[perm], s[perm]), build_feature_sequence(g, s)[perm])
    with pytest.raises(ContractError):
        build_feature_sequence(g, torch.zeros(4, dtype=D64))


def test_lstm_zero_parameters_zero_state():
    lstm = nn.LSTM(3, 4, batch_first=True).double()
    zero_parameters(lstm)
    assert torch.all(lstm_encode(torch.zeros(6, 3, dtype=D64), lstm) == 0)


def _cell_oracle(x, lstm):
    """One LSTM step from zero state, gates in PyTorch's (i, f, g, o) order."""
    W, b = lstm.weight_ih_l0.detach().numpy(), (lstm.bias_ih_l0 + lstm.bias_hh_l0).detach().numpy()
    z = W @ x + b
    h = len(z) // 4
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, g, o = sig(z[:h]), sig(z[h:2 * h]), np.tanh(z[2 * h:3 * h]), sig(z[3 * h:])
    c = i * g  # previous cell state is zero
    return o * np.tanh(c)


def test_lstm_single_step_matches_cell_oracle(rng):
    torch.manual_seed(0)
    lstm = nn.LSTM(5, 3, batch_first=True).double()
    x = rng.normal(size=5)
    out = lstm_encode(torch.tensor(x)[None], lstm).detach().numpy()
    np.testing.assert_allclose(out, _cell_oracle(x, lstm), atol=1e-10)


def test_lstm_gradients_match_finite_differences(rng):
    torch.manual_seed(1)
    lstm = nn.LSTM(3, 2, batch_first=True).double()
    seq = torch.tensor(rng.normal(size=(4, 3)))
    for name, p in lstm.named_parameters():
        def f(q, name=name):
            params = dict(lstm.named_parameters())
            params[name] = q
            h = torch.func.functional_call(lstm, params, (seq[None],))[0][0, -1]
            return (h ** 2).sum()
        assert gradcheck(f, (p.detach().clone().requires_grad_(),), eps=1e-6, atol=1e-8, rtol=1e-4)


def test_day_attention_identical_states_uniform():
    h = torch.ones(4, 3, dtype=D64) * 0.7
    alpha, bad = day_attention(h)
    torch.testing.assert_close(alpha, torch.full((4,), 0.25, dtype=D64))
    assert bad == 0


def test_day_attention_ratio_example():
    h2 = torch.tensor([3 ** 0.5, 0.0], dtype=D64)
    h1 = torch.tensor([1 / 3 ** 0.5, 5.0], dtype=D64)  # h1.h2 = 1, h2.h2 = 3
    alpha, _ = day_attention(torch.stack([h1, h2]))
    torch.testing.assert_close(alpha, torch.tensor([0.25, 0.75], dtype=D64))


def test_day_attention_sums_to_one_and_may_be_negative(rng):
    for _ in range(100):
        h = torch.tensor(rng.normal(size=(5, 4)))
        alpha, bad = day_attention(h)
        if bad == 0:
            assert abs(float(alpha.sum()) - 1) < 1e-9


def test_day_attention_zero_denominator_falls_back(caplog):
    h = torch.zeros(2, 3, 4, dtype=D64)
    alpha, bad = day_attention(h)
    assert bad == 2
    torch.testing.assert_close(alpha, torch.full((2, 3), 1 / 3, dtype=D64))
    assert "near zero" in caplog.text


def test_long_term_examples(rng):
    H = torch.tensor(rng.normal(size=(3, 4)))
    torch.testing.assert_close(long_term(torch.tensor([0.0, 0, 1], dtype=D64), H), H[-1])
    same = H[0].expand(3, 4)
    torch.testing.assert_close(long_term(torch.full((3,), 1 / 3, dtype=D64), same), H[0])
    a = torch.tensor(rng.normal(size=3))
    brute = sum(a[k] * H[k] for k in range(3))
    torch.testing.assert_close(long_term(a, H), brute, rtol=0, atol=1e-12)


def _identity_head(d_in, pre_activation_bias):
    head = PredictHead(d_in, 2, 3).double()
    with torch.no_grad():
        for layer in head.layers:
            layer.weight.zero_()
            layer.bias.zero_()
        head.layers[0].weight[0, 0] = 1.0
        head.layers[1].weight[0, 0] = 1.0
        head.layers[2].weight[0, 0] = 1.0
        head.layers[2].bias.fill_(pre_activation_bias)
    return head


def test_head_relu_clamp_and_pass_through():
    x = torch.zeros(3, dtype=D64)
    with torch.no_grad():
        assert float(_identity_head(3, -1.0)(x)) == 0.0
        assert float(_identity_head(3, 0.37)(x)) == pytest.approx(0.37, abs=1e-15)
        x[0] = 0.2
        assert float(_identity_head(3, 0.0)(x)) == pytest.approx(0.2)


def test_head_gradient_matches_finite_differences():
    torch.manual_seed(2)
    head = PredictHead(4, 3, 3).double()
    x = torch.rand(6, 4, dtype=D64, requires_grad=True)
    assert gradcheck(lambda v: head(v), (x,), eps=1e-6, atol=1e-8, rtol=1e-4)


@pytest.fixture(scope="module")
def store(small_cube):
    norm, _ = normalize(small_cube)
    return FeatureStore(norm)


def _batch(store, n=3, days=3, seed=0):
    pos = store.positions(range(store.cube.n_days), days)
    pick = np.random.default_rng(seed).choice(len(pos), n, replace=False)
    return store.batch(pos[pick], days), pos[pick]


def test_zero_network_predicts_zero(store, small_grid):
    for kind in ("arlp", "advanced", "lstm"):
        model = zero_parameters(build_model(ModelConfig(kind=kind, d_g=4, d_h=4), small_grid))
        b, _ = _batch(store)
        assert torch.all(model(b) == 0)


def test_outputs_non_negative(store, small_grid):
    b, _ = _batch(store, n=16)
    for kind in ("arlp", "advanced"):
        for seed in range(3):
            model = build_model(ModelConfig(kind=kind, d_g=4, d_h=4), small_grid, seed=seed)
            assert torch.all(model(b) >= 0)


def test_arlp_ignores_unattended_regions_outside_neighborhood(store, small_grid):
    model = build_model(ModelConfig(kind="arlp", d_g=4, d_h=4), small_grid, seed=0)
    r = small_grid.neighborhood // 2
    for seed in range(50):
        b, _ = _batch(store, n=1, days=1, seed=seed)
        y, mask = model(b, return_masks=True)
        kr, kc = divmod(int(b["target"][0]), small_grid.cols)
        far = [i for i in range(small_grid.n_regions) if mask[0, 0, i] == 0
               and (abs(i // small_grid.cols - kr) > r or abs(i % small_grid.cols - kc) > r)]
        if far:
            break
    assert far, "no window with an unattended region outside the neighborhood"
    b2 = {key: v.clone() for key, v in b.items()}
    b2["gap"][0, 0, far] += 17.0
    torch.testing.assert_close(model(b2), y, rtol=0, atol=0)


def test_advanced_identical_days_duplicate_current_state(store, small_grid):
    model = build_model(ModelConfig(kind="advanced", d_g=4, d_h=4), small_grid, seed=0)
    b, _ = _batch(store, n=2)
    same = {k: (v[:, -1:].expand_as(v).clone() if v.dim() > 1 and k != "y" else v) for k, v in b.items()}
    y = model(same)
    h, _ = model.encode_days(same)
    torch.testing.assert_close(model.head(torch.cat([h[:, -1], h[:, -1]], dim=-1)), y)
    torch.testing.assert_close(model.last_alpha, torch.full((2, 3), 1 / 3, dtype=D64))


def test_advanced_requires_two_days(small_grid):
    with pytest.raises(ContractError):
        build_model(ModelConfig(kind="advanced"), small_grid.with_(history_days=1))


def test_advanced_shares_one_encoder(small_grid):
    model = build_model(ModelConfig(kind="advanced", d_g=4, d_h=4), small_grid)
    lstms = [m for m in model.modules() if isinstance(m, nn.LSTM)]
    assert len(lstms) == 1
    assert model.days == 3
    assert model.head.layers[0].in_features == 8


def test_alpha_sums_to_one_in_forward(store, small_grid):
    model = build_model(ModelConfig(kind="advanced", d_g=4, d_h=4), small_grid, seed=1)
    b, _ = _batch(store, n=32)
    model(b)
    assert model.max_alpha_error <= 1e-9
