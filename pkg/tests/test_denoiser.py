import mpmath as mp
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cqdiff.denoiser import (
    N_CONDITION_FEATURES,
    Denoiser,
    DenoiserConfig,
    NormStats,
    attention,
    backward,
    condition_features,
    denoise,
    layer_norm,
    sinusoidal_encoding,
    softmax_rows,
)
from cqdiff.diffusion import eps_loss, make_schedule
from cqdiff.scenario import ConditionSeries

TINY = DenoiserConfig(d_model=8, n_heads=2, n_layers=2, ff_mult=2, step_embed_dim=8, dropout=0.0)


def _inputs(b=3, length=4, seed=0, dtype=torch.float64):
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(b, length, 2, generator=g, dtype=dtype)
    cond = torch.randn(b, length, N_CONDITION_FEATURES, generator=g, dtype=dtype)
    t = torch.randint(1, 51, (b,), generator=g)
    return x, t, cond


def _model(cfg=TINY, seed=0, dtype=torch.float64):
    torch.manual_seed(seed)
    return Denoiser(cfg).to(dtype).eval()


class TestAttention:
    def test_single_token_returns_value(self):
        q, k, v = torch.randn(1, 3), torch.randn(1, 3), torch.randn(1, 5)
        assert torch.equal(attention(q, k, v), v)

    def test_identical_keys_average_values(self):
        q = torch.randn(4, 3, dtype=torch.float64)
        k = torch.ones(6, 3, dtype=torch.float64) * 0.7
        v = torch.randn(6, 2, dtype=torch.float64)
        out = attention(q, k, v)
        torch.testing.assert_close(out, v.mean(0).expand(4, 2), rtol=1e-14, atol=1e-14)

    def test_against_extended_precision(self):
        rng = np.random.default_rng(0)
        q, k, v = rng.standard_normal((3, 4)), rng.standard_normal((3, 4)), rng.standard_normal((3, 2))
        mp.mp.dps = 50
        ref = np.zeros((3, 2))
        for i in range(3):
            s = [mp.fsum(mp.mpf(q[i, a]) * mp.mpf(k[j, a]) for a in range(4)) / mp.sqrt(4) for j in range(3)]
            w = [mp.exp(x) for x in s]
            z = mp.fsum(w)
            for c in range(2):
                ref[i, c] = float(mp.fsum(w[j] / z * mp.mpf(v[j, c]) for j in range(3)))
        out = attention(torch.from_numpy(q), torch.from_numpy(k), torch.from_numpy(v)).numpy()
        assert np.max(np.abs(out - ref) / np.abs(ref)) <= 1e-10

    def test_zero_key_dim(self):
        with pytest.raises(ValueError):
            attention(torch.zeros(2, 0), torch.zeros(2, 0), torch.zeros(2, 3))

    def test_softmax_rows_sum_to_one_and_survive_large_scores(self):
        scores = torch.randn(50, 7, dtype=torch.float64) * 300
        p = softmax_rows(scores)
        assert torch.isfinite(p).all()
        assert torch.max(torch.abs(p.sum(-1) - 1)) <= 1e-12

    def test_value_gradient_uniform_when_softmax_uniform(self):
        q = torch.randn(3, 2, dtype=torch.float64)
        k = torch.zeros(4, 2, dtype=torch.float64)
        v = torch.randn(4, 5, dtype=torch.float64, requires_grad=True)
        (g,) = torch.autograd.grad(attention(q, k, v).sum(), v)
        torch.testing.assert_close(g, torch.full_like(v, 3 / 4))


class TestLayerNorm:
    def test_standardizes(self):
        x = torch.randn(200, 64, dtype=torch.float64) * 3 + 5
        y = layer_norm(x)
        assert y.mean(-1).abs().max() <= 1e-10
        assert (y.std(-1, unbiased=False) - 1).abs().max() <= 1e-6


class TestEmbeddings:
    def test_bounded_and_distinct(self):
        enc = sinusoidal_encoding(torch.arange(1, 51), 128)
        assert enc.abs().max() <= 1.0
        assert len({tuple(row.tolist()) for row in enc}) == 50

    def test_step_embedding_deterministic(self):
        m = _model()
        t = torch.tensor([1, 7, 50])
        assert torch.equal(m.step_embedding(t), m.step_embedding(t))

    def test_condition_features(self):
        c = ConditionSeries([100.0, 1000.0], [30.0, 30.0], [700e6, 2.6e9], [43.0, 40.0], "suburb")
        norm = NormStats([0, 0], [1, 1], [2.0, 30.0, 9.0, 40.0], [1.0, 5.0, 0.5, 2.0])
        feats = condition_features(c, norm)
        assert feats.shape == (2, 7)
        np.testing.assert_allclose(feats[:, 0], [0.0, 1.0])
        np.testing.assert_allclose(feats[:, 2], (np.log10([700e6, 2.6e9]) - 9.0) / 0.5)
        np.testing.assert_array_equal(feats[:, 4:], [[0, 1, 0], [0, 1, 0]])


class TestDenoiser:
    def test_output_shape(self):
        m = _model(DenoiserConfig(d_model=16, n_heads=4, dropout=0.0))
        x, t, c = _inputs(b=5, length=24)
        assert m(x, t, c).shape == (5, 24, 2)

    def test_scalar_step_broadcasts(self):
        m = _model()
        x, _, c = _inputs()
        torch.testing.assert_close(m(x, 7, c), m(x, torch.full((3,), 7), c))

    def test_deterministic(self):
        m = _model()
        x, t, c = _inputs()
        assert torch.equal(m(x, t, c), m(x, t, c))

    def test_channel_permutation_symmetry(self):
        m = _model()
        x, t, c = _inputs()
        y = m(x, t, c)
        with torch.no_grad():
            m.attribute_embedding.copy_(m.attribute_embedding.flip(0))
        torch.testing.assert_close(m(x.flip(-1), t, c), y.flip(-1), rtol=1e-12, atol=1e-12)

    def test_time_equivariance_without_positional_encoding(self):
        m = _model()
        x, t, c = _inputs(length=6)
        perm = torch.tensor([3, 0, 5, 1, 4, 2])
        m.use_positional = False
        torch.testing.assert_close(m(x[:, perm], t, c[:, perm]), m(x, t, c)[:, perm], rtol=1e-12, atol=1e-12)
        m.use_positional = True
        assert not torch.allclose(m(x[:, perm], t, c[:, perm]), m(x, t, c)[:, perm])

    def test_shape_and_finiteness_errors(self):
        m = _model()
        x, t, c = _inputs()
        with pytest.raises(ValueError):
            m(x[..., :1], t, c)
        with pytest.raises(ValueError):
            m(x, t, c[..., :5])
        bad = x.clone()
        bad[0, 0, 0] = float("nan")
        with pytest.raises(ValueError):
            m(bad, t, c)

    def test_dims_validated(self):
        with pytest.raises(ValueError):
            DenoiserConfig(d_model=10, n_heads=4)

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 4.0))
    def test_no_nan_in_normalized_range(self, seed, scale):
        m = _model(DenoiserConfig(d_model=16, n_heads=2, dropout=0.0))
        x, t, c = _inputs(b=2, length=12, seed=seed)
        assert torch.isfinite(m(x * scale, t, c * scale)).all()

    def test_single_series_wrapper(self):
        cfg = DenoiserConfig(d_model=16, n_heads=2, dropout=0.0)
        torch.manual_seed(0)
        m = Denoiser(cfg, NormStats([0, 0], [1, 1], [2.0, 30.0, 9.0, 40.0], [1.0, 5.0, 0.5, 2.0])).eval()
        cond = ConditionSeries([120.0] * 5, [30.0] * 5, [2.6e9] * 5, [43.0] * 5, "urban")
        out = denoise(np.zeros((5, 2)), 3, cond, m)
        assert out.shape == (5, 2) and out.dtype == np.float64


class TestGradients:
    def test_quadratic(self):
        theta = torch.nn.Linear(3, 2).double()
        loss = sum((p**2).sum() for p in theta.parameters())
        grads = backward(loss, theta)
        for name, p in theta.named_parameters():
            torch.testing.assert_close(grads[name], 2 * p.detach())

    def test_unrecorded_parameter(self):
        lin = torch.nn.Linear(3, 2)
        loss = (lin.weight**2).sum()
        with pytest.raises(ValueError, match="bias"):
            backward(loss, lin)

    def test_full_denoiser_matches_finite_differences(self):
        m = _model()
        sched = make_schedule()
        x0, t, cond = _inputs(b=3, length=4, seed=1)
        eps = torch.randn(x0.shape, generator=torch.Generator().manual_seed(2), dtype=torch.float64)
        model_fn = lambda x, tt, c: m(x, tt, c)

        def loss_fn():
            return eps_loss(x0, cond, model_fn, t, eps, sched)

        grads = backward(loss_fn(), m)
        h = 1e-4
        worst = 0.0
        with torch.no_grad():
            for name, p in m.named_parameters():
                flat = p.view(-1)
                g = grads[name].view(-1)
                for i in range(flat.numel()):
                    orig = flat[i].item()
                    flat[i] = orig + h
                    up = loss_fn().item()
                    flat[i] = orig - h
                    down = loss_fn().item()
                    flat[i] = orig
                    num = (up - down) / (2 * h)
                    ana = g[i].item()
                    # key biases have exactly zero gradient (softmax shift invariance);
                    # the floor keeps round-off in the loss from dominating there
                    denom = max(abs(num), abs(ana), 1e-6)
                    worst = max(worst, abs(num - ana) / denom)
        assert worst <= 1e-4
