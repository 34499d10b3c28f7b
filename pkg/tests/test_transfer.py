import math

import numpy as np
import pytest

from videoadapt.autodiff import Tensor
from videoadapt.encoder import EncoderConfig, EncoderModel
from videoadapt.errors import ConfigError
from videoadapt.gradcheck import relative_error
from videoadapt.transfer import (
    AdaptConfig,
    FeatureQueue,
    PatchDiscriminator,
    build_ib_pairs,
    discriminator_error,
    ib_loss,
    multi_head_transfer_attention,
    transfer_attention_head,
)


class TestDiscriminatorError:
    def test_confident_source_scores_zero(self):
        assert discriminator_error(1.0 - 1e-7, True) == pytest.approx(0.0, abs=1e-6)

    def test_chance_is_ln2_for_both_domains(self):
        assert discriminator_error(0.5, True) == pytest.approx(math.log(2.0), abs=1e-12)
        assert discriminator_error(0.5, False) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_raw_switch_is_exact_negation(self):
        for p in (0.01, 0.3, 0.5, 0.9):
            for src in (True, False):
                assert discriminator_error(p, src, raw=True) == -discriminator_error(p, src)

    def test_clamping_keeps_scores_finite(self):
        assert math.isfinite(discriminator_error(0.0, True))
        assert math.isfinite(discriminator_error(1.0, False))

    def test_score_is_non_negative(self):
        rng = np.random.default_rng(0)
        for p in rng.uniform(0, 1, 50):
            assert discriminator_error(float(p), True) >= 0.0
            assert discriminator_error(float(p), False) >= 0.0


def _head_inputs(rng, n=5, dh=4):
    q = Tensor(rng.standard_normal((n, dh)), requires_grad=True)
    k = Tensor(rng.standard_normal((n, dh)), requires_grad=True)
    v = Tensor(rng.standard_normal((n, dh)), requires_grad=True)
    return q, k, v


class TestTransferAttentionHead:
    def test_matches_brute_force_recomputation(self):
        # Independent re-implementation with plain numpy, outside the engine.
        rng = np.random.default_rng(1)
        disc = PatchDiscriminator(4, rng)
        q, k, v = _head_inputs(rng)
        out, e_q, e_k = transfer_attention_head(q, k, v, True, disc, AdaptConfig())

        def brute_prob(x):
            h = x @ disc.w1.data + disc.b1.data
            from scipy.special import erf, expit

            h = h * 0.5 * (1.0 + erf(h / np.sqrt(2.0)))
            return expit(np.clip(h @ disc.w2.data + disc.b2.data, -30, 30))

        p_q = np.clip(brute_prob(q.data), 1e-7, 1 - 1e-7)
        p_k = np.clip(brute_prob(k.data), 1e-7, 1 - 1e-7)
        eq = -np.log(p_q)
        ek = -np.log(p_k)
        logits = (eq @ ek.T) / math.sqrt(4)
        weights = np.exp(logits - logits.max(axis=1, keepdims=True))
        weights /= weights.sum(axis=1, keepdims=True)
        expected = weights @ v.data
        assert relative_error(out.data, expected) < 1e-12
        assert np.allclose(e_q.data, eq, atol=1e-12)
        assert np.allclose(e_k.data, ek, atol=1e-12)

    def test_single_token_returns_values(self):
        rng = np.random.default_rng(2)
        disc = PatchDiscriminator(4, rng)
        q, k, v = _head_inputs(rng, n=1)
        out, _, _ = transfer_attention_head(q, k, v, False, disc, AdaptConfig())
        assert np.allclose(out.data, v.data, atol=1e-12)

    def test_constant_key_scores_average_values(self):
        # Identical key tokens -> identical e_k -> uniform attention rows.
        rng = np.random.default_rng(3)
        disc = PatchDiscriminator(4, rng)
        q, _, v = _head_inputs(rng)
        k_const = Tensor(np.tile(rng.standard_normal((1, 4)), (5, 1)))
        out, _, _ = transfer_attention_head(q, k_const, v, True, disc, AdaptConfig())
        col_mean = v.data.mean(axis=0)
        for row in out.data:
            assert np.allclose(row, col_mean, atol=1e-9)

    def test_logits_have_rank_one(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            disc = PatchDiscriminator(4, rng)
            q, k, v = _head_inputs(rng)
            _, e_q, e_k = transfer_attention_head(q, k, v, True, disc, AdaptConfig())
            logits = np.outer(e_q.data, e_k.data) / math.sqrt(4)
            s = np.linalg.svd(logits, compute_uv=False)
            assert s[1] / s[0] < 1e-10

    def test_attention_rows_sum_to_one(self):
        rng = np.random.default_rng(5)
        disc = PatchDiscriminator(4, rng)
        q, k, v = _head_inputs(rng)
        _, e_q, e_k = transfer_attention_head(q, k, v, True, disc, AdaptConfig())
        logits = Tensor(np.outer(e_q.data, e_k.data) / math.sqrt(4))
        rows = logits.softmax_rows().data
        assert np.all(np.abs(rows.sum(axis=1) - 1.0) <= 1e-9)

    def test_detached_scores_block_task_gradient(self):
        rng = np.random.default_rng(6)
        disc = PatchDiscriminator(4, rng)
        q, k, v = _head_inputs(rng)
        out, _, _ = transfer_attention_head(q, k, v, True, disc, AdaptConfig())
        out.sum().backward()
        assert q.grad is None  # only the value path feeds the output by default
        assert v.grad is not None


class TestMultiHeadTransferAttention:
    def _setup(self, rng, n_videos=2, k_tok=3, d=8, heads=2):
        x = Tensor(rng.standard_normal((n_videos * k_tok, d)), requires_grad=True)
        w_out = Tensor(np.eye(d), requires_grad=True)
        b_out = Tensor(np.zeros(d), requires_grad=True)
        disc = PatchDiscriminator(d // heads, rng)
        is_source = np.array([True, False][:n_videos])
        return x, w_out, b_out, disc, is_source

    def test_shape_preserved(self):
        rng = np.random.default_rng(7)
        x, w_out, b_out, disc, is_source = self._setup(rng)
        out, patch, scores = multi_head_transfer_attention(
            x, x, x, w_out, b_out, disc, 2, 2, 3, is_source, AdaptConfig()
        )
        assert out.shape == x.shape
        assert scores.shape == (2, 3)

    def test_single_head_reduces_to_head_function(self):
        rng = np.random.default_rng(8)
        d = 4
        x = Tensor(rng.standard_normal((3, d)))
        disc = PatchDiscriminator(d, rng)
        w_out = Tensor(np.eye(d))
        b_out = Tensor(np.zeros(d))
        out_multi, _, _ = multi_head_transfer_attention(
            x, x, x, w_out, b_out, disc, 1, 1, 3, np.array([True]), AdaptConfig()
        )
        out_single, _, _ = transfer_attention_head(x, x, x, True, disc, AdaptConfig())
        assert np.allclose(out_multi.data, out_single.data, atol=1e-12)

    def test_untrained_patch_loss_near_chance(self):
        # sigma=0.02 init keeps probabilities near 0.5, so the BCE sits near ln 2.
        rng = np.random.default_rng(9)
        x, w_out, b_out, disc, is_source = self._setup(rng)
        _, patch, _ = multi_head_transfer_attention(
            x, x, x, w_out, b_out, disc, 2, 2, 3, is_source, AdaptConfig()
        )
        assert patch.item() == pytest.approx(math.log(2.0), rel=0.05)

    def test_grl_sign_flips_encoder_gradient(self):
        # Dual run: reversal on vs off; encoder-side gradients must be exact negatives.
        rng = np.random.default_rng(10)
        x_data = rng.standard_normal((6, 8))
        results = {}
        for weight in (1.0, None):
            x = Tensor(x_data.copy(), requires_grad=True)
            disc_rng = np.random.default_rng(42)
            disc = PatchDiscriminator(4, disc_rng)
            w_out = Tensor(np.eye(8))
            b_out = Tensor(np.zeros(8))
            _, patch, _ = multi_head_transfer_attention(
                x, x, x, w_out, b_out, disc, 2, 2, 3, np.array([True, False]),
                AdaptConfig(grl_weight=weight),
            )
            patch.backward()
            results[weight] = x.grad.copy()
        assert np.array_equal(results[1.0], -results[None])


class TestIbLoss:
    def _rand_pair(self, rng, m=8, d=4):
        return (
            Tensor(rng.standard_normal((m, d)), requires_grad=True),
            Tensor(rng.standard_normal((m, d)), requires_grad=True),
        )

    @staticmethod
    def _oracle(zs, zt, w):
        # Direct dense recomputation with plain numpy.
        zs = zs - zs.mean(axis=0)
        zt = zt - zt.mean(axis=0)
        ns = np.sqrt(np.maximum((zs * zs).sum(axis=0), 1e-8))
        nt = np.sqrt(np.maximum((zt * zt).sum(axis=0), 1e-8))
        corr = (zs / ns).T @ (zt / nt)
        d = corr.shape[0]
        loss = ((1.0 - np.diag(corr)) ** 2).sum()
        off = corr - np.diag(np.diag(corr))
        return loss + w * (off**2).sum()

    def test_matches_dense_recomputation(self):
        rng = np.random.default_rng(11)
        for _ in range(20):
            m = int(rng.integers(2, 17))
            d = int(rng.integers(1, 9))
            zs = Tensor(rng.standard_normal((m, d)))
            zt = Tensor(rng.standard_normal((m, d)))
            w = float(rng.uniform(0, 0.1))
            got = ib_loss(zs, zt, w).item()
            assert abs(got - self._oracle(zs.data, zt.data, w)) < 1e-10

    def test_identical_whitened_features_give_zero(self):
        rng = np.random.default_rng(12)
        raw = rng.standard_normal((16, 4))
        raw -= raw.mean(axis=0)
        # orthogonalize columns -> off-diagonal correlations exactly zero
        q, _ = np.linalg.qr(raw)
        z = Tensor(q)
        assert ib_loss(z, z, 5e-3).item() < 1e-8

    def test_anticorrelated_single_dim(self):
        z = Tensor([[1.0], [-1.0], [0.5], [-0.5]])
        zn = Tensor(-z.data)
        assert ib_loss(z, zn, 0.0).item() == pytest.approx(4.0, abs=1e-12)

    def test_rescaling_both_sides_is_invariant(self):
        rng = np.random.default_rng(13)
        zs = rng.standard_normal((8, 4))
        zt = rng.standard_normal((8, 4))
        scale = rng.uniform(0.5, 3.0, 4)
        base = ib_loss(Tensor(zs), Tensor(zt), 5e-3).item()
        scaled = ib_loss(Tensor(zs * scale), Tensor(zt * scale), 5e-3).item()
        assert abs(base - scaled) < 1e-10

    def test_single_pair_warns_and_skips(self):
        with pytest.warns(UserWarning, match="fewer than two"):
            out = ib_loss(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))), 1.0)
        assert out.item() == 0.0

    def test_zero_variance_dimension_stays_finite(self):
        zs = Tensor(np.zeros((4, 2)))
        zt = Tensor(np.ones((4, 2)))
        assert np.isfinite(ib_loss(zs, zt, 5e-3).item())


class TestFeatureQueue:
    def test_fifo_eviction(self):
        q = FeatureQueue(3)
        for i in range(3):
            q.push(np.full(2, float(i)))
        q.push(np.full(2, 3.0))
        assert len(q) == 3
        assert [v[0] for v in q.snapshot()] == [1.0, 2.0, 3.0]

    def test_push_detaches_by_copy(self):
        q = FeatureQueue(2)
        vec = np.zeros(2)
        q.push(vec)
        vec[:] = 9.0
        assert q.snapshot()[0][0] == 0.0

    def test_capacity_validated(self):
        with pytest.raises(ConfigError):
            FeatureQueue(0)

    def test_sample_is_uniform_over_contents(self):
        q = FeatureQueue(4)
        for i in range(4):
            q.push(np.array([float(i)]))
        rng = np.random.default_rng(0)
        seen = {q.sample(rng)[0] for _ in range(200)}
        assert seen == {0.0, 1.0, 2.0, 3.0}


class TestIbPairing:
    def _rows(self, vals):
        return [Tensor(np.full((1, 2), v)) for v in vals]

    def test_balanced_batch_pairs_everything(self):
        rng = np.random.default_rng(1)
        zs, zt = build_ib_pairs(self._rows([1, 2]), self._rows([3, 4]), None, rng)
        assert zs.shape == (2, 2)
        assert zt.shape == (2, 2)

    def test_extra_targets_draw_from_queue(self):
        rng = np.random.default_rng(2)
        queue = FeatureQueue(4)
        queue.push(np.array([7.0, 7.0]))
        zs, zt = build_ib_pairs(self._rows([1]), self._rows([3, 4, 5]), queue, rng)
        assert zs.shape == (3, 2)
        assert np.any(zs.data == 7.0)

    def test_extra_targets_without_queue_are_dropped(self):
        rng = np.random.default_rng(3)
        zs, zt = build_ib_pairs(self._rows([1]), self._rows([3, 4, 5]), None, rng)
        assert zs.shape == (1, 2)
