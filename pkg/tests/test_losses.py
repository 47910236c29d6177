import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hitdvae.data import Skeleton
from hitdvae.losses import (LossBreakdown, LossError, LossWeights, MultiModalSet,
                            angle_loss, diversity_loss, kl_diag, kl_w, kl_z,
                            limb_loss, nf_loss, recon_losses, select_multimodal,
                            total_loss)
from hitdvae.model import DiagGaussian
from hitdvae.nn import CouplingFlow, ShapeError
from hitdvae.tensor import Tensor


def gauss(mean, logvar):
    return DiagGaussian(Tensor(np.asarray(mean, dtype=float)),
                        Tensor(np.asarray(logvar, dtype=float)))


@pytest.fixture
def skeleton():
    return Skeleton.default9()


class TestReconLosses:
    def test_exact_sample_zero(self):
        rng = np.random.default_rng(0)
        gt = rng.standard_normal((3, 2, 3))
        samples = [Tensor(rng.standard_normal((3, 2, 3))), Tensor(gt.copy())]
        l_r, _ = recon_losses(samples, gt)
        assert l_r.item() == 0.0

    def test_single_pseudo_gt_equal_to_gt(self):
        rng = np.random.default_rng(1)
        gt = rng.standard_normal((3, 2, 3))
        samples = [Tensor(rng.standard_normal((3, 2, 3))) for _ in range(3)]
        l_r, l_mm = recon_losses(samples, gt, MultiModalSet(gt[None]))
        assert l_r.item() == l_mm.item()

    def test_matches_exhaustive_loop_oracle(self):
        rng = np.random.default_rng(2)
        gt = rng.standard_normal((2, 2, 3))
        mm = rng.standard_normal((3, 2, 2, 3))
        samples = [Tensor(rng.standard_normal((2, 2, 3))) for _ in range(3)]
        l_r, l_mm = recon_losses(samples, gt, MultiModalSet(mm))

        def msq(a, b):
            return float(np.mean((a - b) ** 2))

        oracle_r = min(msq(s.data, gt) for s in samples)
        oracle_mm = np.mean([min(msq(s.data, mm[m]) for s in samples)
                             for m in range(3)])
        assert abs(l_r.item() - oracle_r) < 1e-15
        assert abs(l_mm.item() - oracle_mm) < 1e-15

    def test_empty_samples_rejected(self):
        with pytest.raises(LossError, match="at least one"):
            recon_losses([], np.zeros((2, 2, 3)))

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ShapeError):
            recon_losses([Tensor(np.zeros((2, 2, 3)))], np.zeros((3, 2, 3)))

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 2 ** 31 - 1))
    def test_permutation_invariance(self, seed):
        rng = np.random.default_rng(seed)
        gt = rng.standard_normal((2, 2, 3))
        mm = rng.standard_normal((2, 2, 2, 3))
        arrs = [rng.standard_normal((2, 2, 3)) for _ in range(4)]
        perm = rng.permutation(4)
        a = recon_losses([Tensor(x) for x in arrs], gt, MultiModalSet(mm))
        b = recon_losses([Tensor(arrs[i]) for i in perm], gt,
                         MultiModalSet(mm[::-1].copy()))
        assert a[0].item() == b[0].item()
        assert abs(a[1].item() - b[1].item()) < 1e-15


class TestKl:
    def test_identical_zero(self):
        q = gauss([0.3, -0.2], [0.1, 0.4])
        p = gauss([0.3, -0.2], [0.1, 0.4])
        assert kl_z(q, p).item() == 0.0

    def test_unit_shift_anchor(self):
        q = gauss([[1.0]], [[0.0]])
        p = gauss([[0.0]], [[0.0]])
        assert abs(kl_z(q, p).item() - 0.5) < 1e-12

    def test_kl_w_zero(self):
        assert kl_w(gauss(np.zeros(32), np.zeros(32))).item() == 0.0

    def test_kl_w_unit_shift_anchor(self):
        mu = np.zeros(32)
        mu[0] = 1.0
        assert abs(kl_w(gauss(mu, np.zeros(32))).item() - 0.5) < 1e-12

    def test_width_mismatch(self):
        with pytest.raises(ShapeError):
            kl_diag(gauss([0.0], [0.0]), gauss([0.0, 0.0], [0.0, 0.0]))

    def test_monte_carlo_oracle(self):
        rng = np.random.default_rng(7)
        mu_q, lv_q = rng.standard_normal(2), 0.5 * rng.standard_normal(2)
        mu_p, lv_p = rng.standard_normal(2), 0.5 * rng.standard_normal(2)
        closed = kl_diag(gauss(mu_q, lv_q), gauss(mu_p, lv_p)).item()
        n = 10 ** 6
        x = mu_q + np.exp(0.5 * lv_q) * rng.standard_normal((n, 2))

        def logpdf(x, mu, lv):
            return (-0.5 * (math.log(2 * math.pi) + lv + (x - mu) ** 2 / np.exp(lv))).sum(axis=1)

        mc = float(np.mean(logpdf(x, mu_q, lv_q) - logpdf(x, mu_p, lv_p)))
        assert abs(closed - mc) / abs(closed) < 0.01

    def test_kl_w_monte_carlo(self):
        rng = np.random.default_rng(8)
        mu, lv = rng.standard_normal(2), 0.4 * rng.standard_normal(2)
        closed = kl_w(gauss(mu, lv)).item()
        n = 10 ** 6
        x = mu + np.exp(0.5 * lv) * rng.standard_normal((n, 2))
        logq = (-0.5 * (math.log(2 * math.pi) + lv + (x - mu) ** 2 / np.exp(lv))).sum(axis=1)
        logp = (-0.5 * (math.log(2 * math.pi) + x ** 2)).sum(axis=1)
        mc = float(np.mean(logq - logp))
        assert abs(closed - mc) / abs(closed) < 0.01

    def test_non_negative(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            q = gauss(rng.standard_normal(3), rng.standard_normal(3))
            p = gauss(rng.standard_normal(3), rng.standard_normal(3))
            assert kl_diag(q, p).item() >= 0.0


class TestDiversity:
    def test_identical_samples_hit_ceiling(self, skeleton):
        w = LossWeights.humaneva()
        x = np.random.default_rng(0).standard_normal((4, 9, 3))
        samples = [Tensor(x.copy()) for _ in range(3)]
        div, dl, du = diversity_loss(samples, skeleton, w)
        assert abs(div.item() - (w.div_lower + w.div_upper)) < 1e-12
        assert abs(dl - w.div_lower) < 1e-12 and abs(du - w.div_upper) < 1e-12

    def test_far_apart_vanishes(self, skeleton):
        w = LossWeights.humaneva()
        a = np.zeros((2, 9, 3))
        b = np.full((2, 9, 3), 1e6)
        b[:, 0, :] = 0.0
        div, _, _ = diversity_loss([Tensor(a), Tensor(b)], skeleton, w)
        assert div.item() < 1e-300

    def test_matches_pairwise_loop_oracle(self, skeleton):
        rng = np.random.default_rng(3)
        w = LossWeights.humaneva()
        samples = [rng.standard_normal((2, 9, 3)) for _ in range(3)]
        div, _, _ = diversity_loss([Tensor(s) for s in samples], skeleton, w)
        oracle = 0.0
        for part, lam, alpha in (("lower", w.div_lower, w.alpha_lower),
                                 ("upper", w.div_upper, w.alpha_upper)):
            idx = skeleton.lower_body if part == "lower" else skeleton.upper_body
            acc = 0.0
            for i in range(3):
                for j in range(i + 1, 3):
                    d = np.abs(samples[i][:, idx, :] - samples[j][:, idx, :]).sum()
                    acc += math.exp(-d / alpha)
            oracle += lam * (2.0 / (3 * 2)) * acc
        assert abs(div.item() - oracle) < 1e-15

    def test_k_below_two_rejected(self, skeleton):
        with pytest.raises(LossError, match="K >= 2"):
            diversity_loss([Tensor(np.zeros((2, 9, 3)))], skeleton,
                           LossWeights.humaneva())

    def test_strictly_decreases_as_pair_separates(self, skeleton):
        w = LossWeights.humaneva()
        rng = np.random.default_rng(4)
        a = rng.standard_normal((2, 9, 3))
        prev = None
        for scale in (0.0, 0.5, 1.0, 2.0):
            b = a + scale * 0.1
            val = diversity_loss([Tensor(a), Tensor(b)], skeleton, w)[0].item()
            if prev is not None:
                assert val < prev
            prev = val


class TestLimbLoss:
    def test_reference_lengths_zero(self, skeleton):
        from hitdvae.data import synth_corpus
        corpus = synth_corpus(["walk", "wave"], 2, 10, seed=1)
        val = limb_loss(Tensor(corpus.clips[0].poses.data), corpus.skeleton).item()
        assert val < 1e-12

    def test_uniform_scaling_anchor(self, skeleton):
        from hitdvae.data import synth_corpus
        corpus = synth_corpus(["walk", "wave"], 1, 5, seed=2)
        poses = corpus.clips[0].poses.data * 2.0
        val = limb_loss(Tensor(poses), corpus.skeleton).item()
        expect = np.mean(np.asarray(corpus.skeleton.lengths) ** 2)
        assert abs(val - expect) < 1e-9

    def test_matches_per_edge_loop_oracle(self, skeleton):
        rng = np.random.default_rng(5)
        poses = rng.standard_normal((3, 9, 3))
        poses[:, 0, :] = 0.0
        val = limb_loss(Tensor(poses), skeleton).item()
        devs = []
        for (p, c), ref in zip(skeleton.edges, skeleton.lengths):
            for t in range(3):
                devs.append((np.linalg.norm(poses[t, c] - poses[t, p]) - ref) ** 2)
        assert abs(val - np.mean(devs)) < 1e-12


class TestAngleLoss:
    def test_all_inside_zero(self):
        from hitdvae.data import synth_corpus
        corpus = synth_corpus(["walk", "squat"], 3, 12, seed=3)
        for clip in corpus.clips:
            assert angle_loss(Tensor(clip.poses.data), corpus.skeleton).item() == 0.0

    def test_tenth_radian_violation(self):
        skel = Skeleton.minimal3()  # single hinge with limits (1.2, 1.9)
        alpha = 2.0  # exceeds the upper limit by 0.1
        pose = np.zeros((1, 3, 3))
        pose[0, 1] = [0.0, 1.0, 0.0]
        pose[0, 2] = pose[0, 1] + np.array([math.sin(alpha), -math.cos(alpha), 0.0])
        val = angle_loss(Tensor(pose), skel).item()
        assert abs(val - 0.01) < 1e-9

    def test_matches_arccos_oracle(self):
        skel = Skeleton.default9()
        rng = np.random.default_rng(6)
        poses = rng.standard_normal((4, 9, 3))
        poses[:, 0, :] = 0.0
        val = angle_loss(Tensor(poses), skel).item()
        oracle = 0.0
        for (p, j, c), (lo, hi) in zip(skel.hinges, skel.hinge_limits):
            for t in range(4):
                u = poses[t, p] - poses[t, j]
                v = poses[t, c] - poses[t, j]
                cos = np.dot(u, v) / (np.linalg.norm(u) * np.linalg.norm(v))
                ang = math.acos(np.clip(cos, -1.0, 1.0))
                oracle += max(ang - hi, 0.0) ** 2 + max(lo - ang, 0.0) ** 2
        assert abs(val - oracle) < 1e-10

    def test_degenerate_hinge_skipped_and_flagged(self, caplog):
        skel = Skeleton.minimal3()
        pose = np.zeros((1, 3, 3))  # joint 1 sits on the root: zero-length limb
        pose[0, 2] = [1.0, 0.0, 0.0]
        with caplog.at_level(logging.WARNING, logger="hitdvae.losses"):
            val = angle_loss(Tensor(pose), skel).item()
        assert val == 0.0
        assert "skipped degenerate hinges" in caplog.text


class TestNfLoss:
    def test_identity_flow_origin_near_clamp_floor(self):
        flow = CouplingFlow(6, np.random.default_rng(1))
        flow.calibration = 3.0 * math.log(2 * math.pi)  # -log p at the mode
        x = Tensor(np.zeros((4, 2, 3)))
        assert nf_loss(x, flow).item() == 0.0

    def test_below_calibration_clamped_to_zero(self):
        flow = CouplingFlow(6, np.random.default_rng(2))
        flow.calibration = 100.0
        x = Tensor(np.random.default_rng(3).standard_normal((3, 2, 3)))
        assert nf_loss(x, flow).item() == 0.0

    def test_grows_beyond_calibration(self):
        flow = CouplingFlow(6, np.random.default_rng(4))
        flow.calibration = 3.0 * math.log(2 * math.pi)
        far = Tensor(np.full((2, 2, 3), 5.0))
        assert nf_loss(far, flow).item() > 1.0

    def test_non_finite_rejected(self):
        flow = CouplingFlow(6, np.random.default_rng(5))
        with pytest.raises(FloatingPointError):
            flow.log_prob(Tensor(np.full((1, 6), 1e308)))


class TestTotalLoss:
    @staticmethod
    def call(r, mm, klf, kls, div, dl, du, limb, ang, nf, weights, anneal):
        return total_loss(Tensor(float(r)), Tensor(float(mm)), Tensor(float(klf)),
                          Tensor(float(kls)), Tensor(float(div)), dl, du,
                          Tensor(float(limb)), Tensor(float(ang)),
                          Tensor(float(nf)), weights, anneal)

    def test_all_zero(self):
        total, b = self.call(0, 0, 0, 0, 0, 0.0, 0.0, 0, 0, 0,
                             LossWeights.humaneva(), 1.0)
        assert total.item() == 0.0
        assert b.total == 0.0

    def test_anneal_zero_drops_kl(self):
        w = LossWeights.humaneva()
        total, b = self.call(0, 0, 5, 7, 0, 0.0, 0.0, 0, 0, 0, w, 0.0)
        assert total.item() == 0.0
        assert b.kl_frame == 0.0 and b.kl_seq == 0.0

    def test_humaneva_unit_terms_anchor(self):
        w = LossWeights.humaneva()
        # diversity with unit pair terms contributes its own weights
        div = w.div_lower + w.div_upper
        total, b = self.call(1, 1, 1, 1, div, w.div_lower, w.div_upper, 1, 1, 1,
                             w, 1.0)
        assert abs(total.item() - 116.901) < 1e-9
        assert abs(b.total - 116.901) < 1e-9

    def test_nan_rejected_with_term_name(self):
        w = LossWeights.humaneva()
        with pytest.raises(LossError, match="multimodal"):
            self.call(0, float("nan"), 0, 0, 0, 0.0, 0.0, 0, 0, 0, w, 1.0)

    def test_bad_anneal_rejected(self):
        with pytest.raises(LossError, match="anneal"):
            self.call(0, 0, 0, 0, 0, 0.0, 0.0, 0, 0, 0, LossWeights.humaneva(), 1.5)

    def test_breakdown_total_is_weighted_sum(self):
        rng = np.random.default_rng(11)
        w = LossWeights.humaneva()
        vals = rng.random(8)
        div_combined = w.div_lower * 0.5 + w.div_upper * 0.25
        total, b = self.call(vals[0], vals[1], vals[2], vals[3], div_combined,
                             w.div_lower * 0.5, w.div_upper * 0.25,
                             vals[4], vals[5], vals[6], w, 0.7)
        manual = (b.recon + b.multimodal + b.kl_frame + b.kl_seq + b.div
                  + b.limb + b.angle + b.flow_prior)
        assert abs(b.total - manual) < 1e-12
        assert abs(total.item() - manual) < 1e-12


class TestWeightsAndSelection:
    def test_negative_weight_rejected(self):
        with pytest.raises(LossError, match="recon"):
            LossWeights(recon=-1, multimodal=0, kl_frame=0, kl_seq=0, div_lower=0,
                        div_upper=0, limb=0, angle=0, flow_prior=0,
                        alpha_lower=1, alpha_upper=1)

    def test_weights_dict_round_trip(self):
        w = LossWeights.h36m()
        assert LossWeights.from_dict(w.to_dict()) == w

    def test_select_multimodal_threshold_and_fallback(self):
        rng = np.random.default_rng(12)
        target = rng.standard_normal((4, 3, 3))
        pool = np.stack([target + 1000.0, target + 0.001 * rng.standard_normal((4, 3, 3)),
                         target.copy()])
        mm = select_multimodal(pool, target, obs_len=2, mean_limb=1.0, threshold=0.1)
        assert len(mm) == 2  # the two near ones
        far_pool = np.stack([target + 1000.0, target + 2000.0])
        mm2 = select_multimodal(far_pool, target, obs_len=2, mean_limb=1.0, threshold=0.1)
        assert len(mm2) == 1  # nearest-neighbor fallback

    def test_csv_row_format(self):
        b = LossBreakdown(recon=1, multimodal=2, kl_frame=3, kl_seq=4, div_lower=5,
                          div_upper=6, limb=7, angle=8, flow_prior=9, total=45)
        header = LossBreakdown.csv_header()
        row = b.csv_row(epoch=2, step=17)
        assert header.split(",")[:2] == ["epoch", "step"]
        assert len(header.split(",")) == len(row.split(",")) == 12
        assert row.startswith("2,17,")
