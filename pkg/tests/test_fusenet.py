import math

import numpy as np
import pytest
import torch

from seqfuse.fusenet import (
    BackboneSpec, ConfigError, FusionConfig, FusionModel, UsageError, build_model,
    cross_entropy_probs, forward, l2_tie_penalty, load_checkpoint, loss,
    parameter_count, save_checkpoint, tie_penalty, PROB_EPS,
)
from seqfuse.preprocess import SliceSample
from seqfuse.seqdrop import SequencePresence

SMALL = BackboneSpec(base_channels=4, n_stages=2, dilation_rates=(2,), split_stage=2)
CANON = ("BRAVO-post", "CUBE-pre", "CUBE-post", "FLAIR")


def cfg(integration="input", sharing=None, fusion_op=None, pair=None, n_seq=4,
        n_slices=3, backbone=SMALL, tie_lambda=1e-3):
    if fusion_op is None:
        fusion_op = {"input": "concat", "mid": "concat", "end": "mean"}[integration]
    return FusionConfig(integration=integration, sharing=sharing, fusion_op=fusion_op,
                        pair=pair, n_seq=n_seq, n_slices=n_slices, tie_lambda=tie_lambda,
                        backbone=backbone)


def sample_for(config, hw=16, seed=0, lesion=True):
    rng = np.random.default_rng(seed)
    stack = rng.random((config.n_seq * config.n_slices, hw, hw)).astype(np.float32)
    target = np.zeros((hw, hw), bool)
    if lesion:
        target[hw // 2 - 2:hw // 2 + 2, hw // 2 - 2:hw // 2 + 2] = True
    return SliceSample(stack=stack, target=target, patient_id="p", z_index=0,
                       presence=SequencePresence.all_present(config.n_seq),
                       sequence_names=CANON[:config.n_seq], n_slices=config.n_slices)


class TestConfigValidation:
    def test_input_with_sharing_rejected(self):
        with pytest.raises(ConfigError, match="sharing"):
            cfg("input", sharing="shared").validate()

    def test_mid_requires_sharing(self):
        with pytest.raises(ConfigError, match="sharing"):
            cfg("mid", sharing=None).validate()

    def test_subtract_pair_requires_shared_mid(self):
        with pytest.raises(ConfigError, match="shared"):
            cfg("mid", sharing="independent", fusion_op="subtract_pair",
                pair=(1, 2)).validate()
        with pytest.raises(ConfigError, match="shared"):
            cfg("end", sharing="shared", fusion_op="subtract_pair", pair=(1, 2)).validate()

    def test_subtract_pair_requires_pair(self):
        with pytest.raises(ConfigError, match="pair"):
            cfg("mid", sharing="shared", fusion_op="subtract_pair").validate()
        with pytest.raises(ConfigError, match="pair"):
            cfg("mid", sharing="shared", fusion_op="subtract_pair", pair=(2, 2)).validate()

    def test_end_requires_mean(self):
        with pytest.raises(ConfigError, match="mean"):
            cfg("end", sharing="shared", fusion_op="concat").validate()

    def test_split_stage_bounds(self):
        with pytest.raises(ConfigError, match="split_stage"):
            BackboneSpec(n_stages=2, split_stage=3).validate()

    def test_valid_combinations_pass(self):
        cfg("input").validate()
        for sharing in ("shared", "independent", "l2_tied"):
            cfg("mid", sharing=sharing).validate()
            cfg("end", sharing=sharing).validate()
        cfg("mid", sharing="shared", fusion_op="subtract_pair", pair=(1, 2)).validate()

    def test_round_trips_through_dict(self):
        for c in (cfg("input"), cfg("mid", sharing="l2_tied"),
                  cfg("mid", sharing="shared", fusion_op="subtract_pair", pair=(1, 2))):
            assert FusionConfig.from_dict(c.to_dict()) == c


class TestBuildModel:
    def test_input_level_first_layer_channels(self):
        c = FusionConfig(integration="input", n_seq=4, n_slices=5)
        model = build_model(c, seed=0)
        assert model.net.encoder.stem_conv.in_channels == 20

    def test_deterministic_initialization(self):
        a = build_model(cfg("mid", sharing="independent"), seed=3)
        b = build_model(cfg("mid", sharing="independent"), seed=3)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert torch.equal(pa, pb)

    def test_seed_changes_weights(self):
        a = build_model(cfg("input"), seed=0)
        b = build_model(cfg("input"), seed=1)
        assert any(not torch.equal(pa, pb) for pa, pb in zip(a.parameters(), b.parameters()))

    def test_early_param_ratio_independent_vs_shared_is_4_to_1(self):
        ind = build_model(cfg("mid", sharing="independent"), seed=0)
        sh = build_model(cfg("mid", sharing="shared"), seed=0)
        assert (parameter_count(ind.early_parameters())
                == 4 * parameter_count(sh.early_parameters()))

    def test_end_shared_equals_one_single_sequence_network(self):
        sh = build_model(cfg("end", sharing="shared"), seed=0)
        single = build_model(cfg("input", n_seq=1), seed=0)
        assert (parameter_count(sh.parameters())
                == parameter_count(single.parameters()))

    def test_parameter_count_ladder_distinct_storage(self):
        """input < mid <= end in total parameters, per-branch-storage modes."""
        inp = parameter_count(build_model(cfg("input"), seed=0).parameters())
        mid = parameter_count(build_model(cfg("mid", sharing="independent"),
                                          seed=0).parameters())
        end = parameter_count(build_model(cfg("end", sharing="independent"),
                                          seed=0).parameters())
        assert inp < mid <= end

    def test_l2_tied_branches_identically_initialized(self):
        model = build_model(cfg("mid", sharing="l2_tied"), seed=0)
        g0, g1, g2, g3 = model.branch_parameter_groups()
        for a, b in zip(g0, g1):
            assert torch.equal(a, b) and a.data_ptr() != b.data_ptr()

    def test_independent_branches_differ(self):
        model = build_model(cfg("mid", sharing="independent"), seed=0)
        g0, g1 = model.branch_parameter_groups()[:2]
        assert any(not torch.equal(a, b) for a, b in zip(g0, g1))

    def test_shared_branches_same_storage(self):
        model = build_model(cfg("end", sharing="shared"), seed=0)
        with pytest.raises(UsageError):
            model.branch_parameter_groups()

    def test_invalid_config_raises_at_build(self):
        with pytest.raises(ConfigError):
            build_model(FusionConfig(integration="input", sharing="shared"), seed=0)


class TestForward:
    @pytest.mark.parametrize("c", [
        cfg("input"),
        cfg("mid", sharing="shared"),
        cfg("mid", sharing="independent"),
        cfg("mid", sharing="l2_tied"),
        cfg("end", sharing="shared"),
        cfg("end", sharing="independent"),
        cfg("mid", sharing="shared", fusion_op="subtract_pair", pair=(1, 2)),
    ])
    def test_range_contract(self, c):
        model = build_model(c, seed=0)
        p = forward(model, sample_for(c))
        assert p.shape == (2, 16, 16)
        assert np.isfinite(p).all()
        assert p.min() >= 0.0 and p.max() <= 1.0
        np.testing.assert_allclose(p.sum(axis=0), 1.0, atol=1e-5)

    def test_channel_mismatch_rejected(self):
        model = build_model(cfg("input"), seed=0)
        with pytest.raises(ValueError, match="channels"):
            model(torch.zeros(1, 7, 16, 16))

    def test_subtract_pair_identical_inputs_zero_fused(self):
        c = cfg("mid", sharing="shared", fusion_op="subtract_pair", pair=(1, 2))
        model = build_model(c, seed=0).eval()
        s = sample_for(c)
        stack = s.stack.copy()
        stack[1 * c.n_slices:2 * c.n_slices] = stack[2 * c.n_slices:3 * c.n_slices]
        x = torch.from_numpy(stack)[None]
        with torch.no_grad():
            fused = model.fused_features(x)
            assert torch.equal(fused, torch.zeros_like(fused))
            out = model(x)
            zero_resp = torch.softmax(torch.nn.functional.interpolate(
                model.head(torch.zeros_like(fused)), size=(16, 16),
                mode="bilinear", align_corners=False), dim=1)
        assert torch.equal(out, zero_resp)

    def test_subtraction_antisymmetry_exact(self):
        c = cfg("mid", sharing="shared", fusion_op="subtract_pair", pair=(1, 2))
        model = build_model(c, seed=0).eval()
        s = sample_for(c)
        ns = c.n_slices
        swapped = s.stack.copy()
        swapped[1 * ns:2 * ns], swapped[2 * ns:3 * ns] = \
            s.stack[2 * ns:3 * ns].copy(), s.stack[1 * ns:2 * ns].copy()
        with torch.no_grad():
            f1 = model.fused_features(torch.from_numpy(s.stack)[None])
            f2 = model.fused_features(torch.from_numpy(swapped)[None])
        assert torch.equal(f2, -f1)

    def test_end_shared_identical_inputs_equal_single_branch(self):
        c = cfg("end", sharing="shared")
        model = build_model(c, seed=0).eval()
        ns = c.n_slices
        one = np.random.default_rng(0).random((ns, 16, 16)).astype(np.float32)
        stack = np.tile(one, (c.n_seq, 1, 1))
        with torch.no_grad():
            out = model(torch.from_numpy(stack)[None])
            x1 = torch.from_numpy(one)[None]
            branch = torch.softmax(model.branch_net(x1, branch=0), dim=1)
        assert torch.equal(out, branch)

    def test_end_shared_permutation_invariance_exact(self):
        c = cfg("end", sharing="shared")
        model = build_model(c, seed=0).eval()
        s = sample_for(c)
        ns = c.n_slices
        with torch.no_grad():
            base = model(torch.from_numpy(s.stack)[None])
            for perm in [(3, 2, 1, 0), (1, 2, 3, 0), (2, 0, 3, 1)]:
                permuted = np.concatenate([s.stack[i * ns:(i + 1) * ns] for i in perm])
                out = model(torch.from_numpy(permuted)[None])
                assert torch.equal(out, base)

    def test_mid_concat_zeroed_branch_neutrality(self):
        """Zeroing one sequence's channels leaves other branches' features bit-identical."""
        c = cfg("mid", sharing="independent")
        model = build_model(c, seed=0).eval()
        s = sample_for(c)
        zeroed = s.stack.copy()
        zeroed[0:c.n_slices] = 0.0
        with torch.no_grad():
            xa = torch.from_numpy(s.stack)[None]
            xb = torch.from_numpy(zeroed)[None]
            for i in range(1, c.n_seq):
                assert torch.equal(model.branch_features(xa, i),
                                   model.branch_features(xb, i))
            assert not torch.equal(model.branch_features(xa, 0),
                                   model.branch_features(xb, 0))


class TestSharedGradients:
    def test_shared_gradient_equals_sum_of_untied_branch_gradients(self):
        """One shared early stack accumulates the sum of the per-branch gradients
        an identically initialized untied twin would receive."""
        c_sh = cfg("mid", sharing="shared", n_slices=2,
                   backbone=BackboneSpec(base_channels=2, n_stages=1, dilation_rates=(2,),
                                         split_stage=1))
        c_tied = cfg("mid", sharing="l2_tied", n_slices=2, tie_lambda=0.0,
                     backbone=c_sh.backbone)
        shared = build_model(c_sh, seed=0).double().eval()
        tied = build_model(c_tied, seed=1).double().eval()
        # give the tied twin the shared model's exact weights (fresh models share
        # identical zero/one BN statistics already, so parameters suffice)
        ref = dict(shared.early.named_parameters())
        with torch.no_grad():
            for branch in tied.early_branches:
                for name, p in branch.named_parameters():
                    p.copy_(ref[name])
            for name, p in tied.head.named_parameters():
                p.copy_(dict(shared.head.named_parameters())[name])

        s = sample_for(c_sh, hw=8)
        x = torch.from_numpy(s.stack).double()[None]
        target = torch.from_numpy(s.target)

        out_sh = cross_entropy_probs(shared(x), target)
        out_sh.backward()
        out_tied = cross_entropy_probs(tied(x), target)
        out_tied.backward()

        shared_grads = [p.grad for p in shared.early.parameters()]
        branch_grads = [ [p.grad for p in g] for g in tied.branch_parameter_groups()]
        for j, g_shared in enumerate(shared_grads):
            summed = sum(branch_grads[i][j] for i in range(4))
            assert torch.allclose(g_shared, summed, rtol=1e-10, atol=1e-12)


class TestTiePenalty:
    def test_zero_when_branches_equal(self):
        model = build_model(cfg("mid", sharing="l2_tied"), seed=0)
        assert tie_penalty(model).detach().item() == 0.0

    def test_scalar_two_branch_example(self):
        groups = [[torch.tensor(0.0)], [torch.tensor(2.0)]]
        assert float(l2_tie_penalty(groups, 1.0)) == 2.0  # mean 1: (0-1)^2+(2-1)^2

    def test_lambda_scales(self):
        groups = [[torch.tensor(0.0)], [torch.tensor(2.0)]]
        assert float(l2_tie_penalty(groups, 0.5)) == 1.0

    def test_usage_error_on_other_sharings(self):
        with pytest.raises(UsageError):
            tie_penalty(build_model(cfg("mid", sharing="shared"), seed=0))
        with pytest.raises(UsageError):
            tie_penalty(build_model(cfg("input"), seed=0))

    def test_gradient_matches_finite_differences(self):
        model = build_model(cfg("mid", sharing="l2_tied", n_slices=1,
                                backbone=BackboneSpec(base_channels=2, n_stages=1,
                                                      dilation_rates=(2,), split_stage=1)),
                            seed=0).double()
        with torch.no_grad():
            for g in model.branch_parameter_groups():
                for p in g:
                    p.add_(torch.randn_like(p) * 0.1)
        value = tie_penalty(model)
        value.backward()
        params = [p for g in model.branch_parameter_groups() for p in g]
        rng = np.random.default_rng(0)
        checked = 0
        for p in params:
            flat = p.detach().view(-1)
            gflat = p.grad.view(-1)
            for idx in rng.choice(flat.numel(), size=min(3, flat.numel()), replace=False):
                h = 1e-6
                orig = flat[idx].item()
                with torch.no_grad():
                    flat[idx] = orig + h
                    up = float(tie_penalty(model))
                    flat[idx] = orig - h
                    down = float(tie_penalty(model))
                    flat[idx] = orig
                fd = (up - down) / (2 * h)
                if abs(fd) > 1e-12:
                    assert abs(gflat[idx].item() - fd) / abs(fd) < 1e-4
                    checked += 1
        assert checked > 5


class TestLoss:
    def _model_and_sample(self):
        c = cfg("input")
        return build_model(c, seed=0), sample_for(c)

    def test_perfect_prediction_near_zero(self):
        model, s = self._model_and_sample()
        pred = np.zeros((2, 16, 16), dtype=np.float32)
        pred[1][s.target] = 1.0
        pred[0][~s.target] = 1.0
        assert loss(model, s, pred) <= -math.log(1 - PROB_EPS) + 1e-9

    def test_uniform_half_is_ln2(self):
        model, s = self._model_and_sample()
        pred = np.full((2, 16, 16), 0.5, dtype=np.float32)
        assert loss(model, s, pred) == pytest.approx(math.log(2), rel=1e-5)

    def test_tied_loss_is_ce_plus_penalty(self):
        c = cfg("mid", sharing="l2_tied")
        model = build_model(c, seed=0)
        with torch.no_grad():
            for g in model.branch_parameter_groups():
                for p in g:
                    p.add_(torch.randn_like(p) * 0.05)
        s = sample_for(c)
        pred = forward(model, s)
        ce = float(cross_entropy_probs(torch.as_tensor(pred),
                                       torch.from_numpy(s.target)))
        pen = tie_penalty(model).detach().item()
        assert pen > 0
        assert loss(model, s, pred) == pytest.approx(ce + pen, rel=1e-6)

    def test_shape_mismatch_rejected(self):
        model, s = self._model_and_sample()
        with pytest.raises(ValueError, match="match"):
            loss(model, s, np.zeros((2, 8, 8)))


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        c = cfg("mid", sharing="l2_tied")
        model = build_model(c, seed=0)
        s = sample_for(c)
        before = forward(model, s)
        path = save_checkpoint(model, tmp_path / "m.pt")
        loaded = load_checkpoint(path, expected_config=c)
        np.testing.assert_array_equal(forward(loaded, s), before)

    def test_config_mismatch_rejected(self, tmp_path):
        model = build_model(cfg("input"), seed=0)
        path = save_checkpoint(model, tmp_path / "m.pt")
        with pytest.raises(ConfigError):
            load_checkpoint(path, expected_config=cfg("mid", sharing="shared"))
