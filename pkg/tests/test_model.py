"""Tests for model: wiring, weight sharing, parameter audit and identity inference."""

import logging
import random

import numpy as np
import pytest

from bdrrn.errors import ConfigError, ShapeError
from bdrrn.model import (
    RECON_LR_SCALE,
    Fusion,
    Model,
    ModelConfig,
    Variant,
    build_model,
    forward,
    param_count,
    param_table,
)
from bdrrn.partition import random_quadtree
from bdrrn.tensor import Mode, RunningStats, Tensor
from bdrrn.training import enhance_plane

from .helpers import random_plane, ready_model


class TestParamCount:
    def test_published_defaults(self) -> None:
        assert param_count(build_model(ModelConfig(variant=Variant.DRRN), 0)) == 75075
        assert param_count(build_model(ModelConfig(variant=Variant.BDRRN, fusion=Fusion.ADD), 0)) == 75075
        assert param_count(build_model(ModelConfig(variant=Variant.BDRRN, fusion=Fusion.CONCAT), 0)) == 148867

    def test_additive_fusion_never_adds_parameters(self) -> None:
        picker = random.Random(0)
        for _ in range(10):
            channels = picker.randint(2, 64)
            iters = dict(main_iters=picker.randint(1, 12), extra_iters=picker.randint(1, 6), merge_iters=picker.randint(1, 4))
            drrn = build_model(ModelConfig(variant=Variant.DRRN, channels=channels, **iters), 0)
            bdrrn = build_model(ModelConfig(variant=Variant.BDRRN, fusion=Fusion.ADD, channels=channels, **iters), 0)
            assert param_count(bdrrn) == param_count(drrn)
            assert set(bdrrn.params) == set(drrn.params)

    def test_table_is_sorted_with_recon_scale(self) -> None:
        table = param_table(build_model(ModelConfig(channels=4), 0))
        names = [row[0] for row in table]
        assert names == sorted(names)
        scales = {name: scale for name, _, _, scale in table}
        assert scales["recon.w"] == RECON_LR_SCALE
        assert scales["rru.c1.w"] == 1.0
        assert sum(row[2] for row in table) == param_count(build_model(ModelConfig(channels=4), 0))


class TestBuildModel:
    def test_same_seed_same_weights(self) -> None:
        a = build_model(ModelConfig(channels=4), 3)
        b = build_model(ModelConfig(channels=4), 3)
        for name in a.params:
            assert np.array_equal(a[name].data, b[name].data)

    def test_fusion_layer_does_not_shift_other_weights(self) -> None:
        add = build_model(ModelConfig(channels=4, fusion=Fusion.ADD), 5)
        concat = build_model(ModelConfig(channels=4, fusion=Fusion.CONCAT), 5)
        for name in add.params:
            assert np.array_equal(add[name].data, concat[name].data)
        assert concat["fuse.w"].shape == (4, 8, 3, 3)

    def test_initial_values(self) -> None:
        m = build_model(ModelConfig(channels=4, recon_init_scale=0.0), 0)
        assert m["bn.gamma"].data.tolist() == [1.0]
        assert m["bn.beta"].data.tolist() == [0.0]
        assert not m["conv_in.b"].data.any()
        assert not m["recon.w"].data.any()
        assert m["rru.c1.w"].data.std() > 0

    def test_warns_on_unusual_branch_depth(self, caplog: pytest.LogCaptureFixture) -> None:
        with caplog.at_level(logging.WARNING):
            build_model(ModelConfig(channels=2, main_iters=4, extra_iters=3), 0)
        assert "1/3" in caplog.text

    def test_invalid_config(self) -> None:
        with pytest.raises(ConfigError):
            build_model(ModelConfig(channels=0), 0)


class TestModelConfig:
    def test_dict_roundtrip(self) -> None:
        cfg = ModelConfig(variant=Variant.DRRN, channels=8, main_iters=6, extra_iters=2, merge_iters=1)
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg

    def test_defaults_on_missing_keys(self) -> None:
        assert ModelConfig.from_dict({}) == ModelConfig()

    def test_unknown_variant(self) -> None:
        with pytest.raises(ConfigError):
            ModelConfig.from_dict({"variant": "vdsr"})


# ---------------------------------------------------------------------- #
# Forward pass                                                             #
# ---------------------------------------------------------------------- #

class TestForward:
    def _inputs(self, h: int = 8, w: int = 8) -> tuple[Tensor, Tensor]:
        rng = np.random.default_rng(0)
        return Tensor(rng.uniform(size=(2, 1, h, w))), Tensor(rng.uniform(size=(2, 1, h, w)))

    def test_output_shape_and_taps(self) -> None:
        m = build_model(ModelConfig(channels=3), 0)
        decoded, mask = self._inputs()
        taps: dict[str, Tensor] = {}
        out = forward(m, decoded, mask, Mode.TRAIN, taps)
        assert out.shape == decoded.shape
        assert set(taps) == {"main", "extra", "fused", "merge"}
        assert taps["main"].shape == (2, 3, 8, 8)

    def test_additive_fusion_is_sum_of_branches(self) -> None:
        m = build_model(ModelConfig(channels=3), 0)
        decoded, mask = self._inputs()
        taps: dict[str, Tensor] = {}
        forward(m, decoded, mask, Mode.TRAIN, taps)
        np.testing.assert_array_equal(taps["fused"].data, taps["main"].data + taps["extra"].data)

    def test_mask_required_for_bdrrn(self) -> None:
        decoded, _ = self._inputs()
        with pytest.raises(ConfigError):
            forward(build_model(ModelConfig(channels=2), 0), decoded, None, Mode.TRAIN)

    def test_mask_refused_for_drrn(self) -> None:
        decoded, mask = self._inputs()
        with pytest.raises(ConfigError):
            forward(build_model(ModelConfig(variant=Variant.DRRN, channels=2), 0), decoded, mask, Mode.TRAIN)

    def test_mask_shape_checked(self) -> None:
        decoded, _ = self._inputs()
        with pytest.raises(ShapeError):
            forward(build_model(ModelConfig(channels=2), 0), decoded, Tensor(np.zeros((2, 1, 4, 4))), Mode.TRAIN)

    def test_train_updates_both_streams_eval_leaves_them(self) -> None:
        m = build_model(ModelConfig(channels=2), 0)
        decoded, mask = self._inputs()
        forward(m, decoded, mask, Mode.TRAIN)
        assert m.bn_stats["decoded"].ready and m.bn_stats["mask"].ready
        snapshot = [(s.mean, s.var) for s in m.bn_stats.values()]
        forward(m, decoded, mask, Mode.EVAL)
        assert [(s.mean, s.var) for s in m.bn_stats.values()] == snapshot

    def test_drrn_touches_only_decoded_stream(self) -> None:
        m = build_model(ModelConfig(variant=Variant.DRRN, channels=2), 0)
        decoded, _ = self._inputs()
        forward(m, decoded, None, Mode.TRAIN)
        assert m.bn_stats["decoded"].ready
        assert not m.bn_stats["mask"].ready


class TestIdentityNetwork:
    @pytest.mark.parametrize("variant,fusion", [(Variant.DRRN, Fusion.ADD), (Variant.BDRRN, Fusion.ADD), (Variant.BDRRN, Fusion.CONCAT)])
    @pytest.mark.parametrize("width,height", [(64, 64), (37, 91), (1920, 1080)])
    def test_zero_recon_reproduces_input(self, variant: Variant, fusion: Fusion, width: int, height: int) -> None:
        model = ready_model(variant, fusion, channels=2, zero_recon=True)
        plane = random_plane(np.random.default_rng(width), width, height)
        partition = random_quadtree(1, width, height, 0.5) if variant is Variant.BDRRN else None
        out = enhance_plane(model, plane, partition)
        assert np.array_equal(out.pixels, plane.pixels)


# ---------------------------------------------------------------------- #
# Weight sharing and Eval purity                                           #
# ---------------------------------------------------------------------- #

def _eval_taps(model: Model, decoded: Tensor, mask: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
    taps: dict[str, Tensor] = {}
    out = forward(model, decoded, mask, Mode.EVAL, taps)
    return out, taps


class TestSharedWeights:
    def _inputs(self) -> tuple[Tensor, Tensor]:
        rng = np.random.default_rng(3)
        return Tensor(rng.uniform(size=(1, 1, 12, 10))), Tensor(rng.uniform(size=(1, 1, 12, 10)))

    def test_unit_weights_reach_every_branch(self) -> None:
        model = ready_model(channels=3)
        decoded, mask = self._inputs()
        _, before = _eval_taps(model, decoded, mask)
        model["rru.c1.w"].data[...] += np.random.default_rng(4).normal(0.0, 0.1, size=model["rru.c1.w"].shape)
        _, after = _eval_taps(model, decoded, mask)
        for tap in ("main", "extra", "merge"):
            assert not np.array_equal(before[tap].data, after[tap].data), tap

    def test_duplicate_branch_matches_main(self) -> None:
        cfg = ModelConfig(variant=Variant.BDRRN, fusion=Fusion.ADD, channels=3, main_iters=4, extra_iters=4)
        model = build_model(cfg, 0)
        for stream in model.bn_stats:
            model.bn_stats[stream] = RunningStats(mean=0.5, var=0.05, ready=True)
        decoded, _ = self._inputs()
        _, taps = _eval_taps(model, decoded, decoded)
        np.testing.assert_array_equal(taps["main"].data, taps["extra"].data)
        np.testing.assert_array_equal(taps["fused"].data, 2.0 * taps["main"].data)

    def test_identity_fuse_sums_activated_branches(self) -> None:
        cfg = ModelConfig(variant=Variant.BDRRN, fusion=Fusion.CONCAT, channels=3, main_iters=4, extra_iters=4)
        model = build_model(cfg, 0)
        for stream in model.bn_stats:
            model.bn_stats[stream] = RunningStats(mean=0.5, var=0.05, ready=True)
        c = cfg.channels
        fuse = np.zeros((c, 2 * c, 3, 3))
        for o in range(c):
            fuse[o, o, 1, 1] = fuse[o, c + o, 1, 1] = 1.0
        model["fuse.w"].data[...] = fuse
        model["fuse.b"].data[...] = 0.0
        decoded, _ = self._inputs()
        _, taps = _eval_taps(model, decoded, decoded)
        np.testing.assert_array_equal(taps["main"].data, taps["extra"].data)
        # the fuse convolution is pre-activated like every other layer
        expected = 2.0 * np.maximum(taps["main"].data, 0.0)
        np.testing.assert_allclose(taps["fused"].data, expected, rtol=0.0, atol=1e-12)


class TestEvalPurity:
    @pytest.mark.parametrize("variant,fusion", [(Variant.DRRN, Fusion.ADD), (Variant.BDRRN, Fusion.ADD), (Variant.BDRRN, Fusion.CONCAT)])
    def test_repeatable_and_side_effect_free(self, variant: Variant, fusion: Fusion) -> None:
        model = ready_model(variant, fusion, channels=2)
        rng = np.random.default_rng(5)
        decoded = Tensor(rng.uniform(size=(2, 1, 9, 7)))
        mask = Tensor(rng.uniform(size=(2, 1, 9, 7))) if variant is Variant.BDRRN else None
        params = {name: p.value.data.copy() for name, p in model.params.items()}
        stats = {name: (s.mean, s.var, s.ready) for name, s in model.bn_stats.items()}
        first = forward(model, decoded, mask, Mode.EVAL)
        second = forward(model, decoded, mask, Mode.EVAL)
        assert np.array_equal(first.data, second.data)
        for name, p in model.params.items():
            assert np.array_equal(p.value.data, params[name]), name
            assert p.value.grad is None
        assert {name: (s.mean, s.var, s.ready) for name, s in model.bn_stats.items()} == stats
