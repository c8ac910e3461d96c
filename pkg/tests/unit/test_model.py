"""
Test network configuration, construction, forward pass and cost accounting
"""

import math
from collections import OrderedDict

import numpy as np
import pytest

from conftest import mirror, tiny_network_config
from hsi_rcnet.core.complexity import OpDims, macs_conv
from hsi_rcnet.core.model import (
    BlockConfig,
    BlockKind,
    NetworkConfig,
    StageConfig,
    build_network,
    macs_breakdown,
    macs_estimate,
    param_count,
)
from hsi_rcnet.core.ops import softmax_cross_entropy
from hsi_rcnet.core.tensor import Tape, Tensor, double_precision, grad_check, no_tape
from hsi_rcnet.errors import ConfigError, ConfigMismatchError, ShapeError, UnknownLayerError


def random_batch(cfg, batch=2, seed=0):
    rng = np.random.default_rng(seed)
    return rng.normal(size=(batch, cfg.patch_size, cfg.patch_size, cfg.bands))


class TestNetworkConfig:
    def test_default_layout(self):
        cfg = NetworkConfig.default()
        assert [st.out_channels for st in cfg.stages] == [32, 64, 128, 256]
        assert cfg.stem.channels == 16
        kinds = [[b.kind for b in st.blocks] for st in cfg.stages]
        assert kinds[0] == [BlockKind.CONV]
        assert all(k is BlockKind.RC for k in kinds[2] + kinds[3])

    def test_even_block_window_rejected(self):
        with pytest.raises(ConfigError):
            BlockConfig(BlockKind.RC, window=(3, 4, 3))

    def test_even_kernel_size_setting_rejected(self):
        with pytest.raises(ConfigError):
            tiny_network_config(kernel_sizes=[3, 4, 3, 3])

    def test_ablation_kernel_size_rejects_even(self, tiny_config):
        with pytest.raises(ConfigError):
            tiny_config.with_kernel_size(3, 2)

    def test_downsample_must_halve(self):
        with pytest.raises(ConfigError):
            StageConfig(out_channels=8, downsample=3)

    @pytest.mark.parametrize("patch_size", [8, 0])
    def test_patch_size_must_be_odd(self, patch_size):
        with pytest.raises(ConfigError):
            tiny_network_config(patch_size=patch_size)

    def test_unknown_setting(self):
        with pytest.raises(ConfigError):
            tiny_network_config(depth=5)

    def test_unknown_block_kind(self):
        with pytest.raises(ConfigError):
            tiny_network_config(blocks=[["conv"], ["pool"], ["rc"], ["rc"]])

    def test_wrong_stage_count(self):
        with pytest.raises(ConfigError):
            tiny_network_config(channels=[2, 2, 3])

    def test_heads_must_divide_widths(self):
        with pytest.raises(ConfigError):
            tiny_network_config(relconv={"weighting": "scalar", "heads": 2})

    def test_settings_round_trip(self, tiny_config):
        assert NetworkConfig.from_settings(tiny_config.to_settings()).to_settings() == tiny_config.to_settings()

    def test_save_and_load(self, tmp_path, toy_config):
        path = tmp_path / "network.json"
        toy_config.save(path)
        assert NetworkConfig.load(path).to_settings() == toy_config.to_settings()

    def test_load_invalid_json(self, tmp_path):
        path = tmp_path / "network.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError):
            NetworkConfig.load(path)

    def test_ablations_do_not_modify_original(self, tiny_config):
        before = tiny_config.to_settings()
        tiny_config.with_last_block_rc(1)
        tiny_config.with_all_rc(2)
        assert tiny_config.to_settings() == before

    def test_with_all_rc(self, tiny_config):
        cfg = tiny_config.with_all_rc(1)
        assert cfg.stages[0].down_kind is BlockKind.RC
        assert all(b.kind is BlockKind.RC for b in cfg.stages[0].blocks)

    def test_ablation_stage_out_of_range(self, tiny_config):
        with pytest.raises(ConfigError):
            tiny_config.with_last_block_rc(5)


class TestBuildNetwork:
    def test_default_stage_extents(self):
        net = build_network(NetworkConfig.default(27, 200, 16), seed=0)
        assert net.stage_dims() == [
            (27, 27, 100, 16),
            (14, 14, 50, 32),
            (7, 7, 25, 64),
            (4, 4, 13, 128),
            (2, 2, 7, 256),
        ]

    def test_layer_names(self, tiny_config):
        net = build_network(tiny_config)
        assert net.layer_names == [
            "stem",
            "stage1.down",
            "stage1.block1",
            "stage2.down",
            "stage2.block1",
            "stage3.down",
            "stage3.block1",
            "stage4.down",
            "stage4.block1",
            "head",
        ]

    def test_same_seed_same_parameters(self, tiny_config):
        a = build_network(tiny_config, seed=7).state_dict()
        b = build_network(tiny_config, seed=7).state_dict()
        assert list(a) == list(b)
        assert all(a[k].tobytes() == b[k].tobytes() for k in a)

    def test_different_seed_different_parameters(self, tiny_config):
        a = build_network(tiny_config, seed=1).state_dict()
        b = build_network(tiny_config, seed=2).state_dict()
        assert not np.array_equal(a["stem.kernel"], b["stem.kernel"])

    def test_projections_start_as_identity(self, tiny_config):
        net = build_network(tiny_config)
        np.testing.assert_array_equal(net.params["stage3.block1.agg.w_k"].data, np.eye(3))

    def test_without_projections(self):
        net = build_network(tiny_network_config(relconv={"projections": False}))
        assert not any(name.endswith("agg.w_q") for name in net.params)

    def test_stem_output_too_small(self):
        with pytest.raises(ConfigError) as info:
            build_network(tiny_network_config(patch_size=7))
        assert info.value.details == {"stem_dims": [7, 7, 8], "minimum": 8, "layout_minimum": 16}
        assert "relaxed from the layout minimum of 16" in info.value.message

    def test_stem_extent_of_eight_is_accepted(self):
        net = build_network(tiny_network_config(patch_size=9, bands=8))
        assert net.stage_dims()[0][:3] == (9, 9, 8)

    def test_unknown_layer(self, tiny_config):
        with pytest.raises(UnknownLayerError):
            build_network(tiny_config).layer("stage5.block1")


class TestForward:
    def test_logits_shape_and_finite(self, tiny_config):
        net = build_network(tiny_config, seed=3)
        logits = net.forward(random_batch(tiny_config, batch=3))
        assert logits.shape == (3, 3)
        assert np.all(np.isfinite(logits.data))

    def test_batch_order_is_respected(self, tiny_config):
        """Permuting the batch permutes the logits"""
        net = build_network(tiny_config, seed=3)
        batch = random_batch(tiny_config, batch=4)
        order = [2, 0, 3, 1]
        base = net.forward(batch).data
        permuted = net.forward(batch[order]).data
        np.testing.assert_allclose(permuted, base[order], atol=1e-5)

    def test_samples_are_independent(self, tiny_config):
        net = build_network(tiny_config, seed=3)
        batch = random_batch(tiny_config, batch=2)
        alone = net.forward(batch[:1]).data
        together = net.forward(batch).data
        np.testing.assert_allclose(together[:1], alone, atol=1e-5)

    def test_forward_is_deterministic(self, tiny_config):
        net = build_network(tiny_config, seed=3)
        batch = random_batch(tiny_config)
        assert net.forward(batch).data.tobytes() == net.forward(batch).data.tobytes()

    def test_wrong_patch_shape(self, tiny_config):
        net = build_network(tiny_config)
        with pytest.raises(ShapeError):
            net.forward(np.zeros((1, 7, 7, 8)))

    def test_capture_records_every_layer_input(self, tiny_config):
        net = build_network(tiny_config)
        capture = {}
        net.forward(random_batch(tiny_config, batch=1), capture=capture)
        assert set(capture) == set(net.layer_names) - {"head"}
        assert capture["stage3.block1"].shape == (1,) + dict(net.feature_dims())["stage3.down"]


# ---------------------------------------------------------------------------
# Reference forward pass written from per-axis mirror index tables
# ---------------------------------------------------------------------------


def source_table(n, k, stride):
    """[out, k] source index of every window element along one axis, mirror 'same' padding"""
    out = -(-n // stride)
    before = max((out - 1) * stride + k - n, 0) // 2
    return np.array([[mirror(o * stride + d - before, n) for d in range(k)] for o in range(out)])


def gather(x, tables, taps):
    """x[:, I_h[:, dh], I_w[:, dw], I_s[:, ds], :] for one window tap"""
    rows, cols, bands = (t[:, d] for t, d in zip(tables, taps))
    return x[:, rows][:, :, cols][:, :, :, bands]


def window_taps(window):
    return [(a, b, c) for a in range(window[0]) for b in range(window[1]) for c in range(window[2])]


def ref_gelu(x):
    return 0.5 * x * (1.0 + np.tanh(math.sqrt(2.0 / math.pi) * (x + 0.044715 * x ** 3)))


def ref_norm(x, scale, shift):
    centred = x - x.mean(axis=-1, keepdims=True)
    return centred / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + 1e-5) * scale + shift


def ref_depthwise(x, kernel, stride):
    tables = [source_table(n, k, s) for n, k, s in zip(x.shape[1:4], kernel.shape[:3], stride)]
    return sum(gather(x, tables, t) * kernel[t] for t in window_taps(kernel.shape[:3]))


def ref_relconv(x, wq, wk, wv, window, stride):
    tables = [source_table(n, k, s) for n, k, s in zip(x.shape[1:4], window, stride)]
    centre = tuple(k // 2 for k in window)
    q = gather(x, tables, centre) @ wq
    taps = window_taps(window)
    logits = np.stack([-(q + gather(x, tables, t) @ wk) for t in taps])
    weights = np.exp(logits - logits.max(axis=0))
    weights /= weights.sum(axis=0)
    return sum(w * (gather(x, tables, t) @ wv) for w, t in zip(weights, taps))


def ref_unit(x, state, prefix, kind, window, stride, residual):
    h = ref_norm(x, state[f"{prefix}.norm.scale"], state[f"{prefix}.norm.shift"])
    if kind is BlockKind.CONV:
        a = ref_depthwise(h, state[f"{prefix}.agg.kernel"], stride)
    else:
        eye = np.eye(h.shape[-1])
        wq, wk, wv = (state.get(f"{prefix}.agg.{k}", eye) for k in ("w_q", "w_k", "w_v"))
        a = ref_relconv(h, wq, wk, wv, window, stride)
    y = ref_gelu(a @ state[f"{prefix}.mix.weight"] + state[f"{prefix}.mix.bias"])
    return x + y if residual else y


def reference_logits(cfg, state, batch):
    x = np.repeat(batch[..., None], cfg.stem.channels, axis=-1)
    x = ref_gelu(ref_depthwise(x, state["stem.kernel"], cfg.stem.stride) + state["stem.bias"])
    for s, stage in enumerate(cfg.stages, start=1):
        x = ref_unit(x, state, f"stage{s}.down", stage.down_kind, stage.down_window, (2, 2, 2), False)
        for b, block in enumerate(stage.blocks, start=1):
            x = ref_unit(x, state, f"stage{s}.block{b}", block.kind, block.window, (1, 1, 1), True)
    return x.mean(axis=(1, 2, 3)) @ state["head.weight"] + state["head.bias"]


class TestReferenceForward:
    """Logits agree with an independently written forward pass"""

    @pytest.mark.parametrize("seed", [0, 7])
    def test_tiny_network(self, seed):
        cfg = tiny_network_config(stem_channels=4, channels=[4, 4, 4, 4])
        self.check(cfg, seed)

    def test_toy_network(self, toy_config):
        self.check(toy_config, 0)

    def test_network_without_projections(self):
        self.check(tiny_network_config(stem_channels=3, channels=[3, 3, 3, 3], relconv={"projections": False}), 2)

    @staticmethod
    def check(cfg, seed):
        net = build_network(cfg, seed=seed)
        batch = random_batch(cfg, batch=2, seed=123 + seed)
        with double_precision():
            state = OrderedDict((n, np.asarray(v, dtype=np.float64)) for n, v in net.state_dict().items())
            logits = net.forward(Tensor(batch), params=OrderedDict((n, Tensor(v)) for n, v in state.items())).data
        np.testing.assert_allclose(logits, reference_logits(cfg, state, batch), atol=1e-8)


def gradient_network_config():
    # four channels everywhere keeps the per-voxel norm well conditioned
    return tiny_network_config(stem_channels=4, channels=[4, 4, 4, 4])


def directional_errors(net, batch, labels, seed, eps=1e-6):
    """Relative error of <grad, d> against a central difference along d, per parameter"""
    rng = np.random.default_rng(seed)
    with double_precision():
        state = OrderedDict((n, np.asarray(v, dtype=np.float64)) for n, v in net.state_dict().items())
        params = OrderedDict((n, Tensor(v, requires_grad=True)) for n, v in state.items())
        with Tape() as tape:
            loss = softmax_cross_entropy(net.forward(Tensor(batch), params=params), labels)
        tape.backward(loss, list(params.values()))

        def loss_at(name, values):
            shifted = OrderedDict((n, Tensor(v)) for n, v in state.items())
            shifted[name] = Tensor(values)
            with no_tape():
                return softmax_cross_entropy(net.forward(Tensor(batch), params=shifted), labels).item()

        errors = {}
        for name, p in params.items():
            d = rng.normal(size=p.shape)
            analytic = float((p.grad * d).sum())
            numeric = (loss_at(name, state[name] + eps * d) - loss_at(name, state[name] - eps * d)) / (2 * eps)
            errors[name] = abs(analytic - numeric) / max(1.0, abs(numeric))
    return errors


class TestNetworkGradients:
    @pytest.mark.parametrize("seed", range(20))
    def test_every_parameter_along_random_directions(self, seed):
        cfg = gradient_network_config()
        net = build_network(cfg, seed=seed)
        batch = random_batch(cfg, batch=2, seed=100 + seed)
        labels = np.array([1 + seed % 3, 1 + (seed + 1) % 3])
        errors = directional_errors(net, batch, labels, seed)
        assert set(errors) == set(net.params)
        worst = max(errors, key=errors.get)
        assert errors[worst] < 1e-5, f"{worst}: {errors[worst]}"

    @pytest.mark.parametrize("name", ["stem.kernel", "stage2.block1.agg.kernel", "stage3.block1.agg.w_q", "head.weight"])
    def test_loss_gradient_per_coordinate(self, name):
        cfg = gradient_network_config()
        net = build_network(cfg, seed=5)
        batch = random_batch(cfg, batch=2, seed=9)
        labels = np.array([1, 3])
        state = net.state_dict()

        def loss(t):
            params = OrderedDict((n, Tensor(v)) for n, v in state.items())
            params[name] = t
            return softmax_cross_entropy(net.forward(Tensor(batch), params=params), labels)

        assert grad_check(loss, Tensor(state[name])) < 1e-5


class TestStateDict:
    def test_round_trip(self, tiny_config):
        a = build_network(tiny_config, seed=1)
        b = build_network(tiny_config, seed=2)
        b.load_state_dict(a.state_dict())
        batch = random_batch(tiny_config)
        np.testing.assert_array_equal(a.forward(batch).data, b.forward(batch).data)

    def test_missing_entry(self, tiny_config):
        net = build_network(tiny_config)
        state = net.state_dict()
        del state["head.bias"]
        with pytest.raises(ConfigMismatchError):
            net.load_state_dict(state)

    def test_wrong_shape(self, tiny_config):
        net = build_network(tiny_config)
        state = net.state_dict()
        state["head.bias"] = np.zeros(5)
        with pytest.raises(ConfigMismatchError):
            net.load_state_dict(state)


class TestCostAccounting:
    def test_param_count_matches_breakdown(self, tiny_config):
        net = build_network(tiny_config)
        assert param_count(net) == sum(row.params for row in macs_breakdown(net))

    def test_estimate_sums_table_terms(self, toy_config):
        net = build_network(toy_config)
        assert macs_estimate(net) == sum(row.table_macs for row in macs_breakdown(net))
        assert macs_estimate(net) > 0

    @pytest.mark.parametrize("stage", [1, 2])
    def test_last_block_rc_swap(self, tiny_config, stage):
        """conv -> rc doubles the block's aggregation term and swaps k^3 C params for 3 C^2"""
        base = build_network(tiny_config)
        swapped = build_network(tiny_config.with_last_block_rc(stage))
        name = f"stage{stage}.block1"
        dims = dict(base.feature_dims())[name]
        c = dims[3]
        assert macs_estimate(swapped) - macs_estimate(base) == macs_conv(OpDims(dims[0], dims[1], dims[2], c, 3))
        assert param_count(swapped) - param_count(base) == 3 * c * c - 27 * c

    def test_larger_kernel_costs_more(self, tiny_config):
        base = build_network(tiny_config)
        wide = build_network(tiny_config.with_kernel_size(3, 5))
        assert macs_estimate(wide) > macs_estimate(base)
        assert param_count(wide) == param_count(base)

    def test_breakdown_with_custom_dims(self, toy_config):
        net = build_network(toy_config)
        small = macs_estimate(net, (9, 9, 16))
        large = macs_estimate(net, (11, 11, 16))
        assert large > small
