"""
Hybrid convolution / relational-convolution network

A network is a stem that lifts the band cube to a feature map and compresses
the spectral axis, four stages that each halve every extent and then apply a
sequence of residual blocks, and a pooled linear classifier. Each stage entry
and each block aggregates with either a depthwise convolution or a relational
convolution.
"""

import copy
import json
import logging
from abc import ABC, abstractmethod
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from hsi_rcnet.config import DEFAULTS
from hsi_rcnet.core.complexity import (
    LayerCost,
    OpDims,
    macs_conv,
    macs_rcblock,
    network_macs,
)
from hsi_rcnet.core.ops import (
    Conv3dParams,
    Padding,
    RelConvParams,
    Weighting,
    channel_norm,
    conv3d_depthwise,
    conv3d_pointwise,
    dense,
    gelu,
    global_avg_pool,
    output_extents,
    relconv3d,
)
from hsi_rcnet.core.tensor import Tensor, reshape
from hsi_rcnet.errors import ConfigError, ConfigMismatchError, ShapeError, UnknownLayerError

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]
Dims = Tuple[int, int, int, int]  # H, W, S, C
ParamMap = Mapping[str, Tensor]

NUM_STAGES = 4
STAGE_STRIDE = 2
# Smallest stem extent of the full-size layout; builds accept down to STAGE_STRIDE ** (NUM_STAGES - 1)
LAYOUT_STEM_EXTENT = 16


class BlockKind(Enum):
    CONV = "conv"
    RC = "rc"


def _odd_triple(value: Union[int, Sequence[int]], what: str) -> Triple:
    if isinstance(value, int):
        value = (value, value, value)
    triple = tuple(int(v) for v in value)
    if len(triple) != 3:
        raise ConfigError(f"{what} needs three extents, got {list(triple)}")
    if any(v < 1 or v % 2 == 0 for v in triple):
        raise ConfigError(f"{what} extents must be odd and positive, got {list(triple)}")
    return triple  # type: ignore[return-value]


@dataclass
class BlockConfig:
    """One aggregation block: conv or rc over an odd window"""

    kind: BlockKind = BlockKind.CONV
    window: Triple = (3, 3, 3)
    channels: Optional[int] = None

    def __post_init__(self):
        try:
            self.kind = BlockKind(self.kind)
        except ValueError:
            raise ConfigError(f"block kind must be 'conv' or 'rc', got {self.kind!r}")
        self.window = _odd_triple(self.window, "block window")


@dataclass
class StageConfig:
    """Strided downsample followed by residual blocks at ``out_channels``"""

    out_channels: int
    blocks: List[BlockConfig] = field(default_factory=list)
    downsample: int = STAGE_STRIDE
    down_kind: BlockKind = BlockKind.CONV
    down_window: Triple = (3, 3, 3)

    def __post_init__(self):
        if self.out_channels < 1:
            raise ConfigError(f"stage width must be >= 1, got {self.out_channels}")
        if self.downsample != STAGE_STRIDE:
            raise ConfigError(f"every stage halves its input; downsample must be 2, got {self.downsample}")
        try:
            self.down_kind = BlockKind(self.down_kind)
        except ValueError:
            raise ConfigError(f"downsample kind must be 'conv' or 'rc', got {self.down_kind!r}")
        self.down_window = _odd_triple(self.down_window, "downsample window")
        for block in self.blocks:
            if block.channels is None:
                block.channels = self.out_channels
            elif block.channels != self.out_channels:
                raise ConfigError(
                    f"residual block width {block.channels} differs from stage width {self.out_channels}"
                )


@dataclass
class StemConfig:
    """Single-channel to ``channels`` lift with spectral compression"""

    channels: int = 16
    window: Triple = (3, 3, 7)
    stride: Triple = (1, 1, 2)

    def __post_init__(self):
        if self.channels < 1:
            raise ConfigError(f"stem width must be >= 1, got {self.channels}")
        self.window = _odd_triple(self.window, "stem window")
        self.stride = tuple(int(s) for s in self.stride)  # type: ignore[assignment]
        if len(self.stride) != 3 or any(s < 1 for s in self.stride):
            raise ConfigError(f"stem stride must be three positive ints, got {list(self.stride)}")


@dataclass
class RelConvSettings:
    weighting: Weighting = Weighting.CHANNEL
    heads: int = 1
    projections: bool = True

    def __post_init__(self):
        try:
            self.weighting = Weighting(self.weighting)
        except ValueError:
            raise ConfigError(f"weighting must be 'channel' or 'scalar', got {self.weighting!r}")
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")


def _stages_from_lists(
    channels: Sequence[int],
    blocks: Sequence[Sequence[str]],
    downsample: Sequence[str],
    kernel_sizes: Sequence[int],
) -> List[StageConfig]:
    lists = {"channels": channels, "blocks": blocks, "downsample": downsample, "kernel_sizes": kernel_sizes}
    for key, values in lists.items():
        if len(values) != NUM_STAGES:
            raise ConfigError(f"network.{key} needs {NUM_STAGES} entries, got {len(values)}")
    return [
        StageConfig(
            out_channels=int(c),
            blocks=[BlockConfig(BlockKind(kind), (k, k, k)) for kind in kinds],
            down_kind=BlockKind(down),
        )
        for c, kinds, down, k in zip(channels, blocks, downsample, kernel_sizes)
    ]


@dataclass
class NetworkConfig:
    """Declarative description of the whole network"""

    patch_size: int = 27
    bands: int = 200
    num_classes: int = 16
    stem: StemConfig = field(default_factory=StemConfig)
    stages: List[StageConfig] = field(default_factory=list)
    relconv: RelConvSettings = field(default_factory=RelConvSettings)

    def __post_init__(self):
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise ConfigError(f"patch size must be odd, got {self.patch_size}")
        if self.bands < 1:
            raise ConfigError(f"bands must be >= 1, got {self.bands}")
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be >= 1, got {self.num_classes}")
        if not self.stages:
            defaults = DEFAULTS["network"]
            self.stages = _stages_from_lists(
                defaults["channels"], defaults["blocks"], defaults["downsample"], defaults["kernel_sizes"]
            )
        if len(self.stages) != NUM_STAGES:
            raise ConfigError(f"the network has exactly {NUM_STAGES} stages, got {len(self.stages)}")
        if self.relconv.weighting is Weighting.SCALAR:
            widths = [self.stem.channels] + [st.out_channels for st in self.stages]
            uneven = [c for c in widths if c % self.relconv.heads]
            if uneven:
                raise ConfigError(f"widths {uneven} cannot be split into {self.relconv.heads} heads")

    # -- presets ----------------------------------------------------------

    @classmethod
    def default(cls, patch_size: int = 27, bands: int = 200, num_classes: int = 16) -> "NetworkConfig":
        """Stages 1-2 convolutional, stages 3-4 relational, widths 32..256"""
        return cls.from_settings({"patch_size": patch_size, "bands": bands, "num_classes": num_classes})

    @classmethod
    def reduced(
        cls,
        patch_size: int = 27,
        bands: int = 200,
        num_classes: int = 16,
        channels: Sequence[int] = (16, 32, 64, 128),
        stem_channels: int = 16,
    ) -> "NetworkConfig":
        """One block per stage at narrower widths, for desk-scale runs"""
        return cls.from_settings(
            {
                "patch_size": patch_size,
                "bands": bands,
                "num_classes": num_classes,
                "stem_channels": stem_channels,
                "channels": list(channels),
                "blocks": [["conv"], ["conv"], ["rc"], ["rc"]],
            }
        )

    # -- ablations --------------------------------------------------------

    def _stage(self, cfg: "NetworkConfig", stage: int) -> StageConfig:
        if not 1 <= stage <= NUM_STAGES:
            raise ConfigError(f"stage must lie in 1..{NUM_STAGES}, got {stage}")
        return cfg.stages[stage - 1]

    def with_last_block_rc(self, stage: int) -> "NetworkConfig":
        """Copy with the last block of ``stage`` replaced by an rc block"""
        cfg = copy.deepcopy(self)
        st = self._stage(cfg, stage)
        if not st.blocks:
            raise ConfigError(f"stage {stage} has no blocks to replace")
        st.blocks[-1].kind = BlockKind.RC
        return cfg

    def with_all_rc(self, stage: int) -> "NetworkConfig":
        cfg = copy.deepcopy(self)
        st = self._stage(cfg, stage)
        st.down_kind = BlockKind.RC
        for block in st.blocks:
            block.kind = BlockKind.RC
        return cfg

    def with_kernel_size(self, stage: int, k: int) -> "NetworkConfig":
        """Copy with every block window of ``stage`` set to k x k x k"""
        cfg = copy.deepcopy(self)
        window = _odd_triple(k, "kernel size")
        for block in self._stage(cfg, stage).blocks:
            block.window = window
        return cfg

    # -- serialisation ----------------------------------------------------

    @classmethod
    def from_settings(cls, settings: Optional[Mapping[str, Any]] = None) -> "NetworkConfig":
        """Build from the compact ``network`` configuration section"""
        merged = copy.deepcopy(DEFAULTS["network"])
        for key, value in (settings or {}).items():
            if key == "relconv" and isinstance(value, Mapping):
                merged["relconv"].update(value)
            else:
                merged[key] = value
        unknown = set(merged) - set(DEFAULTS["network"])
        if unknown:
            raise ConfigError(f"unknown network settings: {sorted(unknown)}")
        try:
            return cls(
                patch_size=int(merged["patch_size"]),
                bands=int(merged["bands"]),
                num_classes=int(merged["num_classes"]),
                stem=StemConfig(
                    channels=int(merged["stem_channels"]),
                    window=tuple(merged["stem_window"]),
                    stride=tuple(merged["stem_stride"]),
                ),
                stages=_stages_from_lists(
                    merged["channels"], merged["blocks"], merged["downsample"], merged["kernel_sizes"]
                ),
                relconv=RelConvSettings(**merged["relconv"]),
            )
        except (TypeError, ValueError) as e:
            if isinstance(e, ConfigError):
                raise
            raise ConfigError(f"invalid network settings: {e}")

    def to_settings(self) -> Dict[str, Any]:
        """Inverse of from_settings (block windows are cubic per stage)"""
        return {
            "patch_size": self.patch_size,
            "bands": self.bands,
            "num_classes": self.num_classes,
            "stem_channels": self.stem.channels,
            "stem_window": list(self.stem.window),
            "stem_stride": list(self.stem.stride),
            "channels": [st.out_channels for st in self.stages],
            "blocks": [[b.kind.value for b in st.blocks] for st in self.stages],
            "downsample": [st.down_kind.value for st in self.stages],
            "kernel_sizes": [st.blocks[0].window[0] if st.blocks else 3 for st in self.stages],
            "relconv": {
                "weighting": self.relconv.weighting.value,
                "heads": self.relconv.heads,
                "projections": self.relconv.projections,
            },
        }

    def save(self, path: Union[str, Path]) -> None:
        Path(path).write_text(json.dumps(self.to_settings(), indent=2), encoding="utf-8")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "NetworkConfig":
        try:
            settings = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path} is not valid JSON: {e}")
        return cls.from_settings(settings)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------


class Layer(ABC):
    """A named step of the forward plan owning ``<name>.*`` parameters"""

    kind = "layer"

    def __init__(self, name: str):
        self.name = name

    def param(self, params: ParamMap, key: str) -> Tensor:
        return params[f"{self.name}.{key}"]

    @abstractmethod
    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """Initial values keyed by suffix (without the layer prefix)"""

    @abstractmethod
    def output_dims(self, dims: Dims) -> Dims:
        pass

    @abstractmethod
    def forward(self, x: Tensor, params: ParamMap, capture: Optional[Dict[str, Tensor]] = None) -> Tensor:
        pass

    @abstractmethod
    def cost(self, dims: Dims) -> LayerCost:
        pass


def _volume(window: Sequence[int]) -> int:
    return int(np.prod(window))


class Stem(Layer):
    kind = "conv"

    def __init__(self, cfg: StemConfig):
        super().__init__("stem")
        self.cfg = cfg

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        window = self.cfg.window
        std = np.sqrt(2.0 / _volume(window))
        return {
            "kernel": rng.normal(0.0, std, size=window + (self.cfg.channels,)),
            "bias": np.zeros(self.cfg.channels),
        }

    def conv_params(self, params: ParamMap) -> Conv3dParams:
        return Conv3dParams(
            kernel=self.param(params, "kernel"),
            stride=self.cfg.stride,
            padding=Padding.SAME,
            bias=self.param(params, "bias"),
            multiplier=self.cfg.channels,
        )

    def output_dims(self, dims: Dims) -> Dims:
        out = output_extents(dims[:3], self.cfg.window, self.cfg.stride, Padding.SAME)
        return out + (self.cfg.channels,)

    def forward(self, x, params, capture=None):
        if capture is not None:
            capture[self.name] = x
        return gelu(conv3d_depthwise(x, self.conv_params(params)))

    def cost(self, dims: Dims) -> LayerCost:
        out = self.output_dims(dims)
        c = self.cfg.channels
        return LayerCost(
            layer=self.name,
            kind=self.kind,
            out_dims=out,
            table_macs=macs_conv(OpDims(out[0], out[1], out[2], c, window=self.cfg.window)),
            params=_volume(self.cfg.window) * c + c,
        )


class AggregationUnit(Layer):
    """
    norm -> conv|rc aggregation -> pointwise mix -> gelu, plus an optional
    residual connection

    Stage entries use stride 2 and change the width; blocks keep both and add
    the residual.
    """

    def __init__(
        self,
        name: str,
        kind: BlockKind,
        c_in: int,
        c_out: int,
        window: Triple,
        stride: Triple = (1, 1, 1),
        residual: bool = False,
        relconv: Optional[RelConvSettings] = None,
    ):
        super().__init__(name)
        if residual and (c_in != c_out or stride != (1, 1, 1)):
            raise ConfigError(f"{name}: residual units keep width and extent")
        self.block_kind = kind
        self.kind = kind.value
        self.c_in = c_in
        self.c_out = c_out
        self.window = window
        self.stride = stride
        self.residual = residual
        self.relconv = relconv or RelConvSettings()

    @property
    def has_projections(self) -> bool:
        return self.block_kind is BlockKind.RC and self.relconv.projections

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        c_in, c_out = self.c_in, self.c_out
        values: Dict[str, np.ndarray] = {
            "norm.scale": np.ones(c_in),
            "norm.shift": np.zeros(c_in),
        }
        if self.block_kind is BlockKind.CONV:
            std = np.sqrt(1.0 / _volume(self.window))
            values["agg.kernel"] = rng.normal(0.0, std, size=self.window + (c_in,))
        elif self.relconv.projections:
            for key in ("w_q", "w_k", "w_v"):
                values[f"agg.{key}"] = np.eye(c_in)
        mix_std = np.sqrt(2.0 / c_in) * (0.5 if self.residual else 1.0)
        values["mix.weight"] = rng.normal(0.0, mix_std, size=(c_in, c_out))
        values["mix.bias"] = np.zeros(c_out)
        return values

    def conv_params(self, params: ParamMap) -> Conv3dParams:
        return Conv3dParams(kernel=self.param(params, "agg.kernel"), stride=self.stride, padding=Padding.SAME)

    def relconv_params(self, params: ParamMap) -> RelConvParams:
        projections = (
            [self.param(params, f"agg.{k}") for k in ("w_q", "w_k", "w_v")]
            if self.relconv.projections
            else [None, None, None]
        )
        return RelConvParams(
            window=self.window,
            w_q=projections[0],
            w_k=projections[1],
            w_v=projections[2],
            stride=self.stride,
            padding=Padding.SAME,
            weighting=self.relconv.weighting,
            heads=self.relconv.heads,
        )

    def output_dims(self, dims: Dims) -> Dims:
        if dims[3] != self.c_in:
            raise ShapeError(f"{self.name} expects {self.c_in} channels, got {dims[3]}")
        return output_extents(dims[:3], self.window, self.stride, Padding.SAME) + (self.c_out,)

    def forward(self, x, params, capture=None):
        h = channel_norm(x, self.param(params, "norm.scale"), self.param(params, "norm.shift"))
        if capture is not None:
            capture[self.name] = h
        if self.block_kind is BlockKind.CONV:
            a = conv3d_depthwise(h, self.conv_params(params))
        else:
            a = relconv3d(h, self.relconv_params(params))
        y = gelu(conv3d_pointwise(a, self.param(params, "mix.weight"), self.param(params, "mix.bias")))
        return x + y if self.residual else y

    def cost(self, dims: Dims) -> LayerCost:
        out = self.output_dims(dims)
        n_in = dims[0] * dims[1] * dims[2]
        n_out = out[0] * out[1] * out[2]
        agg_dims = OpDims(out[0], out[1], out[2], self.c_in, window=self.window)
        norm = 2 * n_in * self.c_in
        mix = n_out * self.c_in * self.c_out
        if self.block_kind is BlockKind.CONV:
            table = macs_conv(agg_dims)
            agg_params = _volume(self.window) * self.c_in
            projections = 0
        else:
            table = macs_rcblock(agg_dims)
            agg_params = 3 * self.c_in * self.c_in if self.has_projections else 0
            projections = 3 * n_in * self.c_in * self.c_in if self.has_projections else 0
        return LayerCost(
            layer=self.name,
            kind=self.kind,
            out_dims=out,
            table_macs=table,
            beyond_macs=norm + mix + projections,
            params=2 * self.c_in + agg_params + self.c_in * self.c_out + self.c_out,
        )


class Head(Layer):
    kind = "head"

    def __init__(self, channels: int, num_classes: int):
        super().__init__("head")
        self.channels = channels
        self.num_classes = num_classes

    def init_params(self, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        return {
            "weight": rng.normal(0.0, np.sqrt(1.0 / self.channels), size=(self.channels, self.num_classes)),
            "bias": np.zeros(self.num_classes),
        }

    def output_dims(self, dims: Dims) -> Dims:
        return (1, 1, 1, self.num_classes)

    def forward(self, x, params, capture=None):
        return dense(global_avg_pool(x), self.param(params, "weight"), self.param(params, "bias"))

    def cost(self, dims: Dims) -> LayerCost:
        return LayerCost(
            layer=self.name,
            kind=self.kind,
            out_dims=(self.num_classes,),
            table_macs=0,
            beyond_macs=dims[0] * dims[1] * dims[2] * self.channels + self.channels * self.num_classes,
            params=self.channels * self.num_classes + self.num_classes,
        )


# ---------------------------------------------------------------------------
# Network
# ---------------------------------------------------------------------------


def _plan_layers(cfg: NetworkConfig) -> List[Layer]:
    layers: List[Layer] = [Stem(cfg.stem)]
    width = cfg.stem.channels
    for s, stage in enumerate(cfg.stages, start=1):
        layers.append(
            AggregationUnit(
                f"stage{s}.down",
                stage.down_kind,
                width,
                stage.out_channels,
                stage.down_window,
                stride=(STAGE_STRIDE,) * 3,
                relconv=cfg.relconv,
            )
        )
        width = stage.out_channels
        for b, block in enumerate(stage.blocks, start=1):
            layers.append(
                AggregationUnit(
                    f"stage{s}.block{b}",
                    block.kind,
                    width,
                    width,
                    block.window,
                    residual=True,
                    relconv=cfg.relconv,
                )
            )
    layers.append(Head(width, cfg.num_classes))
    return layers


class Network:
    """Parameter collection plus the ordered forward plan"""

    def __init__(self, cfg: NetworkConfig, layers: List[Layer], params: "OrderedDict[str, Tensor]", seed: int):
        self.cfg = cfg
        self.layers = layers
        self.params = params
        self.seed = seed
        self._by_name = {layer.name: layer for layer in layers}

    @property
    def input_dims(self) -> Dims:
        return (self.cfg.patch_size, self.cfg.patch_size, self.cfg.bands, 1)

    def layer(self, name: str) -> Layer:
        if name not in self._by_name:
            raise UnknownLayerError(f"unknown layer {name!r}", {"layers": list(self._by_name)})
        return self._by_name[name]

    @property
    def layer_names(self) -> List[str]:
        return [layer.name for layer in self.layers]

    def feature_dims(self, dims: Optional[Dims] = None) -> List[Tuple[str, Dims]]:
        """Output dims of every layer before the head"""
        current = dims or self.input_dims
        result = []
        for layer in self.layers[:-1]:
            current = layer.output_dims(current)
            result.append((layer.name, current))
        return result

    def stage_dims(self) -> List[Dims]:
        """Feature extents after the stem and after each stage"""
        dims = dict(self.feature_dims())
        names = ["stem"] + [
            [n for n in dims if n.startswith(f"stage{s}.")][-1] for s in range(1, NUM_STAGES + 1)
        ]
        return [dims[n] for n in names]

    def forward(
        self,
        batch: Union[Tensor, np.ndarray],
        params: Optional[ParamMap] = None,
        capture: Optional[Dict[str, Tensor]] = None,
    ) -> Tensor:
        """
        Logits [B, K] for a batch of patches [B, s, s, L]

        Args:
            batch: patch cube batch
            params: parameter tensors to use instead of the network's own
            capture: if given, receives the input of every aggregation by layer name
        """
        if not isinstance(batch, Tensor):
            batch = Tensor(batch)
        expected = self.input_dims[:3]
        if len(batch.shape) != 4 or tuple(batch.shape[1:]) != expected:
            raise ShapeError(f"batch must be [B, {expected[0]}, {expected[1]}, {expected[2]}], got {list(batch.shape)}")
        params = self.params if params is None else params
        x = reshape(batch, batch.shape + (1,))
        for layer in self.layers:
            x = layer.forward(x, params, capture)
        return x

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def shadow_params(self) -> "OrderedDict[str, Tensor]":
        """Fresh trainable tensors sharing this network's parameter data"""
        return OrderedDict(
            (name, Tensor(p.data, requires_grad=True, name=name, dtype=p.dtype)) for name, p in self.params.items()
        )

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((name, p.data.copy()) for name, p in self.params.items())

    def load_state_dict(self, state: Mapping[str, np.ndarray]) -> None:
        missing = [n for n in self.params if n not in state]
        extra = [n for n in state if n not in self.params]
        if missing or extra:
            raise ConfigMismatchError(
                "checkpoint does not match the network",
                {"missing": missing, "unexpected": extra},
            )
        for name, p in self.params.items():
            value = np.asarray(state[name])
            if value.shape != p.shape:
                raise ConfigMismatchError(
                    f"{name}: checkpoint shape {list(value.shape)} != network shape {list(p.shape)}"
                )
            p.data = value.astype(p.dtype).copy()
            p.zero_grad()


def build_network(cfg: NetworkConfig, seed: int = 0) -> Network:
    """
    Plan the layers and draw deterministic initial parameters

    Raises:
        ConfigError: the stem output is too small for the downsampling schedule
    """
    layers = _plan_layers(cfg)
    stem_dims = layers[0].output_dims((cfg.patch_size, cfg.patch_size, cfg.bands, 1))
    minimum = STAGE_STRIDE ** (NUM_STAGES - 1)
    if min(stem_dims[:3]) < minimum:
        raise ConfigError(
            f"stem output {list(stem_dims[:3])} too small for {NUM_STAGES} halvings; "
            f"each extent must be >= {minimum} (relaxed from the layout minimum of {LAYOUT_STEM_EXTENT} "
            f"so 9 x 9 patches can be trained)",
            {"stem_dims": list(stem_dims[:3]), "minimum": minimum, "layout_minimum": LAYOUT_STEM_EXTENT},
        )

    rng = np.random.default_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for layer in layers:
        for suffix, value in layer.init_params(rng).items():
            name = f"{layer.name}.{suffix}"
            params[name] = Tensor(value, requires_grad=True, name=name)

    net = Network(cfg, layers, params, seed)
    logger.info(
        f"Built network: {len(layers)} layers, {net.param_count()} parameters, "
        f"stage dims {[list(d[:3]) for d in net.stage_dims()]}"
    )
    if not cfg.relconv.projections:
        logger.warning("Relational convolution projections disabled; using raw features")
    return net


def forward(net: Network, batch: Union[Tensor, np.ndarray]) -> Tensor:
    return net.forward(batch)


def param_count(net: Network) -> int:
    return net.param_count()


def macs_breakdown(net: Network, dims: Optional[Sequence[int]] = None) -> List[LayerCost]:
    """
    Per-layer cost rows along the forward plan

    Args:
        net: built network
        dims: input (s, s, L); defaults to the configured patch
    """
    current: Dims = net.input_dims if dims is None else (int(dims[0]), int(dims[1]), int(dims[2]), 1)
    rows = []
    for layer in net.layers:
        rows.append(layer.cost(current))
        current = layer.output_dims(current)
    return rows


def macs_estimate(net: Network, dims: Optional[Sequence[int]] = None) -> int:
    """Sum of the aggregation (table) terms over all layers"""
    return network_macs(macs_breakdown(net, dims))
