"""
Effective aggregation kernels of a trained network at chosen positions

Convolution layers apply the same static kernel everywhere; relational
layers compute window weights from the local features, so their kernels
change with position.
"""

import csv
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, TextIO, Tuple

import numpy as np

from hsi_rcnet.core.model import AggregationUnit, BlockKind, Network, Stem
from hsi_rcnet.core.ops import relconv3d_weights
from hsi_rcnet.core.tensor import Tensor, no_tape
from hsi_rcnet.errors import ShapeError, UnknownLayerError

logger = logging.getLogger(__name__)

Position = Tuple[int, int, int]


@dataclass
class KernelRow:
    position: Position
    group: int
    weights: np.ndarray  # flattened k_h * k_w * k_s window


@dataclass
class KernelDump:
    layer: str
    kind: str
    window: Tuple[int, int, int]
    positions: List[Position]
    rows: List[KernelRow] = field(default_factory=list)

    def rows_at(self, position: Position) -> List[KernelRow]:
        return [r for r in self.rows if r.position == tuple(position)]

    def to_csv(self, stream: TextIO) -> None:
        """One line per (position, group); '.' decimal separator"""
        size = int(np.prod(self.window))
        writer = csv.writer(stream, lineterminator="\n")
        writer.writerow(["layer", "kind", "position", "row", "col", "band", "group"] + [f"w{i}" for i in range(size)])
        for row in self.rows:
            index = self.positions.index(row.position)
            writer.writerow(
                [self.layer, self.kind, index, *row.position, row.group] + [repr(float(w)) for w in row.weights]
            )


def _check_position(position: Sequence[int], extents: Sequence[int]) -> Position:
    pos = tuple(int(p) for p in position)
    if len(pos) != 3 or any(not 0 <= p < e for p, e in zip(pos, extents)):
        raise ShapeError(f"position {list(position)} outside layer output {list(extents)}")
    return pos  # type: ignore[return-value]


def dump_kernels(
    net: Network,
    patch: np.ndarray,
    layer_id: str,
    positions: Optional[Sequence[Sequence[int]]] = None,
) -> KernelDump:
    """
    Kernels of one aggregation layer for a single patch

    Args:
        net: network with loaded parameters
        patch: [s, s, L] patch cube
        layer_id: e.g. "stem", "stage3.block1", "stage4.down"
        positions: output locations (row, col, band); defaults to the first
            and last output location

    Returns:
        KernelDump with one row per position and group
    """
    layer = net.layer(layer_id)
    if not isinstance(layer, (Stem, AggregationUnit)):
        raise UnknownLayerError(f"layer {layer_id!r} has no aggregation kernel")

    capture = {}
    with no_tape():
        net.forward(np.asarray(patch)[None], capture=capture)
    features: Tensor = capture[layer_id]
    extents = layer.output_dims(features.shape[1:])[:3]
    if positions is None:
        positions = [(0, 0, 0), tuple(e - 1 for e in extents)]
    checked = [_check_position(p, extents) for p in positions]

    if isinstance(layer, Stem) or layer.block_kind is BlockKind.CONV:
        kernel = layer.param(net.params, "agg.kernel" if isinstance(layer, AggregationUnit) else "kernel").data
        window = kernel.shape[:3]
        rows = [
            KernelRow(pos, c, kernel[..., c].reshape(-1).copy())
            for pos in checked
            for c in range(kernel.shape[-1])
        ]
        kind = BlockKind.CONV.value
    else:
        weights = relconv3d_weights(features, layer.relconv_params(net.params))[0]
        window = layer.window
        rows = [
            KernelRow(pos, g, weights[pos][g].reshape(-1).copy())
            for pos in checked
            for g in range(weights.shape[3])
        ]
        kind = BlockKind.RC.value

    logger.info(f"Dumped {len(rows)} kernel rows of {layer_id} ({kind}) at {len(checked)} positions")
    return KernelDump(layer=layer_id, kind=kind, window=tuple(window), positions=checked, rows=rows)
