"""
Analytic multiply-accumulate counts for the aggregation operators

Only the spatial-spectral aggregation term of each operator is counted here.
Pointwise projections, channel mixes and normalisation are accounted for by
the network breakdown as beyond-table terms. Every formula is exact integer
arithmetic; Python ints never overflow.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

from hsi_rcnet.errors import ShapeError

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]


@dataclass(frozen=True)
class OpDims:
    """Extents of one operator application"""

    h: int
    w: int
    s: int
    c: int
    k: int = 3
    window: Optional[Triple] = None  # overrides the cubic k x k x k window

    def __post_init__(self):
        extents = (self.h, self.w, self.s, self.c, self.k) + tuple(self.window or ())
        if any(int(v) != v or v < 1 for v in extents):
            raise ShapeError(f"operator dims must be positive integers: {self}")

    @property
    def n(self) -> int:
        """Token count H*W*S"""
        return self.h * self.w * self.s

    @property
    def window_volume(self) -> int:
        if self.window is not None:
            return self.window[0] * self.window[1] * self.window[2]
        return self.k ** 3


def macs_conv(d: OpDims) -> int:
    """Depthwise convolution: H*W*S*k^3*C"""
    return d.n * d.window_volume * d.c


def macs_selfattn(d: OpDims) -> int:
    """Global self-attention: 2*(H*W*S)^2*C"""
    return 2 * d.n * d.n * d.c


def macs_rcblock(d: OpDims) -> int:
    """Relational convolution: 2*(H*W*S)*k^3*C"""
    return 2 * d.n * d.window_volume * d.c


def crossover_resolution(c: int, k: int) -> int:
    """Smallest token count N at which global attention costs more than rc"""
    if c < 1 or k < 1:
        raise ShapeError(f"C and k must be >= 1, got C={c}, k={k}")
    return k ** 3 + 1


SWEEP_COLUMNS = ("N", "C", "k", "conv", "selfattn", "rcblock")


def macs_sweep(ns: Iterable[int], cs: Iterable[int], ks: Iterable[int]) -> List[Dict[str, int]]:
    """
    Rows of the three operator costs over a grid of token counts

    A token count N is laid out as a 1 x 1 x N map; the formulas only depend
    on the product H*W*S.
    """
    cs, ks = list(cs), list(ks)
    rows = []
    for n in ns:
        for c in cs:
            for k in ks:
                d = OpDims(1, 1, n, c, k)
                rows.append(
                    {
                        "N": n,
                        "C": c,
                        "k": k,
                        "conv": macs_conv(d),
                        "selfattn": macs_selfattn(d),
                        "rcblock": macs_rcblock(d),
                    }
                )
    logger.debug(f"MACs sweep produced {len(rows)} rows")
    return rows


@dataclass
class LayerCost:
    """Cost row for one network layer"""

    layer: str
    kind: str
    out_dims: Sequence[int]
    table_macs: int
    beyond_macs: int = 0
    params: int = 0

    @property
    def total_macs(self) -> int:
        return self.table_macs + self.beyond_macs

    def to_dict(self) -> Dict[str, object]:
        return {
            "layer": self.layer,
            "kind": self.kind,
            "out_dims": list(self.out_dims),
            "table_macs": self.table_macs,
            "beyond_macs": self.beyond_macs,
            "total_macs": self.total_macs,
            "params": self.params,
        }


def network_macs(rows: Sequence[LayerCost], include_beyond: bool = False) -> int:
    """Sum of layer costs; an empty network costs 0"""
    return sum(r.total_macs if include_beyond else r.table_macs for r in rows)
