"""
Numeric operators for spatial-spectral feature maps

Feature maps use the layout [H, W, S, C] (channels innermost); every operator
also accepts a leading batch axis [B, H, W, S, C]. Each operator computes its
forward pass in numpy and registers an analytic backward rule on the active
tape.
"""

import itertools
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np

from hsi_rcnet.core.tensor import Tensor, record_op
from hsi_rcnet.errors import LabelRangeError, NumericError, ShapeError, TapeError

logger = logging.getLogger(__name__)

Triple = Tuple[int, int, int]

# Spatial-spectral axes of a batched feature map
_AXES = (1, 2, 3)


class Padding(Enum):
    SAME = "same"
    VALID = "valid"


class Weighting(Enum):
    """How relational convolution turns the query+key sum into weights"""

    CHANNEL = "channel"  # one softmax per channel
    SCALAR = "scalar"  # exponent summed over the channels of a head


def mirror_indices(size: int, before: int, after: int) -> np.ndarray:
    """Source index for every position of a mirror-padded axis"""
    return np.pad(np.arange(size), (before, after), mode="reflect")


@dataclass(frozen=True)
class AxisPlan:
    """Padding and output arithmetic for one axis"""

    size: int
    window: int
    stride: int
    out: int
    before: int
    after: int

    @property
    def padded(self) -> int:
        return self.size + self.before + self.after

    def offset(self, d: int) -> slice:
        """Padded-input slice feeding window offset ``d`` of every output"""
        return slice(d, d + self.stride * (self.out - 1) + 1, self.stride)


def plan_axis(size: int, window: int, stride: int, padding: Padding) -> AxisPlan:
    if stride < 1:
        raise ShapeError(f"stride must be >= 1, got {stride}")
    if window < 1:
        raise ShapeError(f"window must be >= 1, got {window}")
    if padding is Padding.SAME:
        out = -(-size // stride)
        total = max((out - 1) * stride + window - size, 0)
        before = total // 2
        return AxisPlan(size, window, stride, out, before, total - before)
    if window > size:
        raise ShapeError(f"kernel extent {window} larger than input extent {size}")
    return AxisPlan(size, window, stride, (size - window) // stride + 1, 0, 0)


def output_extents(
    dims: Sequence[int], window: Triple, stride: Triple, padding: Padding
) -> Triple:
    """Output (H, W, S) of a windowed operator"""
    plans = [plan_axis(d, w, s, padding) for d, w, s in zip(dims, window, stride)]
    return (plans[0].out, plans[1].out, plans[2].out)


def _plans(x: np.ndarray, window: Triple, stride: Triple, padding: Padding) -> List[AxisPlan]:
    return [plan_axis(x.shape[a], window[i], stride[i], padding) for i, a in enumerate(_AXES)]


def _pad(x: np.ndarray, plans: Sequence[AxisPlan]) -> np.ndarray:
    for plan, axis in zip(plans, _AXES):
        if plan.before or plan.after:
            x = np.take(x, mirror_indices(plan.size, plan.before, plan.after), axis=axis)
    return x


def _unpad(g: np.ndarray, plans: Sequence[AxisPlan]) -> np.ndarray:
    """Fold a padded-input gradient back onto the source positions"""
    for plan, axis in zip(plans, _AXES):
        if not (plan.before or plan.after):
            continue
        index = mirror_indices(plan.size, plan.before, plan.after)
        g = np.moveaxis(g, axis, 0)
        folded = g[plan.before : plan.before + plan.size].copy()
        for p in itertools.chain(range(plan.before), range(plan.before + plan.size, plan.padded)):
            folded[index[p]] += g[p]
        g = np.moveaxis(folded, 0, axis)
    return g


def _window_slices(plans: Sequence[AxisPlan], offset: Triple) -> Tuple[slice, ...]:
    return (slice(None),) + tuple(p.offset(d) for p, d in zip(plans, offset))


def _window_offsets(window: Triple) -> List[Triple]:
    return list(itertools.product(range(window[0]), range(window[1]), range(window[2])))


def _batched(x: np.ndarray, rank: int = 5) -> Tuple[np.ndarray, bool]:
    if x.ndim == rank - 1:
        return x[None], True
    if x.ndim == rank:
        return x, False
    raise ShapeError(f"expected a rank {rank - 1} or {rank} feature map, got shape {list(x.shape)}")


def _triple(value, name: str) -> Triple:
    if isinstance(value, int):
        return (value, value, value)
    value = tuple(int(v) for v in value)
    if len(value) != 3:
        raise ShapeError(f"{name} needs three extents, got {list(value)}")
    return value  # type: ignore[return-value]


# ---------------------------------------------------------------------------
# Depthwise and pointwise convolution
# ---------------------------------------------------------------------------


@dataclass
class Conv3dParams:
    """
    Depthwise kernel [k_h, k_w, k_s, C * multiplier] with optional bias

    Output channel ``c * multiplier + j`` reads input channel ``c``.
    """

    kernel: Tensor
    stride: Triple = (1, 1, 1)
    padding: Padding = Padding.SAME
    bias: Optional[Tensor] = None
    multiplier: int = 1

    def __post_init__(self):
        self.stride = _triple(self.stride, "stride")
        self.padding = Padding(self.padding)
        if any(s < 1 for s in self.stride):
            raise ShapeError(f"strides must be >= 1, got {list(self.stride)}")
        if len(self.kernel.shape) != 4:
            raise ShapeError(f"depthwise kernel must be [k_h, k_w, k_s, C], got {list(self.kernel.shape)}")

    @property
    def window(self) -> Triple:
        return self.kernel.shape[0], self.kernel.shape[1], self.kernel.shape[2]


def conv3d_depthwise(input: Tensor, p: Conv3dParams) -> Tensor:
    """Per-channel spatial-spectral aggregation with a static kernel"""
    x, unbatched = _batched(input.data)
    kernel = p.kernel.data
    channels = x.shape[-1]
    if kernel.shape[-1] != channels * p.multiplier:
        raise ShapeError(
            f"kernel has {kernel.shape[-1]} channels, input has {channels} "
            f"(multiplier {p.multiplier})"
        )
    plans = _plans(x, p.window, p.stride, p.padding)
    xp = _pad(x, plans)
    if p.multiplier > 1:
        xp = np.repeat(xp, p.multiplier, axis=-1)

    offsets = _window_offsets(p.window)
    out_shape = (x.shape[0], plans[0].out, plans[1].out, plans[2].out, kernel.shape[-1])
    out = np.zeros(out_shape, dtype=np.result_type(x, kernel))
    for off in offsets:
        out += xp[_window_slices(plans, off)] * kernel[off]
    if p.bias is not None:
        out = out + p.bias.data

    inputs = [input, p.kernel] + ([p.bias] if p.bias is not None else [])

    def backward(g: np.ndarray):
        g = g[None] if unbatched else g
        gxp = np.zeros(xp.shape, dtype=g.dtype)
        gk = np.zeros(kernel.shape, dtype=g.dtype)
        for off in offsets:
            sl = _window_slices(plans, off)
            gxp[sl] += g * kernel[off]
            gk[off] = (g * xp[sl]).sum(axis=(0, 1, 2, 3))
        if p.multiplier > 1:
            gxp = gxp.reshape(gxp.shape[:-1] + (channels, p.multiplier)).sum(axis=-1)
        gx = _unpad(gxp, plans)
        grads = [gx[0] if unbatched else gx, gk]
        if p.bias is not None:
            grads.append(g.sum(axis=(0, 1, 2, 3)))
        return grads

    return record_op("conv3d_depthwise", inputs, out[0] if unbatched else out, backward)


def conv3d_pointwise(input: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Per-location affine channel map: x @ W + b"""
    x = input.data
    w = weights.data
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"pointwise weights {list(w.shape)} do not match {x.shape[-1]} input channels")
    if bias is not None and bias.shape != (w.shape[1],):
        raise ShapeError(f"bias shape {list(bias.shape)} does not match {w.shape[1]} output channels")
    out = x @ w
    if bias is not None:
        out = out + bias.data
    inputs = [input, weights] + ([bias] if bias is not None else [])

    def backward(g: np.ndarray):
        g2 = g.reshape(-1, w.shape[1])
        grads = [g @ w.T, x.reshape(-1, w.shape[0]).T @ g2]
        if bias is not None:
            grads.append(g2.sum(axis=0))
        return grads

    return record_op("conv3d_pointwise", inputs, out, backward)


# ---------------------------------------------------------------------------
# Global self-attention (reference operator)
# ---------------------------------------------------------------------------


@dataclass
class AttnParams:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    d_k: Optional[int] = None

    def __post_init__(self):
        channels = self.w_q.shape[0]
        if self.d_k is None:
            self.d_k = channels
        if self.d_k < 1:
            raise ShapeError(f"d_k must be >= 1, got {self.d_k}")
        for w in (self.w_q, self.w_k, self.w_v):
            if w.shape != (channels, channels):
                raise ShapeError(f"attention projections must be [C, C], got {list(w.shape)}")


def self_attention_global(input: Tensor, p: AttnParams) -> Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over all H*W*S tokens"""
    x5, unbatched = _batched(input.data)
    batch, channels = x5.shape[0], x5.shape[-1]
    if p.w_q.shape[0] != channels:
        raise ShapeError(f"projections expect {p.w_q.shape[0]} channels, input has {channels}")
    x = x5.reshape(batch, -1, channels)
    wq, wk, wv = p.w_q.data, p.w_k.data, p.w_v.data
    scale = 1.0 / math.sqrt(p.d_k)

    q, k, v = x @ wq, x @ wk, x @ wv
    scores = (q @ np.swapaxes(k, 1, 2)) * scale
    if not np.all(np.isfinite(scores)):
        raise NumericError("non-finite attention scores")
    scores = scores - scores.max(axis=-1, keepdims=True)
    probs = np.exp(scores)
    probs /= probs.sum(axis=-1, keepdims=True)
    out = (probs @ v).reshape(x5.shape)

    def backward(g: np.ndarray):
        g = g.reshape(batch, -1, channels)
        dv = np.swapaxes(probs, 1, 2) @ g
        dprobs = g @ np.swapaxes(v, 1, 2)
        dscores = probs * (dprobs - (dprobs * probs).sum(axis=-1, keepdims=True))
        dq = (dscores @ k) * scale
        dk = (np.swapaxes(dscores, 1, 2) @ q) * scale
        dx = dq @ wq.T + dk @ wk.T + dv @ wv.T
        x2 = x.reshape(-1, channels)
        grads = [
            dx.reshape(input.shape),
            x2.T @ dq.reshape(-1, channels),
            x2.T @ dk.reshape(-1, channels),
            x2.T @ dv.reshape(-1, channels),
        ]
        return grads

    return record_op(
        "self_attention_global",
        (input, p.w_q, p.w_k, p.w_v),
        out[0] if unbatched else out,
        backward,
    )


# ---------------------------------------------------------------------------
# 3D relational convolution
# ---------------------------------------------------------------------------


@dataclass
class RelConvParams:
    """
    Window geometry and query/key/value projections of a relational convolution

    Projections set to None use the raw features.
    """

    window: Triple = (3, 3, 3)
    w_q: Optional[Tensor] = None
    w_k: Optional[Tensor] = None
    w_v: Optional[Tensor] = None
    stride: Triple = (1, 1, 1)
    padding: Padding = Padding.SAME
    weighting: Weighting = Weighting.CHANNEL
    heads: int = 1

    def __post_init__(self):
        self.window = _triple(self.window, "window")
        self.stride = _triple(self.stride, "stride")
        self.padding = Padding(self.padding)
        self.weighting = Weighting(self.weighting)
        if any(w % 2 == 0 or w < 1 for w in self.window):
            raise ShapeError(f"relational window extents must be odd, got {list(self.window)}")
        if any(s < 1 for s in self.stride):
            raise ShapeError(f"strides must be >= 1, got {list(self.stride)}")
        if self.heads < 1:
            raise ShapeError(f"heads must be >= 1, got {self.heads}")
        for w in self.projections:
            if w is not None and (len(w.shape) != 2 or w.shape[0] != w.shape[1]):
                raise ShapeError(f"projection matrices must be square, got {list(w.shape)}")

    @property
    def projections(self) -> Tuple[Optional[Tensor], Optional[Tensor], Optional[Tensor]]:
        return self.w_q, self.w_k, self.w_v

    def groups(self, channels: int) -> int:
        """Number of independent softmax groups over the channel axis"""
        if self.weighting is Weighting.CHANNEL:
            return channels
        if channels % self.heads:
            raise ShapeError(f"{channels} channels cannot be split into {self.heads} heads")
        return self.heads


@dataclass
class RelConvContext:
    """Values retained by the forward pass for the backward pass"""

    x: np.ndarray
    projections: Tuple[Optional[np.ndarray], ...]
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    plans: List[AxisPlan]
    offsets: List[Triple]
    groups: int
    weights: np.ndarray  # [n_window, B, H', W', S', G]
    values: np.ndarray  # [n_window, B, H', W', S', C]
    unbatched: bool
    padded_shape: Tuple[int, ...] = field(default=())


@dataclass
class RelConvGrads:
    input: np.ndarray
    w_q: Optional[np.ndarray]
    w_k: Optional[np.ndarray]
    w_v: Optional[np.ndarray]


def _project(x: np.ndarray, w: Optional[Tensor]) -> np.ndarray:
    return x if w is None else x @ w.data


def relconv3d_forward(x_in: np.ndarray, p: RelConvParams) -> Tuple[np.ndarray, RelConvContext]:
    """
    Forward pass of the relational convolution on raw arrays

    For every output location the centre feature supplies the query, every
    window element supplies a key and a value, and the output is the
    softmax(-(q + k))-weighted sum of values, normalised over the window.
    """
    x, unbatched = _batched(x_in)
    channels = x.shape[-1]
    for w in p.projections:
        if w is not None and w.shape[0] != channels:
            raise ShapeError(f"projections expect {w.shape[0]} channels, input has {channels}")
    groups = p.groups(channels)
    per_group = channels // groups

    q, k, v = (_project(x, w) for w in p.projections)
    plans = _plans(x, p.window, p.stride, p.padding)
    qp, kp, vp = _pad(q, plans), _pad(k, plans), _pad(v, plans)

    centre = tuple(w // 2 for w in p.window)
    q_centre = qp[_window_slices(plans, centre)]
    offsets = _window_offsets(p.window)
    keys = np.stack([kp[_window_slices(plans, off)] for off in offsets])
    values = np.stack([vp[_window_slices(plans, off)] for off in offsets])

    summed = q_centre[None] + keys
    logits = -summed.reshape(summed.shape[:-1] + (groups, per_group)).sum(axis=-1)
    logits = logits - logits.max(axis=0, keepdims=True)
    weights = np.exp(logits)
    weights /= weights.sum(axis=0, keepdims=True)

    out = (np.repeat(weights, per_group, axis=-1) * values).sum(axis=0)
    ctx = RelConvContext(
        x=x,
        projections=tuple(None if w is None else w.data for w in p.projections),
        q=q,
        k=k,
        v=v,
        plans=plans,
        offsets=offsets,
        groups=groups,
        weights=weights,
        values=values,
        unbatched=unbatched,
        padded_shape=qp.shape,
    )
    return (out[0] if unbatched else out), ctx


def relconv3d_backward(ctx: Optional[RelConvContext], upstream: np.ndarray) -> RelConvGrads:
    """Gradients of the relational convolution for its input and projections"""
    if ctx is None:
        raise TapeError("relconv3d backward called without a forward context")
    g = upstream[None] if ctx.unbatched else upstream
    channels = ctx.x.shape[-1]
    per_group = channels // ctx.groups
    weights = ctx.weights
    expanded = np.repeat(weights, per_group, axis=-1)

    dvalues = g[None] * expanded
    dweights = (g[None] * ctx.values)
    dweights = dweights.reshape(dweights.shape[:-1] + (ctx.groups, per_group)).sum(axis=-1)
    dlogits = weights * (dweights - (weights * dweights).sum(axis=0, keepdims=True))
    # logit = -sum over the group of (q_c + k_c)
    dsummed = -np.repeat(dlogits, per_group, axis=-1)

    dqp = np.zeros(ctx.padded_shape, dtype=g.dtype)
    dkp = np.zeros(ctx.padded_shape, dtype=g.dtype)
    dvp = np.zeros(ctx.padded_shape, dtype=g.dtype)
    for i, off in enumerate(ctx.offsets):
        sl = _window_slices(ctx.plans, off)
        dkp[sl] += dsummed[i]
        dvp[sl] += dvalues[i]
    centre = tuple(w.window // 2 for w in ctx.plans)
    dqp[_window_slices(ctx.plans, centre)] += dsummed.sum(axis=0)

    dq, dk, dv = (_unpad(d, ctx.plans) for d in (dqp, dkp, dvp))
    x2 = ctx.x.reshape(-1, channels)
    dx = np.zeros_like(dq)
    proj_grads: List[Optional[np.ndarray]] = []
    for d, w in zip((dq, dk, dv), ctx.projections):
        if w is None:
            dx += d
            proj_grads.append(None)
        else:
            dx += d @ w.T
            proj_grads.append(x2.T @ d.reshape(-1, channels))
    return RelConvGrads(dx[0] if ctx.unbatched else dx, *proj_grads)


def relconv3d(input: Tensor, p: RelConvParams) -> Tensor:
    """Relational convolution of a [H, W, S, C] or [B, H, W, S, C] feature map"""
    out, ctx = relconv3d_forward(input.data, p)
    params = [w for w in p.projections if w is not None]

    def backward(g: np.ndarray):
        grads = relconv3d_backward(ctx, g)
        return [grads.input] + [gw for gw in (grads.w_q, grads.w_k, grads.w_v) if gw is not None]

    return record_op("relconv3d", [input] + params, out, backward)


def relconv3d_weights(input: Tensor, p: RelConvParams) -> np.ndarray:
    """
    Dynamic window weights, shaped [..., H', W', S', G, k_h, k_w, k_s]

    G is the number of softmax groups (C in channel mode, heads in scalar mode).
    """
    _, ctx = relconv3d_forward(input.data, p)
    weights = np.moveaxis(ctx.weights, 0, -1)
    weights = weights.reshape(weights.shape[:-1] + p.window)
    return weights[0] if ctx.unbatched else weights


# ---------------------------------------------------------------------------
# Normalisation, activation, pooling, loss
# ---------------------------------------------------------------------------


def channel_norm(input: Tensor, scale: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Standardise every voxel across its channels, then scale/shift per channel

    Statistics are taken over C at each (h, w, s) position, so the level of a
    sample's spectrum relative to other samples survives the normalisation.
    """
    x = input.data
    channels = x.shape[-1]
    if x.ndim not in (4, 5):
        raise ShapeError(f"channel_norm expects [H,W,S,C] or [B,H,W,S,C], got {x.shape}")
    if scale.shape != (channels,) or shift.shape != (channels,):
        raise ShapeError(f"norm parameters must be [{channels}]")
    mean = x.mean(axis=-1, keepdims=True)
    centred = x - mean
    inv_std = 1.0 / np.sqrt((centred ** 2).mean(axis=-1, keepdims=True) + eps)
    normed = centred * inv_std
    out = normed * scale.data + shift.data
    reduce_axes = tuple(range(x.ndim - 1))

    def backward(g: np.ndarray):
        dnormed = g * scale.data
        dx = inv_std * (
            dnormed
            - dnormed.mean(axis=-1, keepdims=True)
            - normed * (dnormed * normed).mean(axis=-1, keepdims=True)
        )
        return [dx, (g * normed).sum(axis=reduce_axes), g.sum(axis=reduce_axes)]

    return record_op("channel_norm", (input, scale, shift), out, backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(input: Tensor) -> Tensor:
    """Smooth ramp activation, tanh form"""
    x = input.data
    inner = _GELU_C * (x + 0.044715 * x ** 3)
    t = np.tanh(inner)
    out = 0.5 * x * (1.0 + t)

    def backward(g: np.ndarray):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * x ** 2)
        return [g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t ** 2) * dinner)]

    return record_op("gelu", (input,), out, backward)


def global_avg_pool(input: Tensor) -> Tensor:
    """Mean over H*W*S per channel: [H,W,S,C] -> [C], [B,H,W,S,C] -> [B,C]"""
    x, unbatched = _batched(input.data)
    extent = x.shape[1] * x.shape[2] * x.shape[3]
    out = x.mean(axis=_AXES)

    def backward(g: np.ndarray):
        g = g[None] if unbatched else g
        gx = np.broadcast_to(g[:, None, None, None, :] / extent, x.shape).copy()
        return [gx[0] if unbatched else gx]

    return record_op("global_avg_pool", (input,), out[0] if unbatched else out, backward)


def dense(input: Tensor, weights: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Classifier layer on pooled vectors [B, C] -> [B, K]"""
    return conv3d_pointwise(input, weights, bias)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """
    Mean negative log-softmax of the true class

    Args:
        logits: [B, K]
        labels: [B] class ids in 1..K

    Returns:
        Scalar loss tensor
    """
    z = logits.data
    if z.ndim != 2:
        raise ShapeError(f"logits must be [B, K], got {list(z.shape)}")
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    batch, classes = z.shape
    if labels.shape[0] != batch:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {batch}")
    if labels.size and (labels.min() < 1 or labels.max() > classes):
        raise LabelRangeError(f"labels must lie in 1..{classes}")
    rows = np.arange(batch)
    target = labels - 1
    shifted = z - z.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1))
    loss = (log_norm - shifted[rows, target]).mean()

    def backward(g: np.ndarray):
        probs = np.exp(shifted - log_norm[:, None])
        probs[rows, target] -= 1.0
        return [probs * (g / batch)]

    return record_op("softmax_cross_entropy", (logits,), np.asarray(loss, dtype=z.dtype), backward)
