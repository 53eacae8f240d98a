"""
Neural Building Blocks

Parameter containers and forward functions for the patch embedder, the
positional encoding, the multi-head self-attention Transformer block, the
selective SSM scan and the bidirectional SSM block.

Design Decisions:
=================

1. Weights are plain dataclasses of Tensors:
   - Forward functions take (inputs, weights) and hold no state
   - named_parameters() walks fields in declaration order, so parameter
     names and ordering are stable across runs and checkpoint versions

2. Initialization:
   - Projections draw from U(-1/sqrt(fan_in), 1/sqrt(fan_in))
   - Output projections of residual branches are scaled by
     RESIDUAL_INIT_SCALE so every block starts close to an identity map
   - SSM state matrices start at A = -(1..d_state) per channel, D at 1 and
     the step-size bias at softplus^-1 of a log-uniform draw in [1e-3, 1e-1]
   - With rng=None every draw is replaced by zeros; shapes (and therefore
     parameter counts) are unchanged

3. Token tensors are batched: (batch, n, C). Single-sample helpers wrap the
   batched functions.
"""

import dataclasses
import math
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from pointabm.numeric import (
    ShapeError, Tensor, as_tensor, layer_norm, matmul, pad, parameter, softmax
)
from pointabm.scan import ScanDirection, selective_scan


RESIDUAL_INIT_SCALE = 0.02
DT_MIN = 1e-3
DT_MAX = 1e-1


def _uniform(rng: Optional[np.random.Generator], shape: Tuple[int, ...], bound: float) -> np.ndarray:
    if rng is None:
        return np.zeros(shape)
    return rng.uniform(-bound, bound, size=shape)


class ParameterGroup:
    """Mixin for weight dataclasses: recursive, ordered parameter access."""

    def named_parameters(self, prefix: str = '') -> Iterator[Tuple[str, Tensor]]:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            name = f'{prefix}{f.name}'
            if isinstance(value, Tensor):
                yield name, value
            elif isinstance(value, ParameterGroup):
                yield from value.named_parameters(f'{name}.')
            elif isinstance(value, list):
                for i, item in enumerate(value):
                    yield from item.named_parameters(f'{name}.{i}.')

    def parameters(self) -> List[Tensor]:
        return [p for _, p in self.named_parameters()]

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Replace parameter data by name; every name must match in shape."""
        for name, p in self.named_parameters():
            if name in arrays:
                value = np.asarray(arrays[name], dtype=np.float64)
                if value.shape != p.shape:
                    raise ShapeError(f'{name}: expected shape {p.shape}, got {value.shape}')
                p.data = value

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


@dataclass
class Linear(ParameterGroup):
    """Affine map x @ weight + bias, weight stored (in, out)."""
    weight: Tensor
    bias: Optional[Tensor] = None

    @classmethod
    def create(cls, fan_in: int, fan_out: int, rng: Optional[np.random.Generator],
               bias: bool = True, scale: float = 1.0) -> 'Linear':
        bound = scale / math.sqrt(fan_in)
        return cls(
            weight=parameter(_uniform(rng, (fan_in, fan_out), bound)),
            bias=parameter(np.zeros(fan_out)) if bias else None,
        )

    @property
    def fan_in(self) -> int:
        return self.weight.shape[0]

    @property
    def fan_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.fan_in:
            raise ShapeError(f'Linear expects last axis {self.fan_in}, got shape {x.shape}')
        out = matmul(x, self.weight)
        return out + self.bias if self.bias is not None else out


@dataclass
class LayerNormWeights(ParameterGroup):
    gain: Tensor
    bias: Tensor

    @classmethod
    def create(cls, width: int) -> 'LayerNormWeights':
        return cls(gain=parameter(np.ones(width)), bias=parameter(np.zeros(width)))

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.bias)


# Patch embedding and positional encoding

@dataclass
class EmbedderWeights(ParameterGroup):
    """Shared per-point MLP (3 -> h -> 2h), max pool, then 2h -> 4h -> C."""
    fc1: Linear
    fc2: Linear
    fc3: Linear
    fc4: Linear

    @classmethod
    def create(cls, hidden: int, width: int, rng: Optional[np.random.Generator]) -> 'EmbedderWeights':
        return cls(
            fc1=Linear.create(3, hidden, rng),
            fc2=Linear.create(hidden, 2 * hidden, rng),
            fc3=Linear.create(2 * hidden, 4 * hidden, rng),
            fc4=Linear.create(4 * hidden, width, rng),
        )


def embed_patches(patches: Tensor, weights: EmbedderWeights) -> Tensor:
    """Embed (..., s, 3) localized patches to (..., C) tokens."""
    patches = as_tensor(patches)
    if patches.ndim < 2 or patches.shape[-1] != 3:
        raise ShapeError(f'patches must end in (s, 3), got {patches.shape}')
    per_point = weights.fc2(weights.fc1(patches).relu())
    pooled = per_point.max(axis=-2)
    return weights.fc4(weights.fc3(pooled).relu())


def embed_patch(patch, weights: EmbedderWeights) -> Tensor:
    """One (s, 3) patch to a C-vector token."""
    return embed_patches(as_tensor(patch), weights)


@dataclass
class PosEncWeights(ParameterGroup):
    """Two-layer MLP on raw center coordinates, 3 -> hidden -> C."""
    fc1: Linear
    fc2: Linear

    @classmethod
    def create(cls, hidden: int, width: int, rng: Optional[np.random.Generator]) -> 'PosEncWeights':
        return cls(fc1=Linear.create(3, hidden, rng), fc2=Linear.create(hidden, width, rng))


def pos_encode(centers, weights: PosEncWeights) -> Tensor:
    """Learned encoding of (..., 3) centers; added to the tokens by the caller."""
    centers = as_tensor(centers)
    return weights.fc2(weights.fc1(centers).gelu())


# Attention

@dataclass
class AttentionWeights(ParameterGroup):
    """
    Weights of one Transformer block.

    w_q, w_k, w_v are (C, C); head i owns columns [i*d_k, (i+1)*d_k), i.e. the
    per-head C x d_k matrices concatenated along the output axis.
    """
    norm1: LayerNormWeights
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Linear
    norm2: LayerNormWeights
    ffn1: Linear
    ffn2: Linear
    heads: int = 1

    @classmethod
    def create(cls, width: int, heads: int, ffn_ratio: int,
               rng: Optional[np.random.Generator]) -> 'AttentionWeights':
        if width % heads:
            raise ShapeError(f'width {width} is not divisible by {heads} heads')
        bound = 1.0 / math.sqrt(width)
        return cls(
            norm1=LayerNormWeights.create(width),
            w_q=parameter(_uniform(rng, (width, width), bound)),
            w_k=parameter(_uniform(rng, (width, width), bound)),
            w_v=parameter(_uniform(rng, (width, width), bound)),
            w_o=Linear.create(width, width, rng, scale=RESIDUAL_INIT_SCALE),
            norm2=LayerNormWeights.create(width),
            ffn1=Linear.create(width, ffn_ratio * width, rng),
            ffn2=Linear.create(ffn_ratio * width, width, rng, scale=RESIDUAL_INIT_SCALE),
            heads=heads,
        )

    @property
    def width(self) -> int:
        return self.w_q.shape[0]

    @property
    def d_k(self) -> int:
        return self.width // self.heads


def attention_matrix(q: Tensor, k: Tensor) -> Tensor:
    """softmax(q k^T / sqrt(d_k)) over the last axis; q, k are (..., n, d_k)."""
    q, k = as_tensor(q), as_tensor(k)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f'q and k widths differ: {q.shape} vs {k.shape}')
    scores = matmul(q, k.swapaxes(-1, -2)) * (1.0 / math.sqrt(q.shape[-1]))
    return softmax(scores, axis=-1)


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention, (..., n, d_k) -> (..., n, d_k)."""
    return matmul(attention_matrix(q, k), as_tensor(v))


def multi_head_attention(x: Tensor, weights: AttentionWeights) -> Tensor:
    """Heads attend independently, are concatenated, then projected by W_O."""
    if x.shape[-1] != weights.width:
        raise ShapeError(f'tokens have width {x.shape[-1]}, block expects {weights.width}')
    q, k, v = matmul(x, weights.w_q), matmul(x, weights.w_k), matmul(x, weights.w_v)
    if weights.heads == 1:
        return weights.w_o(attention(q, k, v))

    *lead, n, width = x.shape
    h, d_k = weights.heads, weights.d_k

    def split(t: Tensor) -> Tensor:
        return t.reshape(*lead, n, h, d_k).swapaxes(-2, -3)

    heads_out = attention(split(q), split(k), split(v))
    merged = heads_out.swapaxes(-2, -3).reshape(*lead, n, width)
    return weights.w_o(merged)


def feed_forward(x: Tensor, weights: AttentionWeights) -> Tensor:
    return weights.ffn2(weights.ffn1(x).gelu())


def transformer_block(tokens: Tensor, weights: AttentionWeights, pre_norm: bool = True) -> Tensor:
    """
    x + MHSA(norm(x)), then + FFN(norm(.)).

    With pre_norm=False the sublayer outputs are added first and the sum is
    normalized ("post-norm").
    """
    tokens = as_tensor(tokens)
    if pre_norm:
        hidden = tokens + multi_head_attention(weights.norm1(tokens), weights)
        return hidden + feed_forward(weights.norm2(hidden), weights)
    hidden = weights.norm1(tokens + multi_head_attention(tokens, weights))
    return weights.norm2(hidden + feed_forward(hidden, weights))


# Selective SSM

@dataclass
class ScanDirectionParams(ParameterGroup):
    """Per-direction SSM parameters (A stored as a_log, A = -exp(a_log))."""
    conv_weight: Tensor      # (d_inner, conv_width), depthwise
    conv_bias: Tensor        # (d_inner,)
    x_proj: Linear           # d_inner -> dt_rank + 2 * d_state, no bias
    dt_proj: Linear          # dt_rank -> d_inner
    a_log: Tensor            # (d_inner, d_state)
    d_skip: Tensor           # (d_inner,)

    @classmethod
    def create(cls, d_inner: int, d_state: int, dt_rank: int, conv_width: int,
               rng: Optional[np.random.Generator]) -> 'ScanDirectionParams':
        conv_bound = 1.0 / math.sqrt(conv_width)
        dt_proj = Linear.create(dt_rank, d_inner, rng)
        if rng is not None:
            dt = np.exp(rng.uniform(math.log(DT_MIN), math.log(DT_MAX), size=d_inner))
            dt_proj.bias.data = dt + np.log(-np.expm1(-dt))
        return cls(
            conv_weight=parameter(_uniform(rng, (d_inner, conv_width), conv_bound)),
            conv_bias=parameter(_uniform(rng, (d_inner,), conv_bound)),
            x_proj=Linear.create(d_inner, dt_rank + 2 * d_state, rng, bias=False),
            dt_proj=dt_proj,
            a_log=parameter(np.tile(np.log(np.arange(1, d_state + 1, dtype=np.float64)), (d_inner, 1))),
            d_skip=parameter(np.ones(d_inner)),
        )

    @property
    def d_inner(self) -> int:
        return self.a_log.shape[0]

    @property
    def d_state(self) -> int:
        return self.a_log.shape[1]

    @property
    def dt_rank(self) -> int:
        return self.dt_proj.fan_in

    def state_matrix(self) -> Tensor:
        return -(self.a_log.exp())


@dataclass
class SsmParams(ParameterGroup):
    """
    One bi-SSM block: shared input, gate and output projections, and
    disjoint forward/backward scan parameters. `backward` is None for a
    forward-only block.
    """
    norm: LayerNormWeights
    in_proj: Linear
    gate_proj: Linear
    forward: ScanDirectionParams
    backward: Optional[ScanDirectionParams]
    out_proj: Linear

    @classmethod
    def create(cls, width: int, d_state: int, expand: int, conv_width: int, dt_rank: int,
               rng: Optional[np.random.Generator], bidirectional: bool = True) -> 'SsmParams':
        d_inner = expand * width
        return cls(
            norm=LayerNormWeights.create(width),
            in_proj=Linear.create(width, d_inner, rng, bias=False),
            gate_proj=Linear.create(width, d_inner, rng, bias=False),
            forward=ScanDirectionParams.create(d_inner, d_state, dt_rank, conv_width, rng),
            backward=(ScanDirectionParams.create(d_inner, d_state, dt_rank, conv_width, rng)
                      if bidirectional else None),
            out_proj=Linear.create(d_inner, width, rng, bias=False, scale=RESIDUAL_INIT_SCALE),
        )

    @property
    def bidirectional(self) -> bool:
        return self.backward is not None


def causal_conv1d(u: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Depthwise causal convolution along the sequence axis of (b, L, d)."""
    k = weight.shape[1]
    length = u.shape[1]
    padded = pad(u, ((0, 0), (k - 1, 0), (0, 0)))
    out = bias
    for j in range(k):
        out = out + padded[:, j:j + length, :] * weight[:, j]
    return out


def ssm_scan(u: Tensor, params: ScanDirectionParams,
             direction: ScanDirection = ScanDirection.FORWARD) -> Tensor:
    """
    Selective SSM over (b, L, d_inner): causal conv, SiLU, input-dependent
    delta/B/C, then the recurrence. The backward direction runs the same
    code on the reversed sequence and reverses the result.

    Raises:
        ShapeError: if L = 0 or widths disagree with params
    """
    u = as_tensor(u)
    if u.ndim != 3 or u.shape[1] == 0:
        raise ShapeError(f'ssm_scan needs (batch, L >= 1, d_inner) input, got {u.shape}')
    if u.shape[2] != params.d_inner:
        raise ShapeError(f'ssm_scan input width {u.shape[2]} != d_inner {params.d_inner}')
    direction = ScanDirection(direction)
    if direction is ScanDirection.BACKWARD:
        return ssm_scan(u.flip(1), params, ScanDirection.FORWARD).flip(1)

    x = causal_conv1d(u, params.conv_weight, params.conv_bias).silu()
    projected = params.x_proj(x)
    r, n = params.dt_rank, params.d_state
    delta = params.dt_proj(projected[..., :r]).softplus()
    B = projected[..., r:r + n]
    C = projected[..., r + n:]
    return selective_scan(x, delta, params.state_matrix(), B, C, params.d_skip)


def bidirectional_scan(x: Tensor, params: SsmParams) -> Tensor:
    """SSM_forward(x) + SSM_backward(x), or the forward scan alone."""
    y = ssm_scan(x, params.forward, ScanDirection.FORWARD)
    if params.backward is not None:
        y = y + ssm_scan(x, params.backward, ScanDirection.BACKWARD)
    return y


def bi_ssm_block(tokens: Tensor, params: SsmParams) -> Tensor:
    """T_l = out_proj(SiLU(scan_f(x) + scan_b(x)) * SiLU(z)) + T_{l-1}."""
    tokens = as_tensor(tokens)
    if tokens.ndim != 3:
        raise ShapeError(f'bi_ssm_block needs (batch, n, C) tokens, got {tokens.shape}')
    normed = params.norm(tokens)
    x = params.in_proj(normed)
    z = params.gate_proj(normed)
    pre = bidirectional_scan(x, params)
    return params.out_proj(pre.silu() * z.silu()) + tokens
