"""Pooling functions g mapping frame sequences to fixed-dimensional AWEs.

Two pooling routes:

* mean_pool: component-wise average over frames.
* A trainable pooler: per-frame LayerNorm, a strided 1D convolution,
  learned absolute position embeddings, one pre-norm transformer encoder
  layer (multi-head self-attention + GELU feed-forward, both residual),
  and a per-dimension max over time.

The backward pass is derived by hand for exactly this architecture; there
is no general autodiff here. Forward and backward run batched over
segments of equal length (B x T x D); the single-segment entry points wrap
a batch of one. All computation happens in the dtype of the parameters,
float32 by default, float64 for gradient verification.

Parameter serialization order (checkpoints and pack()):
    ln_in gain, ln_in bias,
    conv weight (H x D x K), conv bias,
    position embeddings (max_positions x H),
    ln1 gain, ln1 bias,
    Wq, bq, Wk, bk, Wv, bv, Wo, bo,
    ln2 gain, ln2 bias,
    ff W1 (H x 4H), ff b1, ff W2 (4H x H), ff b2
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import erf

POOLER_MAGIC = b"AWP1"
LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def mean_pool(frames: np.ndarray) -> np.ndarray:
    """Arithmetic mean over frames; output dimension equals the input D."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise ValueError(f"cannot mean-pool empty or non-2D segment, shape {frames.shape}")
    return frames.mean(axis=0, dtype=np.float64).astype(np.float32)


@dataclass(frozen=True)
class PoolerConfig:
    input_dim: int
    hidden_dim: int = 256
    conv_kernel: int = 4
    conv_stride: int = 2
    n_heads: int = 4
    max_positions: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.hidden_dim % self.n_heads != 0:
            raise ValueError(
                f"head divisibility: hidden_dim {self.hidden_dim} not divisible "
                f"by n_heads {self.n_heads}"
            )
        if self.conv_kernel < 1 or self.conv_stride < 1:
            raise ValueError("conv_kernel and conv_stride must be >= 1")
        if self.input_dim < 1 or self.max_positions < 1:
            raise ValueError("input_dim and max_positions must be >= 1")

    def conv_out_len(self, n_frames: int) -> int:
        return (n_frames - self.conv_kernel) // self.conv_stride + 1


@dataclass
class PoolerParams:
    """All trainable weights. Gradients reuse this same structure."""

    config: PoolerConfig
    ln_in_g: np.ndarray
    ln_in_b: np.ndarray
    conv_w: np.ndarray  # H x D x K
    conv_b: np.ndarray
    pos: np.ndarray  # max_positions x H
    ln1_g: np.ndarray
    ln1_b: np.ndarray
    wq: np.ndarray
    bq: np.ndarray
    wk: np.ndarray
    bk: np.ndarray
    wv: np.ndarray
    bv: np.ndarray
    wo: np.ndarray
    bo: np.ndarray
    ln2_g: np.ndarray
    ln2_b: np.ndarray
    ff_w1: np.ndarray  # H x 4H
    ff_b1: np.ndarray
    ff_w2: np.ndarray  # 4H x H
    ff_b2: np.ndarray

    _ARRAY_FIELDS = (
        "ln_in_g", "ln_in_b", "conv_w", "conv_b", "pos",
        "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo",
        "ln2_g", "ln2_b", "ff_w1", "ff_b1", "ff_w2", "ff_b2",
    )

    @property
    def dtype(self):
        return self.ln_in_g.dtype

    def arrays(self) -> list[np.ndarray]:
        return [getattr(self, name) for name in self._ARRAY_FIELDS]

    def astype(self, dtype) -> "PoolerParams":
        return PoolerParams(self.config, *[a.astype(dtype) for a in self.arrays()])

    def pack(self) -> np.ndarray:
        """Flatten all parameters into one vector in serialization order."""
        return np.concatenate([a.ravel() for a in self.arrays()])

    @classmethod
    def unpack(cls, config: PoolerConfig, vector: np.ndarray) -> "PoolerParams":
        shapes = _param_shapes(config)
        out, offset = [], 0
        for shape in shapes:
            size = int(np.prod(shape))
            out.append(vector[offset : offset + size].reshape(shape))
            offset += size
        if offset != vector.size:
            raise ValueError(
                f"dimension mismatch: checkpoint holds {vector.size} values, "
                f"config expects {offset}"
            )
        return cls(config, *out)


def _param_shapes(cfg: PoolerConfig) -> list[tuple]:
    d, h, k, p = cfg.input_dim, cfg.hidden_dim, cfg.conv_kernel, cfg.max_positions
    return [
        (d,), (d,),
        (h, d, k), (h,),
        (p, h),
        (h,), (h,),
        (h, h), (h,), (h, h), (h,), (h, h), (h,), (h, h), (h,),
        (h,), (h,),
        (h, 4 * h), (4 * h,), (4 * h, h), (h,),
    ]


def n_params(cfg: PoolerConfig) -> int:
    return sum(int(np.prod(s)) for s in _param_shapes(cfg))


def init_pooler(config: PoolerConfig) -> PoolerParams:
    """Seeded initialization: Xavier-uniform weights, zero biases, unit
    layer-norm gains, N(0, 0.02^2) position embeddings."""
    rng = np.random.default_rng(config.seed)
    d, h, k = config.input_dim, config.hidden_dim, config.conv_kernel

    def xavier(shape, fan_in, fan_out):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, size=shape).astype(np.float32)

    conv_w = xavier((h, d, k), fan_in=d * k, fan_out=h * k)
    pos = (rng.standard_normal((config.max_positions, h)) * 0.02).astype(np.float32)
    wq = xavier((h, h), h, h)
    wk = xavier((h, h), h, h)
    wv = xavier((h, h), h, h)
    wo = xavier((h, h), h, h)
    ff_w1 = xavier((h, 4 * h), h, 4 * h)
    ff_w2 = xavier((4 * h, h), 4 * h, h)
    zeros = lambda *shape: np.zeros(shape, dtype=np.float32)
    ones = lambda *shape: np.ones(shape, dtype=np.float32)
    return PoolerParams(
        config,
        ones(d), zeros(d),
        conv_w, zeros(h),
        pos,
        ones(h), zeros(h),
        wq, zeros(h), wk, zeros(h), wv, zeros(h), wo, zeros(h),
        ones(h), zeros(h),
        ff_w1, zeros(4 * h), ff_w2, zeros(h),
    )


def zeros_like_params(params: PoolerParams) -> PoolerParams:
    return PoolerParams(params.config, *[np.zeros_like(a) for a in params.arrays()])


@dataclass
class ForwardTape:
    """Intermediates of one batched forward pass, consumed by the backward."""

    params: PoolerParams
    x_hat0: np.ndarray
    inv0: np.ndarray
    out0: np.ndarray
    x2: np.ndarray
    xhat1: np.ndarray
    inv1: np.ndarray
    h1: np.ndarray
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    attn_p: np.ndarray
    ctx: np.ndarray
    a: np.ndarray
    xhat2: np.ndarray
    inv2: np.ndarray
    h2: np.ndarray
    f1: np.ndarray
    f2: np.ndarray
    gelu_cdf: np.ndarray
    argmax: np.ndarray

    @property
    def batch_size(self) -> int:
        return self.x2.shape[0]


def _layernorm(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return xhat * gain + bias, xhat, inv


def _layernorm_backward(dy, xhat, inv, gain):
    dgain = (dy * xhat).reshape(-1, dy.shape[-1]).sum(axis=0)
    dbias = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


def _gelu(x):
    """Exact erf GELU; returns (value, gaussian cdf term) so the backward
    can reuse the erf evaluation."""
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    return x * cdf, cdf


def _gelu_grad(x, cdf):
    return cdf + x * np.exp(-0.5 * x * x) * _INV_SQRT2PI


def _softmax(x):
    shifted = x - x.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _conv_patches(x: np.ndarray, kernel: int, stride: int) -> np.ndarray:
    t_out = (x.shape[1] - kernel) // stride + 1
    idx = np.arange(t_out)[:, None] * stride + np.arange(kernel)[None, :]
    return x[:, idx, :]  # B x T' x K x D


def _split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    b, t, h = x.shape
    return x.reshape(b, t, n_heads, h // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, nh, t, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, nh * dh)


def pooler_forward_batch(params: PoolerParams, x: np.ndarray):
    """Forward over a batch of equal-length segments (B x T x D).

    Returns (awes B x H, ForwardTape).
    """
    cfg = params.config
    x = np.asarray(x, dtype=params.dtype)
    if x.ndim != 3 or x.shape[2] != cfg.input_dim:
        raise ValueError(f"expected B x T x {cfg.input_dim} input, got shape {x.shape}")
    n_frames = x.shape[1]
    if n_frames < cfg.conv_kernel:
        raise ValueError(
            f"segment shorter than kernel: {n_frames} frames < kernel {cfg.conv_kernel}"
        )
    t_out = cfg.conv_out_len(n_frames)
    if t_out > cfg.max_positions:
        raise ValueError(
            f"overlong segment: conv output {t_out} exceeds max_positions {cfg.max_positions}"
        )

    out0, x_hat0, inv0 = _layernorm(x, params.ln_in_g, params.ln_in_b)

    patches = _conv_patches(out0, cfg.conv_kernel, cfg.conv_stride)
    b = x.shape[0]
    # (B*T', K*D) @ (K*D, H): flattened-window matmul instead of einsum
    w_kd_h = params.conv_w.transpose(2, 1, 0).reshape(-1, cfg.hidden_dim)
    conv = (patches.reshape(b * t_out, -1) @ w_kd_h).reshape(b, t_out, cfg.hidden_dim)
    conv += params.conv_b
    x2 = conv + params.pos[:t_out]

    h1, xhat1, inv1 = _layernorm(x2, params.ln1_g, params.ln1_b)
    q = _split_heads(h1 @ params.wq + params.bq, cfg.n_heads)
    k = _split_heads(h1 @ params.wk + params.bk, cfg.n_heads)
    v = _split_heads(h1 @ params.wv + params.bv, cfg.n_heads)
    scale = 1.0 / np.sqrt(cfg.hidden_dim // cfg.n_heads)
    attn_p = _softmax((q @ k.transpose(0, 1, 3, 2)) * scale)
    ctx = _merge_heads(attn_p @ v)
    a = x2 + ctx @ params.wo + params.bo

    h2, xhat2, inv2 = _layernorm(a, params.ln2_g, params.ln2_b)
    f1 = h2 @ params.ff_w1 + params.ff_b1
    f2, gelu_cdf = _gelu(f1)
    z = a + f2 @ params.ff_w2 + params.ff_b2

    am = np.argmax(z, axis=1)  # first index on ties
    awes = np.take_along_axis(z, am[:, None, :], axis=1)[:, 0, :]
    tape = ForwardTape(
        params=params, x_hat0=x_hat0, inv0=inv0, out0=out0, x2=x2,
        xhat1=xhat1, inv1=inv1, h1=h1, q=q, k=k, v=v, attn_p=attn_p, ctx=ctx,
        a=a, xhat2=xhat2, inv2=inv2, h2=h2, f1=f1, f2=f2, gelu_cdf=gelu_cdf,
        argmax=am,
    )
    return awes, tape


def pooler_backward_batch(params: PoolerParams, tape: ForwardTape,
                          grad_awes: np.ndarray) -> PoolerParams:
    """Gradients of sum_b awe_b . grad_awes_b w.r.t. every parameter.

    The max pool routes each output coordinate's gradient to its argmax
    frame (first index on ties), so gradients are exact and deterministic.
    """
    if tape.params is not params:
        raise ValueError("tape/params mismatch: tape was produced by different params")
    cfg = params.config
    grad_awes = np.asarray(grad_awes, dtype=params.dtype)
    b, t_out, h = tape.x2.shape
    if grad_awes.shape != (b, h):
        raise ValueError(f"expected grad shape {(b, h)}, got {grad_awes.shape}")

    dz = np.zeros_like(tape.a)
    np.put_along_axis(dz, tape.argmax[:, None, :], grad_awes[:, None, :], axis=1)

    def flat(x):
        return x.reshape(-1, x.shape[-1])

    # z = a + gelu(h2 W1 + b1) W2 + b2
    da = dz.copy()
    dw2 = flat(tape.f2).T @ flat(dz)
    db2 = flat(dz).sum(axis=0)
    df2 = dz @ params.ff_w2.T
    df1 = df2 * _gelu_grad(tape.f1, tape.gelu_cdf)
    dw1 = flat(tape.h2).T @ flat(df1)
    db1 = flat(df1).sum(axis=0)
    dh2 = df1 @ params.ff_w1.T
    dx, dg2, dbeta2 = _layernorm_backward(dh2, tape.xhat2, tape.inv2, params.ln2_g)
    da += dx

    # a = x2 + softmax(q k^T / sqrt(dh)) v Wo + bo
    dx2 = da.copy()
    dwo = flat(tape.ctx).T @ flat(da)
    dbo = flat(da).sum(axis=0)
    dctx = _split_heads(da @ params.wo.T, cfg.n_heads)
    dp = dctx @ tape.v.transpose(0, 1, 3, 2)
    dv = tape.attn_p.transpose(0, 1, 3, 2) @ dctx
    dscores = (dp - (dp * tape.attn_p).sum(axis=-1, keepdims=True)) * tape.attn_p
    scale = 1.0 / np.sqrt(cfg.hidden_dim // cfg.n_heads)
    dq = (dscores @ tape.k) * scale
    dk = (dscores.transpose(0, 1, 3, 2) @ tape.q) * scale
    dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
    h1_flat = flat(tape.h1)
    dwq = h1_flat.T @ flat(dq)
    dbq = flat(dq).sum(axis=0)
    dwk = h1_flat.T @ flat(dk)
    dbk = flat(dk).sum(axis=0)
    dwv = h1_flat.T @ flat(dv)
    dbv = flat(dv).sum(axis=0)
    dh1 = dq @ params.wq.T + dk @ params.wk.T + dv @ params.wv.T
    dx, dg1, dbeta1 = _layernorm_backward(dh1, tape.xhat1, tape.inv1, params.ln1_g)
    dx2 += dx

    # x2 = conv(out0) + pos[:T']
    dpos = np.zeros_like(params.pos)
    dpos[:t_out] = dx2.sum(axis=0)
    patches = _conv_patches(tape.out0, cfg.conv_kernel, cfg.conv_stride)
    kd = cfg.conv_kernel * cfg.input_dim
    # (H, B*T') @ (B*T', K*D) -> (H, K, D) -> (H, D, K)
    dconv_w = (flat(dx2).T @ patches.reshape(-1, kd)).reshape(
        h, cfg.conv_kernel, cfg.input_dim).transpose(0, 2, 1)
    dconv_b = flat(dx2).sum(axis=0)
    w_h_kd = params.conv_w.transpose(0, 2, 1).reshape(h, kd)
    dpatches = (flat(dx2) @ w_h_kd).reshape(
        b, t_out, cfg.conv_kernel, cfg.input_dim)
    dout0 = np.zeros_like(tape.out0)
    base = np.arange(t_out) * cfg.conv_stride
    for kk in range(cfg.conv_kernel):
        dout0[:, base + kk, :] += dpatches[:, :, kk, :]

    _, dg0, dbeta0 = _layernorm_backward(dout0, tape.x_hat0, tape.inv0, params.ln_in_g)

    return PoolerParams(
        cfg,
        dg0, dbeta0,
        dconv_w, dconv_b,
        dpos,
        dg1, dbeta1,
        dwq, dbq, dwk, dbk, dwv, dbv, dwo, dbo,
        dg2, dbeta2,
        dw1, db1, dw2, db2,
    )


def pooler_forward(params: PoolerParams, frames: np.ndarray):
    """Pool one segment (T x D) into an AWE (H,). Returns (awe, tape)."""
    awes, tape = pooler_forward_batch(params, np.asarray(frames)[None])
    return awes[0], tape


def forward_segments(params: PoolerParams, segment_frames: list):
    """Forward a mixed-length segment list, grouped by frame count.

    Returns (awes (N, H) in input order, groups) where each group is
    (member indices, tape) for a later batched backward.
    """
    by_len: dict[int, list] = {}
    for idx, frames in enumerate(segment_frames):
        by_len.setdefault(frames.shape[0], []).append(idx)
    awes = np.zeros((len(segment_frames), params.config.hidden_dim), dtype=params.dtype)
    groups = []
    for t in sorted(by_len):
        members = by_len[t]
        stacked = np.stack([segment_frames[i] for i in members])
        batch_awes, tape = pooler_forward_batch(params, stacked)
        awes[members] = batch_awes
        groups.append((members, tape))
    return awes, groups


def pooler_backward(params: PoolerParams, tape: ForwardTape,
                    grad_awe: np.ndarray) -> PoolerParams:
    grad_awe = np.asarray(grad_awe)
    if grad_awe.ndim == 1:
        grad_awe = grad_awe[None]
    return pooler_backward_batch(params, tape, grad_awe)


def save_pooler(params: PoolerParams, path) -> None:
    cfg = params.config
    with open(path, "wb") as f:
        f.write(POOLER_MAGIC)
        f.write(struct.pack(
            "<6IQ", cfg.input_dim, cfg.hidden_dim, cfg.conv_kernel,
            cfg.conv_stride, cfg.n_heads, cfg.max_positions, cfg.seed,
        ))
        f.write(params.pack().astype("<f4").tobytes())


def load_pooler(path) -> PoolerParams:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != POOLER_MAGIC:
            raise ValueError(f"{path}: unrecognized pooler checkpoint (bad magic)")
        header = f.read(32)
        if len(header) != 32:
            raise ValueError(f"{path}: truncated checkpoint header")
        d, h, k, s, nh, mp, seed = struct.unpack("<6IQ", header)
        try:
            cfg = PoolerConfig(input_dim=d, hidden_dim=h, conv_kernel=k,
                               conv_stride=s, n_heads=nh, max_positions=mp, seed=seed)
        except ValueError as exc:
            raise ValueError(f"{path}: corrupt checkpoint header ({exc})") from None
        payload = f.read()
    expected = n_params(cfg) * 4
    if len(payload) != expected:
        raise ValueError(
            f"{path}: dimension mismatch, payload has {len(payload)} bytes, "
            f"config expects {expected}"
        )
    vector = np.frombuffer(payload, dtype="<f4").copy()
    return PoolerParams.unpack(cfg, vector)
