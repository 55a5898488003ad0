"""Dual-branch spatiotemporal encoder with gated fusion and three task heads.

One shared 3D-convolutional encoder (same weights) runs over the RGB and IR
frame stacks; a gate computed from the time-averaged global context of both
branches mixes them per feature channel; per-frame linear heads emit the BVP
and respiration waveforms and a squashed affine head emits SpO2 in (0, 100).

All forward/backward math is explicit (numpy plus a few numba kernels for
the convolution/pooling inner loops) so the analytic gradients can be
verified against central differences parameter by parameter.

Encoder blocks are ``conv3d -> ReLU -> 2x2 spatial average pool`` per entry
of ``enc_channels``. The block convolutions use temporal kernels
(kt x 1 x 1, temporal same-padding) and leave spatial mixing to the pooling
pyramid: pulse information in cropped face video is spatially near-uniform
but temporally structured, and this choice keeps a full training run
tractable on a single laptop core. The standalone :func:`conv3d_forward`
operation supports arbitrary (kt, kh, kw) kernels.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numba import njit

from . import dataio

SPO2_PRIOR = 0.95  # squashed SpO2 head starts at a healthy resting value


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass(frozen=True)
class ModelConfig:
    in_hw: tuple = (36, 36)
    window_len: int = 150
    enc_channels: tuple = (8, 16)
    gate_hidden: int = 8
    kernel_t: int = 3
    ac_gain: float = 1000.0
    modality: str = "both"  # both | rgb | ir

    def __post_init__(self):
        object.__setattr__(self, "in_hw", tuple(int(v) for v in self.in_hw))
        object.__setattr__(self, "enc_channels", tuple(int(c) for c in self.enc_channels))
        if not self.enc_channels:
            raise ValueError("enc_channels must be nonempty")
        if self.kernel_t < 1 or self.kernel_t % 2 == 0:
            raise ValueError("kernel_t must be odd (temporal same-padding)")
        if self.kernel_t > self.window_len:
            raise ValueError("kernel_t exceeds window length")
        if self.gate_hidden < 1:
            raise ValueError("gate_hidden must be >= 1")
        if self.ac_gain <= 0:
            raise ValueError("ac_gain must be positive")
        if self.modality not in ("both", "rgb", "ir"):
            raise ValueError(f"unknown modality {self.modality!r}")
        self.block_spatial_dims()  # raises if pooling exhausts the input

    def block_spatial_dims(self):
        """Spatial (H, W) after each block; raises if any stage collapses."""
        h, w = self.in_hw
        dims = []
        for i in range(len(self.enc_channels)):
            if h < 2 or w < 2:
                raise ValueError(
                    f"spatial size exhausted at block {i}: {h}x{w} before pooling")
            h, w = h // 2, w // 2
            dims.append((h, w))
        return dims

    @property
    def feature_dim(self):
        return self.enc_channels[-1]

    def to_dict(self):
        return {
            "in_hw": list(self.in_hw),
            "window_len": self.window_len,
            "enc_channels": list(self.enc_channels),
            "gate_hidden": self.gate_hidden,
            "kernel_t": self.kernel_t,
            "ac_gain": self.ac_gain,
            "modality": self.modality,
        }

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["in_hw"] = tuple(d["in_hw"])
        d["enc_channels"] = tuple(d["enc_channels"])
        return cls(**d)


def param_specs(config: ModelConfig):
    """Ordered (name, shape) pairs defining the flat parameter layout."""
    specs = []
    c_in = 3
    kt = config.kernel_t
    for i, c_out in enumerate(config.enc_channels):
        specs.append((f"conv{i}_k", (c_out, c_in, kt)))
        specs.append((f"conv{i}_b", (c_out,)))
        c_in = c_out
    F, gh = config.feature_dim, config.gate_hidden
    specs += [
        ("gate_w1", (gh, 2 * F)), ("gate_b1", (gh,)),
        ("gate_w2", (F, gh)), ("gate_b2", (F,)),
        ("bvp_w", (F,)), ("bvp_b", (1,)),
        ("rr_w", (F,)), ("rr_b", (1,)),
        ("spo2_w", (F,)), ("spo2_b", (1,)),
    ]
    return specs


def param_count(config: ModelConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_specs(config))


class ModelParams:
    """All learnable weights, stored in one flat float64 vector.

    Named arrays are views into the flat vector, so indexed get/set, the
    optimizer, and checkpointing all operate on the same storage.
    """

    def __init__(self, config: ModelConfig, flat=None):
        self.config = config
        self.specs = param_specs(config)
        n = sum(int(np.prod(s)) for _, s in self.specs)
        if flat is None:
            self.flat = np.zeros(n, dtype=np.float64)
        else:
            flat = np.asarray(flat, dtype=np.float64)
            if flat.shape != (n,):
                raise ValueError(f"expected flat vector of length {n}, got {flat.shape}")
            self.flat = flat.copy()
        self.views = {}
        off = 0
        for name, shape in self.specs:
            size = int(np.prod(shape))
            self.views[name] = self.flat[off:off + size].reshape(shape)
            off += size

    def __len__(self):
        return len(self.flat)

    def __getitem__(self, name):
        return self.views[name]

    def get(self, i: int) -> float:
        return float(self.flat[i])

    def set(self, i: int, value: float) -> None:
        self.flat[i] = value

    def copy(self):
        return ModelParams(self.config, self.flat)


def init_params(config: ModelConfig, seed: int) -> ModelParams:
    """He-style init for convs, neutral gate (g=0.5), healthy-prior SpO2 bias."""
    rng = np.random.default_rng(seed)
    p = ModelParams(config)
    c_in = 3
    for i, c_out in enumerate(config.enc_channels):
        k = p[f"conv{i}_k"]
        k[...] = rng.standard_normal(k.shape) * np.sqrt(2.0 / (c_in * config.kernel_t))
        c_in = c_out
    F = config.feature_dim
    p["gate_w1"][...] = rng.standard_normal(p["gate_w1"].shape) * np.sqrt(1.0 / (2 * F))
    # gate_w2 stays zero: the gate starts exactly neutral and learns from there
    p["bvp_w"][...] = rng.standard_normal(F) * 0.1
    p["rr_w"][...] = rng.standard_normal(F) * 0.1
    p["spo2_w"][...] = rng.standard_normal(F) * 0.01
    p["spo2_b"][0] = np.log(SPO2_PRIOR / (1.0 - SPO2_PRIOR))
    return p


# ---------------------------------------------------------------------------
# numba inner loops (batch layout [N, C, L, H, W], all contiguous float64)


@njit(cache=True, fastmath=False)
def _tconv_relu_fwd(x, k, b):
    """Temporal conv (same-padding) + bias + ReLU; returns (act, pre_mask)."""
    N, C, L, H, W = x.shape
    Co, _, kt = k.shape
    pt = (kt - 1) // 2
    act = np.empty((N, Co, L, H, W), dtype=np.float64)
    mask = np.empty((N, Co, L, H, W), dtype=np.bool_)
    acc = np.empty((H, W), dtype=np.float64)
    for n in range(N):
        for o in range(Co):
            for l in range(L):
                acc[:, :] = b[o]
                for dt in range(kt):
                    ls = l + dt - pt
                    if 0 <= ls < L:
                        for c in range(C):
                            kv = k[o, c, dt]
                            for y in range(H):
                                for xw in range(W):
                                    acc[y, xw] += kv * x[n, c, ls, y, xw]
                for y in range(H):
                    for xw in range(W):
                        v = acc[y, xw]
                        pos = v > 0.0
                        mask[n, o, l, y, xw] = pos
                        act[n, o, l, y, xw] = v if pos else 0.0
    return act, mask


@njit(cache=True, fastmath=False)
def _tconv_bwd(x, k, dz, need_dx):
    """Gradients of the temporal conv w.r.t. kernel, bias and (optionally) input."""
    N, C, L, H, W = x.shape
    Co, _, kt = k.shape
    pt = (kt - 1) // 2
    dk = np.zeros((Co, C, kt), dtype=np.float64)
    db = np.zeros(Co, dtype=np.float64)
    for n in range(N):
        for o in range(Co):
            for l in range(L):
                s = 0.0
                for y in range(H):
                    for xw in range(W):
                        s += dz[n, o, l, y, xw]
                db[o] += s
                for dt in range(kt):
                    ls = l + dt - pt
                    if 0 <= ls < L:
                        for c in range(C):
                            acc = 0.0
                            for y in range(H):
                                for xw in range(W):
                                    acc += dz[n, o, l, y, xw] * x[n, c, ls, y, xw]
                            dk[o, c, dt] += acc
    dx = np.zeros((1, 1, 1, 1, 1), dtype=np.float64)
    if need_dx:
        dx = np.zeros((N, C, L, H, W), dtype=np.float64)
        for n in range(N):
            for c in range(C):
                for l in range(L):
                    for dt in range(kt):
                        lo = l - dt + pt
                        if 0 <= lo < L:
                            for o in range(Co):
                                kv = k[o, c, dt]
                                for y in range(H):
                                    for xw in range(W):
                                        dx[n, c, l, y, xw] += kv * dz[n, o, lo, y, xw]
    return dk, db, dx


@njit(cache=True, fastmath=False)
def _pool_fwd(x):
    """2x2 spatial average pool, stride 2; odd trailing row/col dropped."""
    N, C, L, H, W = x.shape
    h, w = H // 2, W // 2
    out = np.empty((N, C, L, h, w), dtype=np.float64)
    for n in range(N):
        for c in range(C):
            for l in range(L):
                for y in range(h):
                    for xw in range(w):
                        out[n, c, l, y, xw] = 0.25 * (
                            x[n, c, l, 2 * y, 2 * xw] + x[n, c, l, 2 * y, 2 * xw + 1]
                            + x[n, c, l, 2 * y + 1, 2 * xw]
                            + x[n, c, l, 2 * y + 1, 2 * xw + 1])
    return out


@njit(cache=True, fastmath=False)
def _pool_bwd(d, H, W):
    """Spread each pooled-cell gradient as dout/4 over its 2x2 source cells."""
    N, C, L, h, w = d.shape
    out = np.zeros((N, C, L, H, W), dtype=np.float64)
    for n in range(N):
        for c in range(C):
            for l in range(L):
                for y in range(h):
                    for xw in range(w):
                        q = 0.25 * d[n, c, l, y, xw]
                        out[n, c, l, 2 * y, 2 * xw] = q
                        out[n, c, l, 2 * y, 2 * xw + 1] = q
                        out[n, c, l, 2 * y + 1, 2 * xw] = q
                        out[n, c, l, 2 * y + 1, 2 * xw + 1] = q
    return out


# ---------------------------------------------------------------------------
# general 3D convolution (the standalone operation; correctness over speed)


def conv3d_forward(x, k, b) -> np.ndarray:
    """Single-item 3D conv: x [C, L, H, W], k [Co, C, kt, kh, kw], b [Co].

    Cross-correlation plus bias; temporal length preserved by zero padding
    (kt odd), spatial dims shrink to H-kh+1, W-kw+1.
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if x.ndim != 4 or k.ndim != 5:
        raise ValueError("expected x [C,L,H,W] and k [Co,C,kt,kh,kw]")
    C, L, H, W = x.shape
    Co, Ck, kt, kh, kw = k.shape
    if Ck != C:
        raise ValueError(f"kernel expects {Ck} input channels, got {C}")
    if kt % 2 == 0:
        raise ValueError("temporal kernel size must be odd")
    if kt > L or kh > H or kw > W:
        raise ValueError(f"kernel {kt}x{kh}x{kw} larger than input {L}x{H}x{W}")
    pt = (kt - 1) // 2
    Hp, Wp = H - kh + 1, W - kw + 1
    xp = np.zeros((C, L + 2 * pt, H, W), dtype=np.float64)
    xp[:, pt:pt + L] = x
    out = np.empty((Co, L, Hp, Wp), dtype=np.float64)
    for o in range(Co):
        acc = np.full((L, Hp, Wp), b[o], dtype=np.float64)
        for c in range(C):
            for dt in range(kt):
                for dy in range(kh):
                    for dx in range(kw):
                        acc += k[o, c, dt, dy, dx] * xp[c, dt:dt + L, dy:dy + Hp, dx:dx + Wp]
        out[o] = acc
    return out


# ---------------------------------------------------------------------------
# encoder / fusion / heads


def _encode_batch(x, params, cache_out=None):
    """Shared encoder over one modality batch.

    x [N, C=3, L, H, W] raw frames -> features [N, F, L]. The input is
    AC-coupled first: the per-pixel temporal mean is removed and the residual
    scaled by a fixed gain, so the pulsatile component is not dwarfed by the
    static skin tone. Both steps are linear, keeping the whole encoder
    positively homogeneous.
    """
    cfg = params.config
    a = (x - x.mean(axis=2, keepdims=True)) * cfg.ac_gain
    blocks = []
    for i in range(len(cfg.enc_channels)):
        act, mask = _tconv_relu_fwd(a, params[f"conv{i}_k"], params[f"conv{i}_b"])
        pooled = _pool_fwd(act)
        blocks.append({"x": a, "mask": mask, "pre_pool_shape": act.shape})
        a = pooled
    feats = a.mean(axis=(3, 4))
    if cache_out is not None:
        cache_out["blocks"] = blocks
        cache_out["gap_shape"] = a.shape
    return feats


def _encode_bwd(d_feats, blocks, gap_shape, params, grads):
    """Backprop d_feats [N, F, L] through pools/ReLUs/convs of one modality."""
    cfg = params.config
    N, C, L, h, w = gap_shape
    da = np.broadcast_to(d_feats[:, :, :, None, None] / (h * w), gap_shape)
    da = np.ascontiguousarray(da)
    for i in reversed(range(len(cfg.enc_channels))):
        blk = blocks[i]
        H, W = blk["pre_pool_shape"][3:]
        dz = _pool_bwd(da, H, W)
        dz *= blk["mask"]
        dk, db, dx = _tconv_bwd(blk["x"], params[f"conv{i}_k"], dz, i > 0)
        # shared encoder: modalities accumulate into the same kernel grads
        grads[f"conv{i}_k"] += dk
        grads[f"conv{i}_b"] += db
        da = dx
    return None


def encode(x_modality, params: ModelParams) -> np.ndarray:
    """Encode one modality tensor [C, L, H, W] (C=3, or C=1 replicated) to [F, L]."""
    x = np.asarray(x_modality, dtype=np.float64)
    if x.ndim != 4:
        raise ValueError("expected [C, L, H, W] input")
    if x.shape[0] == 1:
        x = np.repeat(x, 3, axis=0)
    if x.shape[0] != 3:
        raise ValueError(f"expected 1 or 3 channels, got {x.shape[0]}")
    return _encode_batch(np.ascontiguousarray(x[None]), params)[0]


def _fuse_batch(f_rgb, f_ir, params, cache_out=None):
    """Gated convex mix of two feature stacks [N, F, L] -> (fused, gate [N, F])."""
    L = f_rgb.shape[2]
    u = f_rgb.mean(axis=2)
    v = f_ir.mean(axis=2)
    c = np.concatenate([u, v], axis=1)  # [N, 2F]
    h_pre = c @ params["gate_w1"].T + params["gate_b1"]
    h = np.maximum(h_pre, 0.0)
    g_pre = h @ params["gate_w2"].T + params["gate_b2"]
    g = sigmoid(g_pre)
    # f_ir + g * (f_rgb - f_ir): exactly f_rgb when the branches agree
    diff = f_rgb - f_ir
    fused = f_ir + g[:, :, None] * diff
    if cache_out is not None:
        cache_out.update({"c": c, "h": h, "h_pre": h_pre, "g": g, "diff": diff, "L": L})
    return fused, g


def fuse(f_rgb, f_ir, params: ModelParams):
    """Single-item fusion: [F, L] x [F, L] -> (fused [F, L], gate [F])."""
    f_rgb = np.asarray(f_rgb, dtype=np.float64)
    f_ir = np.asarray(f_ir, dtype=np.float64)
    if f_rgb.shape != f_ir.shape:
        raise ValueError(f"feature shapes differ: {f_rgb.shape} vs {f_ir.shape}")
    fused, g = _fuse_batch(f_rgb[None], f_ir[None], params)
    return fused[0], g[0]


@dataclass
class ForwardResult:
    bvp: np.ndarray  # [N, L]
    rr: np.ndarray  # [N, L]
    spo2: np.ndarray  # [N]
    gate: np.ndarray | None  # [N, F] when fusing, else None
    cache: dict | None = field(default=None, repr=False)


def _stack_modality(windows, expect_channels):
    """Stack [L,H,W,C] windows into a contiguous [N, 3, L, H, W] batch."""
    x = np.stack([np.asarray(w, dtype=np.float64) for w in windows])
    if x.ndim != 5 or x.shape[-1] != expect_channels:
        raise ValueError(f"expected [L,H,W,{expect_channels}] windows, got {x.shape[1:]}")
    x = x.transpose(0, 4, 1, 2, 3)
    if expect_channels == 1:
        x = np.broadcast_to(x, (x.shape[0], 3) + x.shape[2:])
    return np.ascontiguousarray(x)


def forward_batch(windows_rgb, windows_ir, params: ModelParams,
                  want_cache: bool = False) -> ForwardResult:
    """Run a batch of aligned window pairs through the network."""
    cfg = params.config
    cache = {"modality": cfg.modality} if want_cache else None
    feats = {}
    if cfg.modality in ("both", "rgb"):
        sub = {} if want_cache else None
        feats["rgb"] = _encode_batch(_stack_modality(windows_rgb, 3), params, sub)
        if want_cache:
            cache["enc_rgb"] = sub
    if cfg.modality in ("both", "ir"):
        sub = {} if want_cache else None
        feats["ir"] = _encode_batch(_stack_modality(windows_ir, 1), params, sub)
        if want_cache:
            cache["enc_ir"] = sub

    gate = None
    if cfg.modality == "both":
        fsub = {} if want_cache else None
        fused, gate = _fuse_batch(feats["rgb"], feats["ir"], params, fsub)
        if want_cache:
            cache["fuse"] = fsub
    else:
        fused = feats[cfg.modality]

    L = fused.shape[2]
    bvp = np.einsum("nfl,f->nl", fused, params["bvp_w"]) + params["bvp_b"][0]
    rr = np.einsum("nfl,f->nl", fused, params["rr_w"]) + params["rr_b"][0]
    fbar = fused.mean(axis=2)
    s_pre = fbar @ params["spo2_w"] + params["spo2_b"][0]
    spo2 = 100.0 * sigmoid(s_pre)
    if want_cache:
        cache.update({"fused": fused, "fbar": fbar, "s_pre": s_pre, "L": L})
    return ForwardResult(bvp=bvp, rr=rr, spo2=spo2, gate=gate, cache=cache)


def backward_batch(params: ModelParams, result: ForwardResult,
                   d_bvp, d_rr, d_spo2) -> np.ndarray:
    """Flat gradient [P] given upstream partials for each prediction.

    d_bvp, d_rr are [N, L]; d_spo2 is [N]. Per-window contributions are
    summed in fixed (batch, rgb-then-ir) order, so results are reproducible.
    """
    cache = result.cache
    if cache is None:
        raise ValueError("forward was run without want_cache=True")
    cfg = params.config
    d_bvp = np.asarray(d_bvp, dtype=np.float64)
    d_rr = np.asarray(d_rr, dtype=np.float64)
    d_spo2 = np.atleast_1d(np.asarray(d_spo2, dtype=np.float64))
    fused, fbar, L = cache["fused"], cache["fbar"], cache["L"]

    gp = ModelParams(cfg)  # zero-filled gradient holder with the same layout
    grads = gp.views

    sig = sigmoid(cache["s_pre"])
    d_spre = d_spo2 * 100.0 * sig * (1.0 - sig)  # [N]
    grads["spo2_w"] += d_spre @ fbar
    grads["spo2_b"] += d_spre.sum()
    grads["bvp_w"] += np.einsum("nfl,nl->f", fused, d_bvp)
    grads["bvp_b"] += d_bvp.sum()
    grads["rr_w"] += np.einsum("nfl,nl->f", fused, d_rr)
    grads["rr_b"] += d_rr.sum()

    d_fused = (params["bvp_w"][None, :, None] * d_bvp[:, None, :]
               + params["rr_w"][None, :, None] * d_rr[:, None, :])
    d_fused += (d_spre[:, None] * params["spo2_w"][None, :])[:, :, None] / L

    if cfg.modality == "both":
        f = cache["fuse"]
        g = f["g"]
        d_rgb = d_fused * g[:, :, None]
        d_ir = d_fused - d_rgb
        dg = np.einsum("nfl,nfl->nf", d_fused, f["diff"])
        d_gpre = dg * g * (1.0 - g)
        grads["gate_w2"] += d_gpre.T @ f["h"]
        grads["gate_b2"] += d_gpre.sum(axis=0)
        dh = d_gpre @ params["gate_w2"]
        dh_pre = dh * (f["h_pre"] > 0)
        grads["gate_w1"] += dh_pre.T @ f["c"]
        grads["gate_b1"] += dh_pre.sum(axis=0)
        dc = dh_pre @ params["gate_w1"]
        F = cfg.feature_dim
        d_rgb = d_rgb + dc[:, :F, None] / L
        d_ir = d_ir + dc[:, F:, None] / L
        _encode_bwd(d_rgb, cache["enc_rgb"]["blocks"], cache["enc_rgb"]["gap_shape"],
                    params, grads)
        _encode_bwd(d_ir, cache["enc_ir"]["blocks"], cache["enc_ir"]["gap_shape"],
                    params, grads)
    else:
        enc = cache[f"enc_{cfg.modality}"]
        _encode_bwd(d_fused, enc["blocks"], enc["gap_shape"], params, grads)
    return gp.flat


def forward(window_rgb, window_ir, params: ModelParams,
            want_cache: bool = False) -> ForwardResult:
    """Single-window forward; squeezes the batch axis of forward_batch."""
    res = forward_batch([window_rgb], [window_ir], params, want_cache=want_cache)
    return ForwardResult(
        bvp=res.bvp[0], rr=res.rr[0], spo2=float(res.spo2[0]),
        gate=None if res.gate is None else res.gate[0], cache=res.cache)


def backward(params: ModelParams, result: ForwardResult,
             d_bvp, d_rr, d_spo2: float) -> np.ndarray:
    """Single-window backward counterpart of `forward`."""
    return backward_batch(params, result,
                          np.asarray(d_bvp)[None], np.asarray(d_rr)[None],
                          np.asarray([d_spo2]))


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(stem, params: ModelParams) -> None:
    """Write `<stem>.tnsr` (flat weights) and `<stem>.json` (config sidecar)."""
    stem = Path(stem)
    dataio.write_tensor(stem.with_suffix(".tnsr"), params.flat)
    sidecar = {"format_version": CHECKPOINT_VERSION, "model": params.config.to_dict()}
    stem.with_suffix(".json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def load_checkpoint(stem) -> ModelParams:
    stem = Path(stem)
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    if sidecar.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {sidecar.get('format_version')}")
    config = ModelConfig.from_dict(sidecar["model"])
    flat = dataio.read_tensor(stem.with_suffix(".tnsr"))
    return ModelParams(config, flat)
