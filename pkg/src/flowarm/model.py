"""Causal autoregressive flow-matching world model over pixel patches.

A frame is tokenized into non-overlapping patches; a block-causal transformer
predicts the flow velocity for the frame being denoised, conditioned on an
instruction token, a timestep embedding, and the clean previous frames
(teacher-forced during training, KV-cached at inference). Sampling integrates
the learned velocity field with explicit Euler steps from noise to data.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .errors import CapacityError, ContractError, ShapeError
from .tensor import Tensor

TIME_FEATURES = 32


@dataclass
class ModelConfig:
    frame_hw: int = 32
    patch_size: int = 4
    embed_dim: int = 64
    n_layers: int = 4
    n_heads: int = 4
    instruction_vocab_size: int = 4
    max_frames: int = 16          # KV window capacity, in frames
    sampling_steps: int = 5
    eta: float = 3.0              # embodiment reweighting strength
    cfg_drop_prob: float = 0.1
    guidance_scale: float = 1.0   # 1.0 = guidance off

    def __post_init__(self):
        if self.frame_hw % self.patch_size != 0:
            raise ContractError("frame size must be divisible by patch size")
        if self.max_frames < 2:
            raise ContractError("max_frames must be >= 2")
        if self.eta < 0:
            raise ContractError("eta must be non-negative")
        if self.embed_dim % self.n_heads != 0:
            raise ContractError("embed_dim must be divisible by n_heads")

    @property
    def tokens_per_frame(self) -> int:
        return (self.frame_hw // self.patch_size) ** 2

    @property
    def patch_dim(self) -> int:
        return self.patch_size ** 2

    @property
    def null_cond_id(self) -> int:
        return self.instruction_vocab_size


def patchify(pixels: np.ndarray, patch: int) -> np.ndarray:
    """(..., H, W) -> (..., tokens, patch*patch), row-major patch grid."""
    h, w = pixels.shape[-2:]
    gh, gw = h // patch, w // patch
    lead = pixels.shape[:-2]
    x = pixels.reshape(*lead, gh, patch, gw, patch)
    x = np.moveaxis(x, -3, -2)  # (..., gh, gw, patch, patch)
    return x.reshape(*lead, gh * gw, patch * patch)


def unpatchify(tokens: np.ndarray, patch: int, hw: int) -> np.ndarray:
    g = hw // patch
    lead = tokens.shape[:-2]
    x = tokens.reshape(*lead, g, g, patch, patch)
    x = np.moveaxis(x, -3, -2)
    return x.reshape(*lead, hw, hw)


def time_features(t: np.ndarray, dtype=np.float32) -> np.ndarray:
    """Sinusoidal features of a scalar timestep in [0, 1]."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    j = np.arange(TIME_FEATURES // 2)
    w = 2.0 ** j
    ang = t[:, None] * w[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1).astype(dtype)


def interpolate_path(x0: np.ndarray, x1: np.ndarray, t) -> np.ndarray:
    """Linear noise->data path: t*x1 + (1-t)*x0."""
    if x0.shape != x1.shape:
        raise ShapeError(f"path endpoints disagree: {x0.shape} vs {x1.shape}")
    tt = np.asarray(t, dtype=x1.dtype)
    if np.any(tt < 0.0) or np.any(tt > 1.0):
        raise ContractError("t must lie in [0, 1]")
    while tt.ndim < x1.ndim:
        tt = tt[..., None]
    return tt * x1 + (1.0 - tt) * x0


def velocity_target(x0: np.ndarray, x1: np.ndarray) -> np.ndarray:
    """Time derivative of the linear path (data minus noise)."""
    if x0.shape != x1.shape:
        raise ShapeError(f"velocity target shapes disagree: {x0.shape} vs {x1.shape}")
    return x1 - x0


def drop_condition(cond_ids: np.ndarray, p: float, rng: np.random.Generator,
                   null_id: int) -> np.ndarray:
    """Classifier-free-guidance dropout: replace ids with the null token w.p. p."""
    if not (0.0 <= p <= 1.0):
        raise ContractError("drop probability must lie in [0, 1]")
    cond_ids = np.asarray(cond_ids, dtype=np.int64)
    dropped = cond_ids.copy()
    dropped[rng.random(cond_ids.shape) < p] = null_id
    return dropped


@dataclass
class FlowBatch:
    """One training batch; prev_tokens is (B, k, tokens, patch_dim) with k >= 0."""
    x1_tokens: np.ndarray
    x0_tokens: np.ndarray
    t: np.ndarray
    cond_ids: np.ndarray
    prev_tokens: np.ndarray
    x1_pixels: np.ndarray

    @property
    def prefix_len(self) -> int:
        return self.prev_tokens.shape[1]


def _head_slopes(n_heads: int) -> np.ndarray:
    """Frame-recency attention slopes; one head stays global (slope 0)."""
    return np.array([0.0] + [2.0 ** -i for i in range(n_heads - 1)][::-1])[:n_heads]


def _attn_bias(q_frames: np.ndarray, kv_frames: np.ndarray, n_heads: int,
               dtype) -> np.ndarray:
    """Per-head additive attention bias over frame ids.

    Frame id -1 marks the conditioning token (always visible, no recency
    term). Other tokens follow block-causality on frame ids, with a per-head
    linear recency penalty on the frame distance so attention prefers recent
    frames without losing cache validity (the bias depends on positions only).
    """
    qf = q_frames[:, None]
    kf = kv_frames[None, :]
    cond = kf < 0
    blocked = (~cond) & (kf > qf)
    dist = np.where(cond, 0.0, qf - kf).astype(np.float64)
    slopes = _head_slopes(n_heads)
    bias = -slopes[:, None, None] * dist[None]
    bias = np.where(blocked[None], T.NEG_INF, bias)
    return bias.astype(dtype)


class WorldModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        d = cfg.embed_dim
        pd = cfg.patch_dim

        def p(name, shape, std=0.02, zero=False):
            data = np.zeros(shape) if zero else rng.normal(0.0, std, size=shape)
            self.params[name] = Tensor(data.astype(dtype), requires_grad=True, dtype=dtype)

        p("patch_w", (pd, d))
        p("patch_b", (d,), zero=True)
        p("prev_w", (pd, d))   # previous-frame skip into the denoising tokens
        p("pos", (cfg.tokens_per_frame, d))
        p("slot", (cfg.max_frames, d))
        p("instr", (cfg.instruction_vocab_size + 1, d))
        p("time_w1", (TIME_FEATURES, d))
        p("time_b1", (d,), zero=True)
        p("time_w2", (d, d))
        p("time_b2", (d,), zero=True)
        for i in range(cfg.n_layers):
            p(f"l{i}.ln1_g", (d,), zero=True)
            self.params[f"l{i}.ln1_g"].data += 1.0
            p(f"l{i}.ln1_b", (d,), zero=True)
            p(f"l{i}.qkv_w", (d, 3 * d))
            p(f"l{i}.qkv_b", (3 * d,), zero=True)
            p(f"l{i}.out_w", (d, d))
            p(f"l{i}.out_b", (d,), zero=True)
            p(f"l{i}.ln2_g", (d,), zero=True)
            self.params[f"l{i}.ln2_g"].data += 1.0
            p(f"l{i}.ln2_b", (d,), zero=True)
            p(f"l{i}.mlp_w1", (d, 4 * d))
            p(f"l{i}.mlp_b1", (4 * d,), zero=True)
            p(f"l{i}.mlp_w2", (4 * d, d))
            p(f"l{i}.mlp_b2", (d,), zero=True)
        p("head_ln_g", (d,), zero=True)
        self.params["head_ln_g"].data += 1.0
        p("head_ln_b", (d,), zero=True)
        p("head_w", (d, pd), zero=True)   # zero head: initial prediction is 0
        p("head_prev_w", (pd, pd), zero=True)  # direct copy path from the last clean frame
        p("head_b", (pd,), zero=True)
        self._bias_cache: dict = {}

    # -- parameter plumbing -------------------------------------------------

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if k not in arrays:
                raise ContractError(f"checkpoint missing parameter {k}")
            if arrays[k].shape != p.data.shape:
                raise ShapeError(f"checkpoint shape mismatch for {k}")
            p.data = arrays[k].astype(self.dtype)

    # -- embedding helpers ----------------------------------------------------

    def _const(self, arr) -> Tensor:
        return Tensor(np.asarray(arr, dtype=self.dtype), dtype=self.dtype)

    def _embed_frames(self, tokens: np.ndarray, slot_start: int) -> Tensor:
        """Embed clean frames: (B, F, tpf, pd) -> (B, F*tpf, d)."""
        cfg = self.cfg
        b, f, tpf, pd = tokens.shape
        flat = self._const(tokens.reshape(b, f * tpf, pd))
        x = T.add(T.matmul(flat, self.params["patch_w"]), self.params["patch_b"])
        pos_ids = np.tile(np.arange(tpf), f)
        slot_ids = np.repeat(np.arange(slot_start, slot_start + f), tpf)
        x = T.add(x, T.embedding(self.params["pos"], pos_ids))
        x = T.add(x, T.embedding(self.params["slot"], slot_ids))
        return x

    def _embed_noisy(self, x_t: np.ndarray, t: np.ndarray, slot_idx: int,
                     prev_last: Optional[np.ndarray] = None) -> Tensor:
        """Embed the frame under denoising: (B, tpf, pd), per-sample t.

        prev_last carries the latest clean frame's tokens (B, tpf, pd); its
        same-position patches are injected as a skip so one-step dynamics do
        not have to be routed through attention alone.
        """
        cfg = self.cfg
        b, tpf, pd = x_t.shape
        x = T.add(T.matmul(self._const(x_t), self.params["patch_w"]), self.params["patch_b"])
        if prev_last is not None:
            x = T.add(x, T.matmul(self._const(prev_last), self.params["prev_w"]))
        x = T.add(x, T.embedding(self.params["pos"], np.arange(tpf)))
        x = T.add(x, T.embedding(self.params["slot"], np.full(tpf, slot_idx)))
        feats = self._const(time_features(t, dtype=self.dtype))
        h = T.gelu(T.add(T.matmul(feats, self.params["time_w1"]), self.params["time_b1"]))
        temb = T.add(T.matmul(h, self.params["time_w2"]), self.params["time_b2"])  # (B, d)
        temb = T.repeat_axis(T.reshape(temb, (b, 1, cfg.embed_dim)), 1, tpf)
        return T.add(x, temb)

    def _embed_cond(self, cond_ids: np.ndarray) -> Tensor:
        ids = np.asarray(cond_ids, dtype=np.int64)
        if np.any(ids < 0) or np.any(ids > self.cfg.null_cond_id):
            raise ContractError("instruction id out of range")
        e = T.embedding(self.params["instr"], ids)  # (B, d)
        return T.reshape(e, (len(ids), 1, self.cfg.embed_dim))

    # -- transformer core -----------------------------------------------------

    def _run(self, x: Tensor, bias: np.ndarray, cache_kv: Optional[list] = None,
             collect_kv: bool = False):
        """Pre-norm transformer; optional cached context keys/values per layer.

        cache_kv: list of (k, v) numpy arrays shaped (ctx_tokens, d).
        Returns (hidden, collected) where collected[i] = (k_self, v_self) numpy.
        """
        cfg = self.cfg
        b, ts, d = x.shape
        nh, dh = cfg.n_heads, d // cfg.n_heads
        scale = 1.0 / np.sqrt(dh)
        collected = []
        for i in range(cfg.n_layers):
            h = T.layer_norm(x, self.params[f"l{i}.ln1_g"], self.params[f"l{i}.ln1_b"])
            qkv = T.add(T.matmul(h, self.params[f"l{i}.qkv_w"]), self.params[f"l{i}.qkv_b"])
            q = T.narrow(qkv, 2, 0, d)
            k = T.narrow(qkv, 2, d, d)
            v = T.narrow(qkv, 2, 2 * d, d)
            if collect_kv:
                collected.append((k.data.reshape(ts, d).copy(), v.data.reshape(ts, d).copy()))
            if cache_kv is not None:
                ck, cv = cache_kv[i]
                k = T.concat([self._const(ck[None]), k], axis=1)
                v = T.concat([self._const(cv[None]), v], axis=1)
            tk = k.shape[1]
            qh = T.transpose(T.reshape(q, (b, ts, nh, dh)), (0, 2, 1, 3))
            kh = T.transpose(T.reshape(k, (b, tk, nh, dh)), (0, 2, 3, 1))
            vh = T.transpose(T.reshape(v, (b, tk, nh, dh)), (0, 2, 1, 3))
            scores = T.scale(T.matmul(qh, kh), scale)
            probs = T.softmax_last(scores, bias=bias)
            att = T.matmul(probs, vh)  # (b, nh, ts, dh)
            att = T.reshape(T.transpose(att, (0, 2, 1, 3)), (b, ts, d))
            att = T.add(T.matmul(att, self.params[f"l{i}.out_w"]), self.params[f"l{i}.out_b"])
            x = T.add(x, att)
            h = T.layer_norm(x, self.params[f"l{i}.ln2_g"], self.params[f"l{i}.ln2_b"])
            h = T.relu(T.add(T.matmul(h, self.params[f"l{i}.mlp_w1"]), self.params[f"l{i}.mlp_b1"]))
            h = T.add(T.matmul(h, self.params[f"l{i}.mlp_w2"]), self.params[f"l{i}.mlp_b2"])
            x = T.add(x, h)
        return x, collected

    def _head(self, hidden: Tensor, prev_last: Optional[np.ndarray]) -> Tensor:
        """Clean-frame prediction: transformer features plus a direct linear
        path from the latest clean frame (the next frame is mostly a copy; the
        attention features only have to paint the delta)."""
        h = T.layer_norm(hidden, self.params["head_ln_g"], self.params["head_ln_b"])
        out = T.add(T.matmul(h, self.params["head_w"]), self.params["head_b"])
        if prev_last is not None:
            out = T.add(out, T.matmul(self._const(prev_last), self.params["head_prev_w"]))
        return out

    def _bias(self, key, q_frames, kv_frames) -> np.ndarray:
        if key not in self._bias_cache:
            self._bias_cache[key] = _attn_bias(np.asarray(q_frames), np.asarray(kv_frames),
                                               self.cfg.n_heads, self.dtype)
        return self._bias_cache[key]

    def _training_bias(self, prefix_len: int) -> np.ndarray:
        tpf = self.cfg.tokens_per_frame
        ids = np.concatenate([[-1], np.repeat(np.arange(prefix_len + 1), tpf)])
        return self._bias(("train", prefix_len), ids, ids)

    # -- public forward paths ---------------------------------------------------

    def _to_velocity(self, x1_hat: Tensor, x_t: np.ndarray, t: np.ndarray) -> Tensor:
        """Analytic velocity from a clean-frame prediction.

        Along the linear path, v = (x1 - x_t) / (1 - t); predicting the clean
        frame and converting in closed form spares the network from having to
        reproduce its own noisy input through the embedding bottleneck. The
        factor is clamped near t = 1 (uniform Euler grids never reach it).
        """
        t = np.atleast_1d(np.asarray(t, dtype=self.dtype))
        factor = 1.0 / np.maximum(1.0 - t, self._T_CLAMP).astype(self.dtype)
        factor = factor.reshape(-1, 1, 1)
        diff = T.sub(x1_hat, self._const(x_t))
        return T.mul(diff, self._const(np.broadcast_to(factor, x1_hat.shape).copy()))

    _T_CLAMP = 0.05

    def forward_velocity(self, x_t: np.ndarray, t: np.ndarray, cond_ids: np.ndarray,
                         prev_tokens: np.ndarray) -> Tensor:
        """Teacher-forced forward: velocity for the frame at slot k given k clean frames.

        x_t: (B, tpf, pd) noisy tokens; prev_tokens: (B, k, tpf, pd) clean tokens.
        """
        cfg = self.cfg
        b, tpf, pd = x_t.shape
        k = prev_tokens.shape[1]
        if k + 1 > cfg.max_frames:
            raise CapacityError(f"prefix of {k} frames exceeds window of {cfg.max_frames}")
        parts = [self._embed_cond(cond_ids)]
        prev_last = prev_tokens[:, -1] if k else None
        if k:
            parts.append(self._embed_frames(prev_tokens, 0))
        parts.append(self._embed_noisy(x_t, t, k, prev_last))
        seq = T.concat(parts, axis=1)
        hidden, _ = self._run(seq, self._training_bias(k))
        cur = T.narrow(hidden, 1, 1 + k * tpf, tpf)
        return self._to_velocity(self._head(cur, prev_last), x_t, t)

    def encode_prefill(self, frame_tokens: np.ndarray, cond_id: int):
        """Encode [cond, frame] for an empty cache; returns per-layer (k, v)."""
        cfg = self.cfg
        tpf = cfg.tokens_per_frame
        parts = [self._embed_cond(np.array([cond_id])),
                 self._embed_frames(frame_tokens[None, None], 0)]
        seq = T.concat(parts, axis=1)
        ids = np.concatenate([[-1], np.zeros(tpf, dtype=np.int64)])
        bias = self._bias(("prefill",), ids, ids)
        with T.no_grad():
            _, kv = self._run(seq, bias, collect_kv=True)
        return kv

    def encode_append(self, frames_tokens: np.ndarray, slot_start: int, cache_kv: list):
        """Encode clean frames against an existing cache; returns per-layer (k, v).

        frames_tokens: (F, tpf, pd). Frames attend to the whole cache and
        block-causally among themselves.
        """
        cfg = self.cfg
        f, tpf, pd = frames_tokens.shape
        ctx = cache_kv[0][0].shape[0]
        seq = self._embed_frames(frames_tokens[None], slot_start)
        q_ids = np.repeat(np.arange(slot_start, slot_start + f), tpf)
        kv_ids = np.concatenate([self._ctx_frame_ids(ctx), q_ids])
        bias = self._bias(("append", slot_start, f, ctx), q_ids, kv_ids)
        with T.no_grad():
            _, kv = self._run(seq, bias, cache_kv=cache_kv, collect_kv=True)
        return kv

    def _ctx_frame_ids(self, ctx_tokens: int) -> np.ndarray:
        """Frame ids for a cache prefix: [cond, frame 0 tokens, frame 1 ...]."""
        tpf = self.cfg.tokens_per_frame
        n_frames = (ctx_tokens - 1) // tpf
        return np.concatenate([[-1], np.repeat(np.arange(n_frames), tpf)])

    def velocity_cached(self, x_t: np.ndarray, t: float, slot_idx: int,
                        cache_kv: list, prev_last: Optional[np.ndarray] = None) -> np.ndarray:
        """Velocity for one noisy frame attending to the cached clean prefix."""
        cfg = self.cfg
        tpf = cfg.tokens_per_frame
        ctx = cache_kv[0][0].shape[0]
        pl = prev_last[None] if prev_last is not None else None
        seq = self._embed_noisy(x_t[None], np.array([t]), slot_idx, pl)
        q_ids = np.full(tpf, slot_idx)
        kv_ids = np.concatenate([self._ctx_frame_ids(ctx), q_ids])
        bias = self._bias(("denoise", slot_idx, ctx), q_ids, kv_ids)
        with T.no_grad():
            hidden, _ = self._run(seq, bias, cache_kv=cache_kv)
            pl = prev_last[None] if prev_last is not None else None
            out = self._to_velocity(self._head(hidden, pl), x_t[None], np.array([t]))
        return out.data[0]


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def weighted_flow_loss(v_pred: Tensor, target: np.ndarray,
                       weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean squared (optionally reweighted) velocity residual."""
    resid = T.sub(v_pred, Tensor(np.asarray(target, dtype=v_pred.data.dtype),
                                 dtype=v_pred.data.dtype))
    if weights is not None:
        resid = T.mul(resid, Tensor(np.asarray(weights, dtype=v_pred.data.dtype),
                                    dtype=v_pred.data.dtype))
    return T.mean_all(T.mul(resid, resid))


def causal_loss(model: WorldModel, batch: FlowBatch,
                weights: Optional[np.ndarray] = None) -> Tensor:
    x_t = interpolate_path(batch.x0_tokens, batch.x1_tokens, batch.t)
    v = model.forward_velocity(x_t, batch.t, batch.cond_ids, batch.prev_tokens)
    return weighted_flow_loss(v, velocity_target(batch.x0_tokens, batch.x1_tokens), weights)


def diffusion_loss(model: WorldModel, batch: FlowBatch) -> Tensor:
    if batch.prefix_len != 0:
        raise ContractError("diffusion loss expects an empty prefix")
    return causal_loss(model, batch)


def embodiment_weights(mask_pixels: np.ndarray, eta: float, patch: int) -> np.ndarray:
    """Per-token weights 1 + eta * mean(mask over patch), expanded to patch dim."""
    pm = patchify(mask_pixels, patch).mean(axis=-1)  # (B, tpf)
    w = 1.0 + eta * pm
    return np.repeat(w[..., None], patch * patch, axis=-1).astype(mask_pixels.dtype)


def embodiment_aware_loss(model: WorldModel, batch: FlowBatch,
                          mask_fn: Callable[[np.ndarray], np.ndarray],
                          eta: float) -> Tensor:
    """Reweighted causal loss; the mask is treated as a constant."""
    if eta < 0:
        raise ContractError("eta must be non-negative")
    if eta == 0:
        return causal_loss(model, batch)
    with T.no_grad():
        masks = mask_fn(batch.x1_pixels)
    weights = embodiment_weights(masks.astype(batch.x1_tokens.dtype), eta,
                                 model.cfg.patch_size)
    return causal_loss(model, batch, weights=weights)


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def integrate_euler(v_fn: Callable[[np.ndarray, float], np.ndarray],
                    x0: np.ndarray, steps: int) -> np.ndarray:
    """Explicit Euler from t=0 to t=1 with uniform steps."""
    if steps < 1:
        raise ContractError("steps must be >= 1")
    x = x0.astype(x0.dtype, copy=True)
    h = 1.0 / steps
    for i in range(steps):
        x = x + np.asarray(h, dtype=x.dtype) * v_fn(x, i * h)
    return x


def sample_frame_tokens(model: WorldModel, cache_kv: list, slot_idx: int,
                        rng: np.random.Generator, steps: int,
                        guidance_scale: float = 1.0,
                        null_cache_kv: Optional[list] = None,
                        prev_last: Optional[np.ndarray] = None) -> np.ndarray:
    """Denoise one frame against a cached prefix; returns raw tokens."""
    cfg = model.cfg
    x0 = rng.standard_normal((cfg.tokens_per_frame, cfg.patch_dim)).astype(model.dtype)

    if guidance_scale == 1.0:
        def v_fn(x, t):
            return model.velocity_cached(x, t, slot_idx, cache_kv, prev_last)
    else:
        if null_cache_kv is None:
            raise ContractError("guidance requires a null-condition cache")

        def v_fn(x, t):
            vc = model.velocity_cached(x, t, slot_idx, cache_kv, prev_last)
            vn = model.velocity_cached(x, t, slot_idx, null_cache_kv, prev_last)
            return vn + guidance_scale * (vc - vn)

    return integrate_euler(v_fn, x0, steps)


def tokens_to_pixels(tokens: np.ndarray, cfg: ModelConfig) -> np.ndarray:
    return np.clip(unpatchify(tokens, cfg.patch_size, cfg.frame_hw), 0.0, 1.0)
