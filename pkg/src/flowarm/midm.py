"""Masked inverse dynamics model: mask predictor + action regressor.

The mask predictor scores every pixel in [0, 1] from patch-local features; the
regressor reads the thresholded-masked frame through a shared per-patch
encoder and outputs absolute joint angles. Angles are produced as planar
(cos, sin) pairs decoded by atan2; a scalar saturating head cannot represent
the circular topology, and targets adjacent across the +-pi seam stall
training. Rounding uses a straight-through backward so the action loss trains
the mask predictor, and an L1 penalty (normalized by pixel count) keeps the
mask sparse.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .env import Action, Frame
from .errors import ContractError
from .tensor import Tensor


@dataclass
class MidmConfig:
    lam: float = 3e-3             # mask sparsity weight
    round_threshold: float = 0.5
    frame_hw: int = 32
    u_patch: int = 2
    u_hidden: int = 16
    r_patch: int = 4
    r_feat: int = 16
    r_hidden: int = 256
    huber_delta: float = 1.0

    def __post_init__(self):
        if self.lam < 0:
            raise ContractError("lambda must be non-negative")
        if not (0.0 < self.round_threshold < 1.0):
            raise ContractError("round threshold must lie in (0, 1)")
        if self.frame_hw % self.u_patch or self.frame_hw % self.r_patch:
            raise ContractError("frame size must be divisible by the patch sizes")

    @property
    def n_pixels(self) -> int:
        return self.frame_hw * self.frame_hw


def patchify_t(x: Tensor, patch: int, hw: int) -> Tensor:
    """(B, H, W) graph tensor -> (B, tokens, patch*patch)."""
    b = x.shape[0]
    g = hw // patch
    x = T.reshape(x, (b, g, patch, g, patch))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (b, g * g, patch * patch))


def unpatchify_t(x: Tensor, patch: int, hw: int) -> Tensor:
    """(B, tokens, patch*patch) graph tensor -> (B, H, W)."""
    b = x.shape[0]
    g = hw // patch
    x = T.reshape(x, (b, g, g, patch, patch))
    x = T.transpose(x, (0, 1, 3, 2, 4))
    return T.reshape(x, (b, hw, hw))


class Midm:
    def __init__(self, cfg: MidmConfig, seed: int = 0, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}

        def p(name, shape, std=None, zero=False):
            std = 1.0 / np.sqrt(shape[0]) if std is None else std
            data = np.zeros(shape) if zero else rng.normal(0.0, std, size=shape)
            self.params[name] = Tensor(data.astype(dtype), requires_grad=True, dtype=dtype)

        upd = cfg.u_patch ** 2
        p("u_w1", (upd, cfg.u_hidden))
        p("u_b1", (cfg.u_hidden,), zero=True)
        p("u_w2", (cfg.u_hidden, upd))
        p("u_b2", (upd,), zero=True)
        self.params["u_b2"].data += 1.0  # start with the mask mostly open
        # direct intensity gate into the logits; gives sparsity a short path
        p("u_gate", (upd,), zero=True)

        rpd = cfg.r_patch ** 2
        n_tok = (cfg.frame_hw // cfg.r_patch) ** 2
        p("r_ew", (rpd, cfg.r_feat))
        p("r_eb", (cfg.r_feat,), zero=True)
        p("r_w1", (n_tok * cfg.r_feat, cfg.r_hidden))
        p("r_b1", (cfg.r_hidden,), zero=True)
        p("r_w2", (cfg.r_hidden, cfg.r_hidden))
        p("r_b2", (cfg.r_hidden,), zero=True)
        p("r_w3", (cfg.r_hidden, 4), std=0.01)
        p("r_b3", (4,), zero=True)
        # unit (cos, sin) vectors at angle 0 keep atan2 well-conditioned at init
        self.params["r_b3"].data[0] = 1.0
        self.params["r_b3"].data[2] = 1.0

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]):
        for k, p in self.params.items():
            if k not in arrays:
                raise ContractError(f"checkpoint missing parameter {k}")
            p.data = arrays[k].astype(self.dtype)

    # -- graph builders -------------------------------------------------------

    def _mask_pixels(self, x_pixels: Tensor) -> Tensor:
        """(B, H, W) -> per-pixel mask in [0, 1], same shape."""
        cfg = self.cfg
        xt = patchify_t(x_pixels, cfg.u_patch, cfg.frame_hw)
        h = T.gelu(T.add(T.matmul(xt, self.params["u_w1"]), self.params["u_b1"]))
        logits = T.add(T.matmul(h, self.params["u_w2"]), self.params["u_b2"])
        # centered intensity gate: the sparsity pressure on dark pixels and the
        # keep-bright pressure share one parameter direction, so per-pixel
        # discrimination inside a patch emerges within the short schedule
        centered = T.add(xt, Tensor(np.full((1,), -0.5, dtype=self.dtype), dtype=self.dtype))
        logits = T.add(logits, T.mul(centered, self.params["u_gate"]))
        m = T.sigmoid(logits)
        return unpatchify_t(m, cfg.u_patch, cfg.frame_hw)

    def _regress(self, masked_pixels: Tensor) -> Tensor:
        """(B, H, W) masked frame -> (B, 2) absolute joint angles in [-pi, pi)."""
        cfg = self.cfg
        b = masked_pixels.shape[0]
        xt = patchify_t(masked_pixels, cfg.r_patch, cfg.frame_hw)
        h = T.relu(T.add(T.matmul(xt, self.params["r_ew"]), self.params["r_eb"]))
        h = T.reshape(h, (b, xt.shape[1] * cfg.r_feat))
        h = T.relu(T.add(T.matmul(h, self.params["r_w1"]), self.params["r_b1"]))
        h = T.relu(T.add(T.matmul(h, self.params["r_w2"]), self.params["r_b2"]))
        o = T.add(T.matmul(h, self.params["r_w3"]), self.params["r_b3"])  # (c1,s1,c2,s2)
        a1 = T.atan2(T.narrow(o, 1, 1, 1), T.narrow(o, 1, 0, 1))
        a2 = T.atan2(T.narrow(o, 1, 3, 1), T.narrow(o, 1, 2, 1))
        return T.wrap_pi(T.concat([a1, a2], axis=1))

    def action_graph(self, pixels: np.ndarray) -> tuple[Tensor, Tensor]:
        """(B, H, W) pixels -> (predicted actions (B, 2), pixel mask (B, H, W))."""
        x = Tensor(np.asarray(pixels, dtype=self.dtype), dtype=self.dtype)
        m = self._mask_pixels(x)
        rounded = T.round_ste(m, self.cfg.round_threshold)
        masked = T.mul(rounded, x)
        return self._regress(masked), m

    def midm_loss(self, pixels: np.ndarray, actions: np.ndarray) -> Tensor:
        """Huber action error (angular residual) plus normalized mask L1.

        The residual is wrapped to [-pi, pi) before the Huber penalty so the
        loss is continuous across the angle seam; it equals the plain
        difference whenever |a_hat - a| < pi.
        """
        a_hat, m = self.action_graph(pixels)
        target = Tensor(np.asarray(actions, dtype=self.dtype), dtype=self.dtype)
        resid = T.wrap_pi(T.sub(a_hat, target))
        loss = T.huber(resid, self.cfg.huber_delta)
        if self.cfg.lam:
            loss = T.add(loss, T.scale(T.mean_all(T.absolute(m)), self.cfg.lam))
        return loss

    # -- inference --------------------------------------------------------------

    def predict_mask(self, pixels: np.ndarray) -> np.ndarray:
        """(H, W) or (B, H, W) pixels -> per-pixel mask in [0, 1], same leading shape."""
        single = pixels.ndim == 2
        batch = pixels[None] if single else pixels
        with T.no_grad():
            m = self._mask_pixels(Tensor(batch.astype(self.dtype), dtype=self.dtype)).data
        return m[0] if single else m

    def round_mask(self, mask: np.ndarray, threshold: float | None = None) -> np.ndarray:
        thr = self.cfg.round_threshold if threshold is None else threshold
        if not (0.0 < thr < 1.0):
            raise ContractError("round threshold must lie in (0, 1)")
        return (mask >= thr).astype(mask.dtype)

    def predict_action(self, pixels: np.ndarray) -> np.ndarray:
        with T.no_grad():
            a, _ = self.action_graph(pixels[None].astype(self.dtype))
        return a.data[0].astype(np.float64)

    def decode_chunk(self, frames: list[Frame]) -> list[Action]:
        """Elementwise action decoding over a chunk of frames (order preserved)."""
        if not frames:
            raise ContractError("decode_chunk requires a non-empty chunk")
        return [Action(q_target=self.predict_action(f.pixels)) for f in frames]
