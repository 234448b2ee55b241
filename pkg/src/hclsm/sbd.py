"""Spatial broadcast decoder: every slot is tiled over the patch grid with
(x, y) coordinates and decoded into feature predictions plus an ownership
logit; ownership is normalised over alive slots only."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ops
from .tensor.core import Tensor
from .tensor.gradcheck import register_check
from .tensor.nn import Module, param


class DegenerateMaskError(ValueError):
    """No alive slot left to own a position."""


def coord_grid(grid_h: int, grid_w: int, dtype=np.float64) -> np.ndarray:
    """[grid_h, grid_w, 2] with (x, y) spanning [-1, 1]; a 1-cell grid sits at 0."""
    ys = np.linspace(-1.0, 1.0, grid_h) if grid_h > 1 else np.zeros(1)
    xs = np.linspace(-1.0, 1.0, grid_w) if grid_w > 1 else np.zeros(1)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([xx, yy], axis=-1).astype(dtype)


@dataclass
class BroadcastGrid:
    grid: Tensor  # [B, N, H, W, d_slot + 2]
    grid_h: int
    grid_w: int


def broadcast(slots: Tensor, grid_h: int, grid_w: int) -> BroadcastGrid:
    B, N, d = slots.shape
    tiled = ops.broadcast_to(slots.reshape(B, N, 1, 1, d), (B, N, grid_h, grid_w, d))
    coords = np.broadcast_to(coord_grid(grid_h, grid_w, slots.dtype), (B, N, grid_h, grid_w, 2))
    return BroadcastGrid(ops.concat([tiled, Tensor(coords)], axis=-1), grid_h, grid_w)


@dataclass
class DecodedSlots:
    features: Tensor  # [B, N, P, d_feat]
    alpha_raw: Tensor  # [B, N, P]
    alpha: Tensor | None = None  # [B, N, P]


class SpatialBroadcastDecoder(Module):
    """Four 3x3 conv layers (GELU between) shared across slots."""

    def __init__(self, d_slot: int, d_feat: int, grid_h: int, grid_w: int, rng: np.random.Generator,
                 hidden: int = 64):
        self.grid_h, self.grid_w = grid_h, grid_w
        self.d_feat = d_feat
        chans = [d_slot + 2, hidden, hidden, hidden, d_feat + 1]
        self.weights = []
        self.biases = []
        for cin, cout in zip(chans[:-1], chans[1:]):
            bound = 1.0 / np.sqrt(9 * cin)
            self.weights.append(param(rng.uniform(-bound, bound, size=(3, 3, cin, cout))))
            self.biases.append(param(np.zeros(cout)))

    def decode(self, grid: BroadcastGrid) -> tuple[Tensor, Tensor]:
        """Generic path: run the conv stack on an explicit broadcast grid."""
        x = grid.grid
        B, N, H, W, C = x.shape
        h = x.reshape(B * N, H, W, C)
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = ops.conv2d_3x3(h, w, b)
            if layer < len(self.weights) - 1:
                h = ops.gelu(h)
        return self._split(h, B, N)

    def __call__(self, slots: Tensor) -> tuple[Tensor, Tensor]:
        """Same result as ``decode(broadcast(slots))``, with a cheaper first layer.

        A spatially constant input convolved with zero padding only depends on
        which of the nine taps land inside the grid, so the first layer is
        ``valid_taps @ (slot @ W_tap)`` plus a fixed coordinate response.
        """
        B, N, d = slots.shape
        H, W = self.grid_h, self.grid_w
        w0, b0 = self.weights[0], self.biases[0]
        F = w0.shape[-1]
        valid = _valid_taps(H, W, slots.dtype)  # [P, 9]
        w_slot = ops.transpose(w0[:, :, :d, :].reshape(9, d, F), (1, 0, 2)).reshape(d, 9 * F)
        per_tap = ops.matmul(slots.reshape(B * N, d), w_slot).reshape(B * N, 9, F)
        h = ops.matmul(Tensor(valid), per_tap)  # [BN, P, F]
        coords = Tensor(coord_grid(H, W, slots.dtype)[None])
        coord_resp = ops.conv2d_3x3(coords, w0[:, :, d:, :], b0).reshape(1, H * W, F)
        h = ops.gelu(h + coord_resp).reshape(B * N, H, W, F)
        for layer in range(1, len(self.weights)):
            h = ops.conv2d_3x3(h, self.weights[layer], self.biases[layer])
            if layer < len(self.weights) - 1:
                h = ops.gelu(h)
        return self._split(h, B, N)

    def _split(self, h: Tensor, B: int, N: int) -> tuple[Tensor, Tensor]:
        P = self.grid_h * self.grid_w
        out = h.reshape(B, N, P, self.d_feat + 1)
        return out[..., : self.d_feat], out[..., self.d_feat]


def _valid_taps(H: int, W: int, dtype) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(H), np.arange(W), indexing="ij")
    cols = []
    for di in (-1, 0, 1):
        for dj in (-1, 0, 1):
            ok = (ii + di >= 0) & (ii + di < H) & (jj + dj >= 0) & (jj + dj < W)
            cols.append(ok.reshape(-1))
    return np.stack(cols, axis=-1).astype(dtype)


def normalize_alpha(alpha_raw: Tensor, alive: np.ndarray) -> Tensor:
    """Softmax over alive slots per position; dead slots get exactly zero.

    alpha_raw: [B, N, P]; alive: [B, N] bool.
    """
    alive = np.asarray(alive, dtype=bool)
    if not alive.any(axis=-1).all():
        raise DegenerateMaskError("a batch element has no alive slot to normalise alpha over")
    masked = ops.where(alive[..., None], alpha_raw, -np.inf)
    return ops.softmax(masked, axis=1)


def sbd_loss(features: Tensor, alpha: Tensor, targets: Tensor) -> Tensor:
    """Alpha-weighted squared error, averaged over batch, positions and channels.

    features: [B, N, P, F], alpha: [B, N, P], targets: [B, P, F] (constant).
    """
    B, N, P, F = features.shape
    diff = features - targets.reshape(B, 1, P, F)
    per = ops.sum(ops.square_stable(diff), axis=-1)  # [B, N, P]
    return ops.sum(alpha * per) * (1.0 / (B * P * F))


def segmentation_map(alpha: Tensor | np.ndarray) -> np.ndarray:
    """Per-position owning slot; ``argmax`` already breaks ties toward the lowest index."""
    a = alpha.data if isinstance(alpha, Tensor) else np.asarray(alpha)
    return np.argmax(a, axis=-2)


# ------------------------------------------------------------ gradient checks


@register_check("sbd_decode")
def _c_decode(rng):
    dec = SpatialBroadcastDecoder(3, 2, 4, 4, rng, hidden=4)

    def f(slots, w0, w3):
        dec.weights[0], dec.weights[3] = w0, w3
        feats, alpha_raw = dec(slots)
        return feats.sum() + alpha_raw.sum() * 0.5

    return f, [rng.normal(size=(1, 1, 3)), dec.weights[0].data.copy(), dec.weights[3].data.copy()]


@register_check("sbd_loss")
def _c_sbd_loss(rng):
    alive = np.array([[True, False, True]])
    target = rng.normal(size=(1, 5, 2))

    def f(feats, raw):
        return sbd_loss(feats, normalize_alpha(raw, alive), Tensor(target))

    return f, [rng.normal(size=(1, 3, 5, 2)), rng.normal(size=(1, 3, 5))]
