"""Invertible per-view augmentation for multi-view training.

Geometric transforms (flip, rotation, crop) are applied to each view's
input tensor independently; the exact inverse map is applied to the
predicted heatmaps before fusion, so the fused 3D estimate lives in the
original camera geometry. The inverse is linear in heatmap values and
registers its transpose as the tape adjoint, keeping the chain
differentiable. Colour jitter touches the input only and needs no
inverse.

Pixels of the inverted heatmap with no pre-image (cropped away, or
rotated out of frame) receive the exclusion value, not zero: a zero is a
live softmax logit inside a person's box and would silently attract the
fused prediction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .heatmap import DEFAULT_EPSILON, Heatmap, InputTensor
from .tensorgrad import NonFiniteError, Tape, Tensor

__all__ = [
    "AugmentError",
    "AugmentationConfig",
    "AugmentationRecord",
    "sample_augmentation",
    "identity_record",
    "apply_to_input",
    "apply_geometric",
    "invert_on_heatmap",
    "invert_on_heatmap_tensor",
]


class AugmentError(ValueError):
    """Invalid augmentation configuration or record/shape mismatch."""


@dataclass(frozen=True)
class AugmentationConfig:
    """Sampling ranges for one view's augmentation draw."""

    image_h: int
    image_w: int
    crop_h: int
    crop_w: int
    flip_prob: float = 0.5
    rot_deg_max: float = 15.0
    jitter_low: float = 0.8
    jitter_high: float = 1.2

    def __post_init__(self):
        if self.crop_h > self.image_h or self.crop_w > self.image_w:
            raise AugmentError(
                f"crop {self.crop_h}x{self.crop_w} larger than image {self.image_h}x{self.image_w}"
            )
        if self.crop_h <= 0 or self.crop_w <= 0:
            raise AugmentError("crop size must be positive")
        if not 0.0 <= self.flip_prob <= 1.0:
            raise AugmentError(f"flip_prob must be in [0,1], got {self.flip_prob}")
        if self.rot_deg_max < 0:
            raise AugmentError("rot_deg_max must be >= 0")
        if not 0.0 < self.jitter_low <= self.jitter_high:
            raise AugmentError("jitter range must satisfy 0 < low <= high")


@dataclass(frozen=True)
class AugmentationRecord:
    """Everything needed to apply one view's augmentation and to invert it.

    crop is (row offset, col offset, crop height, crop width) within the
    original image; image_h/image_w record the original size.
    """

    image_h: int
    image_w: int
    flip: bool
    crop: tuple[int, int, int, int]
    rotation_deg: float
    jitter: tuple[float, float, float]

    def __post_init__(self):
        r0, c0, ch, cw = self.crop
        if r0 < 0 or c0 < 0 or r0 + ch > self.image_h or c0 + cw > self.image_w:
            raise AugmentError(f"crop window {self.crop} outside {self.image_h}x{self.image_w} image")

    @property
    def is_identity(self) -> bool:
        return (not self.flip and self.rotation_deg == 0.0
                and self.crop == (0, 0, self.image_h, self.image_w)
                and self.jitter == (1.0, 1.0, 1.0))


def identity_record(image_h: int, image_w: int) -> AugmentationRecord:
    return AugmentationRecord(
        image_h=image_h, image_w=image_w, flip=False,
        crop=(0, 0, image_h, image_w), rotation_deg=0.0, jitter=(1.0, 1.0, 1.0),
    )


def sample_augmentation(config: AugmentationConfig, rng) -> AugmentationRecord:
    """Draw one view's augmentation. Deterministic given the rng state;
    draw order is fixed (flip, crop offsets, rotation, jitter)."""
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    flip = bool(rng.random() < config.flip_prob)
    r0 = int(rng.integers(0, config.image_h - config.crop_h + 1))
    c0 = int(rng.integers(0, config.image_w - config.crop_w + 1))
    rot = float(rng.uniform(-config.rot_deg_max, config.rot_deg_max))
    jitter = tuple(float(f) for f in rng.uniform(config.jitter_low, config.jitter_high, size=3))
    return AugmentationRecord(
        image_h=config.image_h, image_w=config.image_w,
        flip=flip, crop=(r0, c0, config.crop_h, config.crop_w),
        rotation_deg=rot, jitter=jitter,
    )


# ---------------------------------------------------------------------------
# forward transforms on the input


def _grey(colour: np.ndarray) -> np.ndarray:
    return 0.299 * colour[0] + 0.587 * colour[1] + 0.114 * colour[2]


def _apply_jitter(colour: np.ndarray, jitter) -> np.ndarray:
    brightness, contrast, saturation = jitter
    out = colour * brightness
    if contrast != 1.0:
        out = out * contrast + (1.0 - contrast) * _grey(out).mean()
    if saturation != 1.0:
        grey = _grey(out)
        out = out * saturation + (1.0 - saturation) * grey[None, :, :]
    return np.clip(out, 0.0, 1.0)


def _rotation_sources(h: int, w: int, deg: float):
    """Source sampling positions for rotating content by ``deg`` about the
    image centre: each output pixel samples the input at minus ``deg``."""
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rad = math.radians(deg)
    cos, sin = math.cos(rad), math.sin(rad)
    ys, xs = np.mgrid[0:h, 0:w]
    dx, dy = xs - cx, ys - cy
    sx = cos * dx + sin * dy + cx
    sy = -sin * dx + cos * dy + cy
    return sx, sy


def _rotate_channels(channels: np.ndarray, deg: float, bilinear: np.ndarray,
                     fills: np.ndarray) -> np.ndarray:
    """Rotate a (C, H, W) stack; per-channel interpolation choice and fill."""
    if deg == 0.0:
        return channels.copy()
    c, h, w = channels.shape
    sx, sy = _rotation_sources(h, w, deg)
    out = np.empty_like(channels)
    bl = np.flatnonzero(bilinear)
    nn = np.flatnonzero(~bilinear)
    if bl.size:
        inside = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
        x0 = np.clip(np.floor(sx), 0, w - 2).astype(np.intp)
        y0 = np.clip(np.floor(sy), 0, h - 2).astype(np.intp)
        fx, fy = sx - x0, sy - y0
        w00, w01 = (1 - fx) * (1 - fy), fx * (1 - fy)
        w10, w11 = (1 - fx) * fy, fx * fy
        for i in bl:
            r = channels[i]
            v = (r[y0, x0] * w00 + r[y0, x0 + 1] * w01
                 + r[y0 + 1, x0] * w10 + r[y0 + 1, x0 + 1] * w11)
            out[i] = np.where(inside, v, fills[i])
    if nn.size:
        xn = np.rint(sx).astype(np.intp)
        yn = np.rint(sy).astype(np.intp)
        inside = (xn >= 0) & (xn <= w - 1) & (yn >= 0) & (yn <= h - 1)
        xc, yc = np.clip(xn, 0, w - 1), np.clip(yn, 0, h - 1)
        for i in nn:
            out[i] = np.where(inside, channels[i][yc, xc], fills[i])
    return out


def _apply_geometric_stack(channels: np.ndarray, rec: AugmentationRecord,
                           bilinear: np.ndarray, fills: np.ndarray) -> np.ndarray:
    if rec.flip:
        channels = channels[:, :, ::-1]
    channels = _rotate_channels(np.asarray(channels, dtype=np.float64),
                                rec.rotation_deg, bilinear, fills)
    r0, c0, ch, cw = rec.crop
    return channels[:, r0:r0 + ch, c0:c0 + cw]


def apply_geometric(raster: np.ndarray, rec: AugmentationRecord,
                    bilinear: bool = True, fill: float = 0.0) -> np.ndarray:
    """Apply the record's flip, rotation and crop to one raster."""
    if raster.shape != (rec.image_h, rec.image_w):
        raise AugmentError(f"raster shape {raster.shape} does not match record "
                           f"{(rec.image_h, rec.image_w)}")
    return _apply_geometric_stack(raster[None], rec, np.array([bilinear]),
                                  np.array([fill]))[0]


def apply_to_input(inp: InputTensor, rec: AugmentationRecord) -> InputTensor:
    """Augment a 5-channel input: jitter the colour, then flip, rotate and
    crop every channel. Colour resamples bilinearly; depth and box mask use
    nearest neighbour so depth never interpolates across the unknown marker
    and the mask stays binary."""
    if inp.channels.shape[1:] != (rec.image_h, rec.image_w):
        raise AugmentError(f"input size {inp.channels.shape[1:]} does not match record "
                           f"{(rec.image_h, rec.image_w)}")
    stacked = np.concatenate([_apply_jitter(inp.channels[:3], rec.jitter),
                              inp.channels[3:]], axis=0)
    out = _apply_geometric_stack(
        stacked, rec,
        bilinear=np.array([True, True, True, False, False]),
        fills=np.zeros(5),
    )
    return InputTensor(out)


# ---------------------------------------------------------------------------
# inverse map on heatmaps (linear; adjoint = transpose)


@dataclass(frozen=True)
class _LinearWarp:
    """Sparse bilinear gather: out[p] = sum_k wts[p,k] * src[idx[p,k]],
    with invalid output pixels taking a constant fill value."""

    idx: np.ndarray      # (HW, 4) flat indices into the source raster
    wts: np.ndarray      # (HW, 4)
    valid: np.ndarray    # (HW,) bool
    out_shape: tuple
    src_shape: tuple

    def forward(self, src_flat: np.ndarray, fill: float) -> np.ndarray:
        """src_flat: (C, src_size) -> (C, HW)."""
        out = (src_flat[:, self.idx[:, 0]] * self.wts[:, 0]
               + src_flat[:, self.idx[:, 1]] * self.wts[:, 1]
               + src_flat[:, self.idx[:, 2]] * self.wts[:, 2]
               + src_flat[:, self.idx[:, 3]] * self.wts[:, 3])
        out[:, ~self.valid] = fill
        return out

    def adjoint(self, grad_out_flat: np.ndarray) -> np.ndarray:
        """Transpose map: (C, HW) -> (C, src_size)."""
        c = grad_out_flat.shape[0]
        src_size = self.src_shape[0] * self.src_shape[1]
        v = self.valid
        g = grad_out_flat[:, v]
        chan_base = (np.arange(c, dtype=np.intp) * src_size)[:, None]
        acc = np.zeros(c * src_size)
        for k in range(4):
            flat_idx = (chan_base + self.idx[v, k][None, :]).ravel()
            acc += np.bincount(flat_idx, weights=(g * self.wts[v, k]).ravel(),
                               minlength=c * src_size)
        return acc.reshape(c, src_size)


def _inverse_warp(rec: AugmentationRecord) -> _LinearWarp:
    """Build the map taking an augmented-crop heatmap back to the original
    frame: original pixel q samples the augmented raster at
    crop(rotate(flip(q)))."""
    h, w = rec.image_h, rec.image_w
    r0, c0, ch, cw = rec.crop
    ys, xs = np.mgrid[0:h, 0:w]
    xs = xs.astype(np.float64).ravel()
    ys = ys.astype(np.float64).ravel()
    if rec.flip:
        xs = (w - 1) - xs
    if rec.rotation_deg != 0.0:
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        rad = math.radians(rec.rotation_deg)
        cos, sin = math.cos(rad), math.sin(rad)
        dx, dy = xs - cx, ys - cy
        # content moved by +deg, so original content at q now sits at R(+deg) q
        xs = cos * dx - sin * dy + cx
        ys = sin * dx + cos * dy + cy
    xs = xs - c0
    ys = ys - r0
    valid = (xs >= 0) & (xs <= cw - 1) & (ys >= 0) & (ys <= ch - 1)
    x0 = np.clip(np.floor(xs), 0, max(cw - 2, 0)).astype(np.intp)
    y0 = np.clip(np.floor(ys), 0, max(ch - 2, 0)).astype(np.intp)
    x1 = np.minimum(x0 + 1, cw - 1)
    y1 = np.minimum(y0 + 1, ch - 1)
    fx = np.where(valid, xs - x0, 0.0)
    fy = np.where(valid, ys - y0, 0.0)
    idx = np.stack([y0 * cw + x0, y0 * cw + x1, y1 * cw + x0, y1 * cw + x1], axis=1)
    wts = np.stack([(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy], axis=1)
    wts[~valid] = 0.0
    return _LinearWarp(idx=idx, wts=wts, valid=valid, out_shape=(h, w), src_shape=(ch, cw))


def invert_on_heatmap(h: Heatmap, rec: AugmentationRecord,
                      epsilon: float = DEFAULT_EPSILON) -> Heatmap:
    """Map a heatmap predicted in the augmented frame back to the original
    frame. Pixels with no pre-image under the inverse map take epsilon."""
    r0, c0, ch, cw = rec.crop
    if h.raster.shape != (ch, cw):
        raise AugmentError(f"heatmap shape {h.raster.shape} does not match crop {(ch, cw)}")
    warp = _inverse_warp(rec)
    out = warp.forward(h.raster.reshape(1, -1), epsilon)
    return Heatmap(view=h.view, joint=h.joint,
                   raster=out.reshape(rec.image_h, rec.image_w))


def invert_on_heatmap_tensor(tape: Tape | None, t: Tensor, rec: AugmentationRecord,
                             epsilon: float = DEFAULT_EPSILON) -> Tensor:
    """Tape-recorded inverse augmentation of a (J, crop_h, crop_w) tensor.

    The map is linear in the heatmap values, so its registered adjoint is
    the exact transpose; epsilon-filled pixels receive no gradient."""
    r0, c0, ch, cw = rec.crop
    if t.values.ndim != 3 or t.values.shape[1:] != (ch, cw):
        raise AugmentError(f"tensor shape {t.shape} does not match crop {(ch, cw)}")
    j = t.shape[0]
    warp = _inverse_warp(rec)
    out_vals = warp.forward(t.values.reshape(j, -1), epsilon).reshape(j, rec.image_h, rec.image_w)

    def vjp(g):
        return (warp.adjoint(g.reshape(j, -1)).reshape(t.shape),)

    if not np.all(np.isfinite(out_vals)):
        raise NonFiniteError("op 'invert_augmentation' produced non-finite values")
    out = Tensor(out_vals, requires_grad=t.requires_grad)
    if tape is not None and out.requires_grad:
        tape.record((t,), out, vjp, "invert_augmentation")
    return out
