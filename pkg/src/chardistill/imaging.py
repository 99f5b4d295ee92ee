"""Image containers, homography algebra, warping, and the two-view augmentation.

Conventions used throughout the package:

* images are (H, W, C) float64 arrays with intensities in [0, 1],
* pixel coordinates are (x, y) = (column, row), with pixel centers on the
  integer grid,
* a homography maps source coordinates to destination coordinates; warping
  an image by ``h`` therefore pulls each destination pixel from ``h^-1``.
"""

from __future__ import annotations

import dataclasses
import math

import numpy as np

GRAYSCALE_WEIGHTS = (0.299, 0.587, 0.114)


class TransformError(ValueError):
    """Raised for singular or otherwise unusable transforms."""


@dataclasses.dataclass(frozen=True)
class ImageBuffer:
    """An intensity grid in [0, 1] with 1 or 3 channels."""

    data: np.ndarray  # (H, W, C) float64

    def __post_init__(self):
        d = np.asarray(self.data, dtype=np.float64)
        if d.ndim == 2:
            d = d[:, :, None]
        if d.ndim != 3 or d.shape[2] not in (1, 3):
            raise ValueError(f"expected (H, W, 1|3) image data, got shape {d.shape}")
        if not np.isfinite(d).all():
            raise ValueError("image contains non-finite values")
        if d.min() < 0.0 or d.max() > 1.0:
            raise ValueError("image intensities must lie in [0, 1]")
        object.__setattr__(self, "data", d)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


@dataclasses.dataclass(frozen=True)
class Homography:
    """Invertible 3x3 projective transform on homogeneous pixel coordinates.

    The matrix is normalized so that m[2, 2] == 1 whenever it is nonzero.
    """

    m: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValueError(f"expected a 3x3 matrix, got shape {m.shape}")
        if abs(np.linalg.det(m)) < 1e-12:
            raise TransformError("non-invertible transform")
        if m[2, 2] != 0.0:
            m = m / m[2, 2]
        m = np.ascontiguousarray(m)
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @staticmethod
    def identity() -> "Homography":
        return Homography(np.eye(3))

    @staticmethod
    def translation(tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return Homography(m)

    def apply(self, xy: np.ndarray) -> np.ndarray:
        """Map an (N, 2) array of (x, y) points through the transform."""
        pts = np.asarray(xy, dtype=np.float64)
        ones = np.ones((pts.shape[0], 1))
        hom = np.hstack([pts, ones]) @ self.m.T
        return hom[:, :2] / hom[:, 2:3]


def compose(a: Homography, b: Homography) -> Homography:
    """Composition that applies ``b`` first, then ``a``."""
    return Homography(a.m @ b.m)


def invert(a: Homography) -> Homography:
    try:
        return Homography(np.linalg.inv(a.m))
    except np.linalg.LinAlgError as exc:
        raise TransformError("non-invertible transform") from exc


@dataclasses.dataclass(frozen=True)
class AugmentConfig:
    """Ranges for geometric and photometric augmentation.

    Geometry: rotation/shear in degrees, isotropic scale, translation and
    perspective corner displacement as fractions of each image dimension.
    Shear is horizontal. All ranges are symmetric around the identity; every
    range set to zero (and scale to (1, 1)) yields the identity transform.
    """

    rotate_deg: float = 15.0
    shear_deg: float = 10.0
    scale_range: tuple[float, float] = (0.8, 1.2)
    translate_frac: float = 0.1
    perspective_frac: float = 0.1
    brightness: float = 0.4
    contrast: float = 0.4
    grayscale_prob: float = 0.2
    channel_dropout_prob: float = 0.1

    def __post_init__(self):
        if self.scale_range[0] <= 0 or self.scale_range[0] > self.scale_range[1]:
            raise ValueError(f"bad scale range {self.scale_range}")
        for name in ("rotate_deg", "shear_deg", "translate_frac", "perspective_frac",
                     "brightness", "contrast"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        for name in ("grayscale_prob", "channel_dropout_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")

    @staticmethod
    def none() -> "AugmentConfig":
        """A configuration that leaves images untouched."""
        return AugmentConfig(rotate_deg=0.0, shear_deg=0.0, scale_range=(1.0, 1.0),
                             translate_frac=0.0, perspective_frac=0.0, brightness=0.0,
                             contrast=0.0, grayscale_prob=0.0, channel_dropout_prob=0.0)


@dataclasses.dataclass(frozen=True)
class ViewPair:
    """A color-only view, a geometrically warped view, and the exact warp."""

    x_reg: ImageBuffer
    x_irr: ImageBuffer
    pi_irr: Homography

    def __post_init__(self):
        if self.x_reg.data.shape != self.x_irr.data.shape:
            raise ValueError("view dimensions differ")


def to_grayscale(img: ImageBuffer) -> ImageBuffer:
    """Rec.601 luma conversion; single-channel images pass through unchanged."""
    if img.channels == 1:
        return img
    w = np.asarray(GRAYSCALE_WEIGHTS)
    gray = img.data @ w
    return ImageBuffer(np.clip(gray, 0.0, 1.0)[:, :, None])


def _four_point_homography(src: np.ndarray, dst: np.ndarray) -> Homography:
    """Solve for the homography mapping four source points to four targets."""
    a = np.zeros((8, 8))
    b = np.zeros(8)
    for i, ((x, y), (u, v)) in enumerate(zip(src, dst)):
        a[2 * i] = [x, y, 1, 0, 0, 0, -u * x, -u * y]
        a[2 * i + 1] = [0, 0, 0, x, y, 1, -v * x, -v * y]
        b[2 * i] = u
        b[2 * i + 1] = v
    try:
        h = np.linalg.solve(a, b)
    except np.linalg.LinAlgError as exc:
        raise TransformError("degenerate corner configuration") from exc
    return Homography(np.append(h, 1.0).reshape(3, 3))


def sample_geometry(rng: np.random.Generator, cfg: AugmentConfig,
                    width: int, height: int) -> Homography:
    """Draw a random rotation/shear/scale/translation/perspective composite.

    Rotation, shear, and scale act about the image center; translation is
    applied last. All draws happen in a fixed order so the result is a pure
    function of the rng state.
    """
    theta = math.radians(rng.uniform(-cfg.rotate_deg, cfg.rotate_deg))
    shear = math.radians(rng.uniform(-cfg.shear_deg, cfg.shear_deg))
    scale = rng.uniform(cfg.scale_range[0], cfg.scale_range[1])
    tx = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * width
    ty = rng.uniform(-cfg.translate_frac, cfg.translate_frac) * height
    dcorners = rng.uniform(-cfg.perspective_frac, cfg.perspective_frac, size=(4, 2))
    dcorners *= np.array([width, height])

    rot = np.array([[math.cos(theta), -math.sin(theta), 0],
                    [math.sin(theta), math.cos(theta), 0],
                    [0, 0, 1]])
    shr = np.array([[1, math.tan(shear), 0], [0, 1, 0], [0, 0, 1]])
    scl = np.diag([scale, scale, 1.0])

    corners = np.array([[0, 0], [width - 1.0, 0], [width - 1.0, height - 1.0],
                        [0, height - 1.0]])
    persp = _four_point_homography(corners, corners + dcorners)

    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    to_center = Homography.translation(-cx, -cy)
    from_center = Homography.translation(cx, cy)

    linear = Homography(persp.m @ rot @ shr @ scl)
    centered = compose(from_center, compose(linear, to_center))
    return compose(Homography.translation(tx, ty), centered)


def _inverse_grid(h: Homography, height: int, width: int):
    """Source coordinates for every destination pixel under ``h``."""
    hinv = invert(h).m
    xs, ys = np.meshgrid(np.arange(width, dtype=np.float64),
                         np.arange(height, dtype=np.float64))
    denom = hinv[2, 0] * xs + hinv[2, 1] * ys + hinv[2, 2]
    sx = (hinv[0, 0] * xs + hinv[0, 1] * ys + hinv[0, 2]) / denom
    sy = (hinv[1, 0] * xs + hinv[1, 1] * ys + hinv[1, 2]) / denom
    return sx, sy


def warp_image(img: ImageBuffer, h: Homography) -> ImageBuffer:
    """Inverse-mapped bilinear warp; pixels sampled outside the source are 0."""
    height, width = img.height, img.width
    sx, sy = _inverse_grid(h, height, width)

    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx = sx - x0
    fy = sy - y0

    out = np.zeros((height, width, img.channels))
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    offsets = ((0, 0), (0, 1), (1, 0), (1, 1))
    for (dy, dx), w in zip(offsets, weights):
        yc = y0 + dy
        xc = x0 + dx
        valid = (xc >= 0) & (xc < width) & (yc >= 0) & (yc < height)
        ycl = np.clip(yc, 0, height - 1)
        xcl = np.clip(xc, 0, width - 1)
        out += (w * valid)[:, :, None] * img.data[ycl, xcl]
    return ImageBuffer(np.clip(out, 0.0, 1.0))


def warp_mask(mask: np.ndarray, h: Homography) -> np.ndarray:
    """Nearest-neighbor warp of a {0,1} mask; out-of-source pixels become 0."""
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected a 2-D mask, got shape {mask.shape}")
    height, width = mask.shape
    sx, sy = _inverse_grid(h, height, width)
    xr = np.rint(sx).astype(np.int64)
    yr = np.rint(sy).astype(np.int64)
    valid = (xr >= 0) & (xr < width) & (yr >= 0) & (yr < height)
    out = np.zeros((height, width), dtype=np.uint8)
    out[valid] = mask[yr[valid], xr[valid]]
    return out


def color_jitter(img: ImageBuffer, rng: np.random.Generator,
                 cfg: AugmentConfig) -> ImageBuffer:
    """Random brightness/contrast plus probabilistic channel dropout and
    grayscale conversion. Geometry is untouched; output stays in [0, 1]."""
    data = img.data
    b = rng.uniform(-cfg.brightness, cfg.brightness) if cfg.brightness > 0 else 0.0
    c = rng.uniform(-cfg.contrast, cfg.contrast) if cfg.contrast > 0 else 0.0
    if b != 0.0:
        data = data + b
    if c != 0.0:
        data = 0.5 + (data - 0.5) * (1.0 + c)
    if img.channels == 3 and cfg.channel_dropout_prob > 0:
        if rng.random() < cfg.channel_dropout_prob:
            ch = int(rng.integers(0, 3))
            data = data.copy()
            data[:, :, ch] = 0.0
    if cfg.grayscale_prob > 0 and rng.random() < cfg.grayscale_prob:
        gray = np.clip(data, 0.0, 1.0) @ np.asarray(GRAYSCALE_WEIGHTS) \
            if data.shape[2] == 3 else data[:, :, 0]
        data = np.repeat(gray[:, :, None], img.channels, axis=2)
    if data is img.data:
        return img
    return ImageBuffer(np.clip(data, 0.0, 1.0))


def make_view_pair(img: ImageBuffer, rng: np.random.Generator,
                   cfg: AugmentConfig) -> ViewPair:
    """Build the color-only view and the additionally warped view.

    The first view keeps identity geometry; the second one is independently
    color-jittered and then warped by a freshly sampled homography, which is
    returned so masks can be moved along the exact same path.
    """
    x_reg = color_jitter(img, rng, cfg)
    x_irr_color = color_jitter(img, rng, cfg)
    pi_irr = sample_geometry(rng, cfg, img.width, img.height)
    x_irr = warp_image(x_irr_color, pi_irr)
    return ViewPair(x_reg=x_reg, x_irr=x_irr, pi_irr=pi_irr)
