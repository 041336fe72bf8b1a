"""Image formation: photometric correction, frames with pyramids, affine brightness."""
from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class CalibrationError(ValueError):
    pass


@dataclass
class PhotometricCalibration:
    """Inverse response ``G^-1`` tabulated on raw values 0..255, plus a vignette map.

    ``inverse_response=None`` and ``vignette=None`` is the linear, vignette-free
    camera, in which correction is the identity.
    """

    inverse_response: np.ndarray = None
    vignette: np.ndarray = None

    def __post_init__(self):
        if self.inverse_response is not None:
            g = np.asarray(self.inverse_response, dtype=np.float64)
            if g.shape != (256,):
                raise CalibrationError(f"response table needs 256 entries, got {g.shape}")
            if not np.all(np.diff(g) > 0):
                raise CalibrationError("response must be strictly monotone")
            self.inverse_response = g
        if self.vignette is not None:
            v = np.asarray(self.vignette, dtype=np.float64)
            if not np.all(v > 0):
                raise CalibrationError("vignette contains non-positive values")
            if np.any(v > 1.0 + 1e-12):
                raise CalibrationError("vignette values must lie in (0, 1]")
            self.vignette = v

    @property
    def identity(self):
        return self.inverse_response is None and self.vignette is None

    @classmethod
    def from_response(cls, response, vignette=None):
        """Build from forward response samples ``G(0..255)`` by inverting the table."""
        response = np.asarray(response, dtype=np.float64)
        if response.shape != (256,) or not np.all(np.diff(response) > 0):
            raise CalibrationError("forward response must be 256 strictly increasing samples")
        xs = np.arange(256, dtype=np.float64)
        # the inverse table is indexed by raw value 0..255
        inv = np.interp(xs, response, xs)
        return cls(inverse_response=inv, vignette=vignette)

    def apply_inverse_response(self, raw):
        if self.inverse_response is None:
            return np.asarray(raw, dtype=np.float64)
        return np.interp(raw, np.arange(256, dtype=np.float64), self.inverse_response)

    def correct(self, raw):
        raw = np.asarray(raw, dtype=np.float64)
        if self.identity:
            return raw.copy()
        img = self.apply_inverse_response(raw)
        if self.vignette is not None:
            if self.vignette.shape != img.shape:
                raise CalibrationError(f"vignette shape {self.vignette.shape} != image {img.shape}")
            img = img / self.vignette
        return img


def load_calibration(pcalib_path=None, vignette_path=None):
    """Read ``pcalib.txt`` (256 inverse-response samples on line 1) and a vignette PGM.

    Missing paths give the identity calibration.
    """
    inv = None
    vig = None
    if pcalib_path is not None:
        with open(pcalib_path) as fh:
            inv = np.array(fh.readline().split(), dtype=np.float64)
    if vignette_path is not None:
        from PIL import Image

        with Image.open(vignette_path) as im:
            arr = np.asarray(im)
        maxval = 65535.0 if arr.dtype == np.uint16 or arr.max() > 255 else 255.0
        vig = arr.astype(np.float64) / maxval
    return PhotometricCalibration(inverse_response=inv, vignette=vig)


@dataclass
class AffineBrightness:
    a: float = 0.0
    b: float = 0.0

    def copy(self):
        return AffineBrightness(self.a, self.b)


def brightness_scale(ti, tj, ab_i, ab_j):
    """``(t_j e^{a_j}) / (t_i e^{a_i})``."""
    return (tj * np.exp(ab_j.a)) / (ti * np.exp(ab_i.a))


def brightness_transfer(Ii_val, ti, tj, ab_i, ab_j):
    """Predict the intensity in frame j of a value observed as ``Ii_val`` in frame i."""
    if not (ti > 0 and tj > 0):
        raise ValueError("exposure times must be positive")
    return ab_j.b + brightness_scale(ti, tj, ab_i, ab_j) * (np.asarray(Ii_val, dtype=np.float64) - ab_i.b)


def default_pyramid_levels(width):
    """Number of levels so the coarsest level stays at least 100 px wide (4 for 848, 3 for 424)."""
    levels = 1
    while (width >> levels) >= 100 and levels < 6:
        levels += 1
    return levels


@dataclass
class Frame:
    """A photometrically corrected image with its pyramid and per-level gradients."""

    timestamp: float
    exposure: float
    image: np.ndarray
    levels: list = field(default_factory=list)
    gradients: list = field(default_factory=list)
    index: int = -1

    @property
    def shape(self):
        return self.image.shape

    @property
    def gradient(self):
        return self.gradients[0]

    def grad_norm(self, level=0):
        gx, gy = self.gradients[level]
        return np.hypot(gx, gy)


def build_frame(image, timestamp=0.0, exposure=1.0, n_levels=None, index=-1):
    img = np.ascontiguousarray(image, dtype=np.float64)
    if n_levels is None:
        n_levels = default_pyramid_levels(img.shape[1])
    levels = [img]
    for _ in range(1, n_levels):
        levels.append(_kernels.downsample2(levels[-1]))
    grads = [_kernels.central_gradient(lv) for lv in levels]
    return Frame(float(timestamp), float(exposure), img, levels, grads, index)


def correct_frame(raw, calib=None, exposure=None, timestamp=0.0, n_levels=None, index=-1):
    """Photometrically correct a raw 8-bit image and build its pyramid.

    An unknown exposure (``None``) is treated as 1; the affine brightness
    parameters then absorb exposure drift.
    """
    calib = calib or PhotometricCalibration()
    if exposure is None:
        exposure = 1.0
    if not exposure > 0:
        raise ValueError("exposure must be positive")
    return build_frame(calib.correct(raw), timestamp, exposure, n_levels, index)
