"""On-disk dataset layout and trajectory interchange format.

Layout of a dataset directory::

    images/000000.png   8-bit grayscale
    times.txt           "index timestamp_s [exposure_ms]" per line
    camera.txt          "fx fy cx cy width height"
    groundtruth.txt     trajectory format (optional for running)
    pcalib.txt          optional, 256 inverse-response samples
    vignette.pgm        optional

Trajectory lines are ``timestamp tx ty tz qx qy qz qw`` with 9 significant digits.
"""
import hashlib
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from .evaluation import Trajectory
from .geometry import Intrinsics
from .photometry import load_calibration


class DatasetError(IOError):
    pass


def _fmt(x):
    return f"{x:.9g}"


def write_trajectory(path, traj):
    lines = []
    for t, p, q in zip(traj.times, traj.positions, traj.quats):
        lines.append(" ".join(_fmt(v) for v in (t, *p, *q)))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def read_trajectory(path, label="estimate"):
    rows = []
    try:
        with open(path) as fh:
            for ln, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.replace(",", " ").split()
                if len(parts) != 8:
                    raise DatasetError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
                rows.append([float(x) for x in parts])
    except OSError as exc:
        raise DatasetError(f"cannot read trajectory {path}: {exc}") from exc
    arr = np.array(rows, dtype=np.float64).reshape(-1, 8)
    return Trajectory(arr[:, 0], arr[:, 1:4], arr[:, 4:8], label)


def write_camera(path, K):
    with open(path, "w") as fh:
        fh.write(" ".join(_fmt(v) for v in (K.fx, K.fy, K.cx, K.cy)) + f" {K.width} {K.height}\n")


def read_camera(path):
    try:
        with open(path) as fh:
            parts = fh.readline().split()
        fx, fy, cx, cy = (float(x) for x in parts[:4])
        return Intrinsics(fx, fy, cx, cy, int(parts[4]), int(parts[5]))
    except (OSError, ValueError, IndexError) as exc:
        raise DatasetError(f"unreadable intrinsics {path}: {exc}") from exc


def write_times(path, times, exposures_ms=None):
    with open(path, "w") as fh:
        for i, t in enumerate(times):
            if exposures_ms is None:
                fh.write(f"{i} {_fmt(t)}\n")
            else:
                fh.write(f"{i} {_fmt(t)} {_fmt(exposures_ms[i])}\n")


def read_times(path):
    idx, ts, ex = [], [], []
    try:
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts or parts[0].startswith("#"):
                    continue
                idx.append(int(parts[0]))
                ts.append(float(parts[1]))
                ex.append(float(parts[2]) if len(parts) > 2 else np.nan)
    except (OSError, ValueError, IndexError) as exc:
        raise DatasetError(f"unreadable times file {path}: {exc}") from exc
    return np.array(idx, dtype=int), np.array(ts), np.array(ex)


def image_path(root, index):
    return os.path.join(root, "images", f"{index:06d}.png")


def write_image(path, img_u8):
    Image.fromarray(np.asarray(img_u8, dtype=np.uint8), mode="L").save(path, optimize=False)


def read_image(path):
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("L"), dtype=np.uint8)
    except OSError as exc:
        raise DatasetError(f"cannot read image {path}: {exc}") from exc


@dataclass
class Dataset:
    root: str
    K: Intrinsics
    indices: np.ndarray
    times: np.ndarray
    exposures: np.ndarray
    calibration: object

    def __len__(self):
        return len(self.indices)

    def image(self, k):
        return read_image(image_path(self.root, int(self.indices[k])))

    def exposure(self, k):
        """Exposure in seconds, or ``None`` when the dataset does not provide one."""
        e = self.exposures[k]
        return None if not np.isfinite(e) else e / 1000.0

    def groundtruth(self):
        path = os.path.join(self.root, "groundtruth.txt")
        return read_trajectory(path, "groundtruth") if os.path.exists(path) else None


def open_dataset(root):
    for name in ("times.txt", "camera.txt"):
        if not os.path.exists(os.path.join(root, name)):
            raise DatasetError(f"dataset {root} is missing {name}")
    if not os.path.isdir(os.path.join(root, "images")):
        raise DatasetError(f"dataset {root} is missing images/")
    K = read_camera(os.path.join(root, "camera.txt"))
    idx, ts, ex = read_times(os.path.join(root, "times.txt"))
    pcal = os.path.join(root, "pcalib.txt")
    vig = os.path.join(root, "vignette.pgm")
    calib = load_calibration(pcal if os.path.exists(pcal) else None,
                             vig if os.path.exists(vig) else None)
    return Dataset(root, K, idx, ts, ex, calib)


def directory_digest(root):
    """SHA-256 over relative paths and file contents, in sorted order."""
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            full = os.path.join(dirpath, name)
            h.update(os.path.relpath(full, root).encode())
            with open(full, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()
