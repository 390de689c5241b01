"""PNG and benchmark-dataset I/O.

A dataset root holds ``HR/`` and optionally ``LR_x{2,3,4}/`` directories
with files paired by stem.  When the LR directory is absent the low-res
side is synthesized with antialiased bicubic downscaling after
center-cropping the HR image to a multiple of the scale, matching the
standard benchmark degradation.  Layout validation reports every problem
at once rather than stopping at the first.
"""

from __future__ import annotations

import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .imaging import PlanarImage, resize_rgb

_PNG_SIGNATURE = b"\x89PNG\r\n\x1a\n"


class PngFormatError(ValueError):
    """Unsupported PNG variant (bit depth, interlacing, damaged header)."""


class DatasetError(ValueError):
    """Dataset layout violations, all of them listed in the message."""


def _inspect_png_header(path: str | Path) -> tuple[int, int, int, int, int]:
    with open(path, "rb") as fh:
        head = fh.read(33)
    if len(head) < 33 or head[:8] != _PNG_SIGNATURE or head[12:16] != b"IHDR":
        raise PngFormatError(f"{path}: not a PNG file (bad signature or missing IHDR)")
    width, height, bit_depth, color_type, interlace = struct.unpack(">IIBBxx B", head[16:29])
    return width, height, bit_depth, color_type, interlace


def load_png(path: str | Path) -> PlanarImage:
    """Load an 8-bit non-interlaced PNG; grayscale/palette/alpha promoted to RGB."""
    width, height, bit_depth, color_type, interlace = _inspect_png_header(path)
    if bit_depth != 8:
        raise PngFormatError(f"{path}: unsupported bit depth {bit_depth} (only 8-bit PNG is handled)")
    if interlace != 0:
        raise PngFormatError(f"{path}: interlaced (Adam7) PNG is not supported")
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.uint8)
    if arr.shape[:2] != (height, width):  # pragma: no cover - header/stream disagreement
        raise PngFormatError(f"{path}: header size {width}x{height} does not match decoded data")
    return PlanarImage(arr)


def save_png(img: PlanarImage, path: str | Path) -> None:
    """Write an 8-bit RGB PNG atomically (temp file + rename)."""
    path = str(path)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".png", prefix=".tmp-")
    os.close(fd)
    try:
        Image.fromarray(img.pixels, mode="RGB").save(tmp, format="PNG")
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


@dataclass(frozen=True)
class DatasetLayout:
    root: Path
    scale: int

    @property
    def hr_dir(self) -> Path:
        return self.root / "HR"

    @property
    def lr_dir(self) -> Path:
        return self.root / f"LR_x{self.scale}"


@dataclass(frozen=True)
class ImagePair:
    stem: str
    hr_path: Path
    lr_path: Path | None  # None: LR synthesized from HR on load


def center_crop_to_multiple(img: PlanarImage, multiple: int) -> PlanarImage:
    """Largest centered crop whose sides are divisible by ``multiple``."""
    h, w = img.height, img.width
    ch, cw = h - h % multiple, w - w % multiple
    if ch < multiple or cw < multiple:
        raise DatasetError(f"image {w}x{h} too small to crop to a multiple of {multiple}")
    top, left = (h - ch) // 2, (w - cw) // 2
    return PlanarImage(img.pixels[top : top + ch, left : left + cw])


def scan_dataset(layout: DatasetLayout) -> list[ImagePair]:
    """Enumerate pairs in lexicographic stem order, validating the layout.

    Every orphan file and LR/HR dimension mismatch is collected and raised
    together in one DatasetError.
    """
    if not layout.hr_dir.is_dir():
        raise DatasetError(f"{layout.root}: missing HR/ directory")
    hr_files = {p.stem: p for p in sorted(layout.hr_dir.glob("*.png"))}
    if not hr_files:
        raise DatasetError(f"{layout.hr_dir}: no PNG files")
    problems: list[str] = []
    pairs: list[ImagePair] = []
    if layout.lr_dir.is_dir():
        lr_files = {p.stem: p for p in sorted(layout.lr_dir.glob("*.png"))}
        for stem in sorted(set(hr_files) | set(lr_files)):
            hr, lr = hr_files.get(stem), lr_files.get(stem)
            if hr is None:
                problems.append(f"LR file {lr.name} has no HR partner")
                continue
            if lr is None:
                problems.append(f"HR file {hr.name} has no LR partner")
                continue
            hw, hh, *_ = _inspect_png_header(hr)
            lw, lh, *_ = _inspect_png_header(lr)
            ch, cw = hh - hh % layout.scale, hw - hw % layout.scale
            if (lh, lw) != (ch // layout.scale, cw // layout.scale):
                problems.append(
                    f"{stem}: LR is {lw}x{lh}, expected {cw // layout.scale}x{ch // layout.scale} "
                    f"for HR {hw}x{hh} at x{layout.scale}"
                )
                continue
            pairs.append(ImagePair(stem, hr, lr))
    else:
        pairs = [ImagePair(stem, hr_files[stem], None) for stem in sorted(hr_files)]
    if problems:
        raise DatasetError(f"{layout.root}: " + "; ".join(problems))
    return pairs


def load_pair(layout: DatasetLayout, pair: ImagePair) -> tuple[PlanarImage, PlanarImage]:
    """(LR, HR) images; HR center-cropped to a scale multiple, LR synthesized if absent."""
    hr = center_crop_to_multiple(load_png(pair.hr_path), layout.scale)
    if pair.lr_path is not None:
        lr = load_png(pair.lr_path)
    else:
        lr = resize_rgb(hr, scale=1.0 / layout.scale, antialias=True)
    return lr, hr
