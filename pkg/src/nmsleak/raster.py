"""Raster values plus import/export and validation of raster files.

A raster is an (H, W, 3) float64 array in [0, 1] whose height and width are
multiples of 32. Rasters are stored either as PNG (8-bit, lossy on the
value grid) or as a raw little-endian float32 tensor with a small header,
which is bit-exact and is also the wire format of the detection service.
"""

import io
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Union

import natsort
import numpy as np
from PIL import Image

from .errors import InvalidRasterError
from .logger import logger

DIMENSION_MULTIPLE = 32
CHANNELS = 3
RAW_MAGIC = b'NMSR'
RAW_HEADER = struct.Struct('<4sIII')
VALID_EXTENSIONS = ('.png', '.f32')


def _checked_pixels(pixels: np.ndarray, bounded: bool = True) -> np.ndarray:
    pixels = np.array(pixels, dtype=np.float64)
    if pixels.ndim != 3 or pixels.shape[2] != CHANNELS:
        raise InvalidRasterError(f"Raster must have shape (H, W, {CHANNELS}), got {pixels.shape}")
    height, width = pixels.shape[:2]
    if height <= 0 or width <= 0:
        raise InvalidRasterError(f"Raster dimensions must be positive, got {height}x{width}")
    if height % DIMENSION_MULTIPLE or width % DIMENSION_MULTIPLE:
        raise InvalidRasterError(
            f"Raster height and width must be multiples of {DIMENSION_MULTIPLE}, got {height}x{width}"
        )
    if not np.all(np.isfinite(pixels)):
        raise InvalidRasterError('Raster pixels must be finite')
    if bounded and (pixels.min() < 0.0 or pixels.max() > 1.0):
        raise InvalidRasterError('Raster pixels must be finite and lie in [0, 1]')
    pixels.flags.writeable = False
    return pixels


@dataclass(frozen=True, eq=False)
class Raster:
    pixels: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, 'pixels', _checked_pixels(self.pixels))

    @classmethod
    def unbounded(cls, pixels: np.ndarray) -> 'Raster':
        """A raster whose values may leave [0, 1]; shape and finiteness are still checked.

        The detection service only accepts bounded rasters.
        """
        raster = object.__new__(cls)
        object.__setattr__(raster, 'pixels', _checked_pixels(pixels, bounded=False))
        return raster

    @classmethod
    def filled(cls, height: int, width: int, value: float = 0.0) -> 'Raster':
        return cls(np.full((height, width, CHANNELS), value, dtype=np.float64))

    @classmethod
    def black(cls, height: int, width: int) -> 'Raster':
        return cls.filled(height, width, 0.0)

    @classmethod
    def clipped(cls, pixels: np.ndarray) -> 'Raster':
        return cls(np.clip(pixels, 0.0, 1.0))

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def channels(self) -> int:
        return CHANNELS

    @property
    def pixel_count(self) -> int:
        return self.height * self.width

    @property
    def shape(self):
        return self.pixels.shape

    def with_pixels(self, pixels: np.ndarray) -> 'Raster':
        return Raster(pixels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Raster):
            return NotImplemented
        return self.pixels.shape == other.pixels.shape and bool(np.array_equal(self.pixels, other.pixels))

    def __hash__(self):
        return hash((self.pixels.shape, self.pixels.tobytes()))


def encode_raw(raster: Raster) -> bytes:
    header = RAW_HEADER.pack(RAW_MAGIC, raster.height, raster.width, CHANNELS)
    return header + raster.pixels.astype('<f4').tobytes()


def decode_raw(payload: bytes, expected_shape: Optional[tuple] = None) -> Raster:
    if len(payload) < RAW_HEADER.size:
        raise InvalidRasterError('Raw tensor payload is shorter than its header')
    magic, height, width, channels = RAW_HEADER.unpack_from(payload)
    if magic != RAW_MAGIC:
        raise InvalidRasterError(f"Bad raw tensor magic {magic!r}")
    if channels != CHANNELS:
        raise InvalidRasterError(f"Raw tensor has {channels} channels, expected {CHANNELS}")
    if expected_shape is not None and (height, width) != tuple(expected_shape[:2]):
        raise InvalidRasterError(
            f"Raw tensor header says {height}x{width} but {expected_shape[0]}x{expected_shape[1]} was declared"
        )
    body = payload[RAW_HEADER.size:]
    n_values = height * width * channels
    if len(body) != 4 * n_values:
        raise InvalidRasterError(f"Raw tensor body holds {len(body) // 4} values, expected {n_values}")
    values = np.frombuffer(body, dtype='<f4').astype(np.float64).reshape(height, width, channels)
    return Raster(values)


def resize_raster(raster: Raster, height: int, width: int) -> Raster:
    """Area-average resample to height x width, channel by channel in 32-bit float."""
    channels = [
        np.asarray(Image.fromarray(raster.pixels[:, :, c].astype(np.float32)).resize(
            (width, height), resample=Image.Resampling.BOX), dtype=np.float64)
        for c in range(CHANNELS)
    ]
    return Raster.clipped(np.stack(channels, axis=-1))


def to_uint8(raster: Raster) -> np.ndarray:
    return np.rint(raster.pixels * 255.0).astype(np.uint8)


def encode_png(raster: Raster) -> bytes:
    buffer = io.BytesIO()
    Image.fromarray(to_uint8(raster)).save(buffer, format='PNG')
    return buffer.getvalue()


def decode_png(payload: bytes) -> Raster:
    try:
        with Image.open(io.BytesIO(payload)) as image:
            array = np.asarray(image.convert('RGB'), dtype=np.float64) / 255.0
    except (OSError, ValueError) as e:
        raise InvalidRasterError(f"Could not decode PNG payload: {e}") from e
    return Raster(array)


def save_raster(raster: Raster, path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.suffix.lower() == '.png':
        path.write_bytes(encode_png(raster))
    elif path.suffix.lower() == '.f32':
        path.write_bytes(encode_raw(raster))
    else:
        raise InvalidRasterError(f"Unsupported raster extension for {path}. Must be one of: {', '.join(VALID_EXTENSIONS)}")
    logger.debug(f"Saved raster {raster.height}x{raster.width} to {path}")
    return path


def load_raster(path: Union[str, Path]) -> Raster:
    path = Path(path)
    payload = path.read_bytes()
    if path.suffix.lower() == '.png':
        return decode_png(payload)
    if path.suffix.lower() == '.f32':
        return decode_raw(payload)
    raise InvalidRasterError(f"Unsupported raster extension for {path}. Must be one of: {', '.join(VALID_EXTENSIONS)}")


def validate_files(files: List[str]) -> None:
    """Validate that all files exist and have raster extensions.

    Raises:
        FileNotFoundError: If any file is missing.
        ValueError: If any file has an invalid extension.
    """
    for file in files:
        if not os.path.isfile(file):
            raise FileNotFoundError(f"File not found: {file}")
        if not any(file.lower().endswith(ext) for ext in VALID_EXTENSIONS):
            raise ValueError(
                f"Invalid file extension for {file}. Must be one of: {', '.join(VALID_EXTENSIONS)}"
            )


def list_raster_files(directory: Union[str, Path]) -> List[str]:
    directory = Path(directory)
    if not directory.is_dir():
        raise FileNotFoundError(f"Scene directory not found: {directory}")
    files = [str(p) for p in directory.iterdir() if p.suffix.lower() in VALID_EXTENSIONS]
    return natsort.natsorted(files)


def build_scene_sets(member: Union[str, Path],
                     nonmember: Union[str, Path],
                     target: Union[str, Path]) -> Dict[str, List[Raster]]:
    """Load the three raster sets of a dataset-inference campaign from directories.

    Returns:
        {'member': [...], 'nonmember': [...], 'target': [...]}, each in natural file order.

    Raises:
        ValueError: If a directory holds no raster files.
    """
    scene_sets: Dict[str, List[Raster]] = {}
    try:
        for label, directory in (('member', member), ('nonmember', nonmember), ('target', target)):
            files = list_raster_files(directory)
            if not files:
                raise ValueError(f"No raster files ({', '.join(VALID_EXTENSIONS)}) found in {directory}")
            validate_files(files)
            scene_sets[label] = [load_raster(f) for f in files]
            logger.info(f"Loaded {len(files)} {label} rasters from {directory}")
        return scene_sets
    except Exception:
        logger.exception('Error loading scene sets')
        raise
