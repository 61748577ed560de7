"""NVFS frame-stack container.

Little-endian layout::

    magic          4s   b"NVFS"
    version        u16  1
    width          u32
    height         u32
    frame_count    u32
    exposure_s     f64
    pixel_size_nm  f64
    psf_sigma_nm   f64
    frame_count x { mw_tag_mhz f64 (NaN = off), t_start_s f64,
                    width*height u32 counts, row-major }

Background parameters are not part of the container; a stack read back
carries the default background model.
"""

from __future__ import annotations

import os
import struct

import numpy as np

from .camera import CameraConfig, FrameStack

MAGIC = b"NVFS"
VERSION = 1
_HEADER = struct.Struct("<4sHIIIddd")


class NvfsError(ValueError):
    """Base class for container parse errors."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


class MagicMismatchError(NvfsError):
    pass


class UnsupportedVersionError(NvfsError):
    pass


class TruncatedError(NvfsError):
    def __init__(self, what: str, offset: int, expected: int, actual: int):
        super().__init__(f"truncated {what}: expected {expected} bytes, found {actual}", offset)
        self.expected = expected
        self.actual = actual


class TrailingDataError(NvfsError):
    pass


class HeaderValueError(NvfsError):
    pass


def _frame_dtype(width: int, height: int) -> np.dtype:
    return np.dtype([("mw", "<f8"), ("t", "<f8"), ("px", "<u4", (height, width))])


def to_bytes(stack: FrameStack) -> bytes:
    cam = stack.camera
    header = _HEADER.pack(MAGIC, VERSION, cam.width_px, cam.height_px, len(stack),
                          cam.exposure_s, cam.pixel_size_nm, cam.psf_sigma_nm)
    body = np.empty(len(stack), dtype=_frame_dtype(cam.width_px, cam.height_px))
    body["mw"] = stack.mw_tags_mhz
    body["t"] = stack.t_start_s
    body["px"] = stack.pixels
    return header + body.tobytes()


def from_bytes(buf: bytes) -> FrameStack:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic {bytes(buf[:4])!r}, expected {MAGIC!r}", 0)
    if len(buf) < _HEADER.size:
        raise TruncatedError("header", len(buf), _HEADER.size, len(buf))
    _, version, width, height, count, exposure, pixel, psf = _HEADER.unpack_from(buf, 0)
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported version {version}", 4)
    if width == 0 or height == 0 or count == 0:
        raise HeaderValueError(f"empty geometry width={width} height={height} frames={count}", 6)
    dtype = _frame_dtype(width, height)
    expected = count * dtype.itemsize
    payload = len(buf) - _HEADER.size
    if payload < expected:
        raise TruncatedError("frame payload", len(buf), expected, payload)
    if payload > expected:
        raise TrailingDataError(f"{payload - expected} unexpected bytes after last frame",
                                _HEADER.size + expected)
    try:
        camera = CameraConfig(width_px=width, height_px=height, pixel_size_nm=pixel,
                              exposure_s=exposure, psf_sigma_nm=psf)
    except ValueError as exc:
        raise HeaderValueError(str(exc), 20) from exc
    body = np.frombuffer(buf, dtype=dtype, offset=_HEADER.size, count=count)
    return FrameStack(camera, body["px"].copy(), body["mw"].copy(), body["t"].copy())


def write_stack(stack: FrameStack, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(stack))


def read_stack(path: str | os.PathLike) -> FrameStack:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def read_header(path: str | os.PathLike) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        size = os.fstat(fh.fileno()).st_size
    if head[:4] != MAGIC:
        raise MagicMismatchError(f"bad magic {head[:4]!r}, expected {MAGIC!r}", 0)
    if len(head) < _HEADER.size:
        raise TruncatedError("header", len(head), _HEADER.size, len(head))
    _, version, width, height, count, exposure, pixel, psf = _HEADER.unpack(head)
    return {
        "version": version, "width": width, "height": height, "frame_count": count,
        "exposure_s": exposure, "pixel_size_nm": pixel, "psf_sigma_nm": psf, "file_bytes": size,
        "payload_complete": size == _HEADER.size + count * _frame_dtype(width, height).itemsize,
    }
