"""Deterministic video clip I/O: Y4M files, PNG frame directories, crops.

All clips are stored as 8-bit integer sample stacks of shape (T, H, W, C).
Downstream math operates on the normalized [0, 1] float view returned by
:meth:`VideoClip.normalized`.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np
from PIL import Image


class MediaError(RuntimeError):
    pass


def round_half_away(x: np.ndarray | float) -> np.ndarray | float:
    """Round halves away from zero (platform-independent, unlike np.round)."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class VideoClip:
    """Ordered frame stack with color metadata.

    frames: uint8 array of shape (T, H, W, C), C in {1, 3}. For 3-channel
    clips the channels are stored verbatim (no colorspace conversion is ever
    applied by I/O), so save/load round trips are sample-exact.
    """

    frames: np.ndarray
    frame_rate: float = 30.0
    color_space: str = ""
    clip_id: str = ""

    def __post_init__(self):
        f = np.asarray(self.frames)
        if f.ndim != 4:
            raise MediaError(f"frames must be 4-D (T,H,W,C), got shape {f.shape}")
        t, h, w, c = f.shape
        if t < 1:
            raise MediaError("clip needs at least one frame")
        if h < 8 or w < 8:
            raise MediaError(f"frame size {h}x{w} below 8x8 minimum")
        if c not in (1, 3):
            raise MediaError(f"channel count must be 1 or 3, got {c}")
        if f.dtype != np.uint8:
            raise MediaError(f"frames must be uint8, got {f.dtype}")
        self.frames = f
        if not self.color_space:
            self.color_space = "luma" if c == 1 else "rgb"

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.frames.shape

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    def normalized(self) -> np.ndarray:
        """Float64 view of the samples scaled to [0, 1]."""
        return self.frames.astype(np.float64) / 255.0

    def with_frames(self, frames: np.ndarray, clip_id: str | None = None) -> "VideoClip":
        return VideoClip(
            frames=frames,
            frame_rate=self.frame_rate,
            color_space="luma" if frames.shape[-1] == 1 else "rgb",
            clip_id=self.clip_id if clip_id is None else clip_id,
        )


@dataclass
class Patch:
    """Spatio-temporal patch cut from a clip, with its origin recorded.

    samples: uint8 array of shape (t, h, w, C).
    origin: (clip_id, x, y, t0) of the crop window in the source clip.
    """

    samples: np.ndarray
    origin: tuple[str, int, int, int] = field(default=("", 0, 0, 0))

    def __post_init__(self):
        s = np.asarray(self.samples)
        if s.ndim != 4:
            raise MediaError(f"patch samples must be 4-D (t,h,w,C), got {s.shape}")
        t, h, w, c = s.shape
        if t < 2:
            raise MediaError(f"patch needs t >= 2 frames, got {t}")
        if h < 16 or w < 16:
            raise MediaError(f"patch spatial size {h}x{w} below 16x16 minimum")
        if c not in (1, 3):
            raise MediaError(f"patch channel count must be 1 or 3, got {c}")
        if s.dtype != np.uint8:
            raise MediaError(f"patch samples must be uint8, got {s.dtype}")
        self.samples = s

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return self.samples.shape

    def normalized(self) -> np.ndarray:
        return self.samples.astype(np.float64) / 255.0


DEFAULT_PATCH_SHAPE = (12, 256, 256)  # (t, h, w)

_Y4M_MAGIC = b"YUV4MPEG2"
_FRAME_FILE_RE = re.compile(r"^(\d+)\.png$")


def _parse_y4m_header(header: bytes) -> tuple[int, int, float, str]:
    fields = header.decode("ascii", errors="replace").split(" ")
    if fields[0] != "YUV4MPEG2":
        raise MediaError("malformed header: missing YUV4MPEG2 magic")
    width = height = 0
    rate = 30.0
    chroma = "420"
    for tok in fields[1:]:
        if not tok:
            continue
        key, val = tok[0], tok[1:]
        if key == "W":
            width = int(val)
        elif key == "H":
            height = int(val)
        elif key == "F":
            num, den = val.split(":")
            rate = int(num) / int(den)
        elif key == "C":
            chroma = val
    if width <= 0 or height <= 0:
        raise MediaError("malformed header: missing W or H")
    return width, height, rate, chroma


def _read_y4m(path: Path, luma_only: bool) -> VideoClip:
    data = path.read_bytes()
    nl = data.find(b"\n")
    if nl < 0 or not data.startswith(_Y4M_MAGIC):
        raise MediaError(f"malformed header in {path}")
    width, height, rate, chroma = _parse_y4m_header(data[:nl])

    if chroma.startswith("420"):
        if width % 2 or height % 2:
            raise MediaError("4:2:0 content requires even dimensions")
        cw, ch, planes = width // 2, height // 2, 3
    elif chroma.startswith("444"):
        cw, ch, planes = width, height, 3
    elif chroma.startswith("mono"):
        cw, ch, planes = 0, 0, 1
    else:
        raise MediaError(f"unsupported chroma tag C{chroma}")

    frame_bytes = width * height + (2 * cw * ch if planes == 3 else 0)
    frames = []
    pos = nl + 1
    while pos < len(data):
        fnl = data.find(b"\n", pos)
        if fnl < 0 or not data[pos:fnl].startswith(b"FRAME"):
            raise MediaError(f"malformed FRAME marker at byte {pos} in {path}")
        start = fnl + 1
        end = start + frame_bytes
        if end > len(data):
            raise MediaError(f"truncated frame payload in {path}")
        raw = np.frombuffer(data[start:end], dtype=np.uint8)
        y = raw[: width * height].reshape(height, width)
        if planes == 1 or luma_only:
            frames.append(y[:, :, None])
        else:
            u = raw[width * height : width * height + cw * ch].reshape(ch, cw)
            v = raw[width * height + cw * ch :].reshape(ch, cw)
            if chroma.startswith("420"):
                # replication upsample: each chroma sample covers a 2x2 block
                u = np.repeat(np.repeat(u, 2, axis=0), 2, axis=1)
                v = np.repeat(np.repeat(v, 2, axis=0), 2, axis=1)
            frames.append(np.stack([y, u, v], axis=-1))
        pos = end

    if not frames:
        raise MediaError(f"no frames found in {path}")
    return VideoClip(
        frames=np.stack(frames, axis=0),
        frame_rate=rate,
        clip_id=path.stem,
    )


def _read_frame_dir(path: Path) -> VideoClip:
    entries = []
    for p in path.iterdir():
        m = _FRAME_FILE_RE.match(p.name)
        if m:
            entries.append((int(m.group(1)), p))
    if not entries:
        raise MediaError(f"no frames found in {path}")
    entries.sort(key=lambda e: e[0])

    frames = []
    shape = None
    for _, p in entries:
        img = Image.open(p)
        if img.mode not in ("L", "RGB"):
            img = img.convert("RGB")
        arr = np.asarray(img, dtype=np.uint8)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if shape is None:
            shape = arr.shape
        elif arr.shape != shape:
            raise MediaError(
                f"inconsistent frame sizes in {path}: {p.name} is {arr.shape}, expected {shape}"
            )
        frames.append(arr)
    return VideoClip(frames=np.stack(frames, axis=0), clip_id=path.name)


def load_clip(path: str | Path, format: str = "y4m", luma_only: bool = False) -> VideoClip:
    """Load a clip bit-exactly from a Y4M file or a PNG frame directory.

    Y4M chroma handling: C444 planes are kept verbatim; C420 chroma is
    upsampled by sample replication when 3-channel output is requested;
    Cmono and ``luma_only=True`` yield single-channel clips.
    """
    path = Path(path)
    if not path.exists():
        raise MediaError(f"missing path: {path}")
    if format == "y4m":
        return _read_y4m(path, luma_only)
    if format in ("frames", "frame-directory"):
        clip = _read_frame_dir(path)
        if luma_only and clip.shape[-1] == 3:
            return to_luma(clip)
        return clip
    raise MediaError(f"unknown format {format!r}")


def save_clip(clip: VideoClip, path: str | Path, format: str = "y4m") -> Path:
    """Write a clip so that a reload is sample-exact.

    Y4M: luma clips use Cmono; 3-channel clips are written as C444 with the
    stored channel planes verbatim.
    """
    path = Path(path)
    if format == "y4m":
        t, h, w, c = clip.shape
        rate = Fraction(clip.frame_rate).limit_denominator(65536)
        tag = "mono" if c == 1 else "444"
        header = f"YUV4MPEG2 W{w} H{h} F{rate.numerator}:{rate.denominator} Ip A1:1 C{tag}\n"
        try:
            with open(path, "wb") as fh:
                fh.write(header.encode("ascii"))
                for frame in clip.frames:
                    fh.write(b"FRAME\n")
                    for plane in range(c):
                        fh.write(frame[:, :, plane].tobytes())
        except OSError as exc:
            raise MediaError(f"unwritable path {path}: {exc}") from exc
        return path
    if format in ("frames", "frame-directory"):
        try:
            path.mkdir(parents=True, exist_ok=True)
            for i, frame in enumerate(clip.frames):
                arr = frame[:, :, 0] if frame.shape[-1] == 1 else frame
                Image.fromarray(arr).save(path / f"{i:06d}.png")
        except OSError as exc:
            raise MediaError(f"unwritable path {path}: {exc}") from exc
        return path
    raise MediaError(f"unknown format {format!r}")


def crop_copatch(
    ref: VideoClip,
    dist: VideoClip,
    x: int,
    y: int,
    t0: int,
    shape: tuple[int, int, int] = DEFAULT_PATCH_SHAPE,
) -> tuple[Patch, Patch]:
    """Cut co-located patches from two clips at identical coordinates."""
    if ref.shape != dist.shape:
        raise MediaError(f"clip shape mismatch: {ref.shape} vs {dist.shape}")
    pt, ph, pw = shape
    T, H, W, _ = ref.shape
    if x < 0 or y < 0 or t0 < 0 or x + pw > W or y + ph > H or t0 + pt > T:
        raise MediaError(
            f"crop window (x={x}, y={y}, t0={t0}, shape={shape}) out of bounds for clip {ref.shape}"
        )
    win = np.s_[t0 : t0 + pt, y : y + ph, x : x + pw, :]
    return (
        Patch(samples=ref.frames[win].copy(), origin=(ref.clip_id, x, y, t0)),
        Patch(samples=dist.frames[win].copy(), origin=(dist.clip_id, x, y, t0)),
    )


def crop_patch(clip: VideoClip, x: int, y: int, t0: int, shape: tuple[int, int, int]) -> Patch:
    patch, _ = crop_copatch(clip, clip, x, y, t0, shape)
    return Patch(samples=patch.samples, origin=(clip.clip_id, x, y, t0))


# BT.601 luma weights
_LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])


def to_luma(clip: VideoClip) -> VideoClip:
    """Collapse a 3-channel clip to luma with BT.601 weights (integer rounded)."""
    if clip.shape[-1] == 1:
        return clip  # already luma; no-op
    y = round_half_away(clip.frames.astype(np.float64) @ _LUMA_WEIGHTS)
    y = np.clip(y, 0, 255).astype(np.uint8)[..., None]
    return clip.with_frames(y)


def luma_array(patch_or_clip: Patch | VideoClip) -> np.ndarray:
    """Normalized luma samples of shape (t, h, w): channel 0 for 1-channel
    data, BT.601-weighted for 3-channel data."""
    arr = patch_or_clip.normalized()
    if arr.shape[-1] == 1:
        return arr[..., 0]
    return arr @ _LUMA_WEIGHTS
