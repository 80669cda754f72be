"""Readers and writers for PFM, Middlebury .flo, KITTI 16-bit PNG, refiner params and run config."""

from __future__ import annotations

import os
import re
import struct
import tempfile
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

import cv2
import numpy as np
from PIL import Image

FLO_MAGIC = 202021.25
PARAMS_MAGIC = b"SFRF"
PARAMS_VERSION = 1


class FormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


# -- PFM -----------------------------------------------------------------------------

def write_pfm(path, data: np.ndarray) -> None:
    """``(H, W)`` -> ``Pf``; ``(H, W, 3)`` -> ``PF``. Little-endian, rows stored bottom-to-top."""
    data = np.asarray(data, dtype=np.float32)
    if data.ndim == 2:
        tag = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        tag = b"PF"
    else:
        raise FormatError(f"PFM holds (H, W) or (H, W, 3) data, got {data.shape}")
    h, w = data.shape[:2]
    header = tag + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n"
    payload = np.flipud(data).astype("<f4").tobytes()
    atomic_write_bytes(path, header + payload)


def read_pfm(path, channels: Optional[int] = None) -> np.ndarray:
    """Read a PFM; ``channels=1`` rejects colour (``PF``) files and vice versa."""
    with open(path, "rb") as fh:
        raw = fh.read()
    # three whitespace-terminated header tokens: tag, "W H", scale
    m = re.match(rb"(P[Ff])\s+(\d+)\s+(\d+)\s+([-+0-9.eE]+)\s", raw)
    if m is None:
        raise FormatError(f"{path}: malformed PFM header")
    tag, w, h, scale = m.group(1), int(m.group(2)), int(m.group(3)), float(m.group(4))
    nc = 3 if tag == b"PF" else 1
    if channels is not None and channels != nc:
        raise FormatError(f"{path}: expected {channels}-channel PFM, found {tag.decode()}")
    if w <= 0 or h <= 0 or scale == 0:
        raise FormatError(f"{path}: invalid PFM dimensions or scale")
    dtype = "<f4" if scale < 0 else ">f4"
    body = raw[m.end():]
    need = w * h * nc * 4
    if len(body) < need:
        raise FormatError(f"{path}: truncated PFM payload ({len(body)} of {need} bytes)")
    data = np.frombuffer(body[:need], dtype=dtype).astype(np.float32)
    data = data.reshape((h, w, nc) if nc == 3 else (h, w))
    return np.flipud(data).copy()


# -- Middlebury flow ---------------------------------------------------------------------

def write_flo(path, flow: np.ndarray) -> None:
    """``(2, H, W)`` flow -> .flo (magic, width, height, interleaved u, v)."""
    flow = np.asarray(flow)
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise FormatError(f"flow must have shape (2, H, W), got {flow.shape}")
    _, h, w = flow.shape
    if h == 0 or w == 0:
        raise FormatError(f"{path}: refusing to write an empty flow")
    head = struct.pack("<fii", FLO_MAGIC, w, h)
    body = np.moveaxis(flow, 0, -1).astype("<f4").tobytes()
    atomic_write_bytes(path, head + body)


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 12:
        raise FormatError(f"{path}: file too short for a .flo header")
    magic, w, h = struct.unpack("<fii", raw[:12])
    if magic != np.float32(FLO_MAGIC):
        raise FormatError(f"{path}: bad .flo magic {magic!r}")
    if w <= 0 or h <= 0:
        raise FormatError(f"{path}: invalid .flo dimensions {w}x{h}")
    need = w * h * 2 * 4
    if len(raw) - 12 != need:
        raise FormatError(f"{path}: .flo payload size {len(raw) - 12} != {need}")
    data = np.frombuffer(raw[12:], dtype="<f4").reshape(h, w, 2)
    return np.moveaxis(data, -1, 0).astype(np.float32)


# -- KITTI 16-bit PNG ------------------------------------------------------------------

def _imwrite(path, img) -> None:
    ok, buf = cv2.imencode(".png", img)
    if not ok:
        raise FormatError(f"{path}: PNG encoding failed")
    atomic_write_bytes(path, buf.tobytes())


def _read_png16(path, channels: int) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise FormatError(f"{path}: not a readable PNG")
    if img.dtype != np.uint16:
        raise FormatError(f"{path}: expected a 16-bit PNG, got {img.dtype}")
    nc = 1 if img.ndim == 2 else img.shape[2]
    if nc != channels:
        raise FormatError(f"{path}: expected {channels} channel(s), found {nc}")
    return img


def write_kitti_disp_png(path, disp: np.ndarray, valid=None) -> None:
    """Disparity * 256 as uint16; 0 marks invalid pixels."""
    disp = np.asarray(disp, np.float64)
    stored = np.clip(np.round(disp * 256.0), 1, 65535).astype(np.uint16)
    if valid is not None:
        stored[~np.asarray(valid, bool)] = 0
    _imwrite(path, stored)


def read_kitti_disp_png(path):
    """Return ``(disparity, valid)`` with disparity = stored / 256 and valid = stored > 0."""
    img = _read_png16(path, 1)
    return img.astype(np.float64) / 256.0, img > 0


def write_kitti_flow_png(path, flow: np.ndarray, valid=None) -> None:
    """(u, v) stored as ``64 * f + 2**15`` in R and G; B holds validity."""
    flow = np.asarray(flow, np.float64)
    _, h, w = flow.shape
    valid = np.ones((h, w), bool) if valid is None else np.asarray(valid, bool)
    uv = np.clip(np.round(flow * 64.0 + 2 ** 15), 0, 65535).astype(np.uint16)
    rgb = np.stack([uv[0], uv[1], valid.astype(np.uint16)], axis=-1)
    _imwrite(path, rgb[..., ::-1])  # OpenCV stores BGR


def read_kitti_flow_png(path):
    """Return ``((2, H, W) flow, valid)``."""
    img = _read_png16(path, 3)[..., ::-1].astype(np.float64)
    flow = (np.moveaxis(img[..., :2], -1, 0) - 2 ** 15) / 64.0
    return flow, img[..., 2] > 0


# -- images and masks --------------------------------------------------------------

def read_image(path) -> np.ndarray:
    """8-bit PNG (divided by 255) or PFM, returned as ``(C, H, W)`` float64 in [0, 1]."""
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        data = read_pfm(path).astype(np.float64)
        return data[None] if data.ndim == 2 else np.moveaxis(data, -1, 0)
    with Image.open(path) as im:
        arr = np.asarray(im)
    if arr.dtype != np.uint8:
        raise FormatError(f"{path}: expected an 8-bit image, got {arr.dtype}")
    arr = arr.astype(np.float64) / 255.0
    return arr[None] if arr.ndim == 2 else np.moveaxis(arr[..., :3], -1, 0)


def write_image(path, img: np.ndarray) -> None:
    """``(C, H, W)`` image as PFM (C in {1, 3}); keeps full float precision."""
    img = np.asarray(img)
    if img.shape[0] == 1:
        write_pfm(path, img[0])
    elif img.shape[0] == 3:
        write_pfm(path, np.moveaxis(img, 0, -1))
    else:
        raise FormatError(f"cannot store a {img.shape[0]}-channel image as PFM")


def write_mask(path, mask) -> None:
    _imwrite(path, np.asarray(mask, bool).astype(np.uint8) * 255)


def read_mask(path) -> np.ndarray:
    img = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if img is None or img.ndim != 2:
        raise FormatError(f"{path}: expected a single-channel mask PNG")
    return img > 0


# -- refiner parameters ---------------------------------------------------------------

def save_params(path, params) -> None:
    """Magic, version, layer count, per-layer (out, in, kh, kw), then float32 LE arrays."""
    head = PARAMS_MAGIC + struct.pack("<II", PARAMS_VERSION, len(params.weights))
    for w in params.weights:
        head += struct.pack("<4I", *w.shape)
    body = b"".join(np.asarray(a, "<f4").tobytes() for a in params.arrays())
    atomic_write_bytes(path, head + body)


def load_params(path):
    from sfrefine.refiner import RefinerParams

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != PARAMS_MAGIC:
        raise FormatError(f"{path}: not a refiner parameter file")
    version, n = struct.unpack("<II", raw[4:12])
    if version != PARAMS_VERSION:
        raise FormatError(f"{path}: unsupported parameter file version {version}")
    off = 12
    shapes = []
    for _ in range(n):
        shapes.append(struct.unpack("<4I", raw[off:off + 16]))
        off += 16
    arrays = []
    for shape in shapes:
        for s in (shape, (shape[0],)):
            size = int(np.prod(s))
            chunk = raw[off:off + 4 * size]
            if len(chunk) != 4 * size:
                raise FormatError(f"{path}: truncated parameter payload")
            arrays.append(np.frombuffer(chunk, "<f4").reshape(s).astype(np.float64))
            off += 4 * size
    if off != len(raw):
        raise FormatError(f"{path}: {len(raw) - off} trailing bytes")
    return RefinerParams.from_arrays(arrays)


# -- run configuration ----------------------------------------------------------------

@dataclass
class RunConfig:
    """Every tunable of a run; the defaults are used for keys absent from the file."""

    omega_pd: float = 1.0
    omega_pf: float = 1.0
    omega_df: float = 1.0
    omega_s: float = 0.1
    w1: float = 0.01
    w2: float = 0.05
    alpha_ssim: float = 0.85
    ssim_window: int = 3
    ssim_c1: float = 0.0001
    ssim_c2: float = 0.0009
    steps: int = 5
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    width: int = 32
    mode: str = "sup"
    seed: int = 0
    epochs: int = 1
    supervise_d2: bool = False
    descent_lr: float = 3000.0
    max_disp: int = 32
    patch: int = 13
    flow_radius: int = 6
    pyramid_levels: int = 1
    dchange_range: float = 8.0

    def loss_config(self):
        from sfrefine.consistency import LossWeights, OcclusionParams, PhotometricParams
        from sfrefine.refiner import LossConfig

        return LossConfig(LossWeights(self.omega_pd, self.omega_pf, self.omega_df, self.omega_s),
                          PhotometricParams(self.alpha_ssim, self.ssim_window, self.ssim_c1,
                                            self.ssim_c2),
                          OcclusionParams(self.w1, self.w2))

    def train_config(self):
        from sfrefine.refiner import TrainConfig

        return TrainConfig(self.steps, self.lr, self.beta1, self.beta2, self.adam_eps, self.width,
                           self.mode, self.seed, self.epochs, self.supervise_d2,
                           self.loss_config())

    def init_config(self):
        from sfrefine.initializer import InitConfig

        return InitConfig(self.max_disp, self.patch, self.flow_radius, self.pyramid_levels,
                          self.dchange_range)


def _parse_value(kind, text: str):
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    return kind(text)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    """``key = value`` lines; ``#`` starts a comment; unknown keys are errors."""
    kinds = {f.name: f.type for f in fields(RunConfig)}
    types = {"float": float, "int": int, "str": str, "bool": bool}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected 'key = value'")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in kinds:
            raise ValueError(f"{source}:{lineno}: unknown key {key!r}")
        try:
            values[key] = _parse_value(types[kinds[key]], val)
        except ValueError as exc:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    cfg = RunConfig(**values)
    if cfg.mode not in ("sup", "selfsup"):
        raise ValueError(f"{source}: mode must be 'sup' or 'selfsup', got {cfg.mode!r}")
    return cfg


def load_config(path=None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text(), str(path))


# -- on-disk clips and predictions ----------------------------------------------------

def save_clip(directory, clip) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for name in ("l1", "r1", "l2", "r2"):
        write_image(d / f"{name}.pfm", getattr(clip, name))
    if clip.flow_bwd is not None:
        write_flo(d / "gt_flow_bwd.flo", clip.flow_bwd)


def load_clip(directory, flow_bwd=None):
    from sfrefine.fields import StereoClip

    d = Path(directory)
    imgs = []
    for name in ("l1", "r1", "l2", "r2"):
        cands = [d / f"{name}.pfm", d / f"{name}.png"]
        found = next((c for c in cands if c.exists()), None)
        if found is None:
            raise FileNotFoundError(f"{d}: missing image {name}.pfm / {name}.png")
        imgs.append(read_image(found))
    return StereoClip(*imgs, flow_bwd=flow_bwd)


def save_state(directory, state, flow_bwd=None, prefix: str = "") -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_pfm(d / f"{prefix}d1.pfm", state.d1)
    write_pfm(d / f"{prefix}d2.pfm", state.d2)
    write_flo(d / f"{prefix}flow.flo", state.flow)
    write_pfm(d / f"{prefix}dchange.pfm", state.dchange)
    if flow_bwd is not None:
        write_flo(d / f"{prefix}flow_bwd.flo", flow_bwd)


def load_state(directory, prefix: str = ""):
    """Return ``(state, backward flow or None)``."""
    from sfrefine.fields import SceneFlowState

    d = Path(directory)
    state = SceneFlowState(read_pfm(d / f"{prefix}d1.pfm", 1), read_pfm(d / f"{prefix}d2.pfm", 1),
                           read_flo(d / f"{prefix}flow.flo"),
                           read_pfm(d / f"{prefix}dchange.pfm", 1))
    fb = d / f"{prefix}flow_bwd.flo"
    return state, (read_flo(fb) if fb.exists() else None)


def save_sample(directory, sample) -> None:
    d = Path(directory)
    save_clip(d, sample.clip)
    save_state(d, sample.gt, prefix="gt_")
    write_mask(d / "occlusion.png", sample.occlusion)
    write_mask(d / "valid.png", sample.valid)


def has_ground_truth(directory) -> bool:
    return (Path(directory) / "gt_d1.pfm").exists()


def load_ground_truth(directory):
    """Return ``(gt state, valid mask)``; the valid mask defaults to all pixels."""
    d = Path(directory)
    gt, _ = load_state(d, prefix="gt_")
    valid = read_mask(d / "valid.png") if (d / "valid.png").exists() else np.ones(gt.shape, bool)
    return gt, valid
