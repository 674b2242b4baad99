"""File formats: scene/camera text files, PPM images, GSDF float dumps, configs, metrics CSV."""
from __future__ import annotations

import csv
import struct
from pathlib import Path

import numpy as np

from ._validation import ValidationError
from .scene import Camera, GaussianCloud

CLOUD_MAGIC = "GSDCLOUD"
CAMERA_MAGIC = "GSDCAMS"
GSDF_MAGIC = b"GSDF"


def _fmt(values):
    return " ".join(repr(float(v)) for v in values)


# ---------------------------------------------------------------- cloud / cameras


def write_cloud(path, cloud: GaussianCloud):
    """One Gaussian per line: ``mx my mz qw qx qy qz sx sy sz o c...`` after a
    ``GSDCLOUD <degree> <count>`` header. ``o`` is the opacity logit and the
    scales are activated (not logs)."""
    lines = [f"{CLOUD_MAGIC} {cloud.degree} {len(cloud)}"]
    scales = cloud.scales
    for i in range(len(cloud)):
        row = np.concatenate([cloud.positions[i], cloud.rotations[i], scales[i],
                              [cloud.opacity_logits[i]], cloud.sh_coeffs[i].reshape(-1)])
        lines.append(_fmt(row))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cloud(path) -> GaussianCloud:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    head = lines[0].split()
    if len(head) != 3 or head[0] != CLOUD_MAGIC:
        raise ValidationError(f"{path}: missing '{CLOUD_MAGIC} <degree> <count>' header")
    degree, count = int(head[1]), int(head[2])
    width = 11 + 3 * degree ** 2
    rows = np.array([[float(v) for v in ln.split()] for ln in lines[1:]]).reshape(-1, width)
    if len(rows) != count:
        raise ValidationError(f"{path}: header declares {count} Gaussians, found {len(rows)}")
    return GaussianCloud(rows[:, 0:3], rows[:, 3:7], np.log(rows[:, 7:10]), rows[:, 10],
                         rows[:, 11:].reshape(count, degree ** 2, 3), degree)


def write_cameras(path, cameras):
    """``GSDCAMS <count>`` header, then ``fx fy cx cy W H r11..r33 t1 t2 t3`` per line."""
    lines = [f"{CAMERA_MAGIC} {len(cameras)}"]
    for c in cameras:
        lines.append(" ".join([_fmt([c.fx, c.fy, c.cx, c.cy]), str(c.width), str(c.height),
                               _fmt(c.R.reshape(-1)), _fmt(c.T)]))
    Path(path).write_text("\n".join(lines) + "\n")


def read_cameras(path):
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    head = lines[0].split()
    if len(head) != 2 or head[0] != CAMERA_MAGIC:
        raise ValidationError(f"{path}: missing '{CAMERA_MAGIC} <count>' header")
    cams = []
    for ln in lines[1:]:
        v = ln.split()
        if len(v) != 18:
            raise ValidationError(f"{path}: camera line has {len(v)} fields, expected 18")
        fx, fy, cx, cy = map(float, v[:4])
        R = np.array([float(x) for x in v[6:15]]).reshape(3, 3)
        T = np.array([float(x) for x in v[15:18]])
        cams.append(Camera.from_intrinsics(fx, fy, cx, cy, int(v[4]), int(v[5]), R, T))
    if len(cams) != int(head[1]):
        raise ValidationError(f"{path}: header declares {head[1]} cameras, found {len(cams)}")
    return cams


# ------------------------------------------------------------------------ images


def to_uint8(img):
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, rgb):
    """Binary P6 PPM from a float image in [0, 1] (or a uint8 image)."""
    arr = np.asarray(rgb)
    data = arr if arr.dtype == np.uint8 else to_uint8(arr)
    if data.ndim != 3 or data.shape[2] != 3:
        raise ValidationError(f"PPM needs an H x W x 3 image, got {data.shape}")
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_ppm(path):
    """Read a P6 PPM as uint8 H x W x 3."""
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    pos += 1
    if tokens[0] != b"P6" or int(tokens[3]) != 255:
        raise ValidationError(f"{path}: only 8-bit P6 PPM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw[pos:pos + w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def pack_gsdf(arr) -> bytes:
    """16-byte header (``GSDF``, u32 H, u32 W, u32 channels) plus float32 LE payload."""
    a = np.asarray(arr, dtype="<f4")
    if a.ndim == 2:
        a = a[:, :, None]
    if a.ndim != 3:
        raise ValidationError(f"GSDF stores 2-D or 3-D arrays, got shape {a.shape}")
    h, w, c = a.shape
    return GSDF_MAGIC + struct.pack("<III", h, w, c) + np.ascontiguousarray(a).tobytes()


def unpack_gsdf(buf, offset=0):
    """Return ``(array, next_offset)``; single-channel arrays come back 2-D."""
    if buf[offset:offset + 4] != GSDF_MAGIC:
        raise ValidationError("bad GSDF magic")
    h, w, c = struct.unpack_from("<III", buf, offset + 4)
    start = offset + 16
    end = start + 4 * h * w * c
    if end > len(buf):
        raise ValidationError("truncated GSDF payload")
    a = np.frombuffer(buf[start:end], dtype="<f4").reshape(h, w, c).copy()
    return (a[:, :, 0] if c == 1 else a), end


def write_gsdf(path, arr):
    Path(path).write_bytes(pack_gsdf(arr))


def read_gsdf(path):
    return unpack_gsdf(Path(path).read_bytes())[0]


# ------------------------------------------------------------------------ config


def read_config(path):
    """Parse a ``key = value`` (or ``key: value``) text config; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        for sep in ("=", ":"):
            if sep in line:
                key, value = line.split(sep, 1)
                break
        else:
            raise ValidationError(f"{path}:{lineno}: expected 'key = value'")
        out[key.strip()] = _parse_value(value.strip())
    return out


def _parse_value(text):
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def write_config(path, mapping):
    Path(path).write_text("".join(f"{k} = {v}\n" for k, v in mapping.items()))


# ----------------------------------------------------------------------- metrics

METRIC_COLUMNS = ("iteration", "psnr", "ssim", "loss_rgb", "loss_depth", "gsd_active")


def write_metrics_csv(path, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for r in rows:
            writer.writerow([r["iteration"], repr(float(r["psnr"])), repr(float(r["ssim"])),
                             repr(float(r["loss_rgb"])), repr(float(r["loss_depth"])),
                             int(bool(r["gsd_active"]))])


def read_metrics_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return [{"iteration": int(r["iteration"]), "psnr": float(r["psnr"]), "ssim": float(r["ssim"]),
             "loss_rgb": float(r["loss_rgb"]), "loss_depth": float(r["loss_depth"]),
             "gsd_active": bool(int(r["gsd_active"]))} for r in rows]
