"""File-based exchange with external models (denoiser, feature extractor, depth estimator).

A request ``req_<id>.gsdt`` holds::

    kind tag (4 bytes: DENO | FEAT | DPTH)
    u32 frame count, then that many GSDF blocks
    u32 timestep
    u32 condition flag, then one GSDF block when the flag is 1

The model answers with ``resp_<id>.gsdt``: the kind tag, a u32 count and
that many GSDF blocks. Files are written under a temporary name and renamed
so readers never see partial content.
"""
from __future__ import annotations

import itertools
import os
import struct
import time
import uuid
from pathlib import Path
from typing import NamedTuple, Optional

import numpy as np

from ._validation import ValidationError
from .diffusion import Denoiser
from .guidance import DepthEstimator, FeatureExtractor, GuidanceSkip
from .io import pack_gsdf, unpack_gsdf

ENV_DIR = "GSD_EXTERNAL_DIR"
KINDS = (b"DENO", b"FEAT", b"DPTH")
TIMEOUT = 60.0


class ExchangeTimeout(TimeoutError):
    pass


class Request(NamedTuple):
    kind: bytes
    frames: list
    timestep: int
    condition: Optional[np.ndarray]


def _kind(kind):
    k = kind.encode() if isinstance(kind, str) else bytes(kind)
    if k not in KINDS:
        raise ValidationError(f"unknown request kind {kind!r}")
    return k


def pack_request(kind, frames, timestep=0, condition=None) -> bytes:
    parts = [_kind(kind), struct.pack("<I", len(frames))]
    parts += [pack_gsdf(f) for f in frames]
    parts.append(struct.pack("<II", int(timestep), condition is not None))
    if condition is not None:
        parts.append(pack_gsdf(condition))
    return b"".join(parts)


def unpack_request(buf) -> Request:
    kind = _kind(buf[:4])
    (n,) = struct.unpack_from("<I", buf, 4)
    pos, frames = 8, []
    for _ in range(n):
        arr, pos = unpack_gsdf(buf, pos)
        frames.append(arr)
    t, has_cond = struct.unpack_from("<II", buf, pos)
    pos += 8
    cond = unpack_gsdf(buf, pos)[0] if has_cond else None
    return Request(kind, frames, t, cond)


def pack_response(kind, arrays) -> bytes:
    return b"".join([_kind(kind), struct.pack("<I", len(arrays))] + [pack_gsdf(a) for a in arrays])


def unpack_response(buf):
    kind = _kind(buf[:4])
    (n,) = struct.unpack_from("<I", buf, 4)
    pos, out = 8, []
    for _ in range(n):
        arr, pos = unpack_gsdf(buf, pos)
        out.append(arr)
    return kind, out


def _atomic_write(path, data):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)


def exchange_dir(directory=None):
    d = directory or os.environ.get(ENV_DIR)
    if not d:
        raise ValidationError(f"no exchange directory given and {ENV_DIR} is unset")
    path = Path(d)
    path.mkdir(parents=True, exist_ok=True)
    return path


class FileExchange:
    """Client side: write a request, wait for the matching response."""

    def __init__(self, directory=None, timeout=TIMEOUT, poll=0.01):
        self.directory = exchange_dir(directory)
        self.timeout = timeout
        self.poll = poll
        self._ids = itertools.count()
        self._prefix = uuid.uuid4().hex[:8]

    def call(self, kind, frames, timestep=0, condition=None):
        rid = f"{self._prefix}{next(self._ids):06d}"
        req = self.directory / f"req_{rid}.gsdt"
        resp = self.directory / f"resp_{rid}.gsdt"
        _atomic_write(req, pack_request(kind, frames, timestep, condition))
        deadline = time.monotonic() + self.timeout
        while not resp.exists():
            if time.monotonic() > deadline:
                req.unlink(missing_ok=True)
                raise ExchangeTimeout(f"no response to {req.name} within {self.timeout:g} s")
            time.sleep(self.poll)
        rkind, arrays = unpack_response(resp.read_bytes())
        resp.unlink()
        if rkind != _kind(kind):
            raise ValidationError(f"response kind {rkind!r} does not match request {kind!r}")
        return arrays


def serve_pending(handler, directory=None):
    """Answer every pending request with ``handler(Request) -> list of arrays``.

    Reference responder used by tests and for wiring up external models.
    Returns the number of requests served.
    """
    d = exchange_dir(directory)
    served = 0
    for req in sorted(d.glob("req_*.gsdt")):
        request = unpack_request(req.read_bytes())
        arrays = handler(request)
        rid = req.name[len("req_"):-len(".gsdt")]
        req.unlink()
        _atomic_write(d / f"resp_{rid}.gsdt", pack_response(request.kind, arrays))
        served += 1
    return served


def _as_frames(x):
    x = np.asarray(x, dtype=np.float64)
    return (list(x), True) if x.ndim == 4 else ([x], False)


class ExternalDenoiser(Denoiser):
    """Noise predictor answered by an external process through the exchange directory.

    Values travel as float32, so results carry single-precision rounding.
    """

    single_flight = True

    def __init__(self, directory=None, timeout=TIMEOUT):
        super().__init__()
        self.exchange = FileExchange(directory, timeout)

    def predict(self, x_t, t, condition=None):
        frames, batched = _as_frames(x_t)
        out = self.exchange.call(b"DENO", frames, t, condition)
        if len(out) != len(frames):
            raise ValidationError(f"external denoiser returned {len(out)} frames for {len(frames)}")
        out = np.stack(out).astype(np.float64)
        return out if batched else out[0]


class ExternalFeatures(FeatureExtractor):
    """Feature maps from an external extractor. It is not differentiable here."""

    def __init__(self, directory=None, timeout=TIMEOUT):
        self.exchange = FileExchange(directory, timeout)

    def extract(self, image):
        return self.exchange.call(b"FEAT", [image])[0].astype(np.float64)

    def vjp(self, image, grad_features):
        raise GuidanceSkip("external feature extractor provides no gradient")


class ExternalDepth(DepthEstimator):
    def __init__(self, directory=None, timeout=TIMEOUT):
        self.exchange = FileExchange(directory, timeout)

    def estimate(self, image, view=None):
        if image is None:
            raise ValidationError("external depth estimation needs the image")
        return self.exchange.call(b"DPTH", [image])[0].astype(np.float64)
