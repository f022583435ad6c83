"""Out-of-process promptable segmenter over a pipe.

Wire format, both directions: a 4-byte big-endian length, then that many
bytes of UTF-8 JSON.  A request header ``{"image_id", "box", "shape"}`` is
followed by ``prod(shape)`` raw uint8 pixel bytes.  The reply is JSON with
``{"image_id", "mask": <RLE>}`` or ``{"error": message}``.

Run ``python -m colodistill.adapter --truth truth.json [--radius R]`` to
serve the oracle segmenter; a real model server only needs to speak the
same framing.
"""
from __future__ import annotations

import argparse
import json
import struct
import subprocess
import sys
import threading
from typing import BinaryIO, Sequence

import numpy as np

from .imaging import rle_decode, rle_encode
from .records import ImageSample
from .sam_distill import BinaryMask, PromptableSegmenter, SegmenterError, oracle_segmenter
from .wsss import BoxPrompt

_LEN = struct.Struct(">I")


def _read_exact(fh: BinaryIO, n: int) -> bytes:
    buf = b""
    while len(buf) < n:
        chunk = fh.read(n - len(buf))
        if not chunk:
            raise EOFError("stream closed mid-message")
        buf += chunk
    return buf


def write_frame(fh: BinaryIO, obj: dict, payload: bytes = b"") -> None:
    head = json.dumps(obj, sort_keys=True).encode("utf-8")
    fh.write(_LEN.pack(len(head)) + head + payload)
    fh.flush()


def read_frame(fh: BinaryIO) -> dict | None:
    """Next JSON header, or None at a clean end of stream."""
    first = fh.read(_LEN.size)
    if not first:
        return None
    if len(first) < _LEN.size:
        first += _read_exact(fh, _LEN.size - len(first))
    (n,) = _LEN.unpack(first)
    return json.loads(_read_exact(fh, n).decode("utf-8"))


def encode_request(image: ImageSample, box: BoxPrompt) -> tuple[dict, bytes]:
    px = np.ascontiguousarray(image.pixels, dtype=np.uint8)
    return {"image_id": image.image_id, "box": list(box.as_tuple()), "shape": list(px.shape)}, px.tobytes()


def serve(segmenter: PromptableSegmenter, rfile: BinaryIO, wfile: BinaryIO) -> int:
    """Answer requests until EOF; returns the number served."""
    n = 0
    while (req := read_frame(rfile)) is not None:
        shape = tuple(req["shape"])
        px = np.frombuffer(_read_exact(rfile, int(np.prod(shape))), np.uint8).reshape(shape)
        try:
            img = ImageSample(req["image_id"], px.copy(), "")
            m = segmenter.segment(img, BoxPrompt(*req["box"]))
            write_frame(wfile, {"image_id": req["image_id"], "mask": rle_encode(m.values)})
        except Exception as e:
            write_frame(wfile, {"error": f"{type(e).__name__}: {e}"})
        n += 1
    return n


class AdapterSegmenter:
    """Client side: forwards each segment() call to a child process."""

    def __init__(self, command: Sequence[str], deterministic: bool = True):
        self.command = list(command)
        self.deterministic = deterministic
        self._lock = threading.Lock()
        self._proc: subprocess.Popen | None = None

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return self._proc

    def segment(self, image: ImageSample, box: BoxPrompt) -> BinaryMask:
        head, payload = encode_request(image, box)
        with self._lock:
            proc = self._ensure()
            try:
                write_frame(proc.stdin, head, payload)
                reply = read_frame(proc.stdout)
            except (BrokenPipeError, EOFError) as e:
                raise SegmenterError(f"adapter process died: {e}") from None
        if reply is None:
            raise SegmenterError("adapter closed the connection")
        if "error" in reply:
            raise SegmenterError(reply["error"])
        mask = rle_decode(reply["mask"])
        if mask.shape != image.shape:
            raise SegmenterError(f"adapter mask shape {mask.shape} != image {image.shape}")
        return BinaryMask(image.image_id, mask)

    def close(self) -> None:
        if self._proc is not None:
            self._proc.stdin.close()
            self._proc.wait(timeout=30)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def main(argv: Sequence[str] | None = None) -> int:
    from .synth import load_truth

    ap = argparse.ArgumentParser(description="serve the oracle segmenter over stdin/stdout")
    ap.add_argument("--truth", required=True)
    ap.add_argument("--radius", type=int, default=0)
    ap.add_argument("--mode", default="dilate")
    ap.add_argument("--seed", type=int, default=0)
    a = ap.parse_args(argv)
    truth = load_truth(a.truth)
    masks = {iid: m for rec in truth.values() for iid, m in rec["masks"].items()}
    serve(oracle_segmenter(masks, a.radius, a.mode, a.seed), sys.stdin.buffer, sys.stdout.buffer)
    return 0


if __name__ == "__main__":
    sys.exit(main())
