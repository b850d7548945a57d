"""Lossless predictive frame codec.

Frames are [3, height, width] uint8 arrays. Per 16x16 block the coder picks
intra prediction (left neighbor; first column from the row above; the frame
corner from 128) or inter prediction (co-located sample of the previous
frame), whichever gives the smaller sum of absolute residuals, ties to inter.
Because coding is lossless the reconstructed neighbors equal the originals,
so residual planes can be computed whole-plane and the per-sample decode only
has to follow raster order.

Residuals are taken mod 256, zigzag-mapped to one byte each and entropy coded
with the adaptive range coder; the model resets per plane per frame. Frames
at indices that are multiples of the group length are coded intra-only, so a
decoder never needs more than reference_depth previous frames live.

Stream layout (all integers little-endian):
  u32 frame_count, u32 height, u32 width
  per frame: u8 frame_type (0 intra, 1 inter-eligible)
    per plane (3): [inter frames only: packed mode bitmap, 1 bit per block,
    row-major] u32 payload length, payload
"""

from __future__ import annotations

import struct

import numpy as np

from . import rangecoder
from .kvmodel import KVCache

BLOCK = 16

# Zigzag maps the mod-256 residual byte to a magnitude-ordered symbol.
ZIG = np.empty(256, np.uint8)
UNZIG_DELTA = np.empty(256, np.int16)
for _r in range(256):
    _s = _r if _r < 128 else _r - 256
    _z = 2 * _s if _s >= 0 else -2 * _s - 1
    ZIG[_r] = _z
    UNZIG_DELTA[_z] = _s
del _r, _s, _z


class DecodeError(RuntimeError):
    def __init__(self, message, frame_index=None):
        super().__init__(message)
        self.frame_index = frame_index


class CodecConfig:
    def __init__(self, gop: int = 4, reference_depth: int = 1, block_size: int = BLOCK):
        if reference_depth > 3:
            raise ValueError("reference_depth must be < 4")
        if block_size != BLOCK:
            raise ValueError("only 16x16 blocks are supported")
        if gop < 1:
            raise ValueError("gop must be >= 1")
        self.gop = gop
        self.reference_depth = reference_depth
        self.block_size = block_size


class Bitstream:
    def __init__(self, data, frame_count, height, width, frame_offsets, inter_fraction):
        self.data = data
        self.frame_count = frame_count
        self.height = height
        self.width = width
        self.frame_offsets = frame_offsets
        self.inter_fraction = inter_fraction

    def __len__(self):
        return len(self.data)


def _intra_residual(plane):
    p = plane.astype(np.int16)
    res = np.empty_like(p)
    res[:, 1:] = p[:, 1:] - p[:, :-1]
    res[1:, 0] = p[1:, 0] - p[:-1, 0]
    res[0, 0] = p[0, 0] - 128
    return res


def _block_sums(absres, bh, bw):
    h, w = absres.shape
    padded = np.zeros((bh * BLOCK, bw * BLOCK), np.int64)
    padded[:h, :w] = absres
    return padded.reshape(bh, BLOCK, bw, BLOCK).sum(axis=(1, 3))


def encode_frames(frames, cfg: CodecConfig) -> Bitstream:
    frames = np.asarray(frames, dtype=np.uint8)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ValueError("frames must be [n, 3, height, width]")
    n, _, h, w = frames.shape
    bh = -(-h // BLOCK)
    bw = -(-w // BLOCK)

    out = bytearray(struct.pack("<III", n, h, w))
    offsets = []
    inter_frac = []
    for f in range(n):
        offsets.append(len(out))
        is_inter = (f % cfg.gop) != 0
        out.append(1 if is_inter else 0)
        fracs = []
        for p in range(3):
            plane = frames[f, p]
            intra = _intra_residual(plane)
            if is_inter:
                inter = plane.astype(np.int16) - frames[f - 1, p].astype(np.int16)
                sad_intra = _block_sums(np.abs(intra), bh, bw)
                sad_inter = _block_sums(np.abs(inter), bh, bw)
                modes = (sad_inter <= sad_intra).astype(np.uint8)
                grown = np.repeat(np.repeat(modes, BLOCK, 0), BLOCK, 1)[:h, :w]
                res = np.where(grown == 1, inter, intra)
                fracs.append(float(modes.mean()))
                out.extend(np.packbits(modes.ravel()).tobytes())
            else:
                res = intra
            symbols = ZIG[(res & 0xFF).astype(np.uint8)]
            payload = rangecoder.encode_bytes(symbols)
            out.extend(struct.pack("<I", len(payload)))
            out.extend(payload)
        inter_frac.append(float(np.mean(fracs)) if fracs else 0.0)
    return Bitstream(bytes(out), n, h, w, offsets, inter_frac)


def _reconstruct_plane_py(symbols, modes, prev, use_inter, unzig, plane):
    h, w = plane.shape
    for y in range(h):
        for x in range(w):
            d = unzig[symbols[y, x]]
            if use_inter and modes[y >> 4, x >> 4] == 1:
                pred = prev[y, x]
            elif x > 0:
                pred = plane[y, x - 1]
            elif y > 0:
                pred = plane[y - 1, x]
            else:
                pred = 128
            plane[y, x] = (pred + d) & 0xFF


if rangecoder.HAVE_NUMBA:
    from numba import njit

    _reconstruct_plane = njit(cache=True)(_reconstruct_plane_py)
else:
    _reconstruct_plane = _reconstruct_plane_py


def decode_frames(bs, cfg: CodecConfig, on_frame, stats=None):
    """Decode a Bitstream (or raw bytes), calling on_frame(index, frame).

    Retains only the previous frame internally. If `stats` is a dict it
    receives peak_live_bytes, the high-water mark of retained frame bytes.
    """
    data = bs.data if isinstance(bs, Bitstream) else bytes(bs)
    if len(data) < 12:
        raise DecodeError("stream shorter than header", frame_index=0)
    n, h, w = struct.unpack_from("<III", data, 0)
    pos = 12
    bh = -(-h // BLOCK)
    bw = -(-w // BLOCK)
    bitmap_len = (bh * bw + 7) // 8
    no_modes = np.zeros((bh, bw), np.uint8)
    zeros = np.zeros((h, w), np.uint8)

    prev = None
    peak_live = 0
    for f in range(n):
        try:
            frame_type = data[pos]
            pos += 1
            if frame_type not in (0, 1):
                raise DecodeError(f"bad frame type at frame {f}", frame_index=f)
            if frame_type == 1 and prev is None:
                raise DecodeError(f"inter frame {f} without reference", frame_index=f)
            planes = np.empty((3, h, w), np.uint8)
            for p in range(3):
                if frame_type == 1:
                    bits = np.frombuffer(data, np.uint8, bitmap_len, pos)
                    pos += bitmap_len
                    modes = np.unpackbits(bits)[: bh * bw].reshape(bh, bw)
                else:
                    modes = no_modes
                (plen,) = struct.unpack_from("<I", data, pos)
                pos += 4
                payload = data[pos : pos + plen]
                if len(payload) < plen:
                    raise IndexError
                pos += plen
                symbols = rangecoder.decode_bytes(payload, h * w).reshape(h, w)
                ref = prev[p] if frame_type == 1 else zeros
                _reconstruct_plane(
                    symbols, modes, ref, frame_type == 1, UNZIG_DELTA, planes[p]
                )
        except (IndexError, ValueError, struct.error):
            raise DecodeError(f"stream truncated at frame {f}", frame_index=f) from None
        live = planes.nbytes + (prev.nbytes if prev is not None else 0)
        peak_live = max(peak_live, live)
        on_frame(f, planes)
        prev = planes
    if pos != len(data):
        raise DecodeError(f"trailing bytes after frame {n - 1}", frame_index=n - 1)
    if stats is not None:
        stats["peak_live_bytes"] = peak_live
    return n


def compression_ratio(raw, bs) -> dict:
    """Size ratios of the fp16 and int8 baselines to the coded stream."""
    if isinstance(raw, KVCache):
        elems = raw.data.size
    else:
        elems = int(np.asarray(raw).size)
    coded = len(bs.data) if isinstance(bs, Bitstream) else int(bs)
    return {
        "fp16_ratio": (2.0 * elems) / coded,
        "int8_ratio": (1.0 * elems) / coded,
    }


def make_corpus_encoder(resolution_class="R240", F=None):
    """Encoder handle for the layout search: slab x tiling -> coded bytes."""
    from . import layout as L

    def handle(chunk, cfg):
        tensors = L.slice_tokens(chunk)
        plan = L.plan_inter_frame(
            tensors.shape[0], resolution_class, cfg, F or L.DEFAULT_GROUP_FRAMES
        )
        frames = L.assemble_frames(tensors, plan)
        bs = encode_frames(frames, CodecConfig(gop=plan.F))
        return len(bs.data)

    return handle
