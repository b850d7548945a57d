"""Multi-resolution chunk container.

On-disk layout, all integers little-endian:

  magic 'KVFC' | u8 version=1 | cache_id 16B | u32 chunk_index |
  u32 token_start | u32 token_count | u8 layer_triplet_index |
  u16 metadata length | metadata JSON | u8 resolution_count |
  per resolution: u8 class, u64 offset, u64 length | payloads

Offsets are absolute from the start of the container; resolution entries are
sorted ascending by class code. The metadata JSON embeds the layout, the
group length F, per-resolution frame-plan digests, quantization scales and
the valid token count, so a client needs no second round trip.
"""

from __future__ import annotations

import base64
import json
import struct

import numpy as np

from . import codec, layout as L
from .kvmodel import QuantizedKV

MAGIC = b"KVFC"
VERSION = 1
DEFAULT_CHUNK_TOKENS = 10_000

_HDR_FIXED = struct.Struct("<4sB16sIIIB")
_ENTRY = struct.Struct("<BQQ")


class ChunkContainer:
    def __init__(
        self,
        cache_id: bytes,
        chunk_index: int,
        token_start: int,
        token_count: int,
        layer_triplet_index: int,
        metadata: dict,
        payloads: dict,
    ):
        if len(cache_id) != 16:
            raise ValueError("cache_id must be 16 bytes")
        self.cache_id = bytes(cache_id)
        self.chunk_index = chunk_index
        self.token_start = token_start
        self.token_count = token_count
        self.layer_triplet_index = layer_triplet_index
        self.metadata = metadata
        self.payloads = dict(payloads)  # class code -> bitstream bytes

    @property
    def resolutions(self):
        return sorted(self.payloads)

    def resolution_names(self):
        return [L.RESOLUTION_ORDER[c] for c in self.resolutions]

    def layout(self) -> L.LayoutConfig:
        return L.LayoutConfig.from_json(self.metadata["layout"])

    def plan(self, code: int) -> L.FramePlan:
        name = L.RESOLUTION_ORDER[code]
        return L.plan_inter_frame(
            self.token_count, name, self.layout(), self.metadata["F"]
        )

    def scales(self) -> np.ndarray:
        raw = base64.b64decode(self.metadata["scales_b64"])
        groups = len(raw) // 4 // 3
        return np.frombuffer(raw, np.float32).reshape(3, groups).copy()

    def bitstream(self, code: int) -> bytes:
        return self.payloads[code]

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata, sort_keys=True, separators=(",", ":")).encode()
        if len(meta) > 0xFFFF:
            raise ValueError("metadata blob exceeds u16 length")
        codes = self.resolutions
        head_len = (
            _HDR_FIXED.size + 2 + len(meta) + 1 + _ENTRY.size * len(codes)
        )
        out = bytearray()
        out.extend(
            _HDR_FIXED.pack(
                MAGIC,
                VERSION,
                self.cache_id,
                self.chunk_index,
                self.token_start,
                self.token_count,
                self.layer_triplet_index,
            )
        )
        out.extend(struct.pack("<H", len(meta)))
        out.extend(meta)
        out.append(len(codes))
        offset = head_len
        for c in codes:
            out.extend(_ENTRY.pack(c, offset, len(self.payloads[c])))
            offset += len(self.payloads[c])
        for c in codes:
            out.extend(self.payloads[c])
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "ChunkContainer":
        header, entries = parse_header(data)
        payloads = {}
        for c, off, length in entries:
            if off + length > len(data):
                raise ValueError("container payload out of bounds")
            payloads[c] = bytes(data[off : off + length])
        return cls(payloads=payloads, **header)


def parse_header(data: bytes):
    """Header fields and resolution entries without copying payloads."""
    if len(data) < _HDR_FIXED.size + 3:
        raise ValueError("container too short")
    magic, version, cache_id, chunk_index, token_start, token_count, triplet = (
        _HDR_FIXED.unpack_from(data, 0)
    )
    if magic != MAGIC:
        raise ValueError("bad container magic")
    if version != VERSION:
        raise ValueError(f"unsupported container version {version}")
    pos = _HDR_FIXED.size
    (meta_len,) = struct.unpack_from("<H", data, pos)
    pos += 2
    metadata = json.loads(data[pos : pos + meta_len].decode())
    pos += meta_len
    n_res = data[pos]
    pos += 1
    entries = []
    prev_code = -1
    for _ in range(n_res):
        code, off, length = _ENTRY.unpack_from(data, pos)
        pos += _ENTRY.size
        if code <= prev_code:
            raise ValueError("resolution entries not ascending")
        prev_code = code
        entries.append((code, off, length))
    header = dict(
        cache_id=cache_id,
        chunk_index=chunk_index,
        token_start=token_start,
        token_count=token_count,
        layer_triplet_index=triplet,
        metadata=metadata,
    )
    return header, entries


def pack_chunk(
    q_slab: QuantizedKV,
    cfg_layout: L.LayoutConfig,
    resolutions,
    cache_id: bytes = b"\x00" * 16,
    chunk_index: int = 0,
    token_start: int = 0,
    layer_triplet_index: int = 0,
    F: int = L.DEFAULT_GROUP_FRAMES,
    max_tokens: int = DEFAULT_CHUNK_TOKENS,
) -> ChunkContainer:
    """Encode one 3-layer slab at every requested resolution class."""
    if not resolutions:
        raise ValueError("resolution set must be non-empty")
    if q_slab.layers != 3:
        raise ValueError("slab must hold exactly 3 layers")
    if q_slab.tokens > max_tokens:
        raise ValueError(f"slab exceeds chunk capacity of {max_tokens} tokens")
    names = sorted(set(resolutions), key=L.RESOLUTION_CODE.__getitem__)
    tensors = L.slice_tokens(q_slab)
    payloads = {}
    digests = {}
    frame_counts = {}
    for name in names:
        plan = L.plan_inter_frame(q_slab.tokens, name, cfg_layout, F)
        frames = L.assemble_frames(tensors, plan)
        bs = codec.encode_frames(frames, codec.CodecConfig(gop=plan.F))
        code = L.RESOLUTION_CODE[name]
        payloads[code] = bs.data
        digests[name] = plan.digest()
        frame_counts[name] = plan.frame_count
    metadata = {
        "layout": cfg_layout.to_json(),
        "F": F,
        "plans": digests,
        "frame_counts": frame_counts,
        "group_size": q_slab.group_size,
        "scales_b64": base64.b64encode(
            np.ascontiguousarray(q_slab.scales, np.float32).tobytes()
        ).decode(),
    }
    return ChunkContainer(
        cache_id=cache_id,
        chunk_index=chunk_index,
        token_start=token_start,
        token_count=q_slab.tokens,
        layer_triplet_index=layer_triplet_index,
        metadata=metadata,
        payloads=payloads,
    )


def unpack_chunk(container: ChunkContainer, code: int) -> QuantizedKV:
    """Decode one resolution entry back into the 3-layer slab."""
    cfg = container.layout()
    plan = container.plan(code)
    frames = []
    codec.decode_frames(
        container.bitstream(code),
        codec.CodecConfig(gop=plan.F),
        lambda i, fr: frames.append(fr),
    )
    tensors = L.disassemble_frames(np.stack(frames), plan)
    values = L.unslice_tokens(tensors, cfg.H, cfg.D)
    groups = container.scales().shape[1]
    return QuantizedKV(
        values, container.scales(), (cfg.H * cfg.D) // groups
    )


def container_filename(cache_id: bytes, chunk_index: int) -> str:
    return f"{cache_id.hex()}_{chunk_index:05d}.kvfc"
