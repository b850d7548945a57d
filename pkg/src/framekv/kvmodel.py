"""Core KV-cache tensor model.

A KV cache is a 4-D float32 array indexed [token, layer, head, dim]. The
channel count N = H * D is the flattened per-token-per-layer width.
Quantization is symmetric uniform int8 per (layer, channel group), one float32
scale per group shared across all tokens. PagedMemory is the destination that
restoration writes decoded token slots into; it tracks an allocation
high-water mark.
"""

from __future__ import annotations

from typing import Optional

import numpy as np


class ConflictError(RuntimeError):
    """A token slot was written twice within one fetch."""


class KVCache:
    """4-D float32 tensor [token, layer, head, dim]."""

    def __init__(self, data: np.ndarray):
        data = np.asarray(data, dtype=np.float32)
        if data.ndim != 4:
            raise ValueError("KVCache data must be [token, layer, head, dim]")
        if min(data.shape) < 1:
            raise ValueError("all four extents must be >= 1")
        self.data = data

    @property
    def tokens(self) -> int:
        return self.data.shape[0]

    @property
    def layers(self) -> int:
        return self.data.shape[1]

    @property
    def H(self) -> int:
        return self.data.shape[2]

    @property
    def D(self) -> int:
        return self.data.shape[3]

    @property
    def channel(self) -> int:
        return self.H * self.D

    # N is the symbol used for the flattened channel width.
    N = channel

    def pad_layers(self) -> "KVCache":
        """Return a copy whose layer count is rounded up to a multiple of 3.

        Padding layers are all-zero and appended at the end.
        """
        rem = self.layers % 3
        if rem == 0:
            return KVCache(self.data.copy())
        pad = 3 - rem
        padded = np.concatenate(
            [self.data, np.zeros((self.tokens, pad, self.H, self.D), np.float32)],
            axis=1,
        )
        return KVCache(padded)

    def layer_triplet(self, index: int) -> np.ndarray:
        """View of layers [3*index, 3*index+3) with shape [tokens, 3, H, D]."""
        if self.layers % 3 != 0:
            raise ValueError("pad_layers() first: layer count not a multiple of 3")
        lo = 3 * index
        if not 0 <= lo < self.layers:
            raise ValueError("triplet index out of range")
        return self.data[:, lo : lo + 3]


class QuantizedKV:
    """int8 values with per-(layer, group) float32 scales."""

    def __init__(self, values: np.ndarray, scales: np.ndarray, group_size: int):
        values = np.asarray(values, dtype=np.int8)
        scales = np.asarray(scales, dtype=np.float32)
        if values.ndim != 4:
            raise ValueError("values must be [token, layer, head, dim]")
        if scales.shape != (values.shape[1], (values.shape[2] * values.shape[3]) // group_size):
            raise ValueError("scales must be [layers, channel/group_size]")
        self.values = values
        self.scales = scales
        self.group_size = group_size

    @property
    def tokens(self) -> int:
        return self.values.shape[0]

    @property
    def layers(self) -> int:
        return self.values.shape[1]

    @property
    def H(self) -> int:
        return self.values.shape[2]

    @property
    def D(self) -> int:
        return self.values.shape[3]

    @property
    def channel(self) -> int:
        return self.H * self.D

    def layer_triplet(self, index: int) -> "QuantizedKV":
        """QuantizedKV slab holding layers [3*index, 3*index+3)."""
        if self.layers % 3 != 0:
            raise ValueError("layer count not a multiple of 3")
        lo = 3 * index
        if not 0 <= lo < self.layers:
            raise ValueError("triplet index out of range")
        return QuantizedKV(
            self.values[:, lo : lo + 3], self.scales[lo : lo + 3], self.group_size
        )


def quantize(kv: KVCache, group_size: int = 128) -> QuantizedKV:
    """Symmetric uniform int8 quantization per (layer, channel group).

    scale = max_abs / 127 over all tokens in the group, or 1.0 for an
    all-zero group. Integers are round-half-to-even and clamped to
    [-127, 127].
    """
    ch = kv.channel
    if group_size <= 0 or ch % group_size != 0:
        raise ValueError("group_size must be positive and divide channel")
    groups = ch // group_size
    x = kv.data.reshape(kv.tokens, kv.layers, groups, group_size).astype(np.float64)
    max_abs = np.abs(x).max(axis=(0, 3))
    scales = np.where(max_abs > 0, max_abs / 127.0, 1.0).astype(np.float32)
    ints = np.rint(x / scales[None, :, :, None].astype(np.float64))
    np.clip(ints, -127, 127, out=ints)
    values = ints.astype(np.int8).reshape(kv.data.shape)
    return QuantizedKV(values, scales, group_size)


def dequantize(q: QuantizedKV) -> KVCache:
    """Inverse of quantize: x_hat = int * scale, max error scale/2."""
    groups = q.channel // q.group_size
    ints = q.values.reshape(q.tokens, q.layers, groups, q.group_size).astype(np.float64)
    x = ints * q.scales[None, :, :, None].astype(np.float64)
    return KVCache(x.reshape(q.values.shape).astype(np.float32))


def gen_synthetic_kv(
    tokens: int,
    layers: int,
    H: int,
    D: int,
    token_smoothness: float,
    seed: int,
    channel_smoothness: float = 0.0,
) -> KVCache:
    """Deterministic synthetic KV cache.

    Along the token axis each (layer, head, dim) series is an AR(1) blend
    x_t = s * x_{t-1} + (1 - s) * n_t with s = token_smoothness; smoothness 0
    gives i.i.d. noise and smoothness 1 repeats token 0. channel_smoothness
    optionally applies the same AR(1) blend to the driving noise along the
    dim axis within each head, so that nearby dims co-vary; the default 0.0
    leaves dims independent.
    """
    if min(tokens, layers, H, D) < 1:
        raise ValueError("all extents must be >= 1")
    if not 0.0 <= token_smoothness <= 1.0:
        raise ValueError("token_smoothness must be in [0, 1]")
    if not 0.0 <= channel_smoothness <= 1.0:
        raise ValueError("channel_smoothness must be in [0, 1]")

    rng = np.random.default_rng(seed)
    noise = rng.standard_normal((tokens, layers, H, D))
    c = channel_smoothness
    if c > 0.0:
        for d in range(1, D):
            noise[..., d] = c * noise[..., d - 1] + (1.0 - c) * noise[..., d]

    s = token_smoothness
    out = np.empty_like(noise)
    out[0] = noise[0]
    for t in range(1, tokens):
        out[t] = s * out[t - 1] + (1.0 - s) * noise[t]
    return KVCache(out.astype(np.float32))


class PagedMemory:
    """Fixed-page token-slot store with byte accounting.

    A slot is one (token, layer) cell; pages group page_size_tokens adjacent
    tokens. allocated_bytes counts live slot bytes, peak_bytes its maximum
    over time. Within one fetch a slot may be written at most once.
    """

    def __init__(self, page_size_tokens: int = 16):
        if page_size_tokens <= 0:
            raise ValueError("page_size_tokens must be positive")
        self.page_size_tokens = page_size_tokens
        self.pages: dict[int, dict[tuple[int, int], np.ndarray]] = {}
        self.allocated_bytes = 0
        self.peak_bytes = 0
        self._written: set[tuple[int, int]] = set()

    def begin_fetch(self) -> None:
        """Start a new fetch: clears write-once markers, keeps contents."""
        self._written.clear()

    def page_write(self, token_index: int, layer: int, slot_data: np.ndarray) -> None:
        if token_index < 0 or layer < 0:
            raise ValueError("negative slot coordinates")
        key = (token_index, layer)
        if key in self._written:
            raise ConflictError(f"slot (token={token_index}, layer={layer}) already written")
        arr = np.asarray(slot_data)
        page = token_index // self.page_size_tokens
        slot = (token_index % self.page_size_tokens, layer)
        self.pages.setdefault(page, {})[slot] = arr
        self._written.add(key)
        self.allocated_bytes += arr.nbytes
        if self.allocated_bytes > self.peak_bytes:
            self.peak_bytes = self.allocated_bytes

    def free_page(self, page_index: int) -> None:
        slots = self.pages.pop(page_index, None)
        if slots is None:
            return
        base = page_index * self.page_size_tokens
        for (off, layer), arr in slots.items():
            self.allocated_bytes -= arr.nbytes
            self._written.discard((base + off, layer))

    def read(self, token_index: int, layer: int) -> Optional[np.ndarray]:
        page = self.pages.get(token_index // self.page_size_tokens)
        if page is None:
            return None
        return page.get((token_index % self.page_size_tokens, layer))
