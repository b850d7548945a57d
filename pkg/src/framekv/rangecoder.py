"""Adaptive byte-wise range coder.

This is the carryless 32-bit range coder (Subbotin style) driving an adaptive
order-0 model over a 256-symbol alphabet. The model starts uniform (every
count 1), bumps the coded symbol's count by INC after each use, and halves all
counts once the total reaches TOTAL_LIMIT so the model keeps adapting.
Cumulative counts live in a Fenwick tree so both lookup and update are
O(log 256).

Coder invariants, kept in 32-bit arithmetic via masking:
  - `low` is the bottom of the current interval, `rng` its width.
  - A byte is emitted once the top byte of `low` and `low + rng` agree.
  - If the interval straddles a 2^24 boundary while `rng` has shrunk below
    2^16, the width is squeezed to the distance up to the next 2^16 boundary,
    which discards a sliver of code space but removes carry propagation
    entirely. The squeeze can never produce a zero width: a straddle with
    rng < 2^16 implies low is not 2^16-aligned.

The decoder mirrors the same state transitions, reading bytes into `code`
instead of emitting; reads past the end of the stream return zero, which
covers the four flush bytes plus any trailing normalization.
"""

from __future__ import annotations

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is an install requirement
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f

        if args and callable(args[0]):
            return args[0]
        return wrap


MASK = 0xFFFFFFFF
TOP = 1 << 24
BOT = 1 << 16

ALPHABET = 256
INC = 32
TOTAL_LIMIT = 1 << 16


def _model_init():
    freq = np.ones(ALPHABET, np.int64)
    fen = np.zeros(ALPHABET + 1, np.int64)
    for i in range(ALPHABET):
        _fen_add(fen, i, 1)
    return freq, fen


def _fen_add(fen, i, delta):
    # Fenwick point update: add delta to freq[i].
    j = i + 1
    while j <= ALPHABET:
        fen[j] += delta
        j += j & (-j)


def _fen_prefix(fen, i):
    # Sum of freq[0..i-1].
    s = 0
    j = i
    while j > 0:
        s += fen[j]
        j -= j & (-j)
    return s


def _fen_find(fen, value):
    # Largest symbol s with prefix(s) <= value; assumes value < total.
    idx = 0
    bit = ALPHABET
    rem = value
    while bit > 0:
        nxt = idx + bit
        if nxt <= ALPHABET and fen[nxt] <= rem:
            rem -= fen[nxt]
            idx = nxt
        bit >>= 1
    return idx


def _rebuild(freq, fen):
    # Halve all counts (keeping them >= 1) and rebuild the tree in place.
    total = 0
    for i in range(ALPHABET):
        freq[i] = (freq[i] + 1) >> 1
        total += freq[i]
    for i in range(ALPHABET + 1):
        fen[i] = 0
    for i in range(ALPHABET):
        _fen_add(fen, i, freq[i])
    return total


def _encode_core(symbols, out):
    freq, fen = _model_init()
    total = ALPHABET
    low = 0
    rng = MASK
    n_out = 0
    for k in range(len(symbols)):
        s = int(symbols[k])
        cum = _fen_prefix(fen, s)
        fr = freq[s]

        r = rng // total
        low = (low + r * cum) & MASK
        rng = r * fr
        while True:
            if ((low ^ (low + rng)) & MASK) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            out[n_out] = (low >> 24) & 0xFF
            n_out += 1
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK

        freq[s] += INC
        _fen_add(fen, s, INC)
        total += INC
        if total >= TOTAL_LIMIT:
            total = _rebuild(freq, fen)

    # Flush: four more bytes pin down the final interval.
    for _ in range(4):
        out[n_out] = (low >> 24) & 0xFF
        n_out += 1
        low = (low << 8) & MASK
    return n_out


def _decode_core(data, n_symbols, out):
    freq, fen = _model_init()
    total = ALPHABET
    low = 0
    rng = MASK
    code = 0
    pos = 0
    n_data = len(data)
    for _ in range(4):
        byte = int(data[pos]) if pos < n_data else 0
        code = ((code << 8) | byte) & MASK
        pos += 1

    for k in range(n_symbols):
        r = rng // total
        dv = ((code - low) & MASK) // r
        if dv >= total:
            dv = total - 1
        s = _fen_find(fen, dv)
        cum = _fen_prefix(fen, s)
        fr = freq[s]

        low = (low + r * cum) & MASK
        rng = r * fr
        while True:
            if ((low ^ (low + rng)) & MASK) < TOP:
                pass
            elif rng < BOT:
                rng = (-low) & (BOT - 1)
            else:
                break
            byte = int(data[pos]) if pos < n_data else 0
            code = ((code << 8) | byte) & MASK
            pos += 1
            low = (low << 8) & MASK
            rng = (rng << 8) & MASK

        out[k] = s
        freq[s] += INC
        _fen_add(fen, s, INC)
        total += INC
        if total >= TOTAL_LIMIT:
            total = _rebuild(freq, fen)
    return n_symbols


if HAVE_NUMBA:
    _fen_add = njit(cache=True)(_fen_add)
    _fen_prefix = njit(cache=True)(_fen_prefix)
    _fen_find = njit(cache=True)(_fen_find)
    _rebuild = njit(cache=True)(_rebuild)
    _model_init = njit(cache=True)(_model_init)
    encode_core = njit(cache=True)(_encode_core)
    decode_core = njit(cache=True)(_decode_core)
else:
    encode_core = _encode_core
    decode_core = _decode_core


def encode_bytes(symbols: np.ndarray) -> bytes:
    """Entropy-code a uint8 array; returns the coded byte string."""
    symbols = np.ascontiguousarray(symbols, dtype=np.uint8).ravel()
    # 2 bytes per symbol is a hard ceiling (max symbol cost is 16 bits).
    out = np.empty(2 * len(symbols) + 16, np.uint8)
    n = encode_core(symbols, out)
    return out[:n].tobytes()


def decode_bytes(data: bytes, n_symbols: int) -> np.ndarray:
    """Inverse of encode_bytes; needs the symbol count up front."""
    arr = np.frombuffer(data, dtype=np.uint8)
    out = np.empty(n_symbols, np.uint8)
    decode_core(arr, n_symbols, out)
    return out
