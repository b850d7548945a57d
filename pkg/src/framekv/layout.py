"""Tensor-to-frame layout: token slicing, tile packing, layout search, SSIM/PSNR."""

from __future__ import annotations

import numpy as np

from .kvmodel import QuantizedKV

# resolution class -> tiles per frame, and the tile grid used for each class
RESOLUTION_TILES = {"R240": 16, "R480": 64, "R640": 96, "R1080": 256}
RESOLUTION_GRIDS = {"R240": (4, 4), "R480": (8, 8), "R640": (8, 12), "R1080": (16, 16)}
RESOLUTION_ORDER = ["R240", "R480", "R640", "R1080"]
RESOLUTION_CODE = {name: i for i, name in enumerate(RESOLUTION_ORDER)}

DEFAULT_GROUP_FRAMES = 4


def _is_pow2(n):
    return n >= 1 and (n & (n - 1)) == 0


def _pow2_pairs(n):
    pairs = []
    a = 1
    while a <= n:
        pairs.append((a, n // a))
        a *= 2
    return pairs


class LayoutConfig:
    """Intra-frame tiling: H factored as a_h*b_h, D as a_d*b_d, all powers of two.

    Element (h, d) with h = i_h*b_h + j_h and d = i_d*b_d + j_d lands at tile
    row i_h*a_d + i_d, column j_h*b_d + j_d. Head order and within-head element
    order are preserved; no elements cross head boundaries.
    """

    def __init__(self, H, D, a_h, b_h, a_d, b_d):
        if not (_is_pow2(H) and _is_pow2(D)):
            raise ValueError("H and D must be powers of two")
        if a_h * b_h != H or a_d * b_d != D:
            raise ValueError("factor pairs must multiply back to H and D")
        if not all(_is_pow2(v) for v in (a_h, b_h, a_d, b_d)):
            raise ValueError("factors must be powers of two")
        self.H, self.D = H, D
        self.a_h, self.b_h = a_h, b_h
        self.a_d, self.b_d = a_d, b_d
        self.tile_h = a_h * a_d
        self.tile_w = b_h * b_d

    def key(self):
        return (self.tile_h, self.tile_w, self.a_h, self.a_d)

    def __eq__(self, other):
        return isinstance(other, LayoutConfig) and (
            (self.H, self.D, self.a_h, self.b_h, self.a_d, self.b_d)
            == (other.H, other.D, other.a_h, other.b_h, other.a_d, other.b_d)
        )

    def __hash__(self):
        return hash((self.H, self.D, self.a_h, self.b_h, self.a_d, self.b_d))

    def __repr__(self):
        return (
            f"LayoutConfig(H={self.H},D={self.D},"
            f"h=({self.a_h},{self.b_h}),d=({self.a_d},{self.b_d}),"
            f"tile={self.tile_h}x{self.tile_w})"
        )

    def to_json(self):
        return {
            "H": self.H,
            "D": self.D,
            "a_h": self.a_h,
            "b_h": self.b_h,
            "a_d": self.a_d,
            "b_d": self.b_d,
            "tile_h": self.tile_h,
            "tile_w": self.tile_w,
            "resolution_tiles": dict(RESOLUTION_TILES),
        }

    @classmethod
    def from_json(cls, obj):
        return cls(obj["H"], obj["D"], obj["a_h"], obj["b_h"], obj["a_d"], obj["b_d"])


def identity_layout(H, D):
    """Tile (1, H*D): one row holding the flat channel vector."""
    return LayoutConfig(H, D, 1, H, 1, D)


def tiling_candidates(H, D):
    """All power-of-two factorizations of H crossed with those of D.

    (log2 H + 1) * (log2 D + 1) candidates; no element permutations beyond
    the block reshape, so head order and within-head order are always kept.
    """
    if not (_is_pow2(H) and _is_pow2(D)):
        raise ValueError("H and D must be powers of two")
    out = []
    for a_h, b_h in _pow2_pairs(H):
        for a_d, b_d in _pow2_pairs(D):
            out.append(LayoutConfig(H, D, a_h, b_h, a_d, b_d))
    return out


def slice_tokens(q: QuantizedKV, triplet_index: int = 0) -> np.ndarray:
    """Slice a 3-layer slab along tokens: [tokens, 3, channel] int8 view."""
    slab = q.layer_triplet(triplet_index) if q.layers != 3 else q
    if slab.layers != 3:
        raise ValueError("slab must have exactly 3 layers")
    return slab.values.reshape(slab.tokens, 3, slab.channel)


def unslice_tokens(tensors: np.ndarray, H, D) -> np.ndarray:
    """Inverse of slice_tokens: [tokens, 3, H, D] int8."""
    t = np.asarray(tensors, dtype=np.int8)
    return t.reshape(t.shape[0], 3, H, D)


def apply_layout(tensor, cfg: LayoutConfig):
    """[1, 3, channel] (or [3, channel]) -> [3, tile_h, tile_w], bit-exact."""
    t = np.asarray(tensor)
    if t.ndim == 3 and t.shape[0] == 1:
        t = t[0]
    if t.shape != (3, cfg.H * cfg.D):
        raise ValueError("tensor must be [1, 3, H*D]")
    return (
        t.reshape(3, cfg.a_h, cfg.b_h, cfg.a_d, cfg.b_d)
        .transpose(0, 1, 3, 2, 4)
        .reshape(3, cfg.tile_h, cfg.tile_w)
    )


def inverse_layout(tile, cfg: LayoutConfig):
    """[3, tile_h, tile_w] -> [1, 3, channel], exact inverse of apply_layout."""
    y = np.asarray(tile)
    if y.shape != (3, cfg.tile_h, cfg.tile_w):
        raise ValueError("tile must be [3, tile_h, tile_w]")
    t = (
        y.reshape(3, cfg.a_h, cfg.a_d, cfg.b_h, cfg.b_d)
        .transpose(0, 1, 3, 2, 4)
        .reshape(3, cfg.H * cfg.D)
    )
    return t[None]


def _grid_for(tiles_per_frame):
    rows = int(np.sqrt(tiles_per_frame))
    while tiles_per_frame % rows:
        rows -= 1
    return rows, tiles_per_frame // rows


class FramePlan:
    """Placement of T token tensors into frames of a resolution class.

    Tensors are taken F at a time as a group; a group occupies one fixed
    (row, col) tile slot across F consecutive frames. A segment of K = F
    frames holds tiles_per_frame groups. Trailing frames may be partially
    filled; their unused tiles are padding.
    """

    def __init__(self, T, resolution_class, cfg: LayoutConfig, F=DEFAULT_GROUP_FRAMES):
        if T < 1:
            raise ValueError("T must be >= 1")
        if F < 1:
            raise ValueError("F must be >= 1")
        if isinstance(resolution_class, str):
            if resolution_class not in RESOLUTION_TILES:
                raise ValueError(f"unknown resolution class {resolution_class!r}")
            self.resolution_class = resolution_class
            self.tiles_per_frame = RESOLUTION_TILES[resolution_class]
            self.grid_rows, self.grid_cols = RESOLUTION_GRIDS[resolution_class]
        else:
            self.tiles_per_frame = int(resolution_class)
            if self.tiles_per_frame < 1:
                raise ValueError("tiles_per_frame must be >= 1")
            self.resolution_class = f"T{self.tiles_per_frame}"
            self.grid_rows, self.grid_cols = _grid_for(self.tiles_per_frame)
        self.T = T
        self.F = F
        self.K = F
        self.cfg = cfg
        self.tile_h = cfg.tile_h
        self.tile_w = cfg.tile_w
        self.frame_h = self.grid_rows * cfg.tile_h
        self.frame_w = self.grid_cols * cfg.tile_w
        seg_cap = F * self.tiles_per_frame
        full, rem = divmod(T, seg_cap)
        self.frame_count = full * F + (min(rem, F) if rem else 0)

    def placement(self, i):
        """tensor index -> (frame_index, tile_row, tile_col)."""
        if not 0 <= i < self.T:
            raise ValueError("tensor index out of range")
        g, o = divmod(i, self.F)
        seg, slot = divmod(g, self.tiles_per_frame)
        return seg * self.F + o, slot // self.grid_cols, slot % self.grid_cols

    def frame_slots(self, frame_index):
        """Valid (tensor_index, tile_row, tile_col) triples of one frame."""
        seg, o = divmod(frame_index, self.F)
        out = []
        for slot in range(self.tiles_per_frame):
            g = seg * self.tiles_per_frame + slot
            i = g * self.F + o
            if i < self.T:
                out.append((i, slot // self.grid_cols, slot % self.grid_cols))
        return out

    def digest(self):
        import hashlib

        key = (
            f"{self.T}/{self.F}/{self.K}/{self.tiles_per_frame}/"
            f"{self.grid_rows}x{self.grid_cols}/{self.tile_h}x{self.tile_w}"
        )
        return hashlib.sha256(key.encode()).hexdigest()[:16]


def plan_inter_frame(T, resolution_class, cfg: LayoutConfig, F=DEFAULT_GROUP_FRAMES):
    plan = FramePlan(T, resolution_class, cfg, F)
    if plan.tile_h > plan.frame_h or plan.tile_w > plan.frame_w:
        raise ValueError("tile does not fit the frame")
    return plan


PAD_BYTE = 128  # unsigned encoding of quantized zero


def assemble_frames(tensors: np.ndarray, plan: FramePlan) -> np.ndarray:
    """[T, 3, channel] int8 -> [frame_count, 3, frame_h, frame_w] uint8.

    Sample bytes are int8 + 128; padding tiles hold the byte encoding of
    quantized zero.
    """
    cfg = plan.cfg
    T = tensors.shape[0]
    if T != plan.T:
        raise ValueError("tensor count does not match plan")
    tiles = (
        tensors.reshape(T, 3, cfg.a_h, cfg.b_h, cfg.a_d, cfg.b_d)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(T, 3, cfg.tile_h, cfg.tile_w)
        .astype(np.int16)
        + 128
    ).astype(np.uint8)
    frames = np.full(
        (plan.frame_count, 3, plan.frame_h, plan.frame_w), PAD_BYTE, np.uint8
    )
    th, tw = cfg.tile_h, cfg.tile_w
    for i in range(T):
        f, r, c = plan.placement(i)
        frames[f, :, r * th : (r + 1) * th, c * tw : (c + 1) * tw] = tiles[i]
    return frames


def disassemble_frames(frames: np.ndarray, plan: FramePlan) -> np.ndarray:
    """Inverse of assemble_frames: [T, 3, channel] int8."""
    cfg = plan.cfg
    th, tw = cfg.tile_h, cfg.tile_w
    out = np.empty((plan.T, 3, cfg.H * cfg.D), np.int8)
    for f in range(plan.frame_count):
        for i, r, c in plan.frame_slots(f):
            tile = frames[f, :, r * th : (r + 1) * th, c * tw : (c + 1) * tw]
            signed = (tile.astype(np.int16) - 128).astype(np.int8)
            out[i] = inverse_layout(signed, cfg)[0]
    return out


# ---------------------------------------------------------------------------
# similarity metrics

_C1 = (0.01 * 255.0) ** 2
_C2 = (0.03 * 255.0) ** 2
_WIN = 8


def ssim(a, b):
    """Mean SSIM over non-overlapping 8x8 windows (partial edges included)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("planes must be 2-D with equal extents")
    h, w = a.shape
    vals = []
    H8, W8 = (h // _WIN) * _WIN, (w // _WIN) * _WIN
    if H8 and W8:
        A = a[:H8, :W8].reshape(H8 // _WIN, _WIN, W8 // _WIN, _WIN)
        A = A.transpose(0, 2, 1, 3).reshape(-1, _WIN * _WIN)
        B = b[:H8, :W8].reshape(H8 // _WIN, _WIN, W8 // _WIN, _WIN)
        B = B.transpose(0, 2, 1, 3).reshape(-1, _WIN * _WIN)
        vals.append(_ssim_windows(A, B))
    for i0 in range(0, h, _WIN):
        for j0 in range(0, w, _WIN):
            if i0 + _WIN <= H8 and j0 + _WIN <= W8:
                continue
            wa = a[i0 : i0 + _WIN, j0 : j0 + _WIN].reshape(1, -1)
            wb = b[i0 : i0 + _WIN, j0 : j0 + _WIN].reshape(1, -1)
            vals.append(_ssim_windows(wa, wb))
    return float(np.mean(np.concatenate(vals)))


def _ssim_windows(A, B):
    mu_a = A.mean(axis=1)
    mu_b = B.mean(axis=1)
    var_a = A.var(axis=1)
    var_b = B.var(axis=1)
    cov = ((A - mu_a[:, None]) * (B - mu_b[:, None])).mean(axis=1)
    num = (2 * mu_a * mu_b + _C1) * (2 * cov + _C2)
    den = (mu_a**2 + mu_b**2 + _C1) * (var_a + var_b + _C2)
    return num / den


PSNR_CAP = 99.0


def psnr(a, b):
    """10*log10(255^2 / MSE), capped at 99.0 dB."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("extent mismatch")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * np.log10(255.0**2 / mse), PSNR_CAP)


AXES = {"token": 0, "layer": 1, "head": 2, "dim": 3}


def dimension_similarity_report(q: QuantizedKV):
    """Mean SSIM/PSNR of consecutive slices along each of the four axes."""
    if min(q.values.shape) < 2:
        raise ValueError("all extents must be >= 2")
    arr = (q.values.astype(np.int16) + 128).astype(np.uint8)
    report = {}
    for name, ax in AXES.items():
        n = arr.shape[ax]
        ssims = []
        psnrs = []
        for i in range(n - 1):
            a = np.take(arr, i, axis=ax).reshape(arr.shape[0] if ax else arr.shape[1], -1)
            b = np.take(arr, i + 1, axis=ax).reshape(a.shape)
            ssims.append(ssim(a, b))
            psnrs.append(psnr(a, b))
        report[name] = {"ssim": float(np.mean(ssims)), "psnr": float(np.mean(psnrs))}
    return report


def search_intra_layout(corpus, encoder_handle, report=None):
    """Pick the tiling that minimizes total encoded bytes over the corpus.

    encoder_handle(chunk, cfg) must return the encoded byte count of one
    QuantizedKV slab under one candidate tiling. Ties break toward the
    lexicographically smallest (tile_h, tile_w).
    """
    corpus = list(corpus)
    if not corpus:
        raise ValueError("corpus must be non-empty")
    H, D = corpus[0].H, corpus[0].D
    best = None
    best_bytes = None
    for cfg in sorted(tiling_candidates(H, D), key=LayoutConfig.key):
        total = 0
        for chunk in corpus:
            total += encoder_handle(chunk, cfg)
        if report is not None:
            report.append((cfg, total))
        if best_bytes is None or total < best_bytes:
            best, best_bytes = cfg, total
    return best
