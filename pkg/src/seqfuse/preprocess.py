"""Per-slice adaptive histogram equalization, resizing, 2.5D stacking, sampling.

Equalization is the only intensity normalization in the pipeline: each slice
is mapped through blended per-tile empirical CDFs (CLAHE-style) into [0,1].
Training samples stack n_slices adjacent z-slices for every sequence,
sequence-major; slices past the volume ends are edge-replicated.
"""

from dataclasses import dataclass, field

import numpy as np

from .seqdrop import SequencePresence


@dataclass
class SliceSample:
    """A 2.5D sample: (n_seq * n_slices, H, W) stack predicting the center slice."""

    stack: np.ndarray
    target: np.ndarray
    patient_id: str
    z_index: int
    presence: SequencePresence
    sequence_names: tuple
    n_slices: int
    scale_applied: bool = False


def _tile_cdf(values, clip_limit=None):
    """Sorted-value empirical CDF of one tile, optionally with clipped counts.

    Returns (breakpoints, cumulative fractions) such that the CDF at v is the
    fraction at the last breakpoint <= v (0 before the first)."""
    uniq, counts = np.unique(values, return_counts=True)
    if clip_limit is not None:
        limit = max(1.0, clip_limit * values.size / uniq.size)
        excess = np.maximum(counts - limit, 0.0)
        counts = np.minimum(counts, limit) + excess.sum() / uniq.size
    cum = np.cumsum(counts, dtype=np.float64)
    return uniq, cum / cum[-1]


def equalize_slice(slice2d, tiles=(8, 8), clip_limit=None):
    """Adaptive (tiled) histogram equalization of one slice into [0,1].

    Rank-based: each tile's mapping is its inclusive empirical CDF, and a
    pixel blends the CDFs of the (up to) four nearest tiles bilinearly, so
    the map is monotone in value at every position and invariant under
    strictly monotone intensity rescalings.  A constant slice maps to zeros.
    """
    a = np.asarray(slice2d, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ValueError("slice contains non-finite values")
    if a.max() == a.min():
        return np.zeros_like(a, dtype=np.float32)

    H, W = a.shape
    ty = min(int(tiles[0]), H)
    tx = min(int(tiles[1]), W)
    if ty < 1 or tx < 1:
        raise ValueError(f"bad tile grid {tiles}")
    row_edges = np.linspace(0, H, ty + 1).round().astype(int)
    col_edges = np.linspace(0, W, tx + 1).round().astype(int)

    cdfs = [[_tile_cdf(a[row_edges[i]:row_edges[i + 1], col_edges[j]:col_edges[j + 1]].ravel(),
                       clip_limit)
             for j in range(tx)] for i in range(ty)]

    # Bilinear blend between tile centers; beyond the outermost centers the
    # nearest tile takes full weight.
    def axis_weights(n_pix, edges, n_tiles):
        centers = (edges[:-1] + edges[1:]) / 2.0
        pos = np.arange(n_pix) + 0.5
        idx = np.searchsorted(centers, pos) - 1
        lo = np.clip(idx, 0, n_tiles - 1)
        hi = np.clip(idx + 1, 0, n_tiles - 1)
        with np.errstate(divide="ignore", invalid="ignore"):
            span = centers[hi] - centers[lo]
            t = np.where(span > 0, (pos - centers[lo]) / np.where(span > 0, span, 1.0), 0.0)
        t = np.clip(t, 0.0, 1.0)
        return lo, hi, t

    rlo, rhi, rt = axis_weights(H, row_edges, ty)
    clo, chi, ct = axis_weights(W, col_edges, tx)

    out = np.zeros((H, W), dtype=np.float64)
    wsum = np.zeros((H, W), dtype=np.float64)
    for i in range(ty):
        rw = np.where(rlo == i, 1.0 - rt, 0.0) + np.where(rhi == i, rt, 0.0)
        rows = np.nonzero(rw > 0)[0]
        if rows.size == 0:
            continue
        for j in range(tx):
            cw = np.where(clo == j, 1.0 - ct, 0.0) + np.where(chi == j, ct, 0.0)
            cols = np.nonzero(cw > 0)[0]
            if cols.size == 0:
                continue
            brk, cum = cdfs[i][j]
            block = a[np.ix_(rows, cols)]
            k = np.searchsorted(brk, block, side="right")
            vals = np.where(k > 0, cum[np.maximum(k - 1, 0)], 0.0)
            w = np.outer(rw[rows], cw[cols])
            out[np.ix_(rows, cols)] += w * vals
            wsum[np.ix_(rows, cols)] += w
    out /= wsum
    return out.astype(np.float32)


def resize_slice(slice2d, out_hw):
    """Bilinear resize with half-pixel centers; identity when shapes match."""
    a = np.asarray(slice2d, dtype=np.float32)
    if a.ndim != 2:
        raise ValueError(f"expected a 2D slice, got shape {a.shape}")
    H, W = a.shape
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if oh < 1 or ow < 1:
        raise ValueError(f"target shape must be positive, got {out_hw}")
    if (oh, ow) == (H, W):
        return a.copy()

    def coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        lo = np.floor(src).astype(int)
        t = src - lo
        return np.clip(lo, 0, n_in - 1), np.clip(lo + 1, 0, n_in - 1), t.astype(np.float32)

    ylo, yhi, yt = coords(H, oh)
    xlo, xhi, xt = coords(W, ow)
    top = a[ylo][:, xlo] * (1 - xt) + a[ylo][:, xhi] * xt
    bot = a[yhi][:, xlo] * (1 - xt) + a[yhi][:, xhi] * xt
    return (top * (1 - yt[:, None]) + bot * yt[:, None]).astype(np.float32)


def resize_mask(mask2d, out_hw):
    """Nearest-neighbor resize for boolean targets."""
    m = np.asarray(mask2d)
    H, W = m.shape
    oh, ow = int(out_hw[0]), int(out_hw[1])
    if (oh, ow) == (H, W):
        return m.copy()
    ys = np.clip(((np.arange(oh) + 0.5) * (H / oh) - 0.5).round().astype(int), 0, H - 1)
    xs = np.clip(((np.arange(ow) + 0.5) * (W / ow) - 0.5).round().astype(int), 0, W - 1)
    return m[np.ix_(ys, xs)]


def preprocess_volume(volume, tiles=(8, 8), out_hw=None, clip_limit=None):
    """Equalize every slice of every sequence (and optionally resize).

    Returns a new StudyVolume; in-plane spacing is rescaled on resize."""
    from .phantom import StudyVolume

    shape = volume.grid_shape
    H, W = shape[1], shape[2]
    if out_hw is None:
        out_hw = (H, W)
    sequences = {}
    for name, grid in volume.sequences.items():
        out = np.empty((shape[0], out_hw[0], out_hw[1]), dtype=np.float32)
        for z in range(shape[0]):
            out[z] = resize_slice(equalize_slice(grid[z], tiles=tiles, clip_limit=clip_limit),
                                  out_hw)
        sequences[name] = out
    gt = None
    if volume.gt_mask is not None:
        gt = np.stack([resize_mask(volume.gt_mask[z], out_hw) for z in range(shape[0])])
    spacing = (volume.spacing_mm[0],
               volume.spacing_mm[1] * H / out_hw[0],
               volume.spacing_mm[2] * W / out_hw[1])
    return StudyVolume(patient_id=volume.patient_id, sequences=sequences,
                       spacing_mm=spacing, gt_mask=gt)


def stack_2p5d(volume, z, n_slices=5, sequence_order=None) -> SliceSample:
    """Build the 2.5D input stack for slice z: per sequence, slices z-k..z+k
    with out-of-range indices clamped to the volume ends, sequence-major.

    sequence_order fixes the channel layout (canonical list); sequences the
    volume lacks become zero channels and are marked absent."""
    depth = volume.grid_shape[0]
    if not 0 <= z < depth:
        raise ValueError(f"z={z} outside volume depth {depth}")
    if n_slices < 1 or n_slices % 2 == 0:
        raise ValueError(f"n_slices must be odd and >= 1, got {n_slices}")
    if sequence_order is None:
        sequence_order = tuple(volume.sequences.keys())
    else:
        sequence_order = tuple(sequence_order)

    k = n_slices // 2
    zs = np.clip(np.arange(z - k, z + k + 1), 0, depth - 1)
    H, W = volume.grid_shape[1], volume.grid_shape[2]
    stack = np.zeros((len(sequence_order) * n_slices, H, W), dtype=np.float32)
    present = []
    for i, name in enumerate(sequence_order):
        grid = volume.sequences.get(name)
        present.append(grid is not None)
        if grid is not None:
            stack[i * n_slices:(i + 1) * n_slices] = grid[zs]
    target = (volume.gt_mask[z].astype(bool) if volume.gt_mask is not None
              else np.zeros((H, W), dtype=bool))
    return SliceSample(stack=stack, target=target, patient_id=volume.patient_id,
                       z_index=int(z), presence=SequencePresence(present=tuple(present)),
                       sequence_names=sequence_order, n_slices=n_slices)


@dataclass
class SliceSampler:
    """Weighted (volume, z) stream: lesion-bearing slices drawn oversample_factor
    times as often as empty ones.  Deterministic given the caller's rng."""

    entries: list = field(repr=False)
    weights: np.ndarray = field(repr=False)

    @property
    def probabilities(self):
        return self.weights / self.weights.sum()

    def draw(self, rng, size=None):
        idx = rng.choice(len(self.entries), size=size, p=self.probabilities)
        if size is None:
            return self.entries[int(idx)]
        return [self.entries[int(i)] for i in idx]


def build_sampler(volumes, oversample_factor=10.0) -> SliceSampler:
    if oversample_factor < 1:
        raise ValueError(f"oversample_factor must be >= 1, got {oversample_factor}")
    entries, weights = [], []
    for vi, vol in enumerate(volumes):
        depth = vol.grid_shape[0]
        for z in range(depth):
            entries.append((vi, z))
            has_lesion = vol.gt_mask is not None and bool(vol.gt_mask[z].any())
            weights.append(oversample_factor if has_lesion else 1.0)
    if not entries:
        raise ValueError("no slices to sample from")
    return SliceSampler(entries=entries, weights=np.asarray(weights, dtype=np.float64))
