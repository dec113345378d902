"""Periodic two-point statistics of multi-channel 3D fields.

A field is an ndarray of shape (H, Dz, Dy, Dx): H channels on a periodic
voxel grid, x fastest in memory.  The two-point statistic of channels
(beta, gamma) at offset r is the grid average of m_beta[s] * m_gamma[s + r]
with periodic wraparound; it is computed for all offsets at once through
FFTs.  Offset r = 0 sits at index [0, 0, 0] of the result (no center shift);
use ``centered`` for display.  Leading batch axes broadcast: any input of
shape (..., H, Dz, Dy, Dx) is accepted and statistics are returned per batch
element.

Orthogonal-plane statistics ("ortho stats") are the restrictions of the 3D
statistics to the three axis planes through r = 0.  They are what a stack of
three orthogonal 2D micrographs of a stationary volume can see, and they are
the quantity matched by the statistics-descent conditioner.  The squared
mismatch of a field's ortho stats against a target, together with its exact
gradient with respect to the field, is provided by ``stats_loss_and_grad``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "StatsMap",
    "OrthoStats",
    "all_pairs",
    "two_point_stats",
    "stats_to_cov",
    "cov_to_stats",
    "ortho_stats",
    "ortho_stats_from_images",
    "stats_loss_and_grad",
    "centered",
]

# plane name -> (axis index in (z, y, x) order, kept axes)
_PLANES = {"x": 2, "y": 1, "z": 0}


def all_pairs(h):
    return tuple((b, g) for b in range(h) for g in range(h))


def _check_field(field):
    field = np.asarray(field, dtype=np.float64)
    if field.ndim < 4:
        raise ValueError(
            f"field must have shape (..., H, Dz, Dy, Dx), got {field.shape}")
    if min(field.shape[-3:]) < 1 or field.shape[-4] < 1:
        raise ValueError(f"empty field dimension in {field.shape}")
    return field


@dataclass
class StatsMap:
    """Two-point statistics for selected channel pairs.

    values : (P, Dz, Dy, Dx) statistics arrays, r = 0 at index 0
    pairs  : P tuples (beta, gamma)
    means  : per-channel spatial means of the source field, shape (H,)
    """
    values: np.ndarray
    pairs: tuple
    means: np.ndarray

    def get(self, beta, gamma):
        return self.values[self.pairs.index((beta, gamma))]


@dataclass
class OrthoStats:
    """Statistics restricted to the three axis planes through r = 0.

    planes : dict with keys 'x', 'y', 'z'; planes['x'] holds offsets with
             r_x = 0 as an array (P, Dz, Dy), planes['y'] is (P, Dz, Dx) and
             planes['z'] is (P, Dy, Dx).
    pairs  : P tuples (beta, gamma)
    """
    planes: dict
    pairs: tuple


def _cross_stats_raw(field, pairs):
    """(..., H, Dz, Dy, Dx) -> (..., P, Dz, Dy, Dx), no wrapper."""
    dims = field.shape[-3:]
    s = int(np.prod(dims))
    fh = np.fft.rfftn(field, axes=(-3, -2, -1))
    out = np.empty(field.shape[:-4] + (len(pairs),) + dims)
    for i, (b, g) in enumerate(pairs):
        prod = np.conj(fh[..., b, :, :, :]) * fh[..., g, :, :, :]
        out[..., i, :, :, :] = np.fft.irfftn(prod, s=dims, axes=(-3, -2, -1)) / s
    return out


def two_point_stats(field, pairs=None):
    """Periodic two-point statistics of a field.

    Parameters
    ----------
    field : array (H, Dz, Dy, Dx)
    pairs : optional sequence of (beta, gamma); defaults to all H*H pairs.
    """
    field = _check_field(field)
    if field.ndim != 4:
        raise ValueError("two_point_stats takes a single field; "
                         "use the raw helpers for batches")
    h = field.shape[0]
    if pairs is None:
        pairs = all_pairs(h)
    pairs = tuple((int(b), int(g)) for b, g in pairs)
    for b, g in pairs:
        if not (0 <= b < h and 0 <= g < h):
            raise ValueError(f"pair ({b}, {g}) out of range for H={h}")
    values = _cross_stats_raw(field, pairs)
    means = field.mean(axis=(-3, -2, -1))
    return StatsMap(values=values, pairs=pairs, means=means)


def stats_to_cov(stats: StatsMap):
    """Covariances from raw statistics: subtract the mean product per pair."""
    mu = stats.means
    shift = np.array([mu[b] * mu[g] for b, g in stats.pairs])
    return StatsMap(values=stats.values - shift[:, None, None, None],
                    pairs=stats.pairs, means=mu)


def cov_to_stats(cov: StatsMap):
    """Inverse of ``stats_to_cov`` for the same recorded means."""
    mu = cov.means
    shift = np.array([mu[b] * mu[g] for b, g in cov.pairs])
    return StatsMap(values=cov.values + shift[:, None, None, None],
                    pairs=cov.pairs, means=mu)


def _slice_plane(values, plane):
    axis = _PLANES[plane]
    if axis == 2:
        return values[..., :, :, 0]
    if axis == 1:
        return values[..., :, 0, :]
    return values[..., 0, :, :]


def ortho_stats(field, pairs=None):
    """Ortho-plane statistics of a 3D field (slices of the full statistics)."""
    sm = two_point_stats(field, pairs=pairs)
    planes = {p: _slice_plane(sm.values, p).copy() for p in ("x", "y", "z")}
    return OrthoStats(planes=planes, pairs=sm.pairs)


def _stats_2d(images, pairs):
    dims = images.shape[-2:]
    s = int(np.prod(dims))
    fh = np.fft.rfftn(images, axes=(-2, -1))
    out = np.empty(images.shape[:-3] + (len(pairs),) + dims)
    for i, (b, g) in enumerate(pairs):
        prod = np.conj(fh[..., b, :, :]) * fh[..., g, :, :]
        out[..., i, :, :] = np.fft.irfftn(prod, s=dims, axes=(-2, -1)) / s
    return out


def ortho_stats_from_images(images, pairs=None):
    """Ortho-plane statistics from three orthogonal periodic 2D images.

    Parameters
    ----------
    images : dict with keys 'x', 'y', 'z'.  images['x'] is the slice normal
        to x with shape (H, Dz, Dy); 'y' is (H, Dz, Dx); 'z' is (H, Dy, Dx).
        Each image contributes the statistics of its own plane.
    """
    keys = set(images.keys())
    if keys != {"x", "y", "z"}:
        raise ValueError(f"need exactly the three plane images x, y, z, got {sorted(keys)}")
    hs = {k: np.asarray(v).shape[0] for k, v in images.items()}
    if len(set(hs.values())) != 1:
        raise ValueError(f"channel counts disagree between planes: {hs}")
    h = hs["x"]
    if pairs is None:
        pairs = all_pairs(h)
    pairs = tuple((int(b), int(g)) for b, g in pairs)
    ix = np.asarray(images["x"], dtype=np.float64)
    iy = np.asarray(images["y"], dtype=np.float64)
    iz = np.asarray(images["z"], dtype=np.float64)
    if ix.shape[1] != iy.shape[1]:
        raise ValueError("Dz disagrees between the x and y plane images")
    if ix.shape[2] != iz.shape[1]:
        raise ValueError("Dy disagrees between the x and z plane images")
    if iy.shape[2] != iz.shape[2]:
        raise ValueError("Dx disagrees between the y and z plane images")
    planes = {"x": _stats_2d(ix, pairs), "y": _stats_2d(iy, pairs),
              "z": _stats_2d(iz, pairs)}
    return OrthoStats(planes=planes, pairs=pairs)


def stats_loss_and_grad(field, target: OrthoStats, normalize="sum"):
    """Squared mismatch of ortho stats against a target, with exact gradient.

    err = sum over planes, pairs and offsets of (f_hat - f_target)^2, either
    raw ("sum") or divided by the total element count ("mean").  The gradient
    is with respect to the field values and is exact for the periodic FFT
    statistics: d f_{bg}(r) / d m_d[u] contributes correlation and
    convolution terms which are accumulated per channel in Fourier space.

    Accepts leading batch axes; err has shape (...) and grad matches field.
    """
    field = _check_field(field)
    if normalize not in ("sum", "mean"):
        raise ValueError(f"normalize must be 'sum' or 'mean', got {normalize!r}")
    pairs = target.pairs
    h = field.shape[-4]
    dims = field.shape[-3:]
    s = int(np.prod(dims))
    batch = field.shape[:-4]

    fh = np.fft.rfftn(field, axes=(-3, -2, -1))
    err = np.zeros(batch)
    # per-pair 3D embedded error fields, then two FFT products per pair
    grad_h = np.zeros_like(fh)
    for i, (b, g) in enumerate(pairs):
        prod = np.conj(fh[..., b, :, :, :]) * fh[..., g, :, :, :]
        f3 = np.fft.irfftn(prod, s=dims, axes=(-3, -2, -1)) / s
        e3 = np.zeros(batch + dims)
        for p in ("x", "y", "z"):
            diff = _slice_plane(f3, p) - target.planes[p][i]
            err += (diff ** 2).sum(axis=(-2, -1))
            if p == "x":
                e3[..., :, :, 0] += diff
            elif p == "y":
                e3[..., :, 0, :] += diff
            else:
                e3[..., 0, :, :] += diff
        eh = np.fft.rfftn(e3, axes=(-3, -2, -1))
        # d err / d m_b gets 2/S * corr(e, m_g); d err / d m_g gets 2/S * conv(e, m_b)
        grad_h[..., b, :, :, :] += np.conj(eh) * fh[..., g, :, :, :]
        grad_h[..., g, :, :, :] += eh * fh[..., b, :, :, :]
    grad = np.fft.irfftn(grad_h, s=dims, axes=(-3, -2, -1)) * (2.0 / s)
    if normalize == "mean":
        n_total = sum(v.size for v in target.planes.values())
        err = err / n_total
        grad = grad / n_total
    if not batch:
        err = float(err)
    return err, grad


def centered(values):
    """Shift statistics arrays so r = 0 sits at the center (display helper)."""
    values = np.asarray(values)
    if values.ndim >= 3:
        return np.fft.fftshift(values, axes=(-3, -2, -1))
    return np.fft.fftshift(values, axes=(-2, -1))
