"""Multi-output spectral mixture covariance kernels.

Each channel beta owns Q spectral-mixture components with parameters
(w, A, mean, delay, phase): w is a signed weight, A a 3x3 SPD precision
matrix of the spatial Gaussian envelope, mean a spatial frequency 3-vector,
delay a spatial shift, phase a scalar in [0, 2pi).  Cross-channel kernels
are derived from the per-channel parameters so that the full H x H kernel
matrix function is positive semidefinite by construction:

    k_bg(r) = sum_q alpha * exp(-0.5 (r+th)' A (r+th)) * cos((r+th)' mu + ph)

with the derived quantities per component

    A_bg  = 2 A_b (A_b + A_g)^-1 A_g            (harmonic mean, x2)
    mu_bg = A_b (A_b + A_g)^-1 mu_g + A_g (A_b + A_g)^-1 mu_b
    w_bg  = w_b w_g exp(-1/4 d' (A_b + A_g)^-1 d),  d = mu_b - mu_g
    th_bg = th_b - th_g
    ph_bg = ph_b - ph_g
    alpha = w_bg (2pi)^{3/2} |A_bg|^{1/2}

Note the crossed weighting in mu_bg: the frequency mean of channel g is
propagated through channel b's precision and vice versa.  This is the
product-of-Gaussians mean in the spectral domain and is what makes the
cross-spectral matrix an exact Gram matrix (see cross_spectral_range);
the uncrossed variant breaks positive semidefiniteness at the 1e-1 level.

Grid evaluation places offset r = 0 at index [0, 0, 0] and maps lattice
offsets to the torus [-pi, pi)^3, so parameter bounds are tied to that
domain convention regardless of voxel counts.  Vector components are
ordered (x, y, z).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

__all__ = [
    "MosmParams",
    "ParamBounds",
    "CovarianceGrid",
    "derive_cross_params",
    "eval_kernel",
    "kernel_grid",
    "covariance_row",
    "lhs_unit",
    "sample_params_lhs",
    "cross_spectral_range",
    "validate_kernel",
    "fit_mosm",
]

_TWO_PI = 2.0 * np.pi


@dataclass
class MosmParams:
    """Per-channel mixture parameters.

    w     : (H, Q) signed weights
    A     : (H, Q, 3, 3) SPD precision matrices
    mean  : (H, Q, 3) spatial frequencies
    delay : (H, Q, 3) spatial shifts
    phase : (H, Q) radians
    """
    w: np.ndarray
    A: np.ndarray
    mean: np.ndarray
    delay: np.ndarray
    phase: np.ndarray

    @property
    def H(self):
        return self.w.shape[0]

    @property
    def Q(self):
        return self.w.shape[1]

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=np.float64)
        self.A = np.asarray(self.A, dtype=np.float64)
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.delay = np.asarray(self.delay, dtype=np.float64)
        self.phase = np.asarray(self.phase, dtype=np.float64)
        h, q = self.w.shape
        if self.A.shape != (h, q, 3, 3) or self.mean.shape != (h, q, 3) \
                or self.delay.shape != (h, q, 3) or self.phase.shape != (h, q):
            raise ValueError("inconsistent parameter array shapes")
        if not all(np.isfinite(a).all() for a in
                   (self.w, self.A, self.mean, self.delay, self.phase)):
            raise ValueError("non-finite kernel parameter")

    def to_json(self):
        return json.dumps({
            "schema": "polyfield-mosm-1",
            "H": self.H, "Q": self.Q,
            "w": self.w.tolist(),
            "A": self.A.tolist(),
            "mean": self.mean.tolist(),
            "delay": self.delay.tolist(),
            "phase": self.phase.tolist(),
        })

    @staticmethod
    def from_json(text):
        d = json.loads(text)
        if d.get("schema") != "polyfield-mosm-1":
            raise ValueError(f"unknown kernel schema {d.get('schema')!r}")
        return MosmParams(w=np.array(d["w"]), A=np.array(d["A"]),
                          mean=np.array(d["mean"]), delay=np.array(d["delay"]),
                          phase=np.array(d["phase"]))


@dataclass
class ParamBounds:
    """Box bounds per scalar class; A applies to diagonal precision entries."""
    a_diag: tuple = (1.5, 5.0)
    mean: tuple = (-5.0, 5.0)
    w: tuple = (-0.02, 0.02)
    delay: tuple = (-0.5, 0.5)
    phase: tuple = (0.0, _TWO_PI)

    def __post_init__(self):
        for name in ("a_diag", "mean", "w", "delay", "phase"):
            lo, hi = getattr(self, name)
            if not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi):
                raise ValueError(f"invalid bounds for {name}: ({lo}, {hi})")


@dataclass
class CovarianceGrid:
    """Reference-channel covariance row k_0g on the offset lattice.

    values : (H, Dz, Dy, Dx), r = 0 at index 0, offsets on [-pi, pi)^3
    """
    values: np.ndarray

    @property
    def dims(self):
        return self.values.shape[-3:]

    @property
    def H(self):
        return self.values.shape[0]


def derive_cross_params(params: MosmParams, b, g, q):
    """Cross-component parameters (A, mean, w, delay, phase, alpha)."""
    ab, ag = params.A[b, q], params.A[g, q]
    asum = ab + ag
    try:
        sb = np.linalg.solve(asum, ab)   # (Ab+Ag)^-1 Ab
        sg = np.linalg.solve(asum, ag)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"degenerate precision sum for pair ({b},{g})") from e
    a_bg = 2.0 * ab @ sg
    a_bg = 0.5 * (a_bg + a_bg.T)
    mu_bg = ab @ np.linalg.solve(asum, params.mean[g, q]) \
        + ag @ np.linalg.solve(asum, params.mean[b, q])
    d = params.mean[b, q] - params.mean[g, q]
    damp = np.exp(-0.25 * d @ np.linalg.solve(asum, d))
    w_bg = params.w[b, q] * params.w[g, q] * damp
    th_bg = params.delay[b, q] - params.delay[g, q]
    ph_bg = params.phase[b, q] - params.phase[g, q]
    alpha = w_bg * _TWO_PI ** 1.5 * np.sqrt(np.linalg.det(a_bg))
    return a_bg, mu_bg, w_bg, th_bg, ph_bg, alpha


def eval_kernel(params: MosmParams, r):
    """Kernel matrix k(r) of shape (H, H) at a single 3-vector offset."""
    r = np.asarray(r, dtype=np.float64)
    h = params.H
    out = np.zeros((h, h))
    for b in range(h):
        for g in range(h):
            acc = 0.0
            for q in range(params.Q):
                a, mu, _, th, ph, alpha = derive_cross_params(params, b, g, q)
                u = r + th
                acc += alpha * np.exp(-0.5 * u @ a @ u) * np.cos(u @ mu + ph)
            out[b, g] = acc
    return out


def _offset_grid(dims):
    """(Dz, Dy, Dx, 3) grid of torus offsets, components (x, y, z)."""
    dz, dy, dx = dims
    rz = _TWO_PI * np.fft.fftfreq(dz)
    ry = _TWO_PI * np.fft.fftfreq(dy)
    rx = _TWO_PI * np.fft.fftfreq(dx)
    zs, ys, xs = np.meshgrid(rz, ry, rx, indexing="ij")
    return np.stack([xs, ys, zs], axis=-1)


def kernel_grid(params: MosmParams, dims, pairs=None):
    """Evaluate k_bg on the offset lattice; (P, Dz, Dy, Dx), r=0 at index 0."""
    if min(dims) < 1:
        raise ValueError(f"invalid dims {dims}")
    h = params.H
    if pairs is None:
        pairs = tuple((b, g) for b in range(h) for g in range(h))
    rg = _offset_grid(dims)
    out = np.zeros((len(pairs),) + tuple(dims))
    for i, (b, g) in enumerate(pairs):
        for q in range(params.Q):
            a, mu, _, th, ph, alpha = derive_cross_params(params, b, g, q)
            u = rg + th
            quad = np.einsum("...i,ij,...j->...", u, a, u)
            out[i] += alpha * np.exp(-0.5 * quad) * np.cos(u @ mu + ph)
    return out


def covariance_row(params: MosmParams, dims):
    """Reference-channel row k_0g for the spectral field sampler."""
    pairs = tuple((0, g) for g in range(params.H))
    return CovarianceGrid(values=kernel_grid(params, dims, pairs=pairs))


def lhs_unit(rng, n, d):
    """Latin hypercube in [0,1)^d: one sample per 1/n bin per dimension."""
    out = np.empty((n, d))
    for j in range(d):
        out[:, j] = (rng.permutation(n) + rng.uniform(size=n)) / n
    return out


# scalar layout per (channel, component): 3 A diag, 3 mean, 1 w, 3 delay, 1 phase
_SCALARS_PER_CQ = 11


def _params_from_unit(u, h, q, bounds: ParamBounds):
    u = u.reshape(h, q, _SCALARS_PER_CQ)

    def box(lo_hi, v):
        lo, hi = lo_hi
        return lo + (hi - lo) * v

    a_diag = box(bounds.a_diag, u[..., 0:3])
    a = np.zeros((h, q, 3, 3))
    idx = np.arange(3)
    a[..., idx, idx] = a_diag
    return MosmParams(
        w=box(bounds.w, u[..., 6]),
        A=a,
        mean=box(bounds.mean, u[..., 3:6]),
        delay=box(bounds.delay, u[..., 7:10]),
        phase=box(bounds.phase, u[..., 10]),
    )


def sample_params_lhs(bounds: ParamBounds, n, Q, H, seed):
    """n stratified parameter sets; A sampled diagonal (SPD for free)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(seed)
    u = lhs_unit(rng, n, H * Q * _SCALARS_PER_CQ)
    return [_params_from_unit(u[i], H, Q, bounds) for i in range(n)]


def cross_spectral_range(params: MosmParams, dims=(16, 16, 16)):
    """(min, max) eigenvalue of the cross-spectral matrix over a frequency grid.

    The mixture's spectral density at frequency omega is assembled as an
    exact Gram matrix S(omega) = c * sum_{q,s} R R^H over components q and
    sign branches s, so the minimum eigenvalue is nonnegative up to
    roundoff.  Used as the positive-semidefiniteness certificate.
    """
    dz, dy, dx = dims
    wz = np.fft.fftfreq(dz) * dz
    wy = np.fft.fftfreq(dy) * dy
    wx = np.fft.fftfreq(dx) * dx
    zs, ys, xs = np.meshgrid(wz, wy, wx, indexing="ij")
    om = np.stack([xs, ys, zs], axis=-1).reshape(-1, 3)
    h, q = params.H, params.Q
    ainv = np.linalg.inv(params.A)                     # (H, Q, 3, 3)
    # R factors, shape (npts, 2Q, H)
    r = np.empty((om.shape[0], 2 * q, h), dtype=np.complex128)
    for qi in range(q):
        for si, sgn in enumerate((+1.0, -1.0)):
            for b in range(h):
                dv = om - sgn * params.mean[b, qi]
                quad = np.einsum("ni,ij,nj->n", dv, ainv[b, qi], dv)
                ph = om @ params.delay[b, qi] + sgn * params.phase[b, qi]
                r[:, 2 * qi + si, b] = params.w[b, qi] * np.exp(-0.25 * quad) \
                    * np.exp(1j * ph)
    s = 0.5 * _TWO_PI ** 3 * np.einsum("nkb,nkg->nbg", r, np.conj(r))
    eig = np.linalg.eigvalsh(s)
    return float(eig.min()), float(eig.max())


def _boundary_shell(dims):
    """Mask of lattice offsets maximally far from r=0 along any axis."""
    masks = []
    for d in dims:
        j = np.abs(np.fft.fftfreq(d) * d)
        masks.append(j == j.max())
    mz, my, mx = masks
    return (mz[:, None, None] | my[None, :, None] | mx[None, None, :])


def validate_kernel(cov: CovarianceGrid, periodicity_tol=1e-3, field_probe=None):
    """Accept or reject a covariance row; returns (ok, reason).

    Rejects when the kernel has not decayed at the domain boundary (max |k|
    on the farthest offset shell above periodicity_tol times max |k(0)|),
    or when a supplied probe field leaves the [-1, 1] channel range.
    """
    vals = cov.values
    k0 = np.abs(vals[:, 0, 0, 0]).max()
    shell = _boundary_shell(vals.shape[-3:])
    shell_max = np.abs(vals[:, shell]).max()
    if shell_max > periodicity_tol * k0:
        return False, (f"boundary decay {shell_max:.3e} exceeds "
                       f"{periodicity_tol:g} * k(0) = {periodicity_tol * k0:.3e}")
    if field_probe is not None:
        worst = np.abs(np.asarray(field_probe)).max()
        if worst > 1.0:
            return False, f"probe field value {worst:.4f} outside [-1, 1]"
    return True, "ok"


# --- fitting ---------------------------------------------------------------

def _pack(params: MosmParams):
    """Free vector for fitting: log-Cholesky A, then mean/w/delay/phase."""
    h, q = params.H, params.Q
    out = []
    for b in range(h):
        for qi in range(q):
            ch = np.linalg.cholesky(params.A[b, qi])
            out.extend([np.log(ch[0, 0]), np.log(ch[1, 1]), np.log(ch[2, 2]),
                        ch[1, 0], ch[2, 0], ch[2, 1]])
            out.extend(params.mean[b, qi])
            out.append(params.w[b, qi])
            out.extend(params.delay[b, qi])
            out.append(params.phase[b, qi])
    return np.array(out)


def _unpack(vec, h, q):
    vec = vec.reshape(h, q, 14)
    a = np.zeros((h, q, 3, 3))
    for b in range(h):
        for qi in range(q):
            v = vec[b, qi]
            ch = np.array([[np.exp(v[0]), 0, 0],
                           [v[3], np.exp(v[1]), 0],
                           [v[4], v[5], np.exp(v[2])]])
            with np.errstate(over="ignore"):
                a[b, qi] = ch @ ch.T
    return MosmParams(w=vec[..., 9], A=a, mean=vec[..., 6:9],
                      delay=vec[..., 10:13], phase=vec[..., 13])


def fit_mosm(empirical, Q, dims=None, n_starts=8, seed=0, starts=None,
             max_nfev=400, bounds: ParamBounds = None):
    """Fit mixture parameters to an empirical covariance row.

    Multi-start nonlinear least squares on the grid residual
    covariance_row(params) - empirical; A is parameterized by its Cholesky
    factor with log diagonal so it stays SPD without constraints.  `starts`
    may carry explicit MosmParams warm starts (e.g. a lower-Q fit padded
    with zero-weight components); random starts are appended up to
    n_starts.  Returns (best params, residual, converged flag); residual is
    the mean squared grid error.
    """
    if not (1 <= Q <= 16):
        raise ValueError("Q out of range [1, 16]")
    emp = np.asarray(getattr(empirical, "values", empirical), dtype=np.float64)
    h = emp.shape[0]
    dims = tuple(dims or emp.shape[-3:])
    bounds = bounds or ParamBounds()
    rng = np.random.default_rng(seed)
    pairs = tuple((0, g) for g in range(h))

    def resid(vec):
        # extreme trial points (overflowed Cholesky, degenerate sums) get a
        # finite penalty wall so the optimizer steps back instead of dying
        try:
            with np.errstate(over="ignore", invalid="ignore"):
                p = _unpack(vec, h, Q)
                out = (kernel_grid(p, dims, pairs=pairs) - emp).ravel()
        except ValueError:
            return np.full(emp.size, 1e6)
        if not np.isfinite(out).all():
            return np.full(emp.size, 1e6)
        return out

    start_vecs = [_pack(p) for p in (starts or [])]
    while len(start_vecs) < n_starts:
        u = rng.uniform(size=h * Q * _SCALARS_PER_CQ)
        start_vecs.append(_pack(_params_from_unit(u, h, Q, bounds)))

    best = None
    for v0 in start_vecs:
        try:
            res = least_squares(resid, v0, max_nfev=max_nfev, method="lm")
        except Exception:
            continue
        cost = float(np.mean(res.fun ** 2))
        if best is None or cost < best[1]:
            best = (_unpack(res.x, h, Q), cost, bool(res.status > 0))
    if best is None:
        raise RuntimeError("all optimizer starts failed")
    return best
