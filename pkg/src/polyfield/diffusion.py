"""Second-order stochastic denoising sampler with pluggable conditioning.

The sampler walks a decreasing noise schedule t_0 > ... > t_N = 0.  Each
step optionally re-injects noise (churn), takes an Euler step using the
denoiser's implied score (D(x; sigma) - x) / sigma^2, applies a trapezoidal
second-order correction when the step target is not 0, and only then calls
the conditioning hook.  Conditioning after the correction is normative:
moving the state before the correction would re-derive the correction from
a state the conditioner is about to discard.

Denoisers are callables D(x, sigma) -> x_hat operating on (..., H, Dz, Dy,
Dx) arrays.  Three are provided: an analytic Gaussian-posterior denoiser
(exact for stationary Gaussian priors, used as the test oracle), an EDM-
style preconditioning wrapper for raw predictors, and a subprocess bridge
for external models.  A registry maps names to constructors.

Conditioning hooks have signature cond(x, i, t_next) -> x.  Two are
provided: masked-value insertion (inpainting) and descent on orthogonal-
plane statistics (dimensionality expansion).
"""
from __future__ import annotations

import json
import os
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np

from .spatial_stats import OrthoStats, stats_loss_and_grad

__all__ = [
    "SamplerConfig", "Mask", "noise_schedule", "sample",
    "GaussianDenoiser", "edm_precondition", "ExternalDenoiser",
    "build_denoiser", "inpaint_cond", "OrthoStatsCond", "ortho_stats_cond",
    "lgd_refine", "SamplerNaN", "ConditioningDivergence",
]

_SQRT2M1 = np.sqrt(2.0) - 1.0


class SamplerNaN(RuntimeError):
    """Non-finite state; carries the step index and noise level."""

    def __init__(self, step, sigma):
        super().__init__(f"non-finite sampler state at step {step}, sigma={sigma:g}")
        self.step = step
        self.sigma = sigma


class ConditioningDivergence(RuntimeError):
    """Statistics descent kept increasing after exhausting lr halvings."""

    def __init__(self, step, err, lr, iterations):
        super().__init__(
            f"statistics descent diverged at sampler step {step}: "
            f"err={err:.3e}, lr={lr:.3e} after {iterations} iterations")
        self.step = step
        self.err = err
        self.lr = lr
        self.iterations = iterations


@dataclass
class SamplerConfig:
    N: int = 64
    sigma_min: float = 0.002
    sigma_max: float = 80.0
    rho: float = 7.0
    s_churn: float = 0.0
    s_noise: float = 1.0
    s_tmin: float = 0.0
    s_tmax: float = float("inf")
    skip: int = 0
    sigma_data: float = 0.5

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if not (0 < self.sigma_min < self.sigma_max):
            raise ValueError("need 0 < sigma_min < sigma_max")
        if not (0 <= self.skip <= self.N):
            raise ValueError("skip out of range [0, N]")


@dataclass
class Mask:
    """Known values and where they apply; arrays shaped like one field."""
    values: np.ndarray
    known: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.known = np.asarray(self.known, dtype=bool)
        if self.values.shape != self.known.shape:
            raise ValueError("mask value/known shapes differ")
        if not np.isfinite(self.values[self.known]).all():
            raise ValueError("non-finite known values")


def noise_schedule(config: SamplerConfig):
    """Warped schedule t_0..t_N with t_0 = sigma_max, t_{N-1} = sigma_min, t_N = 0."""
    n, rho = config.N, config.rho
    if n == 1:
        return np.array([config.sigma_max, 0.0])
    i = np.arange(n)
    a, b = config.sigma_max ** (1 / rho), config.sigma_min ** (1 / rho)
    t = (a + i / (n - 1) * (b - a)) ** rho
    t[0], t[-1] = config.sigma_max, config.sigma_min  # exact endpoints
    return np.append(t, 0.0)


class GaussianDenoiser:
    """Exact posterior mean for a stationary Gaussian prior under white noise.

    cov : (H, H, Dz, Dy, Dx) covariance grids (r = 0 at index 0)
    mu  : (H,) channel means

    Works per frequency: the prior's spectral matrix is diagonalized once
    (eigenvalues clamped at 0), each call applies the filter
    lambda / (lambda + sigma^2).  sigma -> 0 returns x projected on the
    prior's spectral support; sigma -> inf returns mu.
    """

    def __init__(self, cov, mu):
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim != 5 or cov.shape[0] != cov.shape[1]:
            raise ValueError(f"cov must be (H, H, Dz, Dy, Dx), got {cov.shape}")
        self.h = cov.shape[0]
        self.dims = cov.shape[-3:]
        self.shape = (self.h,) + self.dims
        self.mu = np.asarray(mu, dtype=np.float64).reshape(self.h)
        s = int(np.prod(self.dims))
        # conj: the spatial operator sum_j k_bg(j - i) x_g(j) has frequency
        # response conj(F[k])(t), not F[k](t); H=1 cannot tell them apart
        sh = np.conj(np.fft.fftn(cov, axes=(-3, -2, -1))).reshape(
            self.h, self.h, s)
        sh = np.moveaxis(sh, -1, 0)                # (S, H, H)
        sh = 0.5 * (sh + np.conj(np.swapaxes(sh, -1, -2)))
        if self.h == 1:
            self.lam = np.clip(sh[:, 0, 0].real, 0.0, None)
            self.vec = None
        else:
            lam, vec = np.linalg.eigh(sh)
            self.lam = np.clip(lam, 0.0, None)     # (S, H)
            self.vec = vec                          # (S, H, H)

    def __call__(self, x, sigma):
        x = np.asarray(x, dtype=np.float64)
        dims = x.shape[-3:]
        if dims != self.dims or x.shape[-4] != self.h:
            raise ValueError(f"field shape {x.shape} does not match prior "
                             f"{(self.h,) + self.dims}")
        s = int(np.prod(dims))
        mu = self.mu[:, None, None, None]
        xh = np.fft.fftn(x - mu, axes=(-3, -2, -1))
        if self.h == 1:
            filt = self.lam / np.maximum(self.lam + sigma ** 2, 1e-300)
            yh = xh * filt.reshape(dims)
        else:
            filt = self.lam / np.maximum(self.lam + sigma ** 2, 1e-300)
            xv = np.moveaxis(xh.reshape(x.shape[:-4] + (self.h, s)), -1, -2)
            yv = np.einsum("nbk,nk,ngk,...ng->...nb", self.vec, filt,
                           np.conj(self.vec), xv)
            yh = np.moveaxis(yv, -2, -1).reshape(xh.shape)
        return np.fft.ifftn(yh, axes=(-3, -2, -1)).real + mu


def edm_precondition(raw_model, sigma_data=0.5):
    """Wrap a raw predictor F(x_in, c_noise) into a denoiser D(x, sigma).

    D = c_skip * x + c_out * F(c_in * x, c_noise) with the variance-
    preserving modulation constants; exposes the constants as attributes
    for inspection.
    """
    if sigma_data <= 0:
        raise ValueError("sigma_data must be positive")
    sd2 = sigma_data ** 2

    def c_skip(sigma):
        return sd2 / (sigma ** 2 + sd2)

    def c_out(sigma):
        return sigma * sigma_data / np.sqrt(sd2 + sigma ** 2)

    def c_in(sigma):
        return 1.0 / np.sqrt(sd2 + sigma ** 2)

    def c_noise(sigma):
        return 0.25 * np.log(sigma)

    def denoiser(x, sigma):
        return c_skip(sigma) * x + c_out(sigma) * raw_model(
            c_in(sigma) * x, c_noise(sigma))

    denoiser.c_skip, denoiser.c_out = c_skip, c_out
    denoiser.c_in, denoiser.c_noise = c_in, c_noise
    return denoiser


class ExternalDenoiser:
    """Bridge to a denoiser running as a child process.

    The child reads one JSON line per request from stdin:
        {"field": <input pmf1 path>, "sigma": <float>, "out": <output path>}
    writes the denoised field to the output path, and answers with one JSON
    line {"ok": true} (or {"ok": false, "error": ...}) on stdout.
    """

    def __init__(self, cmd, workdir=None):
        self.cmd = list(cmd)
        self.workdir = workdir or tempfile.mkdtemp(prefix="polyfield-ext-")
        self.proc = subprocess.Popen(
            self.cmd, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True)
        self._n = 0

    def __call__(self, x, sigma):
        from .pmf1 import read_field, write_field
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 4:
            raise ValueError("external denoiser handles one field per call")
        self._n += 1
        fin = os.path.join(self.workdir, f"in{self._n}.pmf1")
        fout = os.path.join(self.workdir, f"out{self._n}.pmf1")
        write_field(fin, x, dtype="float64")
        req = json.dumps({"field": fin, "sigma": float(sigma), "out": fout})
        self.proc.stdin.write(req + "\n")
        self.proc.stdin.flush()
        line = self.proc.stdout.readline()
        if not line:
            raise RuntimeError("external denoiser closed its stdout")
        ans = json.loads(line)
        if not ans.get("ok"):
            raise RuntimeError(f"external denoiser error: {ans.get('error')}")
        y = read_field(fout)
        os.unlink(fin)
        os.unlink(fout)
        return y

    def close(self):
        if self.proc.poll() is None:
            self.proc.stdin.close()
            self.proc.wait(timeout=10)


def build_denoiser(name, **kwargs):
    """Registry entry point: 'gaussian' (cov, mu) or 'external' (cmd)."""
    if name == "gaussian":
        return GaussianDenoiser(kwargs["cov"], kwargs["mu"])
    if name == "external":
        return ExternalDenoiser(kwargs["cmd"], workdir=kwargs.get("workdir"))
    raise KeyError(f"unknown denoiser {name!r}; registry has gaussian, external")


def sample(denoiser, config: SamplerConfig, rng, x_init=None, cond_fn=None,
           shape=None, trace=None):
    """Run the sampler from step `config.skip` to the end; returns the field.

    x_init is required when skip > 0 (the state entering step skip, already
    at noise level t_skip) and optional at skip = 0, where the default is a
    pure-noise start x ~ N(0, t_0^2 I) with `shape` taken from the denoiser
    when it declares one.  Churn noise is drawn every step whether or not
    the churn window is active, so equal seeds give aligned trajectories
    across configurations; cond_fn never affects the draw sequence.
    `trace`, if a list, receives one record per step for diagnosis.
    """
    t = noise_schedule(config)
    n = config.N
    if config.skip > 0 and x_init is None:
        raise ValueError("skip > 0 requires x_init")
    if x_init is not None:
        x = np.array(x_init, dtype=np.float64)
    else:
        if shape is None:
            shape = getattr(denoiser, "shape", None)
        if shape is None:
            raise ValueError("no x_init and the denoiser declares no shape")
        x = t[0] * rng.standard_normal(shape)

    for i in range(config.skip, n):
        ti, tn = t[i], t[i + 1]
        eps = rng.standard_normal(x.shape)
        in_window = config.s_tmin <= ti <= config.s_tmax
        gamma = min(config.s_churn / n, _SQRT2M1) if in_window else 0.0
        t_hat = ti * (1.0 + gamma)
        x_hat = x + np.sqrt(max(t_hat ** 2 - ti ** 2, 0.0)) * config.s_noise * eps
        events = ["churn"]
        d = (x_hat - denoiser(x_hat, t_hat)) / t_hat
        x = x_hat + (tn - t_hat) * d
        events.append("euler")
        if tn != 0.0:
            d2 = (x - denoiser(x, tn)) / tn
            x = x_hat + (tn - t_hat) * (0.5 * d + 0.5 * d2)
            events.append("correction")
        if cond_fn is not None:
            x = cond_fn(x, i, tn)
            events.append("cond")
        if not np.isfinite(x).all():
            raise SamplerNaN(i, tn)
        if trace is not None:
            trace.append({"i": i, "t": float(ti), "t_hat": float(t_hat),
                          "gamma": float(gamma), "t_next": float(tn),
                          "events": events})
    return x


def inpaint_cond(mask: Mask, theta, n_steps):
    """Overwrite known voxels while the step index is below theta * N."""
    if not (0.0 <= theta <= 1.0):
        raise ValueError("theta must lie in [0, 1]")
    cutoff = theta * n_steps

    def cond(x, i, t_next):
        if x.shape[-4:] != mask.values.shape:
            raise ValueError(f"mask shape {mask.values.shape} does not match "
                             f"field {x.shape}")
        if i < cutoff:
            return np.where(mask.known, mask.values, x)
        return x

    return cond


class OrthoStatsCond:
    """Descend the field onto target orthogonal-plane statistics each step.

    At sampler step i the field is moved by gradient descent on the squared
    statistics mismatch until it drops below threshold(i).  The default
    threshold schedule relaxes early steps and tightens toward the end:
    rho(i) = (N - i) * 1e-5 + 1e-7, so the final call (i = N-1) must reach
    1e-5 + 1e-7.  Pass `thresholds` (array of length N, or callable) to
    override, e.g. to demand a terminal sum-squared error of 1e-10.

    The descent is monotone: a proposal that would increase the error is
    rejected, and `divergence_window` consecutive rejections halve the
    learning rate (which persists across steps; accepted moves re-grow it
    by `lr_growth`).  After `max_halvings` halvings the conditioner raises
    ConditioningDivergence.  Per-call records accumulate in `history`.
    """

    def __init__(self, target: OrthoStats, n_steps, lr=1e-2, thresholds=None,
                 max_iters=5000, normalize="sum", divergence_window=10,
                 max_halvings=60, lr_growth=1.0):
        if lr <= 0 or max_iters < 1 or lr_growth < 1.0:
            raise ValueError("need lr > 0, max_iters >= 1, lr_growth >= 1")
        self.target = target
        self.n_steps = n_steps
        self.lr = float(lr)
        self.max_iters = max_iters
        self.normalize = normalize
        self.divergence_window = divergence_window
        self.max_halvings = max_halvings
        self.lr_growth = float(lr_growth)
        self.halvings = 0
        self.history = []
        if thresholds is None:
            self._thr = lambda i: (n_steps - i) * 1e-5 + 1e-7
        elif callable(thresholds):
            self._thr = thresholds
        else:
            arr = np.asarray(thresholds, dtype=np.float64)
            if arr.shape != (n_steps,):
                raise ValueError(f"thresholds must have length {n_steps}")
            self._thr = lambda i: arr[i]

    def threshold(self, i):
        return float(self._thr(i))

    def __call__(self, x, i, t_next):
        if x.ndim != 4:
            raise ValueError("statistics conditioning handles one field per call")
        thr = self.threshold(i)
        err, grad = stats_loss_and_grad(x, self.target, self.normalize)
        streak = 0
        iters = 0
        while err > thr and iters < self.max_iters:
            iters += 1
            x2 = x - self.lr * grad
            err2, grad2 = stats_loss_and_grad(x2, self.target, self.normalize)
            if err2 > err:
                streak += 1
                if streak >= self.divergence_window:
                    self.halvings += 1
                    if self.halvings > self.max_halvings:
                        raise ConditioningDivergence(i, float(err), self.lr, iters)
                    self.lr *= 0.5
                    streak = 0
                continue
            x, err, grad = x2, err2, grad2
            self.lr *= self.lr_growth
            streak = 0
        self.history.append({"step": i, "iterations": iters, "err": float(err),
                             "threshold": thr, "lr": self.lr,
                             "converged": bool(err <= thr)})
        return x


def ortho_stats_cond(target, n_steps, **kwargs):
    """Convenience constructor for OrthoStatsCond."""
    return OrthoStatsCond(target, n_steps, **kwargs)


def lgd_refine(x_grf, denoiser, config: SamplerConfig, rng, mu=None,
               mean_correct=True, cond_fn=None, trace=None):
    """Refine a Gaussian-field draw by a truncated denoising walk.

    The draw is lifted to noise level t_skip (x + t_skip * eps) and the
    sampler runs from step `config.skip`; skip = N returns the input
    unchanged.  With mean_correct on, each step re-centers the per-channel
    spatial means onto mu (default 0) after any user conditioning.
    """
    x_grf = np.asarray(x_grf, dtype=np.float64)
    if config.skip >= config.N:
        return x_grf.copy()
    t = noise_schedule(config)
    x = x_grf + t[config.skip] * rng.standard_normal(x_grf.shape)

    hook = cond_fn
    if mean_correct:
        target_mu = np.zeros(x_grf.shape[-4]) if mu is None else \
            np.asarray(mu, dtype=np.float64)
        mu_col = target_mu[:, None, None, None]

        def hook(y, i, t_next, inner=cond_fn):
            if inner is not None:
                y = inner(y, i, t_next)
            return y + (mu_col - y.mean(axis=(-3, -2, -1), keepdims=True))

    return sample(denoiser, config, rng, x_init=x, cond_fn=hook, trace=trace)
