"""Dataset generation: kernel search, the two-stage sampling loop, PCA.

A dataset is produced in three stages.  `gen_kernels` keeps drawing
stratified parameter batches until enough covariance rows pass validation.
`datagen` runs denoisers x kernels x replicates: draw a Gaussian-field
sample from the kernel's covariance row, refine it with the truncated
denoising walk, persist the result, and record everything needed to
reproduce the entry bit for bit.  `pca_diversity` measures how much
covariance variety a dataset actually spans.

Per-entry RNG streams are derived by hashing (master seed, denoiser id,
kernel id, replicate), so entries are order- and parallelism-independent.
"""
from __future__ import annotations

import hashlib
import json
import os
import warnings
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import mogrf, mosm
from .diffusion import SamplerConfig, lgd_refine
from .pmf1 import write_field

__all__ = [
    "gen_kernels", "entry_seed", "datagen", "regenerate_entry",
    "stats_vector", "pca_diversity", "load_manifest",
]

MANIFEST_SCHEMA = "polyfield-manifest-1"


class PerKernelDenoiser:
    """Marks a denoiser built per kernel: factory(kernel_id, row) -> callable.

    Needed by oracle denoisers whose prior must match each kernel; trained
    models are kernel-independent plain callables.
    """

    def __init__(self, factory):
        self.factory = factory


def gen_kernels(bounds, target_count, dims, seed, periodicity_tol=1e-3,
                Q=4, H=3, batch=None, probe_fields=False, progress=None):
    """Sample parameter sets until target_count rows pass validation.

    Returns (params list, CovarianceGrid list, info dict).  info records
    per-batch acceptance; if after 10 batches the overall acceptance rate
    is below 0.1% the bounds are considered misconfigured and the search
    aborts.  probe_fields additionally draws one field per candidate and
    rejects kernels whose sample leaves [-1, 1].
    """
    if target_count < 1:
        raise ValueError("target_count must be >= 1")
    bounds = bounds or mosm.ParamBounds()
    batch = batch or max(16, min(256, 2 * target_count))
    accepted_p, accepted_g = [], []
    rates = []
    proposed = 0
    batch_idx = 0
    while len(accepted_p) < target_count:
        params_list = mosm.sample_params_lhs(
            bounds, batch, Q, H, seed=(seed, batch_idx))
        got = 0
        for j, params in enumerate(params_list):
            row = mosm.covariance_row(params, dims)
            probe = None
            if probe_fields:
                spec = mogrf.MogrfSpec(mu=np.zeros(H), row=row)
                probe = mogrf.sample(
                    spec, np.random.default_rng((seed, batch_idx, j)))
            ok, reason = mosm.validate_kernel(row, periodicity_tol, probe)
            if ok:
                accepted_p.append(params)
                accepted_g.append(row)
                got += 1
                if len(accepted_p) >= target_count:
                    break
        proposed += batch
        rates.append(got / batch)
        batch_idx += 1
        if progress is not None:
            progress({"event": "kernel_batch", "batch": batch_idx,
                      "accepted": len(accepted_p), "proposed": proposed})
        if batch_idx >= 10 and len(accepted_p) / proposed < 1e-3:
            raise RuntimeError(
                f"kernel acceptance rate {len(accepted_p) / proposed:.2e} "
                f"after {batch_idx} batches; bounds look misconfigured")
    info = {"proposed": proposed, "accepted": len(accepted_p),
            "batch_rates": rates,
            "rejection_fraction": 1.0 - len(accepted_p) / proposed}
    return accepted_p, accepted_g, info


def entry_seed(master_seed, denoiser_id, kernel_id, replicate):
    """Stable 64-bit stream seed for one dataset entry."""
    key = f"{master_seed}|{denoiser_id}|{kernel_id}|{replicate}".encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def _one_entry(kernel_id, row, denoiser_id, denoiser, rep, master_seed,
               config, mu, out_dir, store_dtype):
    seed = entry_seed(master_seed, denoiser_id, kernel_id, rep)
    rng = np.random.default_rng(seed)
    if isinstance(denoiser, PerKernelDenoiser):
        denoiser = denoiser.factory(kernel_id, row)
    spec = mogrf.MogrfSpec(mu=mu, row=row)
    grf = mogrf.sample(spec, rng)
    field = lgd_refine(grf, denoiser, config, rng, mu=mu)
    name = f"{denoiser_id}_{kernel_id}_r{rep}.pmf1"
    path = os.path.join(out_dir, name)
    write_field(path, field, dtype=store_dtype)
    return {"path": name, "kernel": kernel_id, "denoiser": denoiser_id,
            "replicate": rep, "seed": seed, "ok": True,
            "clamped_fraction": mogrf.clamped_fraction(spec)}


def datagen(kernels, denoisers, R, config: SamplerConfig, out_dir,
            master_seed=0, mu=None, store_dtype="float32", threads=1,
            progress=None):
    """Generate |denoisers| * |kernels| * R fields and their manifest.

    kernels   : list of (kernel_id, covariance row) pairs
    denoisers : list of (denoiser_id, callable) pairs
    Entry failures are recorded in the manifest and do not stop the run.
    The manifest is written to out_dir/manifest.json and also returned.
    """
    if R < 1:
        raise ValueError("R must be >= 1")
    os.makedirs(out_dir, exist_ok=True)
    jobs = [(kid, row, did, den, rep)
            for did, den in denoisers
            for kid, row in kernels
            for rep in range(R)]
    h = np.asarray(getattr(kernels[0][1], "values", kernels[0][1])).shape[0]
    mu = np.zeros(h) if mu is None else np.asarray(mu, dtype=np.float64)

    def run(job):
        kid, row, did, den, rep = job
        try:
            return _one_entry(kid, row, did, den, rep, master_seed, config,
                              mu, out_dir, store_dtype)
        except Exception as e:  # noqa: BLE001 - recorded, run continues
            return {"path": None, "kernel": kid, "denoiser": did,
                    "replicate": rep,
                    "seed": entry_seed(master_seed, did, kid, rep),
                    "ok": False, "error": f"{type(e).__name__}: {e}"}

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            entries = list(pool.map(run, jobs))
    else:
        entries = []
        for job in jobs:
            entries.append(run(job))
            if progress is not None:
                progress({"event": "datagen_entry", "done": len(entries),
                          "total": len(jobs), "ok": entries[-1]["ok"]})
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "master_seed": master_seed,
        "mu": mu.tolist(),
        "store_dtype": store_dtype,
        "config": {"N": config.N, "sigma_min": config.sigma_min,
                   "sigma_max": config.sigma_max, "rho": config.rho,
                   "s_churn": config.s_churn, "s_noise": config.s_noise,
                   "s_tmin": config.s_tmin,
                   "s_tmax": (None if np.isinf(config.s_tmax)
                              else config.s_tmax),
                   "skip": config.skip, "sigma_data": config.sigma_data},
        "entries": entries,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def load_manifest(path):
    with open(path) as fh:
        manifest = json.load(fh)
    if manifest.get("schema") != MANIFEST_SCHEMA:
        raise ValueError(f"unknown manifest schema {manifest.get('schema')!r}")
    return manifest


def regenerate_entry(manifest, entry, kernels, denoisers):
    """Recompute one entry's field from its recorded seed (repro check)."""
    rows = dict(kernels)
    dens = dict(denoisers)
    cfg = SamplerConfig(**{k: (float("inf") if k == "s_tmax" and v is None
                               else v)
                           for k, v in manifest["config"].items()})
    rng = np.random.default_rng(entry["seed"])
    mu = np.asarray(manifest["mu"], dtype=np.float64)
    row = rows[entry["kernel"]]
    den = dens[entry["denoiser"]]
    if isinstance(den, PerKernelDenoiser):
        den = den.factory(entry["kernel"], row)
    spec = mogrf.MogrfSpec(mu=mu, row=row)
    grf = mogrf.sample(spec, rng)
    return lgd_refine(grf, den, cfg, rng, mu=mu)


def stats_vector(field, pairs=None, max_side=32):
    """Flatten reference-row two-point statistics for PCA.

    Pairs default to the reference row (0, g).  Axes longer than max_side
    are decimated by striding; the selection is returned alongside the
    vector so datasets can verify they were flattened identically.
    """
    from .spatial_stats import two_point_stats
    field = np.asarray(field, dtype=np.float64)
    h = field.shape[0]
    if pairs is None:
        pairs = tuple((0, g) for g in range(h))
    sm = two_point_stats(field, pairs=pairs)
    strides = tuple(max(1, -(-d // max_side)) for d in field.shape[-3:])
    sub = sm.values[:, ::strides[0], ::strides[1], ::strides[2]]
    header = {"pairs": list(map(list, pairs)), "dims": list(field.shape[-3:]),
              "strides": list(strides)}
    return sub.ravel().copy(), header


def pca_diversity(vectors, n_components=None):
    """Principal components of a stack of statistics vectors.

    Returns (scores, ratios): scores (n, k) are centered projections on the
    top-k components, ratios (k,) the explained-variance fractions summing
    to 1 over the full spectrum.  Requesting more components than the data
    supports truncates with a warning.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need a 2D stack of at least 2 vectors")
    n = x.shape[0]
    xc = x - x.mean(axis=0)
    u, s, _ = np.linalg.svd(xc, full_matrices=False)
    total = (s ** 2).sum()
    if total == 0:
        ratios = np.zeros(len(s))
    else:
        ratios = s ** 2 / total
    k = len(s) if n_components is None else n_components
    if k > len(s):
        warnings.warn(f"requested {k} components, data supports {len(s)}")
        k = len(s)
    scores = u[:, :k] * s[:k]
    return scores, ratios[:k] if n_components is not None else ratios
