"""Command-line interface.

Subcommands wrap the library: kernel search, field sampling, dataset
generation, statistics, PCA, slice super-resolution, 2D-to-3D expansion,
and slice rendering.  Exit codes: 0 ok, 2 validation error, 3 runtime
error, 4 non-convergence.  --progress switches stderr to JSON lines.
"""
from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import diffusion, mogrf, mosm, pipeline, spatial_stats
from .pmf1 import PMF1Error, read_field, write_field

_AXES = {"x": -1, "y": -2, "z": -3}


class NonConvergence(RuntimeError):
    pass


def _parse_dims(text):
    """--dims 'X[,Y,Z]' -> internal (Dz, Dy, Dx)."""
    parts = [int(p) for p in text.split(",")]
    if len(parts) == 1:
        parts = parts * 3
    if len(parts) != 3 or min(parts) < 1:
        raise ValueError(f"bad --dims {text!r}")
    dx, dy, dz = parts
    return (dz, dy, dx)


def _parse_mu(text, h):
    if text is None:
        return np.zeros(h)
    mu = np.array([float(p) for p in text.split(",")], dtype=np.float64)
    if mu.shape != (h,):
        raise ValueError(f"--mu needs {h} values")
    return mu


def _progress(args):
    if not args.progress:
        return None

    def emit(rec):
        print(json.dumps(rec), file=sys.stderr, flush=True)
    return emit


def _say(args, text):
    if not args.progress:
        print(text, file=sys.stderr)


def _load_kernels_file(path):
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("schema") != "polyfield-kernels-1":
        raise ValueError(f"unknown kernels schema {doc.get('schema')!r}")
    params = [mosm.MosmParams.from_json(json.dumps(p)) for p in doc["params"]]
    return doc, params


def _full_cov(params, dims):
    h = params.H
    return mosm.kernel_grid(params, dims).reshape((h, h) + tuple(dims))


def _make_denoiser(spec_text, params, dims, mu):
    """'gaussian' builds the analytic prior for `params`; 'external:CMD...'."""
    if spec_text == "gaussian":
        return diffusion.GaussianDenoiser(_full_cov(params, dims), mu)
    if spec_text.startswith("external:"):
        import shlex
        return diffusion.ExternalDenoiser(shlex.split(spec_text[9:]))
    raise ValueError(f"unknown denoiser {spec_text!r}")


def _dry(args, plan):
    if args.dry_run:
        print(json.dumps({"plan": plan}, indent=1))
        return True
    return False


def cmd_gen_kernels(args):
    dims = _parse_dims(args.dims)
    if _dry(args, {"cmd": "gen-kernels", "count": args.count,
                   "dims": list(dims), "seed": args.seed}):
        return 0
    params, _, info = pipeline.gen_kernels(
        mosm.ParamBounds(), args.count, dims, args.seed,
        periodicity_tol=args.tol, Q=args.Q, H=args.channels,
        probe_fields=args.probe_fields, progress=_progress(args))
    doc = {"schema": "polyfield-kernels-1", "Q": args.Q, "H": args.channels,
           "dims": list(dims), "seed": args.seed, "info": info,
           "params": [json.loads(p.to_json()) for p in params]}
    with open(args.out, "w") as fh:
        json.dump(doc, fh, indent=1)
    _say(args, f"accepted {len(params)} kernels "
               f"(rejection {info['rejection_fraction']:.1%}) -> {args.out}")
    return 0


def cmd_sample_grf(args):
    doc, params = _load_kernels_file(args.kernels)
    if not (0 <= args.index < len(params)):
        raise ValueError(f"--index {args.index} out of range")
    dims = _parse_dims(args.dims) if args.dims else tuple(doc["dims"])
    p = params[args.index]
    mu = _parse_mu(args.mu, p.H)
    if _dry(args, {"cmd": "sample-grf", "index": args.index,
                   "dims": list(dims), "seed": args.seed}):
        return 0
    spec = mogrf.MogrfSpec(mu=mu, row=mosm.covariance_row(p, dims))
    field = mogrf.sample(spec, np.random.default_rng(args.seed))
    write_field(args.out, field, dtype=args.dtype)
    _say(args, f"wrote {args.out}")
    return 0


def cmd_datagen(args):
    doc, params = _load_kernels_file(args.kernels)
    dims = _parse_dims(args.dims) if args.dims else tuple(doc["dims"])
    idx = ([int(i) for i in args.indices.split(",")] if args.indices
           else list(range(len(params))))
    mu = _parse_mu(args.mu, params[0].H)
    config = diffusion.SamplerConfig(N=args.N, skip=args.skip,
                                     s_churn=args.churn)
    if _dry(args, {"cmd": "datagen", "kernels": idx, "R": args.R,
                   "N": args.N, "skip": args.skip, "seed": args.seed,
                   "out": args.out}):
        return 0
    kernels = [(f"k{i}", mosm.covariance_row(params[i], dims)) for i in idx]
    by_id = {f"k{i}": params[i] for i in idx}
    if args.denoiser == "gaussian":
        den = pipeline.PerKernelDenoiser(
            lambda kid, row: diffusion.GaussianDenoiser(
                _full_cov(by_id[kid], dims), mu))
    else:
        den = _make_denoiser(args.denoiser, None, dims, mu)
    manifest = pipeline.datagen(kernels, [(args.denoiser.split(":")[0], den)],
                                args.R, config, args.out,
                                master_seed=args.seed, mu=mu,
                                threads=args.threads,
                                progress=_progress(args))
    n_ok = sum(e["ok"] for e in manifest["entries"])
    _say(args, f"{n_ok}/{len(manifest['entries'])} entries -> {args.out}")
    return 0


def cmd_stats(args):
    field = read_field(args.infile)
    h = field.shape[0]
    pairs = (tuple((0, g) for g in range(h)) if args.pairs == "ref" else None)
    if _dry(args, {"cmd": "stats", "in": args.infile, "pairs": args.pairs}):
        return 0
    sm = spatial_stats.two_point_stats(field, pairs=pairs)
    write_field(args.out, sm.values, dtype="float64")
    with open(args.out + ".json", "w") as fh:
        json.dump({"pairs": [list(p) for p in sm.pairs],
                   "means": sm.means.tolist()}, fh)
    _say(args, f"wrote {args.out} (+.json)")
    return 0


def cmd_pca(args):
    paths = args.fields
    if args.manifest:
        import os
        manifest = pipeline.load_manifest(args.manifest)
        base = os.path.dirname(args.manifest)
        paths = [os.path.join(base, e["path"]) for e in manifest["entries"]
                 if e["ok"]]
    if len(paths) < 2:
        raise ValueError("need at least 2 fields")
    if _dry(args, {"cmd": "pca", "fields": len(paths)}):
        return 0
    vecs, header = [], None
    for p in paths:
        v, hd = pipeline.stats_vector(read_field(p))
        if header is not None and hd != header:
            raise ValueError(f"{p}: statistics selection differs")
        header = hd
        vecs.append(v)
    scores, ratios = pipeline.pca_diversity(np.array(vecs),
                                            n_components=args.components)
    out = {"selection": header, "explained_variance_ratios": ratios.tolist(),
           "scores": scores.tolist()}
    with open(args.out, "w") as fh:
        json.dump(out, fh, indent=1)
    _say(args, f"top ratios {np.round(ratios[:4], 4).tolist()} -> {args.out}")
    return 0


def cmd_superres(args):
    known = read_field(args.infile)
    axis = _AXES[args.axis]
    if args.factor < 2:
        raise ValueError("--factor must be >= 2")
    doc, params = _load_kernels_file(args.kernels)
    p = params[args.index]
    mu = _parse_mu(args.mu, p.H)
    dims = list(known.shape[1:])
    dims[axis] *= args.factor
    dims = tuple(dims)
    reference = read_field(args.reference) if args.reference else None
    if reference is not None and reference.shape != (p.H,) + dims:
        raise ValueError(f"reference shape {reference.shape} != {(p.H,) + dims}")
    if _dry(args, {"cmd": "superres", "dims": list(dims),
                   "factor": args.factor, "samples": args.samples}):
        return 0
    values = np.zeros((known.shape[0],) + dims)
    flags = np.zeros_like(values, dtype=bool)
    sl = [slice(None)] * 4
    sl[axis] = slice(None, None, args.factor)
    values[tuple(sl)] = known
    flags[tuple(sl)] = True
    mask = diffusion.Mask(values=values, known=flags)
    den = _make_denoiser(args.denoiser, p, dims, mu)
    config = diffusion.SamplerConfig(N=args.N, s_churn=args.churn,
                                     sigma_max=args.sigma_max)
    cond = diffusion.inpaint_cond(mask, args.theta, args.N)
    rng = np.random.default_rng(args.seed)
    acc = np.zeros_like(values)
    acc2 = np.zeros_like(values)
    for k in range(args.samples):
        x = diffusion.sample(den, config, rng, cond_fn=cond,
                             shape=values.shape)
        acc += x
        acc2 += x ** 2
        if _progress(args):
            _progress(args)({"event": "superres_sample", "done": k + 1})
    mean = acc / args.samples
    var = np.maximum(acc2 / args.samples - mean ** 2, 0.0)
    write_field(args.out + "_mean.pmf1", mean, dtype="float64")
    write_field(args.out + "_var.pmf1", var, dtype="float64")
    report = {"samples": args.samples, "factor": args.factor,
              "theta": args.theta, "dims": list(dims)}
    if reference is not None:
        err = np.abs(mean - reference)
        report["mape_percent"] = float(
            100.0 * np.mean(err / (np.abs(reference) + 1e-8)))
        report["mae"] = float(err.mean())
        report["rmse"] = float(np.sqrt(((mean - reference) ** 2).mean()))
    with open(args.out + "_report.json", "w") as fh:
        json.dump(report, fh, indent=1)
    _say(args, f"wrote {args.out}_mean/_var/_report")
    return 0


def cmd_expand(args):
    planes = {}
    for name in ("x", "y", "z"):
        arr = read_field(getattr(args, f"plane_{name}"))
        ax = _AXES[name]
        if arr.shape[ax] != 1:
            raise ValueError(f"--plane-{name} must be flat along {name}, "
                             f"got {arr.shape}")
        planes[name] = np.squeeze(arr, axis=ax)
    target = spatial_stats.ortho_stats_from_images(planes)
    h = planes["x"].shape[0]
    dims = (planes["x"].shape[1], planes["x"].shape[2], planes["y"].shape[2])
    doc, params = _load_kernels_file(args.kernels)
    p = params[args.index]
    if p.H != h:
        raise ValueError(f"kernel H={p.H} but images have {h} channels")
    mu = _parse_mu(args.mu, h)
    if _dry(args, {"cmd": "expand", "dims": list(dims),
                   "samples": args.samples, "N": args.N}):
        return 0
    den = _make_denoiser(args.denoiser, p, dims, mu)
    rng = np.random.default_rng(args.seed)
    thresholds = None
    if args.threshold is not None:
        # leave early steps unconstrained, tighten geometrically at the end
        thresholds = np.full(args.N, np.inf)
        k = min(4, args.N)
        thresholds[-k:] = np.geomspace(max(args.threshold, 1e-2),
                                       args.threshold, k)
    reports = []
    for k in range(args.samples):
        cond = diffusion.OrthoStatsCond(target, args.N, lr=args.lr,
                                        thresholds=thresholds,
                                        max_iters=args.max_iters,
                                        lr_growth=args.lr_growth)
        config = diffusion.SamplerConfig(N=args.N, sigma_max=args.sigma_max)
        x = diffusion.sample(den, config, rng, cond_fn=cond,
                             shape=(h,) + dims)
        achieved = spatial_stats.ortho_stats(x, pairs=target.pairs)
        per_plane = {q: float(np.abs(achieved.planes[q] - target.planes[q]).max())
                     for q in ("x", "y", "z")}
        write_field(f"{args.out}_s{k}.pmf1", x, dtype="float64")
        reports.append({"sample": k, "plane_max_abs_err": per_plane,
                        "descent": cond.history[-1]})
    with open(args.out + "_report.json", "w") as fh:
        json.dump({"samples": reports}, fh, indent=1)
    worst = max(max(r["plane_max_abs_err"].values()) for r in reports)
    _say(args, f"worst plane error {worst:.3e} -> {args.out}_*")
    if not all(r["descent"]["converged"] for r in reports):
        raise NonConvergence(f"statistics descent missed its threshold "
                             f"(worst plane error {worst:.3e})")
    return 0


def cmd_render_slice(args):
    from PIL import Image
    field = read_field(args.infile)
    if field.shape[0] != 3:
        raise ValueError(f"rendering needs 3 channels, got {field.shape[0]}")
    axis = _AXES[args.axis]
    if not (0 <= args.index < field.shape[axis]):
        raise ValueError(f"--index {args.index} out of range")
    if _dry(args, {"cmd": "render-slice", "axis": args.axis,
                   "index": args.index}):
        return 0
    sl = [slice(None)] * 4
    sl[axis] = args.index
    plane = field[tuple(sl)]                       # (3, A, B)
    rgb = np.clip((plane + 1.0) * 0.5, 0.0, 1.0)   # fixed [-1,1] range
    img = np.round(rgb * 255.0).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(img, "RGB").save(args.out)
    _say(args, f"wrote {args.out}")
    return 0


def build_parser():
    ap = argparse.ArgumentParser(prog="polyfield",
                                 description=__doc__.splitlines()[0])
    ap.add_argument("--progress", action="store_true",
                    help="JSON-lines progress on stderr")
    ap.add_argument("--dry-run", action="store_true",
                    help="validate and print the plan, no compute")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen-kernels", help="search valid covariance kernels")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--dims", default="16")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--Q", type=int, default=4)
    p.add_argument("--channels", type=int, default=3)
    p.add_argument("--probe-fields", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_kernels)

    p = sub.add_parser("sample-grf", help="draw one Gaussian-field sample")
    p.add_argument("--kernels", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--dims", default=None)
    p.add_argument("--mu", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dtype", choices=("float32", "float64"),
                   default="float32")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample_grf)

    p = sub.add_parser("datagen", help="two-stage dataset generation")
    p.add_argument("--kernels", required=True)
    p.add_argument("--indices", default=None)
    p.add_argument("--dims", default=None)
    p.add_argument("--denoiser", default="gaussian")
    p.add_argument("--R", type=int, default=3)
    p.add_argument("--N", type=int, default=18)
    p.add_argument("--skip", type=int, default=12)
    p.add_argument("--churn", type=float, default=0.0)
    p.add_argument("--mu", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_datagen)

    p = sub.add_parser("stats", help="two-point statistics of a field file")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--pairs", choices=("full", "ref"), default="full")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("pca", help="explained variance of dataset statistics")
    p.add_argument("--manifest", default=None)
    p.add_argument("--fields", nargs="*", default=[])
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pca)

    p = sub.add_parser("superres", help="fill skipped slices by inpainting")
    p.add_argument("--in", dest="infile", required=True,
                   help="PMF1 with the known slices")
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--factor", type=int, required=True)
    p.add_argument("--kernels", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--denoiser", default="gaussian")
    p.add_argument("--theta", type=float, default=0.75)
    p.add_argument("--N", type=int, default=64)
    p.add_argument("--churn", type=float, default=40.0)
    p.add_argument("--sigma-max", type=float, default=80.0)
    p.add_argument("--samples", type=int, default=8)
    p.add_argument("--mu", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--reference", default=None)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_superres)

    p = sub.add_parser("expand", help="3D volumes from three 2D images")
    p.add_argument("--plane-x", required=True)
    p.add_argument("--plane-y", required=True)
    p.add_argument("--plane-z", required=True)
    p.add_argument("--kernels", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--denoiser", default="gaussian")
    p.add_argument("--N", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--lr-growth", type=float, default=1.0)
    p.add_argument("--threshold", type=float, default=None,
                   help="terminal sum-squared statistics error")
    p.add_argument("--max-iters", type=int, default=5000)
    p.add_argument("--sigma-max", type=float, default=80.0)
    p.add_argument("--samples", type=int, default=1)
    p.add_argument("--mu", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output path prefix")
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("render-slice", help="render one slice to an image")
    p.add_argument("--in", dest="infile", required=True)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render_slice)
    return ap


def main(argv=None):
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (ValueError, PMF1Error, KeyError, FileNotFoundError) as e:
        print(json.dumps({"error": "validation", "detail": str(e)}),
              file=sys.stderr)
        return 2
    except (diffusion.ConditioningDivergence, NonConvergence) as e:
        print(json.dumps({"error": "non-convergence", "detail": str(e)}),
              file=sys.stderr)
        return 4
    except Exception as e:  # noqa: BLE001 - uniform runtime exit code
        print(json.dumps({"error": "runtime", "detail": str(e)}),
              file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
