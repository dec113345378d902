import json

import numpy as np
import pytest

from polyfield import cli, mogrf, mosm, pmf1
from polyfield import spatial_stats as ss


@pytest.fixture(scope="module")
def kernels_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("kern") / "kernels.json"
    rc = cli.main(["gen-kernels", "--count", "2", "--dims", "8", "--seed",
                   "4", "--Q", "2", "--channels", "1", "--out", str(path)])
    assert rc == 0
    return str(path)


def load_params(kernels_file, index=0):
    doc = json.load(open(kernels_file))
    return mosm.MosmParams.from_json(json.dumps(doc["params"][index]))


def test_gen_kernels_writes_schema(kernels_file):
    doc = json.load(open(kernels_file))
    assert doc["schema"] == "polyfield-kernels-1"
    assert len(doc["params"]) == 2
    assert doc["info"]["accepted"] == 2


def test_dry_run_prints_plan_without_output(tmp_path, capsys):
    out = tmp_path / "k.json"
    rc = cli.main(["--dry-run", "gen-kernels", "--count", "1",
                   "--out", str(out)])
    assert rc == 0
    plan = json.loads(capsys.readouterr().out)
    assert plan["plan"]["cmd"] == "gen-kernels"
    assert not out.exists()


def test_sample_grf_deterministic(tmp_path, kernels_file):
    a, b, c = (tmp_path / n for n in ("a.pmf1", "b.pmf1", "c.pmf1"))
    args = ["sample-grf", "--kernels", kernels_file, "--seed", "7"]
    assert cli.main(args + ["--out", str(a)]) == 0
    assert cli.main(args + ["--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert cli.main(["sample-grf", "--kernels", kernels_file, "--seed", "8",
                     "--out", str(c)]) == 0
    assert a.read_bytes() != c.read_bytes()


def test_sample_grf_dims_override_and_oracle(tmp_path, kernels_file):
    out = tmp_path / "g.pmf1"
    rc = cli.main(["sample-grf", "--kernels", kernels_file, "--dims", "4,6,8",
                   "--dtype", "float64", "--seed", "3", "--out", str(out)])
    assert rc == 0
    field = pmf1.read_field(out)
    assert field.shape == (1, 8, 6, 4)  # user order x,y,z -> (Dz, Dy, Dx)
    p = load_params(kernels_file)
    spec = mogrf.MogrfSpec(mu=[0.0], row=mosm.covariance_row(p, (8, 6, 4)))
    want = mogrf.sample(spec, np.random.default_rng(3))
    assert np.array_equal(field, want)


def test_stats_constant_field(tmp_path):
    src = tmp_path / "c.pmf1"
    pmf1.write_field(src, np.full((1, 3, 3, 3), 2.0), dtype="float64")
    out = tmp_path / "s.pmf1"
    rc = cli.main(["stats", "--in", str(src), "--out", str(out)])
    assert rc == 0
    vals = pmf1.read_field(out)
    assert np.allclose(vals, 4.0, atol=1e-13)
    meta = json.load(open(str(out) + ".json"))
    assert meta["pairs"] == [[0, 0]]
    assert np.isclose(meta["means"][0], 2.0)


def test_datagen_and_pca_roundtrip(tmp_path, kernels_file):
    d1 = tmp_path / "data"
    args = ["datagen", "--kernels", kernels_file, "--R", "3", "--N", "4",
            "--skip", "2", "--seed", "5", "--out", str(d1)]
    assert cli.main(args) == 0
    manifest = json.load(open(d1 / "manifest.json"))
    assert len(manifest["entries"]) == 6  # 1 denoiser x 2 kernels x R=3
    assert all(e["ok"] for e in manifest["entries"])
    d2 = tmp_path / "data2"
    assert cli.main(args[:-1] + [str(d2)]) == 0
    for e in manifest["entries"]:
        assert (d1 / e["path"]).read_bytes() == (d2 / e["path"]).read_bytes()
    out = tmp_path / "pca.json"
    rc = cli.main(["pca", "--manifest", str(d1 / "manifest.json"),
                   "--out", str(out)])
    assert rc == 0
    doc = json.load(open(out))
    ratios = np.array(doc["explained_variance_ratios"])
    assert abs(ratios.sum() - 1.0) < 1e-9
    assert (np.diff(ratios) <= 1e-15).all()
    assert len(doc["scores"]) == 6


def test_pca_collinear_vectors(tmp_path):
    rng = np.random.default_rng(90)
    base = rng.normal(size=(1, 4, 4, 4))
    paths = []
    for i, scale in enumerate((1.0, 2.0, 3.0)):
        p = tmp_path / f"f{i}.pmf1"
        pmf1.write_field(p, scale * base, dtype="float64")
        paths.append(str(p))
    out = tmp_path / "pca.json"
    rc = cli.main(["pca", "--fields", *paths, "--out", str(out)])
    assert rc == 0
    ratios = json.load(open(out))["explained_variance_ratios"]
    assert np.isclose(ratios[0], 1.0, atol=1e-12)


def test_superres_known_slices_and_report(tmp_path, kernels_file):
    p = load_params(kernels_file)
    dims = (8, 4, 4)
    spec = mogrf.MogrfSpec(mu=[0.0], row=mosm.covariance_row(p, dims))
    ref = mogrf.sample(spec, np.random.default_rng(11))
    ref_path = tmp_path / "ref.pmf1"
    pmf1.write_field(ref_path, ref, dtype="float64")
    known = ref[:, ::2]  # every second z slice
    known_path = tmp_path / "known.pmf1"
    pmf1.write_field(known_path, known, dtype="float64")
    out = str(tmp_path / "sr")
    rc = cli.main(["superres", "--in", str(known_path), "--axis", "z",
                   "--factor", "2", "--kernels", kernels_file,
                   "--theta", "1.0", "--N", "6", "--churn", "0",
                   "--sigma-max", "3.0", "--samples", "2", "--seed", "13",
                   "--reference", str(ref_path), "--out", out])
    assert rc == 0
    mean = pmf1.read_field(out + "_mean.pmf1")
    var = pmf1.read_field(out + "_var.pmf1")
    assert mean.shape == ref.shape
    assert np.allclose(mean[:, ::2], known, atol=1e-12)
    assert np.allclose(var[:, ::2], 0.0, atol=1e-12)
    report = json.load(open(out + "_report.json"))
    assert {"mape_percent", "mae", "rmse"} <= set(report)
    assert report["factor"] == 2


def test_superres_validates_factor(tmp_path, kernels_file):
    src = tmp_path / "k.pmf1"
    pmf1.write_field(src, np.zeros((1, 2, 2, 2)), dtype="float64")
    rc = cli.main(["superres", "--in", str(src), "--factor", "1",
                   "--kernels", kernels_file, "--out", str(tmp_path / "o")])
    assert rc == 2


def consistent_plane_images(x):
    # images whose 2D statistics equal the volume's plane statistics
    target = ss.ortho_stats(x)
    out = {}
    for key in ("x", "y", "z"):
        t = target.planes[key][0]
        spec2d = np.clip(np.fft.fft2(t).real, 0.0, None)
        out[key] = np.fft.ifft2(np.sqrt(spec2d * t.size)).real[None]
    return out


def test_expand_reaches_target_statistics(tmp_path, kernels_file):
    p = load_params(kernels_file)
    dims = (8, 8, 8)
    row = mosm.covariance_row(p, dims)
    vals = row.values * (0.25 / row.values[0, 0, 0, 0])
    spec = mogrf.MogrfSpec(mu=[0.0], row=vals)
    x_ref = mogrf.sample(spec, np.random.default_rng(17))
    images = consistent_plane_images(x_ref)
    paths = {}
    for key, ins in (("x", -1), ("y", -2), ("z", -3)):
        q = tmp_path / f"plane_{key}.pmf1"
        pmf1.write_field(q, np.expand_dims(images[key], axis=ins),
                         dtype="float64")
        paths[key] = str(q)
    out = str(tmp_path / "vol")
    rc = cli.main(["expand", "--plane-x", paths["x"], "--plane-y", paths["y"],
                   "--plane-z", paths["z"], "--kernels", kernels_file,
                   "--N", "4", "--lr", "1e4", "--lr-growth", "1.002",
                   "--threshold", "1e-10", "--max-iters", "30000",
                   "--sigma-max", "2.0", "--samples", "1", "--seed", "19",
                   "--out", out])
    assert rc == 0
    report = json.load(open(out + "_report.json"))
    errs = report["samples"][0]["plane_max_abs_err"]
    assert max(errs.values()) <= 1e-5
    vol = pmf1.read_field(out + "_s0.pmf1")
    got = ss.ortho_stats(vol)
    target = ss.ortho_stats_from_images(images)
    for key in ("x", "y", "z"):
        assert np.abs(got.planes[key] - target.planes[key]).max() <= 1e-5


def test_expand_exit_codes(tmp_path, kernels_file):
    # mismatched plane dims fail validation before compute
    a = tmp_path / "a.pmf1"
    b = tmp_path / "b.pmf1"
    c = tmp_path / "c.pmf1"
    pmf1.write_field(a, np.zeros((1, 4, 4, 1)), dtype="float64")
    pmf1.write_field(b, np.zeros((1, 5, 1, 4)), dtype="float64")  # Dz differs
    pmf1.write_field(c, np.zeros((1, 1, 4, 4)), dtype="float64")
    rc = cli.main(["expand", "--plane-x", str(a), "--plane-y", str(b),
                   "--plane-z", str(c), "--kernels", kernels_file,
                   "--out", str(tmp_path / "v")])
    assert rc == 2
    # an unreachable threshold within a tiny iteration budget exits 4
    pmf1.write_field(b, np.ones((1, 4, 1, 4)), dtype="float64")
    rc = cli.main(["expand", "--plane-x", str(a), "--plane-y", str(b),
                   "--plane-z", str(c), "--kernels", kernels_file,
                   "--N", "2", "--max-iters", "5", "--threshold", "1e-30",
                   "--sigma-max", "1.0", "--out", str(tmp_path / "v")])
    assert rc == 4


def test_render_slice_endpoints(tmp_path):
    from PIL import Image
    field = np.zeros((3, 2, 2, 2))
    field[0] = -1.0   # red channel -> 0
    field[1] = 0.0    # green -> 128
    field[2] = 1.0    # blue -> 255
    src = tmp_path / "f.pmf1"
    pmf1.write_field(src, field, dtype="float64")
    out = tmp_path / "s.png"
    rc = cli.main(["render-slice", "--in", str(src), "--axis", "z",
                   "--index", "1", "--out", str(out)])
    assert rc == 0
    img = np.asarray(Image.open(out))
    assert img.shape == (2, 2, 3)
    assert (img == [0, 128, 255]).all()
    # determinism: identical bytes on a second render
    out2 = tmp_path / "s2.png"
    cli.main(["render-slice", "--in", str(src), "--axis", "z",
              "--index", "1", "--out", str(out2)])
    assert out.read_bytes() == out2.read_bytes()


def test_render_slice_validation(tmp_path):
    src = tmp_path / "f.pmf1"
    pmf1.write_field(src, np.zeros((2, 2, 2, 2)), dtype="float64")
    rc = cli.main(["render-slice", "--in", str(src),
                   "--out", str(tmp_path / "x.png")])
    assert rc == 2  # H != 3
    pmf1.write_field(src, np.zeros((3, 2, 2, 2)), dtype="float64")
    rc = cli.main(["render-slice", "--in", str(src), "--index", "9",
                   "--out", str(tmp_path / "x.png")])
    assert rc == 2


def test_exit_codes_for_bad_invocations(tmp_path):
    assert cli.main(["stats", "--in", str(tmp_path / "nope.pmf1"),
                     "--out", str(tmp_path / "o")]) == 2
    assert cli.main(["no-such-command"]) == 2
    assert cli.main(["pca", "--out", str(tmp_path / "o.json")]) == 2
