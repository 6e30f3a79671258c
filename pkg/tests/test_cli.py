import json

import numpy as np
import pytest

from matforge.cli import main
from matforge.envlight import EnvMap, build_prefiltered, load_prefiltered, save_prefiltered
from matforge.image import read_pfm, read_png, write_pfm
from matforge.losses import psnr
from matforge.mesh import load_mesh
from matforge.scheduler import NoiseSchedule
from matforge.uvspace import bake_uv_geometry

QUAD_OBJ = (
    "v -0.5 -0.5 0\nv 0.5 -0.5 0\nv 0.5 0.5 0\nv -0.5 0.5 0\n"
    "vn 0 0 1\nvt 0 0\nvt 1 0\nvt 1 1\nvt 0 1\n"
    "f 1/1/1 2/2/1 3/3/1\nf 1/1/1 3/3/1 4/4/1\n"
)


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    """Quad OBJ, ground-truth textures, and a small prefiltered env dir."""
    root = tmp_path_factory.mktemp("cli_scene")
    (root / "quad.obj").write_text(QUAD_OBJ)
    t = (np.arange(32) + 0.5) / 32
    uu, vv = np.meshgrid(t, t)
    albedo = np.stack([0.2 + 0.6 * uu, 0.2 + 0.6 * vv,
                       np.full_like(uu, 0.5)], axis=-1)
    rm = np.stack([0.3 + 0.4 * vv, 0.25 + 0.5 * uu, np.zeros_like(uu)], axis=-1)
    write_pfm(root / "albedo.pfm", albedo)
    write_pfm(root / "rm.pfm", rm)
    pre = build_prefiltered(EnvMap.constant(0.3, 16), n_mips=4,
                            samples_per_texel=32, base_height=16,
                            irradiance_height=16, lut_resolution=16,
                            lut_samples=64)
    save_prefiltered(root / "env", pre)
    return root


def run(capsys, argv):
    code = main(argv)
    out, err = capsys.readouterr()
    return code, out, err


class TestSchedulerDump:
    def test_trailing_four(self, capsys):
        code, out, _ = run(capsys, ["scheduler-dump", "--n-steps", "4"])
        assert code == 0
        payload = json.loads(out)
        assert payload["timesteps"] == [999, 749, 499, 249]
        sched = NoiseSchedule()
        want = [float(sched.alpha_bar(t)) for t in payload["timesteps"]]
        np.testing.assert_allclose(payload["alpha_bars"], want, rtol=1e-12)

    def test_leading_offset_one(self, capsys):
        code, out, _ = run(capsys, ["scheduler-dump", "--spacing", "leading",
                                    "--offset", "1"])
        assert code == 0
        assert json.loads(out)["timesteps"] == [1]

    def test_config_file_defaults(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"n_steps": 4}))
        code, out, _ = run(capsys, ["scheduler-dump", "--config", str(cfg)])
        assert code == 0
        assert len(json.loads(out)["timesteps"]) == 4
        # explicit flags override config values
        code, out, _ = run(capsys, ["scheduler-dump", "--config", str(cfg),
                                    "--n-steps", "2"])
        assert code == 0
        assert len(json.loads(out)["timesteps"]) == 2

    def test_unknown_config_key(self, capsys, tmp_path):
        cfg = tmp_path / "cfg.json"
        cfg.write_text(json.dumps({"nsteps": 4}))
        code, _, err = run(capsys, ["scheduler-dump", "--config", str(cfg)])
        assert code == 1
        assert "unknown config keys" in err

    def test_invalid_schedule_is_reported(self, capsys):
        code, _, err = run(capsys, ["scheduler-dump", "--n-steps", "2000"])
        assert code == 1
        assert "error" in err


class TestMetrics:
    def test_identical_files(self, capsys, tmp_path):
        img = np.linspace(0, 1, 16 * 16 * 3).reshape(16, 16, 3)
        write_pfm(tmp_path / "x.pfm", img)
        write_pfm(tmp_path / "y.pfm", img)
        code, out, _ = run(capsys, ["metrics", str(tmp_path / "x.pfm"),
                                    str(tmp_path / "y.pfm")])
        assert code == 0
        payload = json.loads(out)
        assert payload["psnr"] == 99.0
        assert payload["ssim"] == pytest.approx(1.0, abs=1e-12)
        assert payload["l1"] == 0.0
        assert payload["ssi"] == pytest.approx(0.0, abs=1e-9)

    def test_known_offset(self, capsys, tmp_path):
        rng = np.random.default_rng(3)
        a = rng.uniform(0.2, 0.8, (24, 24, 3))
        b = np.clip(a + 0.1, 0, 1)
        write_pfm(tmp_path / "a.pfm", a)
        write_pfm(tmp_path / "b.pfm", b)
        code, out, _ = run(capsys, ["metrics", str(tmp_path / "a.pfm"),
                                    str(tmp_path / "b.pfm")])
        payload = json.loads(out)
        a32 = read_pfm(tmp_path / "a.pfm").data
        b32 = read_pfm(tmp_path / "b.pfm").data
        assert payload["psnr"] == pytest.approx(psnr(a32, b32), rel=1e-9)

    def test_directory_mode(self, capsys, tmp_path):
        d1, d2 = tmp_path / "d1", tmp_path / "d2"
        d1.mkdir(), d2.mkdir()
        rng = np.random.default_rng(5)
        for name in ("one.pfm", "two.pfm"):
            img = rng.uniform(0, 1, (16, 16, 3))
            write_pfm(d1 / name, img)
            write_pfm(d2 / name, np.clip(img + 0.02, 0, 1))
        code, out, _ = run(capsys, ["metrics", str(d1), str(d2)])
        assert code == 0
        payload = json.loads(out)
        assert set(payload["pairs"]) == {"one.pfm", "two.pfm"}
        assert set(payload["mean"]) == {"psnr", "ssim", "l1"}

    def test_file_vs_directory_rejected(self, capsys, tmp_path):
        write_pfm(tmp_path / "a.pfm", np.zeros((16, 16, 3)))
        code, _, err = run(capsys, ["metrics", str(tmp_path / "a.pfm"),
                                    str(tmp_path)])
        assert code == 1
        assert "two files or two directories" in err

    def test_out_writes_json(self, capsys, tmp_path):
        img = np.full((16, 16, 3), 0.5)
        write_pfm(tmp_path / "a.pfm", img)
        code, out, _ = run(capsys, ["metrics", str(tmp_path / "a.pfm"),
                                    str(tmp_path / "a.pfm"),
                                    "--out", str(tmp_path / "m")])
        assert code == 0
        saved = json.loads((tmp_path / "m" / "output.json").read_text())
        assert saved == json.loads(out)


class TestBakeUv:
    def test_bake_matches_library(self, capsys, scene, tmp_path):
        out = tmp_path / "bake"
        code, _, _ = run(capsys, ["bake-uv", "--mesh", str(scene / "quad.obj"),
                                  "--atlas-res", "24", "--out", str(out),
                                  "--seed", "5"])
        assert code == 0
        atlas = bake_uv_geometry(load_mesh(scene / "quad.obj"), 24)
        got = read_pfm(out / "position.pfm").data
        np.testing.assert_array_equal(got, atlas.position.astype(np.float32))
        validity = read_png(out / "validity.png", apply_srgb=False).data[..., 0]
        np.testing.assert_array_equal(np.round(validity), atlas.validity)
        manifest = json.loads((out / "manifest.json").read_text())
        roles = {e["path"]: e["role"] for e in manifest["artifacts"]}
        assert roles == {"position.pfm": "position", "validity.png": "mask"}
        meta = json.loads((out / "invocation.json").read_text())
        assert meta["seed"] == 5 and meta["command"] == "bake-uv"


class TestRenderAndPrefilter:
    def test_render_six_views(self, capsys, scene, tmp_path):
        out = tmp_path / "renders"
        code, _, _ = run(capsys, [
            "render", "--mesh", str(scene / "quad.obj"),
            "--albedo", str(scene / "albedo.pfm"), "--rm", str(scene / "rm.pfm"),
            "--env", str(scene / "env"), "--resolution", "32",
            "--out", str(out)])
        assert code == 0
        manifest = json.loads((out / "manifest.json").read_text())
        assert len(manifest["artifacts"]) == 12
        assert all(e["role"] == "render" for e in manifest["artifacts"])
        img = read_pfm(out / "view_4.pfm").data
        assert np.isfinite(img).all()
        assert img.max() > 0  # +Z view sees the quad

    def test_prefilter_round_trip(self, capsys, tmp_path):
        env = EnvMap.from_function(
            lambda d: np.stack([0.3 + 0.2 * d[..., 2],
                                np.full(d.shape[:-1], 0.4),
                                0.3 - 0.1 * d[..., 0]], axis=-1), 16)
        write_pfm(tmp_path / "env.pfm", env.image)
        out = tmp_path / "pre"
        code, _, _ = run(capsys, [
            "prefilter", "--env", str(tmp_path / "env.pfm"), "--mips", "4",
            "--samples", "32", "--base-height", "16",
            "--lut-resolution", "16", "--lut-samples", "64",
            "--out", str(out)])
        assert code == 0
        pre = load_prefiltered(out)
        assert pre.n_mips == 4
        assert np.isfinite(pre.irradiance.data).all()


class TestDecomposeAndRecover:
    def test_decompose_oracle(self, capsys, scene, tmp_path):
        out = tmp_path / "dec"
        code, stdout, _ = run(capsys, [
            "decompose", "--mesh", str(scene / "quad.obj"),
            "--albedo", str(scene / "albedo.pfm"), "--rm", str(scene / "rm.pfm"),
            "--atlas-res", "32", "--view-res", "48", "--out", str(out)])
        assert code == 0
        assert "coverage" in stdout
        gt = read_pfm(scene / "albedo.pfm").data
        got = read_pfm(out / "albedo.pfm").data
        mask = read_png(out / "mask.png", apply_srgb=False).data[..., 0] > 0.5
        assert mask.any()
        assert np.abs(got[mask] - gt[mask]).mean() < 0.02
        report = json.loads((out / "report.json").read_text())
        assert report["n_decompose_calls"] == 1
        assert report["n_refine_calls"] == 2

    def test_recover_flags_constant_env(self, capsys, scene, tmp_path):
        out = tmp_path / "rec"
        code, _, _ = run(capsys, [
            "recover", "--mesh", str(scene / "quad.obj"),
            "--albedo", str(scene / "albedo.pfm"), "--rm", str(scene / "rm.pfm"),
            "--env", str(scene / "env"), "--iters", "2",
            "--atlas-res", "16", "--view-res", "16", "--out", str(out)])
        assert code == 0
        report = json.loads((out / "report.json").read_text())
        assert "roughness-non-identifiable" in report["flags"]

    def test_bad_texture_extension(self, capsys, scene, tmp_path):
        (tmp_path / "t.jpg").write_bytes(b"not an image")
        code, _, err = run(capsys, [
            "decompose", "--mesh", str(scene / "quad.obj"),
            "--albedo", str(tmp_path / "t.jpg"), "--rm", str(scene / "rm.pfm"),
            "--out", str(tmp_path / "x")])
        assert code == 1
        assert "unsupported texture format" in err

    def test_mesh_without_uvs(self, capsys, tmp_path):
        obj = tmp_path / "bare.obj"
        obj.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf 1//1 2//1 3//1\n")
        write_pfm(tmp_path / "t.pfm", np.full((8, 8, 3), 0.5))
        code, _, err = run(capsys, [
            "decompose", "--mesh", str(obj),
            "--albedo", str(tmp_path / "t.pfm"), "--rm", str(tmp_path / "t.pfm"),
            "--out", str(tmp_path / "x")])
        assert code == 1
        assert "[bake]" in err


class TestParser:
    def test_no_command_exits(self):
        with pytest.raises(SystemExit):
            main([])

    def test_unknown_command_exits(self):
        with pytest.raises(SystemExit):
            main(["transmogrify"])
