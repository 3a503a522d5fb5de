"""pipeline モジュールのテスト"""

import hashlib
import json

import numpy as np
import pytest

from cryosynth.errors import InputError, InvariantError, StageError
from cryosynth.formats import load_scene_config, load_volume
from cryosynth.imaging import render_mask
from cryosynth.pipeline import (
    build_library,
    compose_scene,
    load_models,
    prepare_run,
    run_pipeline,
    scene_ice,
    scene_scale,
    stage,
    thickness_summary,
)


def digests(manifest):
    return [(o.path, o.digest) for o in manifest.outputs]


class TestStage:
    """stage() のテスト"""

    def test_timing(self):
        """成功時は所要時間を記録"""
        timings = {}
        with stage("library", timings):
            pass
        assert "library" in timings
        assert timings["library"] >= 0

    def test_data_error(self):
        """データエラーは StageError で包み終了コード 3"""
        with pytest.raises(StageError) as e:
            with stage("scene_000/placement"):
                raise InputError("bad")
        assert e.value.stage == "scene_000/placement"
        assert isinstance(e.value.cause, InputError)
        assert e.value.exit_code == 3

    def test_unexpected_error(self):
        """想定外の例外は InvariantError 扱いで終了コード 4"""
        with pytest.raises(StageError) as e:
            with stage("projection"):
                raise ValueError("boom")
        assert isinstance(e.value.cause, InvariantError)
        assert e.value.exit_code == 4

    def test_nested(self):
        """内側の StageError はそのまま伝わる"""
        with pytest.raises(StageError) as e:
            with stage("outer"):
                with stage("inner"):
                    raise InputError("bad")
        assert e.value.stage == "inner"

    def test_logs(self, caplog):
        """START / DONE を記録"""
        caplog.set_level("INFO", logger="cryosynth")
        with stage("ice"):
            pass
        assert "ice: START" in caplog.text
        assert "ice: DONE" in caplog.text


class TestLibrary:
    """build_library() のテスト"""

    def test_entries(self, write_config):
        """構造ごとに密度・メッシュ・半径"""
        config = load_scene_config(write_config())
        models = load_models(config)
        library = build_library(config, scene_scale(config, models), models)
        entry = library["lattice"]
        assert entry.volume.voxel_size == 2.0
        assert entry.volume.grid.max() > 0
        assert entry.radius == pytest.approx(entry.particle_size)
        assert entry.particle_size == pytest.approx(1.5 * np.sqrt(3) + 1.70)

    def test_models_centered(self, write_config):
        """モデルは重心が原点"""
        config = load_scene_config(write_config())
        model = load_models(config)["lattice"]
        np.testing.assert_allclose(model.positions.mean(axis=0), 0.0, atol=1e-6)

    def test_radius_override(self, write_config):
        """radius 指定は粒子半径を上書き"""
        path = write_config(
            {"structures": [{"id": "lattice", "path": "model.pdb", "radius": 6.0}]}
        )
        config = load_scene_config(path)
        models = load_models(config)
        assert build_library(config, scene_scale(config, models), models)["lattice"].radius == 6.0


class TestCompose:
    """compose_scene() のテスト"""

    def test_empty_scene(self, write_config):
        """count 0 なら空シーンで全ゼロのマスク"""
        config = load_scene_config(write_config(count=0))
        ctx = prepare_run(config)
        scene = compose_scene(ctx, 0)
        assert scene.placements == ()
        mask = render_mask(scene, config.micrograph.size, config.pixel_size)
        assert not mask.pixels.any()

    def test_inside_extents(self, write_config):
        """粒子は半径ぶん内側に収まる"""
        config = load_scene_config(write_config(count=4))
        ctx = prepare_run(config)
        scene = compose_scene(ctx, 0)
        assert len(scene.placements) == round(4 * ctx.scale.placement_density)
        for p in scene.placements:
            for c, e in zip(p.position, config.extents):
                assert p.radius <= c <= e - p.radius

    def test_experimental_picks(self, write_config, star_text, tmp_path):
        """ピック表の姿勢を experimental として取り込む"""
        (tmp_path / "picks.star").write_text(star_text)
        path = write_config(
            {
                "structures": [
                    {"id": "lattice", "path": "model.pdb", "count": 0, "picks": "picks.star",
                     "weight": 1.0}
                ]
            }
        )
        scene = compose_scene(prepare_run(load_scene_config(path)), 0)
        assert len(scene.placements) == 3
        assert {p.source for p in scene.placements} == {"experimental"}
        assert {p.position[2] for p in scene.placements} == {16.0}

    def test_scene_streams(self, write_config):
        """シーンごとに独立したストリーム"""
        ctx = prepare_run(load_scene_config(write_config()))
        a = compose_scene(ctx, 0)
        b = compose_scene(ctx, 0)
        c = compose_scene(ctx, 1)
        assert a.placements == b.placements
        assert a.placements != c.placements

    def test_ice(self, write_config):
        """氷は micrograph と同じ footprint"""
        ctx = prepare_run(load_scene_config(write_config()))
        ice = scene_ice(ctx, 0)
        assert ice.footprint == (32, 32)
        summary = thickness_summary(ice)
        assert summary["min"] <= summary["median"] <= summary["max"]


class TestRunPipeline:
    """run_pipeline() のテスト"""

    def test_outputs(self, write_config, tmp_path):
        """シーンごとのファイルと manifest"""
        config = load_scene_config(write_config())
        out = tmp_path / "out"
        manifest = run_pipeline(config, out)
        paths = {o.path for o in manifest.outputs}
        for name in ("placements.json", "clean.mrc", "ctf.mrc", "noisy.mrc", "mask.mrc",
                     "ice_thickness.mrc"):
            assert f"scene_000/{name}" in paths
        for o in manifest.outputs:
            data = (out / o.path).read_bytes()
            assert hashlib.sha256(data).hexdigest() == o.digest
            assert len(data) == o.size
        doc = json.loads((out / "manifest.json").read_text())
        assert doc["seed"] == 7
        assert doc["digest_algorithm"] == "sha256"
        assert len(doc["outputs"]) == len(manifest.outputs)

    def test_micrograph_shapes(self, write_config, tmp_path):
        """出力画像は (ny, nx) でピクセルサイズ 2 A"""
        config = load_scene_config(write_config())
        run_pipeline(config, tmp_path / "out")
        header, grid = load_volume(tmp_path / "out" / "scene_000" / "noisy.mrc")
        assert grid.shape == (1, 32, 32)
        assert header.voxel_size[0] == pytest.approx(2.0)
        placements = json.loads((tmp_path / "out" / "scene_000" / "placements.json").read_text())
        scale = scene_scale(config, load_models(config))
        assert len(placements["placements"]) == round(3 * scale.placement_density)

    def test_previews(self, write_config, tmp_path):
        """previews を有効にすると PNG も書く"""
        path = write_config({"micrograph": {"size": [32, 32], "previews": True}})
        manifest = run_pipeline(load_scene_config(path), tmp_path / "out")
        assert "scene_000/noisy.png" in {o.path for o in manifest.outputs}

    def test_deterministic(self, write_config, tmp_path):
        """同じシードなら同じダイジェスト"""
        config = load_scene_config(write_config())
        a = run_pipeline(config, tmp_path / "a")
        b = run_pipeline(config, tmp_path / "b")
        assert digests(a) == digests(b)

    def test_thread_count_independent(self, write_config, tmp_path):
        """スレッド数によらず同じ出力"""
        path = write_config({"scenes": 2})
        config = load_scene_config(path)
        single = run_pipeline(config, tmp_path / "one", threads=1)
        double = run_pipeline(config, tmp_path / "two", threads=2)
        assert digests(single) == digests(double)
        assert any(p.startswith("scene_001/") for p, _ in digests(double))

    def test_seed_override(self, write_config, tmp_path):
        """seed 引数は設定より優先"""
        config = load_scene_config(write_config())
        a = dict(digests(run_pipeline(config, tmp_path / "a")))
        b = run_pipeline(config, tmp_path / "b", seed=8)
        assert b.seed == 8
        assert dict(digests(b))["scene_000/noisy.mrc"] != a["scene_000/noisy.mrc"]

    def test_failure_leaves_nothing(self, write_config, tmp_path):
        """失敗時は出力先も一時ディレクトリも残さない"""
        path = write_config(
            {"structures": [{"id": "lattice", "path": "model.pdb", "count": 3, "radius": 100.0}]}
        )
        out = tmp_path / "out"
        with pytest.raises(StageError) as e:
            run_pipeline(load_scene_config(path), out)
        assert e.value.stage == "scene_000/placement"
        assert e.value.exit_code == 3
        assert not out.exists()
        assert not [p for p in tmp_path.iterdir() if p.name.startswith(".out-")]
