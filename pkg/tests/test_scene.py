"""scene モジュールのテスト"""

import math

import numpy as np
import pytest
from scipy import stats
from scipy.spatial.transform import Rotation

from cryosynth.density import DensityVolume
from cryosynth.errors import CapacityError, InputError
from cryosynth.formats import PickRecord
from cryosynth.geometry import ScaleParams
from cryosynth.params import ClassRule, OrientationSpec
from cryosynth.scene import (
    Placement,
    Quaternion,
    Scene,
    blend_placements,
    canonical,
    derive_scale_params,
    embed_context,
    euler_to_quaternion,
    grid_spacing,
    import_experimental_poses,
    place_particles,
    sample_orientation,
    sample_orientations,
    scene_from_manifest,
    scene_to_manifest,
    size_scale,
)


def min_distance(placements):
    pos = np.array([p.position for p in placements])
    d = np.linalg.norm(pos[:, None] - pos[None], axis=2)
    d[np.diag_indices(len(pos))] = np.inf
    return d.min()


def make_placements(positions, source="synthetic", confidences=None, radius=5.0, sid="a"):
    confidences = confidences or [1.0] * len(positions)
    return [
        Placement(sid, tuple(map(float, p)), Quaternion.identity(), radius, source, c)
        for p, c in zip(positions, confidences)
    ]


class TestQuaternion:
    """Quaternion のテスト"""

    def test_normalized(self):
        """生成時に単位長へ正規化"""
        q = Quaternion(2.0, 0.0, 0.0, 0.0)
        assert q.as_tuple() == (1.0, 0.0, 0.0, 0.0)
        q = Quaternion(1.0, 2.0, 3.0, 4.0)
        assert abs(q.norm - 1.0) <= 1e-12

    def test_zero(self):
        """ゼロ四元数は InputError"""
        with pytest.raises(InputError):
            Quaternion(0.0, 0.0, 0.0, 0.0)

    def test_product_matches_matrices(self):
        """積は回転行列の積に対応"""
        rng = np.random.default_rng(0)
        a = Quaternion.from_array(rng.normal(size=4))
        b = Quaternion.from_array(rng.normal(size=4))
        np.testing.assert_allclose((a * b).to_matrix(), a.to_matrix() @ b.to_matrix(), atol=1e-12)

    def test_conjugate_is_inverse(self):
        """共役との積は恒等"""
        q = Quaternion(0.3, -0.2, 0.9, 0.1)
        np.testing.assert_allclose((q * q.conjugate()).as_array(), [1.0, 0.0, 0.0, 0.0], atol=1e-12)

    def test_canonical_sign(self):
        """w >= 0 の符号を選ぶ"""
        q = canonical(Quaternion(-0.5, 0.5, 0.5, 0.5))
        assert q.as_tuple() == (0.5, -0.5, -0.5, -0.5)
        q = canonical(Quaternion(0.0, -1.0, 0.0, 0.0))
        assert q.as_tuple() == (0.0, 1.0, 0.0, 0.0)

    def test_rotate(self):
        """z 軸まわり 90 度で x -> y"""
        q = Quaternion(math.cos(math.pi / 4), 0.0, 0.0, math.sin(math.pi / 4))
        np.testing.assert_allclose(q.rotate([1.0, 0.0, 0.0]), [0.0, 1.0, 0.0], atol=1e-12)


class TestEuler:
    """euler_to_quaternion() のテスト"""

    def test_identity(self):
        """ゼロ角は恒等回転"""
        assert euler_to_quaternion(0.0, 0.0, 0.0).as_tuple() == pytest.approx((1.0, 0.0, 0.0, 0.0))

    def test_zyz_convention(self):
        """Rz(a) Ry(b) Rz(g) と一致"""
        q = euler_to_quaternion(30.0, 40.0, 50.0)
        expected = (
            Rotation.from_euler("z", 30, degrees=True)
            * Rotation.from_euler("y", 40, degrees=True)
            * Rotation.from_euler("z", 50, degrees=True)
        ).as_matrix()
        np.testing.assert_allclose(q.to_matrix(), expected, atol=1e-12)
        assert q.w >= 0

    def test_non_finite(self):
        """NaN 角は InputError"""
        with pytest.raises(InputError):
            euler_to_quaternion(float("nan"), 0.0, 0.0)


class TestOrientations:
    """sample_orientations() のテスト"""

    def test_uniform_isotropy(self):
        """一様分布では回転した z の平均がほぼ 0"""
        rng = np.random.default_rng(0)
        quats = sample_orientations(OrientationSpec("uniform"), rng, 100_000)
        np.testing.assert_allclose(np.linalg.norm(quats, axis=1), 1.0)
        assert np.all(quats[:, 0] >= 0)
        z = Rotation.from_quat(quats[:, [1, 2, 3, 0]]).apply([0.0, 0.0, 1.0])
        assert np.linalg.norm(z.mean(axis=0)) < 0.02

    def test_uniform_dodecahedral_bins(self):
        """一様分布: 回転した z と x を正十二面体の 12 面に振り分けると χ² 検定を通る"""
        phi = (1.0 + math.sqrt(5.0)) / 2.0
        normals = np.array(
            [
                p
                for a in (-1.0, 1.0)
                for b in (-phi, phi)
                for p in ((0.0, a, b), (a, b, 0.0), (b, 0.0, a))
            ]
        )
        normals /= np.linalg.norm(normals, axis=1)[:, None]
        critical = stats.chi2.ppf(0.999, df=11)
        n = 60_000
        quats = sample_orientations(OrientationSpec("uniform"), np.random.default_rng(6), n)
        rotations = Rotation.from_quat(quats[:, [1, 2, 3, 0]])
        for axis in ([0.0, 0.0, 1.0], [1.0, 0.0, 0.0]):
            counts = np.bincount(np.argmax(rotations.apply(axis) @ normals.T, axis=1), minlength=12)
            assert stats.chisquare(counts).statistic < critical

        spec = OrientationSpec("preferred", kappa=2.0, mu=(0.0, 0.0, 1.0))
        z = Rotation.from_quat(
            sample_orientations(spec, np.random.default_rng(7), n)[:, [1, 2, 3, 0]]
        ).apply([0.0, 0.0, 1.0])
        counts = np.bincount(np.argmax(z @ normals.T, axis=1), minlength=12)
        assert stats.chisquare(counts).statistic > critical

    def test_preferred_resultant_length(self):
        """vMF (kappa=10) の平均合成長は coth(10) - 1/10"""
        rng = np.random.default_rng(1)
        spec = OrientationSpec("preferred", kappa=10.0, mu=(0.0, 0.0, 1.0))
        quats = sample_orientations(spec, rng, 100_000)
        z = Rotation.from_quat(quats[:, [1, 2, 3, 0]]).apply([0.0, 0.0, 1.0])
        expected = 1.0 / math.tanh(10.0) - 0.1
        assert np.linalg.norm(z.mean(axis=0)) == pytest.approx(expected, rel=0.01)

    def test_preferred_axis(self):
        """平均方向は mu に向く"""
        rng = np.random.default_rng(2)
        spec = OrientationSpec("preferred", kappa=50.0, mu=(1.0, 0.0, 0.0))
        quats = sample_orientations(spec, rng, 10_000)
        z = Rotation.from_quat(quats[:, [1, 2, 3, 0]]).apply([0.0, 0.0, 1.0])
        mean = z.mean(axis=0)
        assert mean[0] / np.linalg.norm(mean) > 0.99

    def test_limited_tilt(self):
        """最大チルトは theta_max 以下"""
        rng = np.random.default_rng(3)
        spec = OrientationSpec("limited_tilt", theta_max=math.pi / 6)
        quats = sample_orientations(spec, rng, 10_000)
        z = Rotation.from_quat(quats[:, [1, 2, 3, 0]]).apply([0.0, 0.0, 1.0])
        tilt = np.arccos(np.clip(z[:, 2], -1.0, 1.0))
        assert tilt.max() <= math.pi / 6 + 1e-9

    def test_single_draw(self):
        """sample_orientation() は同じストリームの先頭と一致する単位クォータニオン"""
        spec = OrientationSpec("limited_tilt", theta_max=math.pi / 6)
        q = sample_orientation(spec, np.random.default_rng(4))
        assert isinstance(q, Quaternion)
        assert q.norm == pytest.approx(1.0)
        expected = sample_orientations(spec, np.random.default_rng(4), 1)[0]
        np.testing.assert_allclose(q.as_array(), expected)
        tilt = math.acos(min(1.0, q.rotate([0.0, 0.0, 1.0])[2]))
        assert tilt <= math.pi / 6 + 1e-9


class TestScale:
    """derive_scale_params() のテスト"""

    def test_ladder(self):
        """粒子サイズの段階"""
        assert size_scale(5.0) == 1.0
        assert size_scale(10.0) == 0.8
        assert size_scale(49.9) == 0.8
        assert size_scale(50.0) == 0.6
        assert size_scale(200.0) == 0.4
        assert size_scale(1000.0) == 0.4
        assert size_scale(1000.1) == 0.2

    def test_composite(self):
        """0.7 * s_size + 0.3 * s_density"""
        scale = derive_scale_params(100.0, 1e12)
        assert scale.s == pytest.approx(0.7 * 0.6 + 0.3 * 1e6 / 1e9)

    def test_clamped(self):
        """結果は [0.2, 1] に収まる"""
        assert derive_scale_params(5.0, 1.0).s == pytest.approx(1.0)
        assert derive_scale_params(5000.0, 1e30).s == pytest.approx(0.2)

    def test_invalid(self):
        """非正の入力は InputError"""
        with pytest.raises(InputError):
            derive_scale_params(0.0, 100.0)


class TestPlaceParticles:
    """place_particles() のテスト"""

    EXTENTS = (400.0, 400.0, 200.0)

    @pytest.mark.parametrize("strategy", ["uniform", "cluster", "grid"])
    def test_collision_free(self, strategy):
        """全ての中心間距離が 2R(1 - overlap) 以上"""
        scale = ScaleParams(0.6)
        placed = place_particles(
            40, 15.0, strategy, ClassRule(), scale, self.EXTENTS, np.random.default_rng(0)
        )
        assert len(placed) == round(40 * scale.placement_density)
        assert min_distance(placed) >= 2 * 15.0 * (1 - scale.overlap_threshold)
        pos = np.array([p.position for p in placed])
        assert np.all(pos >= 15.0) and np.all(pos <= np.array(self.EXTENTS) - 15.0)

    def test_fuzz(self):
        """ランダムな半径・個数 (最大 200)・配置戦略でも重なりなし"""
        rng = np.random.default_rng(1)
        for _ in range(50):
            radius = float(rng.uniform(10.0, 40.0))
            count = int(rng.integers(1, 201))
            scale = ScaleParams(float(rng.uniform(0.2, 1.0)))
            strategy = str(rng.choice(["uniform", "cluster", "grid"]))
            try:
                placed = place_particles(
                    count, radius, strategy, ClassRule(), scale, (500.0, 500.0, 300.0), rng
                )
            except CapacityError:
                continue
            if len(placed) > 1:
                pos = np.array([p.position for p in placed])
                assert np.all(pos >= radius - 1e-9)
                assert np.all(pos <= np.array((500.0, 500.0, 300.0)) - radius + 1e-9)
                assert min_distance(placed) >= 2 * radius * (1 - scale.overlap_threshold) - 1e-9

    def test_separated_rule(self):
        """separated ルールは同種間に min_separation を課す"""
        rule = ClassRule("separated", min_separation=60.0)
        placed = place_particles(
            10, 10.0, "uniform", rule, ScaleParams(1.0), self.EXTENTS, np.random.default_rng(2)
        )
        assert min_distance(placed) >= 60.0

    def test_cluster_rule(self):
        """cluster ルールは既存粒子の近くに置く"""
        rule = ClassRule("cluster", cluster_distance=40.0)
        placed = place_particles(
            10, 10.0, "uniform", rule, ScaleParams(1.0), self.EXTENTS, np.random.default_rng(3)
        )
        pos = np.array([p.position for p in placed])
        for i in range(1, len(pos)):
            nearest = np.linalg.norm(pos[:i] - pos[i], axis=1).min()
            assert nearest < 40.0 * 1.6

    def test_confined_rule(self, sphere_mesh):
        """confined ルールはメッシュ内に置く"""
        rule = ClassRule("confined", confinement_label=1)
        placed = place_particles(
            3, 2.0, "uniform", rule, ScaleParams(1.0), (40.0, 40.0, 40.0),
            np.random.default_rng(4), confinement=sphere_mesh,
        )
        pos = np.array([p.position for p in placed])
        assert np.all(np.linalg.norm(pos - 20.0, axis=1) < 10.0)

    def test_confined_without_mesh(self):
        """confined ルールでメッシュがなければ InputError"""
        rule = ClassRule("confined", confinement_label=1)
        with pytest.raises(InputError):
            place_particles(3, 2.0, "uniform", rule, ScaleParams(1.0), self.EXTENTS,
                            np.random.default_rng(0))

    def test_interface(self, sphere_mesh):
        """interface 戦略は表面から tolerance 以内"""
        placed = place_particles(
            5, 2.0, "interface", ClassRule(), ScaleParams(1.0), (40.0, 40.0, 40.0),
            np.random.default_rng(5), mesh=sphere_mesh, tolerance=3.0,
        )
        r = np.linalg.norm(np.array([p.position for p in placed]) - 20.0, axis=1)
        assert np.all(np.abs(r - 10.0) <= 3.5)

    def test_existing_respected(self):
        """既存の配置とも衝突しない"""
        scale = ScaleParams(1.0)
        first = place_particles(10, 20.0, "uniform", ClassRule(), scale, self.EXTENTS,
                                np.random.default_rng(6), structure_id="a")
        second = place_particles(10, 20.0, "uniform", ClassRule(), scale, self.EXTENTS,
                                 np.random.default_rng(7), existing=first, structure_id="b")
        assert min_distance(first + second) >= 2 * 20.0 * (1 - scale.overlap_threshold)

    def test_capacity_error(self):
        """空間が足りなければ CapacityError"""
        blocker = make_placements([(50.0, 50.0, 50.0)], radius=1000.0, sid="blocker")
        with pytest.raises(CapacityError) as exc_info:
            place_particles(
                10, 10.0, "uniform", ClassRule(), ScaleParams(1.0), (100.0, 100.0, 100.0),
                np.random.default_rng(8), existing=blocker, max_attempts=20,
            )
        assert exc_info.value.placed == 0
        assert exc_info.value.requested == 12

    def test_too_small_volume(self):
        """粒子が入らない体積は InputError"""
        with pytest.raises(InputError):
            place_particles(1, 30.0, "uniform", ClassRule(), ScaleParams(1.0), (50.0, 50.0, 50.0),
                            np.random.default_rng(0))

    def test_zero_count(self):
        """count=0 なら空"""
        assert place_particles(0, 5.0, "uniform", ClassRule(), ScaleParams(1.0), self.EXTENTS,
                               np.random.default_rng(0)) == []

    def test_deterministic(self):
        """同じシードなら同じ配置"""
        args = (20, 10.0, "cluster", ClassRule(), ScaleParams(0.8), self.EXTENTS)
        a = place_particles(*args, np.random.default_rng(9))
        b = place_particles(*args, np.random.default_rng(9))
        assert a == b

    def test_grid_spacing(self):
        """格子間隔は 2R(1 - overlap/2)"""
        scale = ScaleParams(1.0)
        assert grid_spacing(10.0, scale) == pytest.approx(20.0 * (1 - 0.05))


class TestExperimentalPoses:
    """import_experimental_poses() のテスト"""

    def test_lift(self):
        """ピクセル座標を A に換算し Euler 角を四元数へ"""
        picks = [PickRecord(10.0, 20.0, (0.0, 90.0, 0.0), 0.8), PickRecord(1.0, 2.0)]
        poses = import_experimental_poses(picks, 2.0, (5.0, 0.0, 0.0), default_z=50.0,
                                          structure_id="x", radius=7.0)
        assert poses[0].position == (25.0, 40.0, 50.0)
        assert poses[0].source == "experimental"
        assert poses[0].confidence == 0.8
        np.testing.assert_allclose(
            poses[0].orientation.rotate([0.0, 0.0, 1.0]), [1.0, 0.0, 0.0], atol=1e-12
        )
        assert poses[1].orientation.as_tuple() == (1.0, 0.0, 0.0, 0.0)

    def test_invalid_pixel_size(self):
        """pixel_size <= 0 は InputError"""
        with pytest.raises(InputError):
            import_experimental_poses([PickRecord(1.0, 1.0)], 0.0)


class TestBlend:
    """blend_placements() のテスト"""

    def _pools(self):
        exp = make_placements([(i * 20.0, 0.0, 0.0) for i in range(10)], "experimental",
                              [0.5 + 0.05 * i for i in range(10)])
        syn = make_placements([(i * 20.0, 100.0, 0.0) for i in range(10)])
        return exp, syn

    def test_weight_one_is_experimental(self):
        """w_exp=1 では実験ポーズのみ (信頼度がばらついていても)"""
        exp, syn = self._pools()
        out = blend_placements(exp, syn, 1.0, np.random.default_rng(0), count=5)
        assert [p.source for p in out] == ["experimental"] * 5

    def test_weight_one_smaller_pool(self):
        """w_exp=1 で実験プールが小さくても合成で補わない"""
        exp = make_placements([(i * 20.0, 0.0, 0.0) for i in range(2)], "experimental")
        syn = make_placements([(i * 20.0, 100.0, 0.0) for i in range(6)])
        out = blend_placements(exp, syn, 1.0, np.random.default_rng(1))
        assert [p.source for p in out] == ["experimental"] * 2

    def test_weight_zero_smaller_pool(self):
        """w_exp=0 で合成プールが小さくても実験で補わない"""
        exp = make_placements([(i * 20.0, 0.0, 0.0) for i in range(6)], "experimental")
        syn = make_placements([(i * 20.0, 100.0, 0.0) for i in range(2)])
        out = blend_placements(exp, syn, 0.0, np.random.default_rng(2))
        assert [p.source for p in out] == ["synthetic"] * 2

    def test_weight_zero_explicit_count(self):
        """count を多めに指定しても w_exp=0 は合成プールで止まる"""
        exp, syn = self._pools()
        out = blend_placements(exp, syn, 0.0, np.random.default_rng(3), count=12)
        assert [p.source for p in out] == ["synthetic"] * 10

    def test_weight_one_empty_experimental(self):
        """w_exp=1 で実験プールが空なら何も選ばない"""
        syn = make_placements([(i * 20.0, 100.0, 0.0) for i in range(3)])
        assert blend_placements([], syn, 1.0, np.random.default_rng(4)) == []

    def test_mixed_dry_pool(self):
        """0 < w_exp < 1 では尽きたプールの残りをもう一方が埋める"""
        exp = make_placements([(i * 20.0, 0.0, 0.0) for i in range(2)], "experimental")
        syn = make_placements([(i * 20.0, 100.0, 0.0) for i in range(6)])
        out = blend_placements(exp, syn, 0.5, np.random.default_rng(5), count=8)
        sources = [p.source for p in out]
        assert sources.count("experimental") == 2
        assert sources.count("synthetic") == 6

    def test_half_weight_fraction(self):
        """w_exp=0.5, 一様な信頼度, 10^4 スロットで実験の割合は 0.50 +/- 0.02"""
        n = 10_000
        grid = [(20.0 * (i % 100), 20.0 * (i // 100)) for i in range(n)]
        exp = make_placements([(x, y, 0.0) for x, y in grid], "experimental")
        syn = make_placements([(x, y, 100.0) for x, y in grid])
        out = blend_placements(exp, syn, 0.5, np.random.default_rng(6), count=n)
        assert len(out) == n
        fraction = sum(p.source == "experimental" for p in out) / n
        assert fraction == pytest.approx(0.5, abs=0.02)

    def test_confidence_order(self):
        """信頼度 0 の実験ポーズは最後に回る"""
        exp = make_placements(
            [(i * 20.0, 0.0, 0.0) for i in range(4)], "experimental", [0.0, 1.0, 1.0, 1.0]
        )
        out = blend_placements(exp, [], 1.0, np.random.default_rng(7))
        assert out[-1].position == (0.0, 0.0, 0.0)

    def test_no_replacement(self):
        """同じポーズは二度使わない"""
        exp, syn = self._pools()
        out = blend_placements(exp, syn, 0.5, np.random.default_rng(2), count=20)
        assert len(out) == 20
        assert len({p.position for p in out}) == 20

    def test_collisions_dropped(self):
        """既に選ばれたポーズと重なるものは捨てる"""
        exp = make_placements([(0.0, 0.0, 0.0)], "experimental", radius=10.0)
        syn = make_placements([(1.0, 0.0, 0.0)], radius=10.0)
        out = blend_placements(exp, syn, 0.5, np.random.default_rng(3), count=2)
        assert len(out) == 1

    def test_empty_pools(self):
        """両方空なら InputError"""
        with pytest.raises(InputError):
            blend_placements([], [], 0.5, np.random.default_rng(0))

    def test_weight_range(self):
        """w_exp は [0, 1]"""
        exp, syn = self._pools()
        with pytest.raises(InputError):
            blend_placements(exp, syn, 1.5, np.random.default_rng(0))


class TestContext:
    """embed_context() のテスト"""

    def _labels(self):
        grid = np.zeros((24, 24, 24))
        k = np.arange(24) - 11.5
        z, y, x = np.meshgrid(k, k, k, indexing="ij")
        grid[np.sqrt(x**2 + y**2 + z**2) < 7.0] = 2
        grid[:3, :3, :3] = 5
        return DensityVolume(grid, 2.0)

    def test_meshes_per_label(self):
        """ラベルごとに閉じたメッシュ"""
        meshes = embed_context(self._labels(), 0.0, np.random.default_rng(0), labels=[2])
        assert len(meshes) == 1
        assert meshes[0].label == 2
        assert meshes[0].euler_characteristic() == 2

    def test_perturbation_bounded(self):
        """頂点の変位は amplitude 以下"""
        labels = self._labels()
        flat = embed_context(labels, 0.0, np.random.default_rng(1), labels=[2])[0]
        moved = embed_context(labels, 2.0, np.random.default_rng(1), labels=[2])[0]
        shift = np.linalg.norm(moved.vertices - flat.vertices, axis=1)
        assert shift.max() <= 2.0 + 1e-9
        assert shift.max() > 0

    def test_missing_label_skipped(self, caplog):
        """存在しないラベルは警告して飛ばす"""
        meshes = embed_context(self._labels(), 0.0, np.random.default_rng(0), labels=[2, 9])
        assert [m.label for m in meshes] == [2]
        assert "label 9" in caplog.text

    def test_negative_amplitude(self):
        """負の振幅は InputError"""
        with pytest.raises(InputError):
            embed_context(self._labels(), -1.0, np.random.default_rng(0))


class TestManifest:
    """scene_to_manifest() / scene_from_manifest() のテスト"""

    def test_round_trip(self):
        """マニフェストから Scene を復元"""
        placements = tuple(make_placements([(10.0, 20.0, 30.0), (50.0, 20.0, 30.0)]))
        scene = Scene((100.0, 100.0, 60.0), placements, ScaleParams(0.6), seed=3, index=2)
        doc = scene_to_manifest(scene)
        assert doc["scene"] == 2
        assert doc["placements"][0]["quaternion"] == [1.0, 0.0, 0.0, 0.0]
        assert scene_from_manifest(doc) == scene

    def test_malformed(self):
        """欠けたキーは InputError"""
        with pytest.raises(InputError):
            scene_from_manifest({"extents": [1, 1, 1]})
