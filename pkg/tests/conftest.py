"""cryosynth テスト用共通フィクスチャ"""

import argparse
import json

import numpy as np
import pytest

from cryosynth.formats import parse_atomic_model


def pdb_line(serial, x, y, z, bfactor=100.0, element="C", record="ATOM"):
    """PDB v3.3 の固定カラム形式で 1 行を生成"""
    name = f" {element:<3}"
    return (
        f"{record:<6}{serial:>5} {name:<4} ALA A{serial:>4}    "
        f"{x:8.3f}{y:8.3f}{z:8.3f}{1.0:6.2f}{bfactor:6.2f}          {element:>2}"
    )


def lattice_pdb(n=3, spacing=1.5, center=(10.0, 10.0, 10.0), bfactors=None):
    """n^3 個の炭素原子を格子状に並べた PDB テキスト"""
    lines = []
    offsets = (np.arange(n) - (n - 1) / 2.0) * spacing
    serial = 0
    for dz in offsets:
        for dy in offsets:
            for dx in offsets:
                b = 100.0 if bfactors is None else bfactors[serial % len(bfactors)]
                serial += 1
                lines.append(
                    pdb_line(serial, center[0] + dx, center[1] + dy, center[2] + dz, b)
                )
    return "\n".join(["HEADER    TEST LATTICE", *lines, "END"]) + "\n"


@pytest.fixture
def pdb_text():
    """3x3x3 の炭素格子"""
    return lattice_pdb()


@pytest.fixture
def atomic_model(pdb_text):
    return parse_atomic_model(pdb_text, "lattice")


@pytest.fixture
def star_text():
    """Euler 角と FOM を含むピックテーブル"""
    return (
        "# picks\n"
        "data_\n"
        "\n"
        "loop_\n"
        "_rlnCoordinateX #1\n"
        "_rlnCoordinateY #2\n"
        "_rlnAngleRot #3\n"
        "_rlnAngleTilt #4\n"
        "_rlnAnglePsi #5\n"
        "_rlnAutopickFigureOfMerit #6\n"
        "10.0 12.0 0.0 90.0 0.0 0.9\n"
        "20.5 8.25 45.0 0.0 0.0 1.7\n"
        "30.0 30.0 10.0 20.0 30.0 -0.2\n"
    )


def base_config(model_path="model.pdb", count=3):
    """小さなシーン設定 (32x32 px, 2 A/px)"""
    return {
        "structures": [{"id": "lattice", "path": model_path, "count": count}],
        "extents": [64.0, 64.0, 32.0],
        "resolution": 4.0,
        "micrograph": {"size": [32, 32]},
        "scenes": 1,
        "seed": 7,
    }


@pytest.fixture
def write_config(tmp_path):
    """tmp_path に PDB と cryosynth.json を書き出して設定パスを返すファクトリ"""

    def _write(update=None, name="cryosynth.json", count=3):
        (tmp_path / "model.pdb").write_text(lattice_pdb())
        doc = base_config(count=count)
        for key, value in (update or {}).items():
            doc[key] = value
        path = tmp_path / name
        path.write_text(json.dumps(doc))
        return path

    return _write


@pytest.fixture
def mock_args():
    """CLI 引数のモック"""
    return argparse.Namespace(
        config=None,
        seed=None,
        out=".",
        threads=1,
        debug=False,
        man=False,
    )


def icosphere(radius=10.0, center=(0.0, 0.0, 0.0)):
    """正二十面体 (閉じた多様体, 外向き)"""
    t = (1.0 + 5.0**0.5) / 2.0
    vertices = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    vertices = vertices / np.linalg.norm(vertices, axis=1)[:, None] * radius
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    return vertices + np.asarray(center), faces


def subdivide(vertices, faces, radius, center=(0.0, 0.0, 0.0)):
    """各三角形を 4 分割して球面に射影"""
    center = np.asarray(center, dtype=np.float64)
    vertices = [tuple(v) for v in vertices]
    cache = {}

    def midpoint(a, b):
        key = (min(a, b), max(a, b))
        if key not in cache:
            m = (np.asarray(vertices[a]) + np.asarray(vertices[b])) / 2.0 - center
            m = m / np.linalg.norm(m) * radius + center
            vertices.append(tuple(m))
            cache[key] = len(vertices) - 1
        return cache[key]

    out = []
    for a, b, c in faces:
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        out.extend([[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]])
    return np.array(vertices), np.array(out)


@pytest.fixture
def sphere_mesh():
    """半径 10 A, 320 面の球メッシュ"""
    from cryosynth.geometry import TriangleMesh

    vertices, faces = icosphere(10.0, (20.0, 20.0, 20.0))
    for _ in range(2):
        vertices, faces = subdivide(vertices, faces, 10.0, (20.0, 20.0, 20.0))
    return TriangleMesh.from_arrays(vertices, faces, label=1)
