import json
import os

import numpy as np
import plyfile
import pytest

from dispnet.dataio import (
    DatasetManifest,
    Transform,
    denormalize,
    load_manifest,
    normalize,
    read_ply,
    resample,
    write_ply,
    write_xyz,
)
from dispnet.errors import ContractError, DataIOError, ManifestError, PlyParseError

ASCII_SHORT = """ply
format ascii 1.0
element vertex 5
property float x
property float y
property float z
end_header
0 0 0
1 0 0
0 1 0
0 0 1
"""


@pytest.fixture()
def cloud():
    return np.random.default_rng(12).uniform(-2, 3, size=(40, 3))


def write_pair(base, name, partial, complete, labels=None):
    write_ply(os.path.join(base, 'partial', name), partial)
    write_ply(os.path.join(base, 'complete', name), complete, labels)


@pytest.mark.parametrize('binary', [True, False], ids=['binary', 'ascii'])
def test_ply_round_trip(tmp_path, cloud, binary):
    labels = np.arange(40) % 7
    path = str(tmp_path / 'cloud.ply')
    write_ply(path, cloud, labels, binary=binary)
    loaded = read_ply(path)
    if binary:
        np.testing.assert_array_equal(loaded.points, cloud)
    else:
        np.testing.assert_allclose(loaded.points, cloud, rtol=1e-6)
    np.testing.assert_array_equal(loaded.labels, labels)
    assert loaded.n_classes == 7


def test_ply_without_labels(tmp_path, cloud):
    path = str(tmp_path / 'cloud.ply')
    write_ply(path, cloud)
    assert read_ply(path).labels is None


def test_ply_vertex_count_mismatch(tmp_path):
    path = tmp_path / 'short.ply'
    path.write_text(ASCII_SHORT)
    with pytest.raises(PlyParseError) as err:
        read_ply(str(path))
    assert isinstance(err.value, DataIOError)
    assert str(path) in str(err.value)


def test_ply_float_class_rejected(tmp_path):
    vertex = np.zeros(3, dtype=[('x', 'f4'), ('y', 'f4'), ('z', 'f4'), ('class', 'f4')])
    path = str(tmp_path / 'float_class.ply')
    plyfile.PlyData([plyfile.PlyElement.describe(vertex, 'vertex')]).write(path)
    with pytest.raises(PlyParseError):
        read_ply(path)


def test_ply_integer_coordinates_rejected(tmp_path):
    vertex = np.zeros(3, dtype=[('x', 'i4'), ('y', 'i4'), ('z', 'i4')])
    path = str(tmp_path / 'ints.ply')
    plyfile.PlyData([plyfile.PlyElement.describe(vertex, 'vertex')]).write(path)
    with pytest.raises(PlyParseError):
        read_ply(path)


def test_ply_unknown_properties_skipped(tmp_path):
    vertex = np.zeros(2, dtype=[('x', 'f8'), ('y', 'f8'), ('z', 'f8'), ('red', 'u1')])
    path = str(tmp_path / 'colored.ply')
    plyfile.PlyData([plyfile.PlyElement.describe(vertex, 'vertex')]).write(path)
    assert read_ply(path).points.shape == (2, 3)


def test_missing_ply(tmp_path):
    with pytest.raises(DataIOError):
        read_ply(str(tmp_path / 'absent.ply'))


def test_write_ply_rejects_bad_labels(tmp_path, cloud):
    with pytest.raises(ContractError):
        write_ply(str(tmp_path / 'x.ply'), cloud, np.zeros(3))


def test_write_xyz(tmp_path):
    path = tmp_path / 'cloud.xyz'
    write_xyz(str(path), np.array([[0.5, 1.0, -2.0]]), np.array([3]))
    assert path.read_text().split() == ['0.5', '1', '-2', '3']


def test_normalize_fits_unit_cube(cloud):
    normalized, transform = normalize(cloud)
    assert normalized.min() >= -1.0 - 1e-12 and normalized.max() <= 1.0 + 1e-12
    spans = normalized.max(axis=0) - normalized.min(axis=0)
    assert spans.max() == pytest.approx(2.0)
    np.testing.assert_allclose(denormalize(normalized, transform), cloud, rtol=1e-12, atol=1e-12)


def test_normalize_degenerate():
    with pytest.raises(ContractError):
        normalize(np.ones((4, 3)))


def test_transform_apply_invert():
    transform = Transform(np.array([1.0, 2.0, 3.0]), 2.0)
    np.testing.assert_array_equal(transform.apply([[3.0, 2.0, 1.0]]), [[1.0, 0.0, -1.0]])
    np.testing.assert_array_equal(transform.invert([[1.0, 0.0, -1.0]]), [[3.0, 2.0, 1.0]])


def test_resample_short_cloud_keeps_every_point():
    keep = resample(np.zeros((1000, 3)), 2048, np.random.default_rng(0))
    assert keep.shape == (2048, )
    np.testing.assert_array_equal(keep[:1000], np.arange(1000))
    assert keep.max() < 1000


def test_resample_long_cloud_subsets():
    keep = resample(np.zeros((3000, 3)), 1024, np.random.default_rng(0))
    assert len(set(keep.tolist())) == 1024
    assert np.all(np.diff(keep) > 0)


def test_resample_is_seeded():
    a = resample(np.zeros((50, 3)), 20, np.random.default_rng(3))
    b = resample(np.zeros((50, 3)), 20, np.random.default_rng(3))
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(resample(np.zeros((5, 3)), 5, np.random.default_rng(0)), np.arange(5))


def test_manifest_pairs_and_resamples(tmp_path):
    rng = np.random.default_rng(1)
    base = tmp_path / 'train'
    write_pair(str(base), 'chair.ply', rng.normal(size=(1000, 3)), rng.normal(size=(3000, 3)),
               rng.integers(0, 4, size=3000))
    write_pair(str(base), 'desk.ply', rng.normal(size=(2048, 3)), rng.normal(size=(1024, 3)))
    manifest = load_manifest(str(tmp_path), 'train', 2048, 1024)
    assert [r.name for r in manifest.records] == ['chair', 'desk']

    sample, transform = manifest.load_sample(0, seed=5)
    assert sample.partial.shape == (2048, 3)
    assert sample.complete.shape == (1024, 3)
    assert sample.labels.shape == (1024, )
    assert np.abs(sample.partial).max() == pytest.approx(1.0)
    assert manifest.load_sample(1)[0].labels is None

    again, _ = manifest.load_sample(0, seed=5)
    np.testing.assert_array_equal(again.complete, sample.complete)
    np.testing.assert_allclose(transform.invert(sample.partial[:1000]), read_ply(manifest.records[0].partial).points)



def test_complete_cloud_can_leave_unit_cube(tmp_path):
    rng = np.random.default_rng(3)
    partial = rng.uniform(0.0, 1.0, size=(8, 3))
    write_pair(str(tmp_path / 'train'), 'half.ply', partial, np.vstack([partial, partial + [2.0, 0.0, 0.0]]))
    sample, transform = load_manifest(str(tmp_path), 'train', 8, 16).load_sample(0)
    assert np.abs(sample.partial).max() == pytest.approx(1.0)
    assert np.abs(sample.complete).max() > 1.5
    np.testing.assert_allclose(np.sort(transform.invert(sample.complete)[:, 0]),
                               np.sort(np.concatenate([partial[:, 0], partial[:, 0] + 2.0])))

def test_manifest_prefers_label_directory(tmp_path):
    rng = np.random.default_rng(2)
    base = tmp_path / 'test'
    complete = rng.normal(size=(16, 3))
    write_pair(str(base), 'room.ply', rng.normal(size=(8, 3)), complete, np.zeros(16, dtype=int))
    write_ply(str(base / 'labels' / 'room.ply'), complete, np.full(16, 5))
    sample = next(load_manifest(str(tmp_path), 'test', 8, 16).samples())
    assert set(sample.labels.tolist()) == {5}


def test_empty_split(tmp_path):
    manifest = load_manifest(str(tmp_path), 'test', 8, 16)
    assert len(manifest) == 0
    assert list(manifest.samples()) == []


def test_orphan_file(tmp_path):
    write_ply(str(tmp_path / 'train' / 'partial' / 'lonely.ply'), np.random.default_rng(0).normal(size=(4, 3)))
    with pytest.raises(ManifestError) as err:
        load_manifest(str(tmp_path), 'train', 4, 4)
    assert 'lonely.ply' in str(err.value)


def test_missing_root(tmp_path):
    with pytest.raises(DataIOError):
        load_manifest(str(tmp_path / 'nowhere'), 'train', 4, 4)


def test_manifest_save(tmp_path):
    manifest = DatasetManifest(root=str(tmp_path), split='train', input_points=4, output_points=8)
    path = tmp_path / 'manifest.json'
    manifest.save(str(path))
    assert json.loads(path.read_text())['output_points'] == 8
