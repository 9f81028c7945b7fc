import numpy as np
import pytest
from PIL import Image

from micronet.data import DatasetError, blob_heatmaps, load_image, load_image_dir, synthetic_blobs


class TestBlobs:
    def test_shapes(self):
        x, y = synthetic_blobs(3, classes=4, size=8)
        assert x.shape == (12, 3, 8, 8) and x.dtype == np.float32
        assert y.tolist() == [0, 1, 2, 3] * 3

    def test_seeded(self):
        a, b = synthetic_blobs(2, seed=5)[0], synthetic_blobs(2, seed=5)[0]
        assert np.array_equal(a, b)
        assert not np.array_equal(a, synthetic_blobs(2, seed=6)[0])

    def test_empty(self):
        with pytest.raises(DatasetError):
            synthetic_blobs(0)

    def test_class_means_differ(self):
        x, y = synthetic_blobs(20, classes=3, size=16)
        means = np.stack([x[y == c].mean(0).ravel() for c in range(3)])
        assert min(np.linalg.norm(means[i] - means[j]) for i in range(3) for j in range(i)) > 0.5


class TestImages:
    def write(self, path, hw, color=(255, 0, 0)):
        Image.new("RGB", (hw[1], hw[0]), color).save(path)

    def test_exact_size(self, tmp_path):
        self.write(tmp_path / "a.png", (4, 6))
        x, resized = load_image(tmp_path / "a.png", (4, 6))
        assert not resized and x.shape == (3, 4, 6)
        assert x[0].min() == 1.0 and x[1].max() == 0.0

    def test_resize(self, tmp_path):
        self.write(tmp_path / "a.png", (10, 10))
        x, resized = load_image(tmp_path / "a.png", (4, 6))
        assert resized and x.shape == (3, 4, 6)

    def test_undecodable(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not an image")
        with pytest.raises(DatasetError):
            load_image(tmp_path / "bad.png", (4, 4))

    def test_directory(self, tmp_path):
        for cls, col in (("cat", (255, 0, 0)), ("dog", (0, 255, 0))):
            (tmp_path / cls).mkdir()
            for i in range(2):
                self.write(tmp_path / cls / f"{i}.png", (5, 5), col)
        x, y, names = load_image_dir(tmp_path, (5, 5))
        assert names == ["cat", "dog"] and y.tolist() == [0, 0, 1, 1] and x.shape == (4, 3, 5, 5)

    def test_empty_directory(self, tmp_path):
        with pytest.raises(DatasetError):
            load_image_dir(tmp_path, (4, 4))


def test_heatmaps_peak_once():
    h = blob_heatmaps(2, 3, (16, 12), seed=0)
    assert h.shape == (2, 3, 16, 12) and h.max() <= 1.0 and (h.max(axis=(2, 3)) > 0.3).all()
