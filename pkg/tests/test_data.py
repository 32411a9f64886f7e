import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellsearch import data as D
from cellsearch import ops
from cellsearch import tensor as T
from cellsearch.data import DataFormatError, ImageBatch
from cellsearch.optim import SGD
from cellsearch.tensor import Tensor


def random_records(rng, n, classes=10):
    return rng.integers(0, 256, size=(n, 3, 32, 32), dtype=np.uint8), rng.integers(0, classes, size=n)


def test_full_batch_file_size(tmp_path, rng):
    pixels, labels = random_records(rng, 10000)
    path = tmp_path / "data_batch_1.bin"
    D.write_cifar_file(path, pixels, labels)
    assert path.stat().st_size == 10000 * 3073
    got_pixels, got_labels = D.read_cifar_file(path, expected_records=10000)
    np.testing.assert_array_equal(got_pixels, pixels)
    np.testing.assert_array_equal(got_labels, labels)


def test_zero_pixels_normalize_to_negative_mean_over_std(tmp_path):
    path = tmp_path / "one.bin"
    D.write_cifar_file(path, np.zeros((1, 3, 32, 32)), [3])
    split = D.load_cifar_binary(path)
    expected = -np.array(D.CIFAR10_MEAN) / np.array(D.CIFAR10_STD)
    for c in range(3):
        np.testing.assert_allclose(split.images[0, c], expected[c], rtol=0, atol=1e-15)
    assert split.labels.tolist() == [3] and split.num_classes == 10


@pytest.mark.parametrize("variant,classes", [("cifar10", 10), ("cifar100", 100)])
def test_writer_reader_round_trip(tmp_path, rng, variant, classes):
    data = D.synthetic_dataset(0, 12, 4, size=32)
    pixels = D.synthetic_to_uint8(data)
    path = tmp_path / "fixture.bin"
    D.write_cifar_file(path, pixels, data.labels, variant)
    assert path.stat().st_size == 12 * (3072 + (1 if variant == "cifar10" else 2))
    got, labels = D.read_cifar_file(path, variant)
    np.testing.assert_array_equal(got, pixels)
    np.testing.assert_array_equal(labels, data.labels)
    split = D.load_cifar_binary(path, variant)
    assert split.num_classes == classes and split.source == variant
    assert np.all(np.isfinite(split.images))


def test_wrong_size_reports_bytes(tmp_path, rng):
    path = tmp_path / "short.bin"
    pixels, labels = random_records(rng, 3)
    D.write_cifar_file(path, pixels, labels)
    with pytest.raises(DataFormatError, match=f"expected {10000 * 3073} bytes, found {3 * 3073}"):
        D.read_cifar_file(path, expected_records=10000)
    path.write_bytes(path.read_bytes()[:-5])
    with pytest.raises(DataFormatError, match="not a multiple"):
        D.read_cifar_file(path)


def test_bad_label_byte(tmp_path, rng):
    path = tmp_path / "bad.bin"
    pixels, _ = random_records(rng, 2)
    D.write_cifar_file(path, pixels, [1, 10])
    with pytest.raises(DataFormatError, match="label"):
        D.load_cifar_binary(path)


def test_directory_load(tmp_path, rng, monkeypatch):
    monkeypatch.setattr(D, "RECORDS_PER_BATCH", 5)
    for name in [f"data_batch_{i}.bin" for i in range(1, 6)] + ["test_batch.bin"]:
        D.write_cifar_file(tmp_path / name, *random_records(rng, 5))
    train = D.load_cifar_binary(tmp_path, train=True)
    test = D.load_cifar_binary(tmp_path, train=False)
    assert len(train) == 25 and len(test) == 5
    assert train.images.shape == (25, 3, 32, 32)
    assert (train.role, test.role) == ("eval-train", "test")
    D.write_cifar_file(tmp_path / "test_batch.bin", *random_records(rng, 4))
    with pytest.raises(DataFormatError):
        D.load_cifar_binary(tmp_path, train=False)


def test_search_halves_are_disjoint():
    data = D.synthetic_dataset(0, 37, 3, size=8)
    a, b = D.search_halves(data)
    assert set(a.indices).isdisjoint(b.indices)
    assert sorted(np.concatenate([a.indices, b.indices])) == list(range(37))
    assert (a.role, b.role) == ("search-train", "search-val")


def test_synthetic_determinism_and_balance():
    a = D.synthetic_dataset(9, 400, 4, size=16)
    b = D.synthetic_dataset(9, 400, 4, size=16)
    np.testing.assert_array_equal(a.images, b.images)
    np.testing.assert_array_equal(a.labels, b.labels)
    assert not np.array_equal(a.images, D.synthetic_dataset(10, 400, 4, size=16).images)
    counts = np.bincount(a.labels, minlength=4)
    assert np.all(np.abs(counts - 100) <= 10)
    assert a.images.shape == (400, 3, 16, 16) and np.all(np.isfinite(a.images))
    with pytest.raises(ValueError):
        D.synthetic_dataset(0, 10, 2, size=4)


class Baseline(ops.Module):
    def __init__(self, rng):
        super().__init__()
        self.c1 = ops.Conv2d(ops.Conv2dSpec(3, 8, 3, 1, 1, bias=True), rng)
        self.c2 = ops.Conv2d(ops.Conv2dSpec(8, 8, 3, 1, 1, bias=True), rng)
        # flattened head: the classes differ only in blob position
        self.w = Tensor(rng.normal(scale=0.02, size=(8 * 8 * 8, 2)), requires_grad=True)
        self.b = Tensor(np.zeros(2), requires_grad=True)

    def forward(self, x):
        x = ops.max_pool2d(T.relu(self.c1(x)), 2, 2, 0)
        x = T.relu(self.c2(x))
        return ops.linear(T.reshape(x, (x.shape[0], -1)), self.w, self.b)


def test_two_class_baseline_learns():
    data = D.synthetic_dataset(1, 200, 2, size=16)
    rng = np.random.default_rng(0)
    net = Baseline(rng)
    opt = SGD(net.parameters(), lr=0.05, momentum=0.9, weight_decay=0.0)
    best = 0.0
    for _ in range(5):
        for b in data.batches(20, rng):
            opt.zero_grad()
            T.backward(T.cross_entropy(net(Tensor(b.images)), b.labels))
            opt.step()
        with T.no_grad():
            best = max(best, float((net(Tensor(data.images)).data.argmax(1) == data.labels).mean()))
    assert best >= 0.95


def test_cutout_zero_length_is_identity(rng):
    x = rng.normal(size=(3, 3, 8, 8))
    assert D.cutout(x, rng, 0) is x


def test_cutout_square_area():
    x = np.ones((200, 3, 32, 32))
    out = D.cutout(x, np.random.default_rng(0), 16)
    zeros = (out[:, 0] == 0).sum(axis=(1, 2))
    assert zeros.max() == 256 and zeros.min() >= 64
    assert np.all((out == 0).sum(axis=(2, 3)) == zeros[:, None])


def test_cutout_centered_inside(monkeypatch):
    class Fixed:
        def integers(self, lo, hi, size):
            return np.full(size, 16)

    out = D.cutout(np.ones((1, 3, 32, 32)), Fixed(), 16)
    assert np.all((out == 0).sum(axis=(2, 3)) == 256)
    assert not out[0, :, 8:24, 8:24].any()


def test_double_flip_is_identity(rng):
    x = rng.normal(size=(4, 3, 5, 5))
    np.testing.assert_array_equal(D.hflip(D.hflip(x, rng, 1.0), rng, 1.0), x)
    np.testing.assert_array_equal(D.hflip(x, rng, 1.0), x[..., ::-1])


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 4), st.sampled_from([0.0, 0.5, 1.0]), st.integers(0, 16))
def test_augment_preserves_shape_and_labels(seed, pad, flip_p, length):
    rng = np.random.default_rng(seed)
    batch = ImageBatch(rng.normal(size=(5, 3, 16, 16)), rng.integers(0, 4, size=5))
    out = D.augment(batch, rng, pad, flip_p, length)
    assert out.images.shape == batch.images.shape
    np.testing.assert_array_equal(out.labels, batch.labels)
    assert np.all(np.isfinite(out.images))


def test_crop_without_padding_is_identity(rng):
    x = rng.normal(size=(2, 3, 6, 6))
    np.testing.assert_array_equal(D.random_crop(x, rng, 0), x)


def test_batches_cover_split(rng):
    data = D.synthetic_dataset(0, 50, 2, size=8)
    sizes = [len(b) for b in data.batches(16, rng)]
    assert sizes == [16, 16, 16, 2]
    assert [len(b) for b in data.batches(16, rng, drop_last=True)] == [16, 16, 16]
