import gzip
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from editable.data_io import (
    Dataset,
    FormatError,
    blob_twins,
    gen_blobs,
    load_checkpoint,
    load_cifar_binary,
    load_idx,
    load_matrix,
    load_model_checkpoint,
    save_checkpoint,
    save_matrix,
    save_model_checkpoint,
    split,
    split_indices,
    standardize,
)
from editable.editors import EditorConfig
from editable.models import ModelConfig, init_params, select_editable


def idx_bytes(magic, dims, payload):
    return struct.pack(">I", magic) + struct.pack(f">{len(dims)}I", *dims) + bytes(payload)


@pytest.fixture
def mnist_like(tmp_path):
    rng = np.random.default_rng(0)
    pixels = rng.integers(0, 256, size=(3, 28, 28), dtype=np.uint8)
    labels = np.array([7, 0, 9], dtype=np.uint8)
    img = tmp_path / "img.idx"
    lab = tmp_path / "lab.idx"
    img.write_bytes(idx_bytes(0x803, (3, 28, 28), pixels.tobytes()))
    lab.write_bytes(idx_bytes(0x801, (3,), labels.tobytes()))
    return img, lab, pixels, labels


# -- synthetic data --------------------------------------------------------------

def test_gen_blobs_deterministic_and_balanced():
    a = gen_blobs(10, 500, 20, seed=4)
    b = gen_blobs(10, 500, 20, seed=4)
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    assert len(a) == 5000 and a.dim == 20
    assert np.bincount(a.labels).tolist() == [500] * 10
    assert not np.array_equal(a.features, gen_blobs(10, 500, 20, seed=5).features)


def test_tight_blobs_are_linearly_separable():
    data = gen_blobs(5, 40, 8, spread=1e-3, seed=1)
    # least-squares one-vs-rest linear classifier
    X = np.hstack([data.features, np.ones((len(data), 1))])
    W, *_ = np.linalg.lstsq(X, np.eye(5)[data.labels], rcond=None)
    assert np.mean(np.argmax(X @ W, axis=1) == data.labels) == 1.0


def test_dataset_validation_and_immutability():
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), [0, 3], 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((0, 3)), [], 3)
    with pytest.raises(ValueError):
        Dataset(np.zeros((2, 3)), [0], 3)
    d = Dataset(np.zeros((2, 3)), [0, 1], 2)
    with pytest.raises(ValueError):
        d.features[0, 0] = 1.0
    with pytest.raises(ValueError):
        gen_blobs(1, 5, 2)


@settings(max_examples=40, deadline=None)
@given(st.integers(2, 200), st.data(), st.integers(0, 2**31 - 1))
def test_split_disjoint_and_exhaustive(n, data, seed):
    first = data.draw(st.integers(1, n - 1))
    a, b = split_indices(n, first, seed)
    assert len(a) == first
    assert sorted(np.concatenate([a, b]).tolist()) == list(range(n))
    a2, _ = split_indices(n, first, seed)
    assert np.array_equal(a, a2)


def test_split_and_standardize():
    data = gen_blobs(3, 30, 4, seed=0)
    train, test = split(data, 60, seed=1)
    assert len(train) == 60 and len(test) == 30
    with pytest.raises(ValueError):
        split(data, 90, seed=1)
    s_train, s_test = standardize(train, test)
    assert np.allclose(s_train.features.mean(axis=0), 0, atol=1e-12)
    assert np.allclose(s_train.features.std(axis=0), 1)
    mu, sd = train.features.mean(axis=0), train.features.std(axis=0)
    assert np.allclose(s_test.features, (test.features - mu) / sd)


def test_blob_twins_share_latent():
    twins = blob_twins(4, 10, 6, noise=0.0, seed=2)
    assert all(np.array_equal(a, b) for a, b, _ in twins)
    noisy = blob_twins(4, 10, 6, noise=0.1, seed=2)
    gaps = [np.linalg.norm(a - b) for a, b, _ in noisy]
    assert 0 < np.mean(gaps) < 1.0


# -- IDX and CIFAR -----------------------------------------------------------------

def test_load_idx(mnist_like, tmp_path):
    img, lab, pixels, labels = mnist_like
    data = load_idx(img, lab)
    assert data.features.shape == (3, 784)
    assert data.labels.tolist() == [7, 0, 9]
    assert np.allclose(data.features[1], pixels[1].ravel() / 255.0)
    gz = tmp_path / "img.idx.gz"
    gz.write_bytes(gzip.compress(img.read_bytes()))
    assert np.array_equal(load_idx(gz, lab).features, data.features)


def test_idx_wrong_magic(mnist_like):
    img, lab, _, _ = mnist_like
    with pytest.raises(FormatError) as err:
        load_idx(lab, lab)
    assert err.value.offset == 0
    with pytest.raises(FormatError):
        load_idx(img, img)


def test_idx_truncated_and_trailing(mnist_like, tmp_path):
    img, lab, _, _ = mnist_like
    raw = img.read_bytes()
    short = tmp_path / "short.idx"
    short.write_bytes(raw[:-5])
    with pytest.raises(FormatError) as err:
        load_idx(short, lab)
    assert err.value.offset == len(raw) - 5
    short.write_bytes(raw[:6])
    with pytest.raises(FormatError, match="dimension"):
        load_idx(short, lab)
    long = tmp_path / "long.idx"
    long.write_bytes(raw + b"\x00")
    with pytest.raises(FormatError) as err:
        load_idx(long, lab)
    assert err.value.offset == len(raw)


def test_cifar_records(tmp_path):
    rng = np.random.default_rng(0)
    recs = [bytes([9]) + rng.integers(0, 256, 3072, dtype=np.uint8).tobytes(),
            bytes([2]) + bytes(3072)]
    one = tmp_path / "one.bin"
    one.write_bytes(recs[0])
    data = load_cifar_binary([one])
    assert len(data) == 1 and data.labels.tolist() == [9] and data.dim == 3072
    assert data.features.max() <= 1.0
    two = tmp_path / "two.bin"
    two.write_bytes(recs[1])
    assert load_cifar_binary([one, two]).labels.tolist() == [9, 2]
    bad = tmp_path / "bad.bin"
    bad.write_bytes(recs[0] + b"\x01")
    with pytest.raises(FormatError):
        load_cifar_binary([bad])
    bad.write_bytes(bytes([10]) + bytes(3072))
    with pytest.raises(FormatError, match="label"):
        load_cifar_binary([bad])


def test_cifar_batch_size_arithmetic():
    assert 10000 * 3073 == 30_730_000


# -- checkpoints -------------------------------------------------------------------

tensor_strategy = st.builds(
    lambda seed, shape, dt: np.random.default_rng(seed).normal(size=shape).astype(dt),
    st.integers(0, 2**31 - 1),
    st.lists(st.integers(0, 4), min_size=0, max_size=3).map(tuple),
    st.sampled_from(["float32", "float64"]),
)


@settings(max_examples=40, deadline=None)
@given(st.dictionaries(st.text(min_size=1, max_size=12), tensor_strategy, max_size=5), st.text(max_size=40))
def test_checkpoint_round_trip_is_bit_exact(tmp_path_factory, tensors, config):
    path = tmp_path_factory.mktemp("ck") / "x.ednn"
    save_checkpoint(path, tensors, config)
    back, text = load_checkpoint(path)
    assert text == config
    assert list(back) == list(tensors)
    for k, v in tensors.items():
        assert back[k].dtype == v.dtype and back[k].shape == v.shape
        assert back[k].tobytes() == v.tobytes()


def test_checkpoint_layout(tmp_path):
    path = tmp_path / "a.ednn"
    save_checkpoint(path, {"w": np.array([1.5], dtype=np.float64)}, "{}")
    raw = path.read_bytes()
    assert raw[:4] == b"EDNN"
    assert struct.unpack_from("<II", raw, 4) == (1, 1)
    assert struct.unpack_from("<H", raw, 12) == (1,)
    assert raw[14:15] == b"w"
    assert raw[15:17] == bytes([1, 1])
    assert struct.unpack_from("<I", raw, 17) == (1,)
    assert struct.unpack_from("<d", raw, 21) == (1.5,)
    assert struct.unpack_from("<I", raw, 29) == (2,) and raw[33:] == b"{}"


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "a.ednn"
    save_checkpoint(path, {"w": np.ones(3, np.float32)}, "{}")
    raw = path.read_bytes()
    path.write_bytes(b"XDNN" + raw[4:])
    with pytest.raises(FormatError) as err:
        load_checkpoint(path)
    assert err.value.offset == 0
    path.write_bytes(raw[:4] + struct.pack("<I", 2) + raw[8:])
    with pytest.raises(FormatError, match="version"):
        load_checkpoint(path)
    path.write_bytes(raw[:20])
    with pytest.raises(FormatError, match="truncated"):
        load_checkpoint(path)
    path.write_bytes(raw + b"x")
    with pytest.raises(FormatError, match="trailing"):
        load_checkpoint(path)
    with pytest.raises(TypeError):
        save_checkpoint(path, {"i": np.arange(3)}, "")


def test_model_checkpoint_round_trip(tmp_path):
    model = ModelConfig(5, (7, 3), 4, extra_hidden=2, dtype="float64")
    params = select_editable(init_params(model, 3), {"head", "extra"})
    editor = EditorConfig(variant="rmsprop", alpha=0.0123456789, trainable={"alpha"})
    path = tmp_path / "m.ednn"
    save_model_checkpoint(path, model, params, editor, {"seed": 3})
    ck = load_model_checkpoint(path)
    assert ck.model == model and ck.editor == editor and ck.run == {"seed": 3}
    assert ck.params.equals(params) and ck.params.editable_mask == params.editable_mask
    raw, _ = load_checkpoint(path)
    assert raw["editor.log_alpha"] == np.log(0.0123456789)


def test_model_checkpoint_group_mismatch(tmp_path):
    model = ModelConfig(5, (7,), 4)
    params = init_params(model, 0)
    path = tmp_path / "m.ednn"
    save_model_checkpoint(path, ModelConfig(5, (7, 7), 4), params, EditorConfig())
    with pytest.raises(FormatError, match="groups"):
        load_model_checkpoint(path)


# -- descriptor matrices -------------------------------------------------------------

def test_matrix_round_trip_and_errors(tmp_path):
    m = np.random.default_rng(0).random((3, 5)).astype(np.float32)
    path = tmp_path / "d.eddm"
    save_matrix(path, m)
    raw = path.read_bytes()
    assert raw[:4] == b"EDDM" and struct.unpack_from("<II", raw, 4) == (3, 5)
    assert len(raw) == 12 + 4 * 15
    assert load_matrix(path).tobytes() == m.tobytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(FormatError):
        load_matrix(path)
    path.write_bytes(b"EDDX" + raw[4:])
    with pytest.raises(FormatError, match="magic"):
        load_matrix(path)
