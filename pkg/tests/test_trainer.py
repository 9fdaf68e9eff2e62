import csv
import json
import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest
import torch

from semfuse.errors import CorruptCheckpoint, EmptyManifest, NonFiniteLoss, ShapeMismatch, VersionMismatch
from semfuse.imagedata import ColorSpace, DatasetManifest, ImageTensor, Split, load_image, write_phantom_set
from semfuse.losses import LossWeights
from semfuse.model import FusionModel
from semfuse.trainer import (
    CHECKPOINT_MAGIC,
    TrainConfig,
    fuse,
    load_checkpoint,
    read_checkpoint_header,
    save_checkpoint,
    train,
    train_tensors,
    write_trace,
)

TINY = TrainConfig(channels=8, stages=1, image_size=(16, 16), epochs=2, batch_size=2, learning_rate=1e-3, seed=3)


@pytest.fixture(scope="module")
def phantoms(tmp_path_factory):
    root = tmp_path_factory.mktemp("ph")
    return write_phantom_set(root, 3, seed=2, size=(16, 16))


@pytest.fixture(scope="module")
def trained(phantoms):
    return train(phantoms, TINY)


def _state(model):
    return {k: v.clone() for k, v in model.state_dict().items()}


def test_defaults_are_protocol_values():
    cfg = TrainConfig()
    assert cfg.learning_rate == 1e-4 and cfg.epochs == 150 and cfg.batch_size == 2
    assert cfg.head_dim == 64 and cfg.stages == 2 and cfg.channels == 32
    assert cfg.weights == LossWeights(alpha=0.1, beta=1.5, gamma=1.5, theta=0.85, omega=1.0)
    assert TrainConfig.desk().epochs == 20


class TestTrain:
    def test_trace_shape(self, trained):
        assert len(trained.trace) == 4  # 2 epochs x ceil(3 / 2)
        assert [r["step"] for r in trained.trace] == [1, 2, 3, 4]
        for row in trained.trace:
            assert row["total"] == pytest.approx(0.1 * row["semantic"] + 1.5 * row["grad"] + 1.5 * row["rec"],
                                                 rel=1e-6)

    def test_bitwise_deterministic(self, phantoms, trained):
        again = train(phantoms, TINY)
        assert again.trace == trained.trace
        for k, v in trained.model.state_dict().items():
            assert torch.equal(v, again.model.state_dict()[k]), k

    def test_seed_changes_run(self, phantoms, trained):
        other = train(phantoms, replace(TINY, seed=4))
        assert other.trace != trained.trace

    def test_zero_learning_rate(self, phantoms):
        cfg = replace(TINY, learning_rate=0.0, max_steps=1)
        torch.manual_seed(0)
        model = FusionModel(cfg.model_config())
        before = _state(model)
        res = train(phantoms, cfg, model=model)
        assert len(res.trace) == 1
        for k, v in res.model.state_dict().items():
            assert torch.equal(v, before[k]), k

    def test_max_steps(self, phantoms):
        assert len(train(phantoms, replace(TINY, max_steps=3, epochs=10)).trace) == 3

    def test_global_rng_untouched(self, phantoms):
        torch.manual_seed(123)
        expected = torch.rand(3)
        torch.manual_seed(123)
        train(phantoms, replace(TINY, max_steps=1))
        assert torch.equal(torch.rand(3), expected)

    def test_empty_manifest(self, tmp_path):
        with pytest.raises(EmptyManifest):
            train(DatasetManifest((), Split.TRAIN, tmp_path), TINY)

    def test_wrong_split(self, phantoms):
        with pytest.raises(ValueError):
            train(DatasetManifest(phantoms.entries, Split.TEST, phantoms.root), TINY)

    def test_size_mismatch(self, phantoms):
        with pytest.raises(ShapeMismatch):
            train(phantoms, replace(TINY, image_size=(32, 32)))

    def test_non_finite_reports_step(self):
        y = torch.rand(2, 1, 16, 16)
        y[1, 0, 3, 3] = float("nan")
        p = torch.nn.functional.normalize(torch.randn(2, 128), dim=1)
        with pytest.raises(NonFiniteLoss) as err:
            train_tensors(y, y, p, p, replace(TINY, batch_size=1))
        assert err.value.step in (1, 2)

    def test_clip_grad_norm_runs(self, phantoms):
        res = train(phantoms, replace(TINY, clip_grad_norm=0.5, max_steps=2))
        assert all(np.isfinite(r["total"]) for r in res.trace)

    def test_invalid_config(self):
        with pytest.raises(ValueError):
            TrainConfig(batch_size=0)
        with pytest.raises(ValueError):
            TrainConfig(learning_rate=-1.0)


def test_write_trace(tmp_path, trained):
    path = tmp_path / "trace.csv"
    write_trace(trained.trace, path)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["step", "semantic", "grad", "rec", "total"]
    assert len(rows) == 5
    assert float(rows[1][4]) == trained.trace[0]["total"]


class TestFuse:
    def test_color_and_gray_outputs(self, phantoms, trained):
        e = phantoms.entries[0]
        mri = load_image(phantoms.resolve(e.image1_path))
        pet = load_image(phantoms.resolve(e.image2_path), None)
        color = fuse(mri, pet, (e.text1, e.text2), trained.model)
        assert color.shape == (16, 16, 3) and color.colorspace == ColorSpace.RGB
        gray = fuse(mri, mri, (e.text1, e.text2), trained.model)
        assert gray.shape == (16, 16, 1)
        assert 0.0 <= color.pixels.min() and color.pixels.max() <= 1.0
        again = fuse(mri, pet, (e.text1, e.text2), trained.model)
        np.testing.assert_array_equal(color.pixels, again.pixels)

    def test_text_changes_output(self, phantoms, trained):
        e = phantoms.entries[0]
        mri = load_image(phantoms.resolve(e.image1_path))
        pet = load_image(phantoms.resolve(e.image2_path), None)
        a = fuse(mri, pet, (e.text1, e.text2), trained.model).pixels
        b = fuse(mri, pet, ("another prompt", "and another"), trained.model).pixels
        assert np.abs(a - b).max() > 0

    def test_size_mismatch(self, trained):
        img = ImageTensor(np.zeros((20, 16)))
        with pytest.raises(ShapeMismatch):
            fuse(img, img, ("a", "b"), trained.model)


class TestCheckpoint:
    def test_roundtrip_bitwise(self, tmp_path, trained):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained.model, path, seed=TINY.seed)
        loaded = load_checkpoint(path)
        assert loaded.config == trained.model.config
        for k, v in trained.model.state_dict().items():
            assert torch.equal(v, loaded.state_dict()[k]), k
        header = read_checkpoint_header(path)
        assert header["version"] == 1 and header["seed"] == 3
        assert header["model"]["channels"] == 8 and header["model"]["stages"] == 1
        assert header["model"]["image_size"] == [16, 16]
        save_checkpoint(loaded, tmp_path / "again.ckpt", seed=TINY.seed)
        assert path.read_bytes() == (tmp_path / "again.ckpt").read_bytes()

    def test_truncated(self, tmp_path, trained):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained.model, path)
        data = path.read_bytes()
        path.write_bytes(data[: len(data) // 2])
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_bit_flip(self, tmp_path, trained):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained.model, path)
        data = bytearray(path.read_bytes())
        data[-100] ^= 0x01
        path.write_bytes(bytes(data))
        with pytest.raises(CorruptCheckpoint):
            load_checkpoint(path)

    def test_future_version(self, tmp_path, trained):
        path = tmp_path / "m.ckpt"
        save_checkpoint(trained.model, path)
        data = path.read_bytes()[:-4]
        pos = len(CHECKPOINT_MAGIC)
        (hlen,) = struct.unpack("<I", data[pos:pos + 4])
        header = json.loads(data[pos + 4:pos + 4 + hlen])
        header["version"] = 2
        head = json.dumps(header).encode()
        body = CHECKPOINT_MAGIC + struct.pack("<I", len(head)) + head + data[pos + 4 + hlen:]
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(VersionMismatch, match="version 2.*version 1"):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.ckpt")
