import json
import os

import pytest
import torch

from app.checkpoint import (
    EMA_PREFIX,
    decode_histogram,
    encode_histogram,
    load_checkpoint,
    read_manifest,
    read_tensors,
    save_checkpoint,
)
from app.config import Config
from app.errors import ChecksumError, ConfigMismatch, SchemaVersionError
from app.models.registry import build_model
from app.training.ema import EMA

from .conftest import randomize_parameters, tiny_config


@pytest.fixture
def model():
    torch.manual_seed(0)
    model = build_model(tiny_config())
    randomize_parameters(model, seed=1)
    return model


def blob_path(directory):
    return os.path.join(directory, Config.CHECKPOINT_BLOB)


class TestRoundTrip:

    def test_tensors_are_bitwise_equal(self, model, tmp_path):
        directory = save_checkpoint(str(tmp_path / "ckpt"), model, step=7, metadata={"stage": "pretrain"})
        loaded = load_checkpoint(directory)
        assert loaded.step == 7
        assert loaded.metadata == {"stage": "pretrain"}
        assert not loaded.ema_applied
        original = model.state_dict()
        for name, tensor in loaded.model.state_dict().items():
            assert torch.equal(tensor, original[name]), name

    def test_manifest_indexes_every_tensor(self, model, tmp_path):
        directory = save_checkpoint(str(tmp_path / "ckpt"), model)
        manifest = read_manifest(directory)
        names = [entry["name"] for entry in manifest["tensors"]]
        assert names == list(model.state_dict())
        assert manifest["model"] == model.config.model_dump()
        total = sum(entry["nbytes"] for entry in manifest["tensors"])
        assert os.path.getsize(blob_path(directory)) == total

    def test_tap_layer_survives(self, model, tmp_path):
        model.set_tap_layer(1)
        loaded = load_checkpoint(save_checkpoint(str(tmp_path / "tap"), model))
        assert loaded.model.tap_layer == 1


class TestEma:

    def test_ema_weights_are_applied(self, model, tmp_path):
        ema = EMA(model, decay=0.5)
        with torch.no_grad():
            for param in model.parameters():
                param.add_(1.0)
        ema.update()
        directory = save_checkpoint(str(tmp_path / "ema"), model, ema_state=ema.state_dict())

        averaged = load_checkpoint(directory)
        assert averaged.ema_applied
        for name, param in averaged.model.named_parameters():
            assert torch.equal(param.detach(), ema.shadow[name]), name

        raw = load_checkpoint(directory, use_ema=False)
        assert not raw.ema_applied
        for name, param in raw.model.named_parameters():
            assert torch.equal(param.detach(), dict(model.named_parameters())[name].detach()), name
        assert set(raw.ema_state) == set(ema.shadow)

    def test_ema_entries_are_prefixed(self, model, tmp_path):
        directory = save_checkpoint(str(tmp_path / "ema"), model, ema_state=EMA(model).state_dict())
        manifest = read_manifest(directory)
        assert manifest["ema"] is True
        assert any(entry["name"].startswith(EMA_PREFIX) for entry in manifest["tensors"])

    def test_averaged_context_restores_raw_weights(self, model):
        ema = EMA(model, decay=0.0)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        with torch.no_grad():
            next(model.parameters()).add_(3.0)
        ema.update()
        with torch.no_grad():
            next(model.parameters()).sub_(3.0)
        with ema.averaged():
            assert not torch.equal(next(model.parameters()), next(iter(before.values())))
        for name, tensor in model.state_dict().items():
            assert torch.equal(tensor, before[name]), name


class TestCorruption:

    def test_truncated_blob(self, model, tmp_path):
        directory = save_checkpoint(str(tmp_path / "cut"), model)
        path = blob_path(directory)
        with open(path, "rb") as file:
            data = file.read()
        with open(path, "wb") as file:
            file.write(data[: len(data) // 2])
        with pytest.raises(ChecksumError):
            load_checkpoint(directory)

    def test_flipped_byte(self, model, tmp_path):
        directory = save_checkpoint(str(tmp_path / "flip"), model)
        path = blob_path(directory)
        with open(path, "rb") as file:
            data = bytearray(file.read())
        data[0] ^= 0xFF
        with open(path, "wb") as file:
            file.write(bytes(data))
        with pytest.raises(ChecksumError):
            read_tensors(directory, read_manifest(directory))

    def test_future_format_version(self, model, tmp_path):
        directory = save_checkpoint(str(tmp_path / "future"), model)
        path = os.path.join(directory, Config.CHECKPOINT_MANIFEST)
        with open(path, encoding="utf-8") as file:
            manifest = json.load(file)
        manifest["format_version"] = "9.0"
        with open(path, "w", encoding="utf-8") as file:
            json.dump(manifest, file)
        with pytest.raises(SchemaVersionError):
            load_checkpoint(directory)

    def test_wider_model_is_a_mismatch(self, model, tmp_path):
        directory = save_checkpoint(str(tmp_path / "narrow"), model)
        with pytest.raises(ConfigMismatch) as info:
            load_checkpoint(directory, config=tiny_config(d_model=32))
        assert info.value.mismatches


class TestHistogram:

    def test_encode_then_decode(self):
        metadata = {"atom_count_histogram": encode_histogram({"molecule": {9: 3, 4: 1}})}
        assert metadata["atom_count_histogram"] == {"molecule": {"4": 1, "9": 3}}
        assert decode_histogram(metadata, "molecule") == {4: 1, 9: 3}
        assert decode_histogram(metadata, "material") == {}
