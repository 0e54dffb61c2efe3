import json
import struct

import numpy as np
import pytest

from cqd import tensor as T
from cqd.errors import (CheckpointFormatError, CheckpointPayloadError, CheckpointVersionError,
                        ContractError)
from cqd.nets import (ArchSpec, ConvBlock, Model, build_model, deep_arch, load_checkpoint,
                      param_digest, reinit_classifier, save_checkpoint, shallow_arch)


@pytest.fixture(scope="module")
def model():
    return build_model(shallow_arch(), 10, seed=3)


def batch(seed, n=4, side=64):
    return np.random.default_rng(seed).random((n, side, side, 3), dtype=np.float32)


def test_build_is_deterministic():
    a, b = build_model(shallow_arch(), 10, 7), build_model(shallow_arch(), 10, 7)
    assert param_digest(a) == param_digest(b)
    assert param_digest(a) != param_digest(build_model(shallow_arch(), 10, 8))


def test_logit_shape(model):
    assert model.forward(batch(0, 5)).shape == (5, 10)
    assert model.predict_logits(batch(0, 5), batch_size=2).shape == (5, 10)


def test_predict_matches_forward(model):
    x = batch(1, 6)
    np.testing.assert_allclose(model.predict_logits(x, batch_size=4), model.forward(x).data, rtol=1e-6)


def test_rejects_wrong_input_shape(model):
    with pytest.raises(ContractError):
        model.forward(np.zeros((1, 32, 32, 3), np.float32))


def test_needs_two_classes():
    with pytest.raises(ContractError):
        build_model(shallow_arch(), 1, 0)


def test_collapsing_arch_is_rejected():
    arch = ArchSpec("tiny", (ConvBlock(4, 3, 2, True),) * 5, input_size=(16, 16, 3))
    with pytest.raises(ContractError):
        build_model(arch, 3, 0)
    with pytest.raises(ContractError):
        ArchSpec("empty", ())


def test_deep_has_more_blocks_and_parameters():
    s, d = shallow_arch(), deep_arch()
    assert len(d.blocks) > len(s.blocks)
    assert build_model(d, 10, 0).num_parameters() > build_model(s, 10, 0).num_parameters()
    assert s.depth_class == "shallow" and d.depth_class == "deep"


def test_arch_dict_round_trip():
    for a in (shallow_arch(), deep_arch(96)):
        assert ArchSpec.from_dict(json.loads(json.dumps(a.to_dict()))) == a


def test_untrained_models_are_at_chance():
    rng = np.random.default_rng(0)
    x = rng.random((200, 64, 64, 3), dtype=np.float32)
    y = np.arange(200) % 10
    accs = [np.mean(build_model(shallow_arch(), 10, s).predict_logits(x).argmax(1) == y)
            for s in range(8)]
    assert abs(np.mean(accs) - 0.1) <= 0.05


def test_initial_logits_are_centred():
    m = build_model(shallow_arch(), 10, 1)
    z = m.predict_logits(np.random.default_rng(2).random((1000, 64, 64, 3), dtype=np.float32))
    per_class = z.mean(axis=0)
    # class means are independent draws around zero
    assert abs(per_class.mean()) < 4 * per_class.std() / np.sqrt(len(per_class)) + 1e-6
    assert np.isfinite(z).all()


def test_reinit_classifier_keeps_features(model):
    m2 = reinit_classifier(model, 10, seed=99)
    for k, p in model.params.items():
        if k.startswith("classifier."):
            if k.endswith("weight"):
                assert not np.array_equal(p.data, m2.params[k].data)
        else:
            np.testing.assert_array_equal(p.data, m2.params[k].data)
    x = batch(2)
    np.testing.assert_array_equal(model.features(x).data, m2.features(x).data)


def test_reinit_classifier_changes_width(model):
    m3 = reinit_classifier(model, 4, seed=1)
    assert m3.forward(batch(3, 2)).shape == (2, 4)
    with pytest.raises(ContractError):
        reinit_classifier(model, 1, seed=1)


def test_copy_is_independent(model):
    c = model.copy()
    c.params["conv0.weight"].data[...] = 0
    assert model.params["conv0.weight"].data.any()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_checkpoint_round_trip_is_bit_exact(model, tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(model, path)
    back = load_checkpoint(path)
    assert back.arch == model.arch and back.num_classes == model.num_classes
    assert param_digest(back) == param_digest(model)
    for s in range(10):
        x = batch(100 + s, 2)
        np.testing.assert_array_equal(back.forward(x).data, model.forward(x).data)


def test_deep_checkpoint_round_trip(tmp_path):
    m = build_model(deep_arch(), 5, 0)
    save_checkpoint(m, tmp_path / "d.ckpt")
    assert param_digest(load_checkpoint(tmp_path / "d.ckpt")) == param_digest(m)


def _blob(model, tmp_path):
    save_checkpoint(model, tmp_path / "m.ckpt")
    return bytearray((tmp_path / "m.ckpt").read_bytes())


def _rewrite_header(blob: bytearray, edit) -> bytes:
    magic, version, hlen = struct.unpack_from("<4sHI", blob, 0)
    header = json.loads(bytes(blob[10:10 + hlen]))
    edit(header)
    h = json.dumps(header).encode()
    return struct.pack("<4sHI", magic, version, len(h)) + h + bytes(blob[10 + hlen:])


def test_corrupted_magic(model, tmp_path):
    blob = _blob(model, tmp_path)
    blob[0:4] = b"XXXX"
    (tmp_path / "bad.ckpt").write_bytes(blob)
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_version_mismatch(model, tmp_path):
    blob = _blob(model, tmp_path)
    struct.pack_into("<H", blob, 4, 99)
    (tmp_path / "bad.ckpt").write_bytes(blob)
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_wrong_declared_byte_length(model, tmp_path):
    def edit(h):
        h["tensors"][0]["nbytes"] += 4
    (tmp_path / "bad.ckpt").write_bytes(_rewrite_header(_blob(model, tmp_path), edit))
    with pytest.raises(CheckpointPayloadError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_truncated_payload(model, tmp_path):
    blob = _blob(model, tmp_path)
    (tmp_path / "bad.ckpt").write_bytes(bytes(blob[:-10]))
    with pytest.raises(CheckpointPayloadError):
        load_checkpoint(tmp_path / "bad.ckpt")
    (tmp_path / "short.ckpt").write_bytes(bytes(blob[:6]))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "short.ckpt")


def test_trailing_bytes(model, tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(bytes(_blob(model, tmp_path)) + b"\0\0\0\0")
    with pytest.raises(CheckpointPayloadError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_shape_mismatch_with_architecture(model, tmp_path):
    def edit(h):
        h["num_classes"] = 7  # classifier tensors no longer fit
    (tmp_path / "bad.ckpt").write_bytes(_rewrite_header(_blob(model, tmp_path), edit))
    with pytest.raises(CheckpointPayloadError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_malformed_header(model, tmp_path):
    def edit(h):
        del h["arch"]
    (tmp_path / "bad.ckpt").write_bytes(_rewrite_header(_blob(model, tmp_path), edit))
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_checkpoint_layout(model, tmp_path):
    blob = bytes(_blob(model, tmp_path))
    magic, version, hlen = struct.unpack_from("<4sHI", blob, 0)
    assert magic == b"CQDC" and version == 1
    header = json.loads(blob[10:10 + hlen])
    names = [t["name"] for t in header["tensors"]]
    assert names == list(model.params)
    first = header["tensors"][0]
    arr = np.frombuffer(blob[10 + hlen:10 + hlen + first["nbytes"]], "<f4").reshape(first["shape"])
    np.testing.assert_array_equal(arr, model.params[names[0]].data)
