import json
import struct

import pytest
import torch

from eventlm.checkpoint import FORMAT_VERSION, MAGIC, Checkpoint, load_checkpoint, save_checkpoint, state_hash
from eventlm.errors import IncompatibleCheckpoint
from eventlm.intensity import IntensityHead
from eventlm.model import DecoderLM, ModelConfig

CFG = ModelConfig(d_model=16, n_layers=1, n_heads=2, d_ff=32, max_context_len=64)


def sample(stage=3):
    torch.manual_seed(0)
    model = DecoderLM(CFG)
    head = IntensityHead(2, CFG.d_model, 0.4)
    return Checkpoint(
        CFG.to_dict(),
        {k: v.clone() for k, v in model.state_dict().items()},
        stage,
        {"synthetic.v1": {k: v.clone() for k, v in head.state_dict().items()}},
        {"dev_loss": 1.25},
        {"rendering": {"order": "msb", "use_byte_tokens": True}},
    )


def test_round_trip(tmp_path):
    ck = sample()
    path = save_checkpoint(tmp_path / "c.ckpt", ck)
    back = load_checkpoint(path)
    assert back.stage == 3 and back.model_config == ck.model_config
    assert back.metrics == ck.metrics and back.meta == ck.meta
    assert state_hash(back.model_state) == state_hash(ck.model_state)
    assert set(back.head_states) == {"synthetic.v1"}
    for k, v in ck.head_states["synthetic.v1"].items():
        assert torch.equal(back.head_states["synthetic.v1"][k], v)


def test_manifest_lists_tensors(tmp_path):
    path = save_checkpoint(tmp_path / "c.ckpt", sample())
    lines = (tmp_path / "c.ckpt.manifest.txt").read_text().splitlines()
    assert lines[0].startswith("# stage=3")
    names = {line.split("\t")[0] for line in lines[1:]}
    assert "model.embed.weight" in names
    assert "intensity_head.synthetic.v1.alpha" in names
    assert path.stat().st_size > 0


def test_save_is_deterministic(tmp_path):
    a = save_checkpoint(tmp_path / "a.ckpt", sample()).read_bytes()
    b = save_checkpoint(tmp_path / "b.ckpt", sample()).read_bytes()
    assert a == b


def test_state_hash_detects_changes():
    ck = sample()
    h = state_hash(ck.model_state)
    ck.model_state["embed.weight"][0, 0] += 1e-3
    assert state_hash(ck.model_state) != h


def rewrite_header(path, edit):
    data = path.read_bytes()
    version, hlen = struct.unpack("<II", data[8:16])
    header = json.loads(data[16 : 16 + hlen])
    edit(header)
    raw = json.dumps(header).encode()
    path.write_bytes(MAGIC + struct.pack("<II", version, len(raw)) + raw + data[16 + hlen :])


class TestRejects:
    def test_missing_file(self, tmp_path):
        with pytest.raises(IncompatibleCheckpoint):
            load_checkpoint(tmp_path / "nope.ckpt")

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"NOTACKPT" + bytes(16))
        with pytest.raises(IncompatibleCheckpoint):
            load_checkpoint(path)

    def test_version(self, tmp_path):
        path = save_checkpoint(tmp_path / "c.ckpt", sample())
        data = bytearray(path.read_bytes())
        data[8:12] = struct.pack("<I", FORMAT_VERSION + 1)
        path.write_bytes(bytes(data))
        with pytest.raises(IncompatibleCheckpoint, match="format"):
            load_checkpoint(path)

    def test_vocab_hash(self, tmp_path):
        path = save_checkpoint(tmp_path / "c.ckpt", sample())
        rewrite_header(path, lambda h: h.update(vocab_hash="0" * 16))
        with pytest.raises(IncompatibleCheckpoint, match="vocabulary"):
            load_checkpoint(path)

    def test_trailing_bytes(self, tmp_path):
        path = save_checkpoint(tmp_path / "c.ckpt", sample())
        path.write_bytes(path.read_bytes() + b"\0\0\0\0")
        with pytest.raises(IncompatibleCheckpoint, match="trailing"):
            load_checkpoint(path)
