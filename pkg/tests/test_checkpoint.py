import struct

import numpy as np
import pytest

from rankforge import checkpoint
from rankforge.encoder import EncoderConfig
from rankforge.errors import InputError, ValidationError
from rankforge.model import TEACHER_KINDS, ModelConfig, RankingModel

CFG = EncoderConfig(vocab_size=25, layers=1, hidden=8, heads=2, ffn=16)


def models():
    out = [RankingModel(ModelConfig(kind=k, encoder=CFG), seed=1) for k in TEACHER_KINDS]
    for kind in ("trmd", "tr"):
        for mode in ("bi", "cross"):
            out.append(RankingModel(ModelConfig(kind=kind, encoder=CFG, encoder_mode=mode, bi_ranker="colbert"), 2))
    return out


@pytest.mark.parametrize("model", models(), ids=lambda m: f"{m.config.kind}-{m.config.encoder_mode}")
def test_save_load_save_is_byte_identical(model, tmp_path):
    first = checkpoint.save(model, tmp_path / "a.ckpt")
    back = checkpoint.load(tmp_path / "a.ckpt")
    assert checkpoint.save(back, tmp_path / "b.ckpt") == first
    assert back.config == model.config
    for name, t in model.parameters().items():
        np.testing.assert_array_equal(back.parameters()[name].data, t.data.astype(np.float32))


def test_layout_and_checksum():
    blob = checkpoint.dumps(models()[0])
    assert blob[:4] == b"TRMD"
    assert struct.unpack("<Q", blob[-8:])[0] == checkpoint.fnv1a64(blob[:-8])
    bad = bytearray(blob)
    bad[-20] ^= 0xFF
    with pytest.raises(ValidationError, match="checksum"):
        checkpoint.loads(bytes(bad))
    with pytest.raises(InputError):
        checkpoint.loads(b"NOPE" + blob[4:])


def test_fnv1a64_reference_values():
    # published FNV-1a 64-bit test vectors
    assert checkpoint.fnv1a64(b"") == 0xCBF29CE484222325
    assert checkpoint.fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert checkpoint.fnv1a64(b"foobar") == 0x85944171F73967E8


def test_missing_file_is_input_error(tmp_path):
    with pytest.raises(InputError):
        checkpoint.load(tmp_path / "none.ckpt")
