import struct

import numpy as np
import pytest

from micronet.arch import build_arch, parse_arch
from micronet.bundle import MAGIC, FormatError, WeightBundle

SPEC = """\
name: b
task: classification
input: 16x16
classes: 3
hidden: 8
dropout: 0.0
stem 3 6 3 1 3 2
C 3 12 6 2 3 1
"""


@pytest.fixture
def net():
    return build_arch(parse_arch(SPEC), seed=7).eval()


class TestRoundTrip:
    def test_bitwise(self, net, tmp_path):
        path = tmp_path / "w.mnwb"
        WeightBundle.from_model(net, meta=dict(seed=7)).save(path)
        wb = WeightBundle.load(path)
        assert wb.meta == dict(seed=7)
        state = net.state_dict()
        assert wb.tensors.keys() == state.keys()
        assert all(np.array_equal(wb.tensors[k], state[k]) for k in state)

    def test_logits_reproduced(self, net, rng):
        x = rng.standard_normal((2, 3, 16, 16)).astype(np.float32)
        again = WeightBundle.from_bytes(WeightBundle.from_model(net).to_bytes()).to_model()
        assert np.array_equal(net.predict(x), again.predict(x))

    def test_bytes_stable(self, net):
        assert WeightBundle.from_model(net).to_bytes() == WeightBundle.from_model(net).to_bytes()

    def test_full_rank_flag(self):
        fr = build_arch(parse_arch(SPEC), full_rank=True)
        assert WeightBundle.from_bytes(WeightBundle.from_model(fr).to_bytes()).to_model().full_rank


class TestCorruption:
    @pytest.fixture
    def blob(self, net):
        return WeightBundle.from_model(net).to_bytes()

    def test_truncated(self, blob):
        for cut in (3, 20, len(blob) - 1):
            with pytest.raises(FormatError):
                WeightBundle.from_bytes(blob[:cut])

    def test_trailing_bytes(self, blob):
        with pytest.raises(FormatError):
            WeightBundle.from_bytes(blob + b"\0\0\0\0")

    def test_bad_magic(self, blob):
        with pytest.raises(FormatError, match="magic"):
            WeightBundle.from_bytes(b"XXXX" + blob[4:])

    def test_bad_version(self, blob):
        with pytest.raises(FormatError, match="version"):
            WeightBundle.from_bytes(MAGIC + struct.pack("<I", 99) + blob[8:])

    def test_garbled_header(self, blob):
        with pytest.raises(FormatError):
            WeightBundle.from_bytes(blob[:12] + b"!" + blob[13:])

    def test_missing_tensor(self, net):
        wb = WeightBundle.from_model(net)
        wb.tensors.pop(next(iter(wb.tensors)))
        with pytest.raises(FormatError):
            WeightBundle.from_bytes(wb.to_bytes()).to_model()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FormatError):
            WeightBundle.load(tmp_path / "absent.mnwb")
