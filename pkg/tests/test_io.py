import struct

import numpy as np
import pytest

from deepen import io
from deepen.errors import FormatError
from deepen.forward import gen_csm, gen_mask
from deepen.grid import RngStream
from deepen.nn import Denoiser, EnergyNet, MuseEnergy
from deepen.train import AdamState


def test_grid_round_trip(tmp_path):
    g = RngStream(0).normal_complex((8, 16))
    io.save_grid(tmp_path / "g.cgrd", g)
    assert np.array_equal(io.load_grid(tmp_path / "g.cgrd"), g)


def test_grid_layout(tmp_path):
    g = np.array([[1 + 2j, 3 - 4j]])
    buf = io.encode_grid(g)
    assert buf[:4] == b"CGRD"
    assert struct.unpack_from("<HII", buf, 4) == (1, 1, 2)
    assert struct.unpack_from("<4d", buf, 14) == (1.0, 2.0, 3.0, -4.0)
    assert len(buf) == 14 + 32


def test_grid_rejects_bad_magic_and_truncation():
    buf = io.encode_grid(np.ones((4, 4), complex))
    with pytest.raises(FormatError):
        io.decode_grid(b"XXXX" + buf[4:])
    with pytest.raises(FormatError):
        io.decode_grid(buf[:-1])


def test_kspace_and_csm_round_trip(tmp_path):
    y = RngStream(1).normal_complex((3, 8, 8))
    io.save_kspace(tmp_path / "k.kspc", y)
    assert np.array_equal(io.load_kspace(tmp_path / "k.kspc"), y)
    csm = gen_csm(4, 16, 16, RngStream(2))
    io.save_csm(tmp_path / "c.csms", csm)
    assert np.array_equal(io.load_csm(tmp_path / "c.csms").maps, csm.maps)
    with pytest.raises(FormatError):
        io.load_csm(tmp_path / "k.kspc")


@pytest.mark.parametrize("kind", ["1d", "2d"])
def test_mask_round_trip(tmp_path, kind):
    m = gen_mask(kind, 32, 16, 2, 4, RngStream(3))
    io.save_mask(tmp_path / "m.bin", m)
    back = io.load_mask(tmp_path / "m.bin")
    assert back.kind == kind and back.acs_lines == 4
    assert np.array_equal(back.pattern, m.pattern)


@pytest.mark.parametrize("factory", [
    lambda r: EnergyNet.init(r, width=4, head_std=0.2),
    lambda r: MuseEnergy.init(r, width=4),
    lambda r: Denoiser.init(r, width=4),
])
def test_checkpoint_round_trip_all_kinds(tmp_path, factory):
    net = factory(RngStream(4))
    params = net.params()
    opt = AdamState(7, [p * 0.5 for p in params], [p ** 2 for p in params])
    io.save_checkpoint(tmp_path / "c.dpen", net, meta={"epsilon": 0.01, "optimizer": "adam"}, opt=opt)
    back, meta, opt2 = io.load_checkpoint(tmp_path / "c.dpen")
    assert type(back) is type(net) and meta["kind"] == net.kind
    assert all(np.array_equal(a, b) for a, b in zip(params, back.params()))
    assert opt2.step == 7
    assert all(np.array_equal(a, b) for a, b in zip(opt.m + opt.v, opt2.m + opt2.v))


def test_checkpoint_detects_corruption(tmp_path):
    net = EnergyNet.init(RngStream(5), width=4)
    buf = bytearray(io.encode_checkpoint(net))
    buf[40] ^= 0xFF
    with pytest.raises(FormatError):
        io.decode_checkpoint(bytes(buf))


def test_checkpoint_header(tmp_path):
    net = EnergyNet.init(RngStream(6), width=4)
    buf = io.encode_checkpoint(net)
    assert buf[:4] == b"DPEN"
    version, n_layers = struct.unpack_from("<HH", buf, 4)
    assert (version, n_layers) == (1, 6)  # 5 conv layers plus the head
    assert struct.unpack_from("<IIII", buf, 8) == (3, 3, 2, 4)


def test_checkpoint_is_deterministic():
    net = EnergyNet.init(RngStream(7), width=4)
    assert io.encode_checkpoint(net, {"a": 1}) == io.encode_checkpoint(net.copy(), {"a": 1})


def test_pgm(tmp_path):
    img = np.array([[0, 0.5], [1.0, 2.0]])
    io.write_pgm(tmp_path / "p.pgm", img, vmax=1.0)
    assert io.read_pgm(tmp_path / "p.pgm").tolist() == [[0, 128], [255, 255]]
    io.write_pgm(tmp_path / "z.pgm", np.zeros((2, 3)))
    assert io.read_pgm(tmp_path / "z.pgm").shape == (2, 3)
