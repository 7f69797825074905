"""Binary checkpoint round-trip and the format's rejection paths."""

import struct

import numpy as np
import pytest

from dsd.checkpoint import MAGIC, ResumeState, load_checkpoint, read_checkpoint, save_checkpoint
from dsd.errors import CheckpointError
from dsd.network import InitSpec, Network, init, mlp_layers
from dsd.pruning import SparsitySpec, prune_network


def pruned_net(seed=0):
    net = init(Network(mlp_layers([5, 7, 6, 3], dropout=0.25)), InitSpec(seed=seed))
    prune_network(net, SparsitySpec(0.4, ("fc1",)))
    return net


def assert_same(a: Network, b: Network):
    for (ka, ta), (kb, tb) in zip(a.parameters(), b.parameters()):
        assert ka == kb
        assert ta.data.tobytes() == tb.data.tobytes()
    assert set(a.masks) == set(b.masks)
    for name in a.masks:
        np.testing.assert_array_equal(a.masks[name].bits, b.masks[name].bits)
        assert a.masks[name].kept_count == b.masks[name].kept_count


class TestRoundTrip:
    def test_bit_exact_with_masks(self, tmp_path):
        net = pruned_net()
        # awkward values survive untouched
        net.biases["fc2"].data[:3] = [-0.0, 5e-324, np.nextafter(1.0, 2.0)]
        save_checkpoint(net, tmp_path / "a.dsdc")
        back = load_checkpoint(tmp_path / "a.dsdc", Network(mlp_layers([5, 7, 6, 3], dropout=0.25)))
        assert_same(net, back)
        assert np.signbit(back.biases["fc2"].data[0])

    def test_dense_network_has_no_masks(self, tmp_path):
        net = init(Network(mlp_layers([3, 4, 2])), InitSpec(seed=1))
        save_checkpoint(net, tmp_path / "d.dsdc")
        assert all(rec.mask is None for rec in read_checkpoint(tmp_path / "d.dsdc").layers)

    def test_header_layout(self, tmp_path):
        save_checkpoint(pruned_net(), tmp_path / "a.dsdc")
        raw = (tmp_path / "a.dsdc").read_bytes()
        assert raw[:4] == MAGIC
        assert struct.unpack("<II", raw[4:12]) == (1, 5)
        assert struct.unpack("<H", raw[12:14]) == (3,) and raw[14:17] == b"fc1"

    def test_resume_block(self, tmp_path):
        net = pruned_net()
        vel = {"fc1.W": np.full((5, 7), 0.25), "fc3.b": np.arange(3.0)}
        state = ResumeState(2, 3, 17, 0.125, 1, vel)
        save_checkpoint(net, tmp_path / "r.dsdc", state)
        back = read_checkpoint(tmp_path / "r.dsdc").resume
        assert (back.phase_index, back.epochs_done, back.next_epoch) == (2, 3, 17)
        assert (back.best_val_loss, back.bad_epochs) == (0.125, 1)
        assert set(back.velocity) == set(vel)
        for k in vel:
            np.testing.assert_array_equal(back.velocity[k], vel[k])

    def test_bad_velocity_shape(self, tmp_path):
        with pytest.raises(CheckpointError):
            save_checkpoint(pruned_net(), tmp_path / "r.dsdc", ResumeState(0, 0, 0, 1.0, 0, {"fc1.W": np.zeros(3)}))


class TestRejection:
    @pytest.fixture
    def raw(self, tmp_path):
        save_checkpoint(pruned_net(), tmp_path / "a.dsdc")
        return (tmp_path / "a.dsdc").read_bytes()

    def check(self, tmp_path, data, match):
        (tmp_path / "bad.dsdc").write_bytes(data)
        with pytest.raises(CheckpointError, match=match):
            read_checkpoint(tmp_path / "bad.dsdc")

    def test_bad_magic(self, tmp_path, raw):
        self.check(tmp_path, b"XXXX" + raw[4:], "magic")

    def test_version(self, tmp_path, raw):
        self.check(tmp_path, raw[:4] + struct.pack("<I", 2) + raw[8:], "version 2")

    @pytest.mark.parametrize("cut", [0, 3, 10, 20, 200, -1])
    def test_truncated(self, tmp_path, raw, cut):
        self.check(tmp_path, raw[:cut], "truncated|magic")

    def test_trailing_bytes(self, tmp_path, raw):
        self.check(tmp_path, raw + b"\x00", "trailing")

    def test_missing_file(self, tmp_path):
        with pytest.raises(CheckpointError):
            read_checkpoint(tmp_path / "nope.dsdc")

    def test_shape_mismatch_on_load(self, tmp_path):
        save_checkpoint(pruned_net(), tmp_path / "a.dsdc")
        with pytest.raises(CheckpointError, match="shape mismatch"):
            load_checkpoint(tmp_path / "a.dsdc", Network(mlp_layers([5, 8, 6, 3], dropout=0.25)))

    def test_layer_mismatch_on_load(self, tmp_path):
        save_checkpoint(pruned_net(), tmp_path / "a.dsdc")
        with pytest.raises(CheckpointError):
            load_checkpoint(tmp_path / "a.dsdc", Network(mlp_layers([5, 7, 6, 3])))
