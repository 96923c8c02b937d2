import numpy as np
import pytest
import torch
from torch import nn

from gandetect import checkpoint as ckpt
from gandetect.checkpoint import CheckpointError
from gandetect.errors import DataError


def sample_tensors():
    rng = np.random.default_rng(0)
    return {
        "a.weight": rng.normal(size=(4, 3)).astype(np.float32),
        "a.bias": rng.normal(size=(4,)).astype(np.float32),
        "scalar": np.float32(2.5),
    }


class TestArchive:
    def test_round_trip_exact(self, tmp_path):
        tensors = sample_tensors()
        path = tmp_path / "t.ckpt"
        ckpt.save_checkpoint(path, tensors, {"kind": "test", "iteration": 3})
        loaded = ckpt.load_checkpoint(path)
        assert loaded.meta == {"kind": "test", "iteration": 3}
        assert set(loaded.tensors) == set(tensors)
        for name in tensors:
            np.testing.assert_array_equal(loaded.tensors[name], np.asarray(tensors[name], dtype=np.float32))

    def test_two_saves_byte_identical(self, tmp_path):
        tensors = sample_tensors()
        p1, p2 = tmp_path / "one.ckpt", tmp_path / "two.ckpt"
        ckpt.save_checkpoint(p1, tensors, {"kind": "t"})
        ckpt.save_checkpoint(p2, tensors, {"kind": "t"})
        assert p1.read_bytes() == p2.read_bytes()

    def test_missing_file_raises(self, tmp_path):
        with pytest.raises(CheckpointError):
            ckpt.load_checkpoint(tmp_path / "nope.ckpt")

    def test_corrupt_archive_raises(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"this is not a zip archive")
        with pytest.raises(CheckpointError):
            ckpt.load_checkpoint(path)

    def test_checkpoint_error_is_data_error(self):
        assert issubclass(CheckpointError, DataError)

    def test_foreign_archive_rejected(self, tmp_path):
        import zipfile

        path = tmp_path / "foreign.zip"
        with zipfile.ZipFile(path, "w") as zf:
            zf.writestr("manifest.json", '{"format": "something-else", "tensors": {}}')
        with pytest.raises(CheckpointError):
            ckpt.load_checkpoint(path)


class SmallNet(nn.Module):
    def __init__(self):
        super().__init__()
        self.conv = nn.Conv2d(3, 4, 3, padding=1)
        self.bn = nn.BatchNorm2d(4)
        self.fc = nn.Linear(4, 2)


class TestModuleState:
    def test_module_round_trip_includes_bn_buffers(self, tmp_path):
        torch.manual_seed(0)
        net = SmallNet()
        net.train()
        net.bn(net.conv(torch.randn(8, 3, 5, 5)))  # populate running stats
        tensors = ckpt.module_state_tensors(net, "net.")
        assert "net.bn.running_mean" in tensors
        assert "net.bn.num_batches_tracked" in tensors
        path = tmp_path / "net.ckpt"
        ckpt.save_checkpoint(path, tensors, {"kind": "net"})

        other = SmallNet()
        ckpt.load_module_state(other, ckpt.load_checkpoint(path).tensors, "net.")
        for (name, a), (_, b) in zip(net.state_dict().items(), other.state_dict().items()):
            assert torch.equal(a.float(), b.float()), name

    def test_shape_mismatch_raises(self, tmp_path):
        net = SmallNet()
        tensors = ckpt.module_state_tensors(net, "net.")
        tensors["net.fc.weight"] = np.zeros((3, 3), dtype=np.float32)
        with pytest.raises(CheckpointError):
            ckpt.load_module_state(SmallNet(), tensors, "net.")

    def test_missing_tensor_raises(self):
        net = SmallNet()
        tensors = ckpt.module_state_tensors(net, "net.")
        del tensors["net.conv.weight"]
        with pytest.raises(CheckpointError):
            ckpt.load_module_state(SmallNet(), tensors, "net.")


class TestOptimizerState:
    def test_adam_state_round_trip(self):
        torch.manual_seed(1)
        net = SmallNet()
        opt = torch.optim.Adam(net.parameters(), lr=1e-3)
        loss = net.fc(net.bn(net.conv(torch.randn(4, 3, 5, 5))).mean(dim=(2, 3))).sum()
        loss.backward()
        opt.step()

        named = list(net.named_parameters())
        tensors = ckpt.optimizer_state_tensors(opt, named, "opt.")
        assert any(k.endswith(".exp_avg") for k in tensors)

        net2 = SmallNet()
        net2.load_state_dict(net.state_dict())
        opt2 = torch.optim.Adam(net2.parameters(), lr=1e-3)
        ckpt.load_optimizer_state(opt2, list(net2.named_parameters()), tensors, "opt.")
        for (_, p1), (_, p2) in zip(named, net2.named_parameters()):
            s1, s2 = opt.state[p1], opt2.state[p2]
            assert float(s1["step"]) == float(s2["step"])
            assert torch.allclose(s1["exp_avg"], s2["exp_avg"])
            assert torch.allclose(s1["exp_avg_sq"], s2["exp_avg_sq"])
