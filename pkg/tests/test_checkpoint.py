import numpy as np
import pytest
import torch

from stormse.checkpoint import (MAGIC, CheckpointError, adam_state_vectors, load_adam_state, read_checkpoint,
                                save_checkpoint)


def test_roundtrip_and_layout(tmp_path):
    params = np.arange(5, dtype=np.float32)
    ema = params * 2
    avg, sq = np.ones(5, np.float32), np.full(5, 3.0, np.float32)
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, role="predictor", arch={"kind": "X"}, params=params, ema=ema, adam=(avg, sq, 7),
                    meta={"step": 7})
    raw = path.read_bytes()
    assert raw[:8] == MAGIC
    assert int.from_bytes(raw[8:12], "little") == 1
    header, sec = read_checkpoint(path)
    assert header["role"] == "predictor" and header["adam_step"] == 7 and header["meta"] == {"step": 7}
    assert np.array_equal(sec["params"], params) and np.array_equal(sec["ema"], ema)
    assert np.array_equal(sec["adam_exp_avg_sq"], sq)
    assert sec["params"].dtype == np.dtype("<f4")


def test_errors(tmp_path):
    with pytest.raises(CheckpointError, match="role"):
        save_checkpoint(tmp_path / "a", role="other", arch={}, params=np.zeros(1, np.float32))
    (tmp_path / "bad").write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(CheckpointError, match="magic"):
        read_checkpoint(tmp_path / "bad")
    save_checkpoint(tmp_path / "ok", role="score-regen", arch={}, params=np.zeros(3, np.float32))
    (tmp_path / "trunc").write_bytes((tmp_path / "ok").read_bytes()[:-2])
    with pytest.raises(CheckpointError, match="bytes"):
        read_checkpoint(tmp_path / "trunc")
    data = bytearray((tmp_path / "ok").read_bytes())
    data[8] = 9
    (tmp_path / "ver").write_bytes(bytes(data))
    with pytest.raises(CheckpointError, match="version"):
        read_checkpoint(tmp_path / "ver")


def test_adam_state_roundtrip():
    torch.manual_seed(0)
    net = torch.nn.Linear(3, 2)
    opt = torch.optim.Adam(net.parameters(), lr=1e-2)
    net(torch.randn(4, 3)).sum().backward()
    opt.step()
    avg, sq, step = adam_state_vectors(opt, list(net.parameters()))
    assert step == 1
    net2 = torch.nn.Linear(3, 2)
    opt2 = torch.optim.Adam(net2.parameters(), lr=1e-2)
    load_adam_state(opt2, list(net2.parameters()), avg, sq, step)
    avg2, sq2, step2 = adam_state_vectors(opt2, list(net2.parameters()))
    assert np.array_equal(avg, avg2) and np.array_equal(sq, sq2) and step2 == 1
