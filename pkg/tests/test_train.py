import numpy as np
import pytest

from acdmar.acdnet import checkpoint, model as m, train as tr
from acdmar.acdnet.checkpoint import CheckpointError
from acdmar.wcd import MaskedScene

CFG = m.NetConfig(p=3, d=4, N=2, T=1, N_p=2, n_resblocks=1)


def _scenes(n=4, H=16, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        X = rng.random((H, H))
        I = np.ones((H, H))
        I[6:9, 7:9] = 0
        Y = X + 0.1 * rng.standard_normal((H, H))
        out.append(MaskedScene(Y=Y, I=I, X_gt=X, X_li=Y + 0.01 * rng.standard_normal((H, H))))
    return out


def _tc(**kw):
    base = dict(batch_size=2, patch_size=12, lr=1e-3, epochs=3, milestones=(2,), seed=5)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_lr_schedule():
    tc = tr.TrainConfig(lr=1.0, milestones=(2, 4), epochs=6)
    assert [tc.lr_at(e) for e in range(6)] == [1.0, 1.0, 0.5, 0.5, 0.25, 0.25]
    assert tr.TrainConfig.scaled_milestones(300) == (50, 100, 150, 200)
    assert tr.TrainConfig.scaled_milestones(50) == (8, 17, 25, 33)
    assert tr.TrainConfig.short_run_milestones(40) == (24, 34)


def test_config_validation():
    for bad in (dict(batch_size=0), dict(patch_size=0), dict(lr=-1.0), dict(epochs=0)):
        with pytest.raises(ValueError):
            tr.TrainConfig(**bad)


def test_dataset_errors():
    net = m.NetworkParams.initialize(CFG)
    with pytest.raises(ValueError, match="empty"):
        tr.train(net, [], _tc())
    with pytest.raises(ValueError, match="patch"):
        tr.train(net, _scenes(), _tc(patch_size=32))
    s = _scenes(1)[0]
    with pytest.raises(ValueError):
        tr.train(net, [MaskedScene(Y=s.Y, I=s.I, X_gt=s.X_gt)], _tc())


def test_batches_deterministic_per_epoch():
    sc = _scenes(5)
    tc = _tc()
    a = tr.make_batches(sc, tc, 1)
    b = tr.make_batches(sc, tc, 1)
    c = tr.make_batches(sc, tc, 2)
    assert [x.Y.shape for x in a] == [(2, 1, 12, 12), (2, 1, 12, 12), (1, 1, 12, 12)]
    for x, y in zip(a, b):
        np.testing.assert_array_equal(x.Y, y.Y)
    assert not all(np.array_equal(x.Y, y.Y) for x, y in zip(a, c))


def test_clip_by_global_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([[4.0]])}
    tr.clip_by_global_norm(g, 1.0)
    total = np.sqrt(sum(float((v * v).sum()) for v in g.values()))
    assert total == pytest.approx(1.0)
    np.testing.assert_allclose(g["a"], [0.6, 0.0])
    h = {"a": np.array([0.1])}
    tr.clip_by_global_norm(h, 1.0)
    assert h["a"][0] == 0.1


def test_lr_zero_leaves_parameters_bit_identical():
    net = m.NetworkParams.initialize(CFG, seed=1)
    before = {k: v.copy() for k, v in net.params.items()}
    tr.train(net, _scenes(), _tc(lr=0.0, epochs=2))
    for k, v in net.params.items():
        assert np.array_equal(v, before[k]), k


def test_training_reduces_loss():
    net = m.NetworkParams.initialize(CFG, seed=2)
    sc = _scenes()
    tc = _tc(epochs=10, lr=3e-3, milestones=())
    L0 = tr.dataset_loss(net, sc, tc.weights)
    tr.train(net, sc, tc)
    assert tr.dataset_loss(net, sc, tc.weights) < L0


def test_training_deterministic(tmp_path):
    logs = []
    for run in range(2):
        net = m.NetworkParams.initialize(CFG, seed=3)
        log = tmp_path / f"log{run}.csv"
        tr.train(net, _scenes(), _tc(), val_scenes=_scenes(1, seed=9), log_path=log,
                 ckpt_path=tmp_path / f"c{run}.ckpt")
        logs.append(log.read_bytes())
    assert logs[0] == logs[1]
    assert (tmp_path / "c0.ckpt").read_bytes() == (tmp_path / "c1.ckpt").read_bytes()


def test_resume_reproduces_uninterrupted_run(tmp_path):
    sc, val = _scenes(), _scenes(1, seed=9)
    full = m.NetworkParams.initialize(CFG, seed=4)
    tr.train(full, sc, _tc(epochs=4), val_scenes=val, log_path=tmp_path / "full.csv")

    part = m.NetworkParams.initialize(CFG, seed=4)
    ck = tmp_path / "part.ckpt"
    tr.train(part, sc, _tc(epochs=2), val_scenes=val, log_path=tmp_path / "part.csv", ckpt_path=ck)
    net, adam, meta = checkpoint.load(ck)
    assert meta["epoch"] == 1
    tr.train(net, sc, _tc(epochs=4), val_scenes=val, log_path=tmp_path / "part.csv",
             resume=adam, start_epoch=meta["epoch"] + 1)
    assert (tmp_path / "part.csv").read_bytes() == (tmp_path / "full.csv").read_bytes()
    for k in full.params:
        assert np.array_equal(full.params[k], net.params[k]), k


def test_max_steps():
    net = m.NetworkParams.initialize(CFG)
    res = tr.train(net, _scenes(), _tc(epochs=10, max_steps=3))
    assert len(res.step_losses) == 3 and res.optimizer.t == 3


def test_log_columns(tmp_path):
    net = m.NetworkParams.initialize(CFG)
    tr.train(net, _scenes(), _tc(epochs=1), log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,step,loss,val_psnr,lr"
    assert len(lines) == 2


# --- checkpoint container ------------------------------------------------------

def test_checkpoint_round_trip(tmp_path):
    net = m.NetworkParams.initialize(CFG, seed=6)
    res = tr.train(net, _scenes(), _tc(epochs=1))
    path = tmp_path / "net.ckpt"
    checkpoint.save(path, net, res.optimizer, {"epoch": 0})
    back, adam, meta = checkpoint.load(path)
    assert meta == {"epoch": 0}
    assert back.config.to_dict() == net.config.to_dict()
    for k in net.params:
        assert np.array_equal(back.params[k], net.params[k])
    for bn, st in net.buffers.items():
        assert np.array_equal(back.buffers[bn]["mean"], st["mean"])
        assert back.buffers[bn]["recorded"] == st["recorded"]
    assert adam["t"] == res.optimizer.t
    for k in net.params:
        assert np.array_equal(adam["m"][k], res.optimizer.m[k])
    side = (tmp_path / "net.ckpt.txt").read_text()
    assert f"param_count={net.param_count()}" in side


def test_checkpoint_without_optimizer(tmp_path):
    net = m.NetworkParams.initialize(CFG)
    checkpoint.save(tmp_path / "a.ckpt", net)
    _, adam, meta = checkpoint.load(tmp_path / "a.ckpt")
    assert adam is None and meta is None


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "junk.ckpt"
    p.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError, match="magic"):
        checkpoint.load(p)


def test_checkpoint_bad_version(tmp_path):
    net = m.NetworkParams.initialize(CFG)
    p = tmp_path / "a.ckpt"
    checkpoint.save(p, net)
    raw = bytearray(p.read_bytes())
    raw[8] = 99
    p.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError, match="version"):
        checkpoint.load(p)
