import numpy as np
import pytest

from dcfdg.data import DomainData
from dcfdg.errors import CheckpointError, ConfigError
from dcfdg.model import HyperParams, LossBreakdown, build_model
from dcfdg.nets import ModelDims
from dcfdg.train import (
    TrainConfig,
    TrainLog,
    apply_ablation,
    batches,
    load_checkpoint,
    save_checkpoint,
    state_arrays,
    train_dcfdg,
)

DIMS = ModelDims(d_xs=1, d_xns=1, d_us=4, d_uns=4, d_v1=2, d_v2=2, h=4)


def _domains(n_dom=3, n=40, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for t in range(1, n_dom + 1):
        y = rng.integers(0, 2, n)
        a = (rng.random(n) < 0.3 + 0.4 * y).astype(int)
        xs = (y * 2.0 - 1.0 + 0.1 * t + 0.5 * rng.normal(size=n))[:, None]
        xns = (y - 0.5 + 0.3 * rng.normal(size=n))[:, None]
        out.append(DomainData(t, xs, xns, a, y))
    return out


def _cfg(**kw):
    base = dict(hyper=HyperParams(DIMS), epochs_per_domain=2, batch_size=16, seed=3)
    base.update(kw)
    return TrainConfig(**base)


def test_config_validation():
    with pytest.raises(ConfigError):
        _cfg(ablation_mode="nope")
    with pytest.raises(ConfigError):
        _cfg(epochs_per_domain=-1)
    with pytest.raises(ConfigError):
        train_dcfdg([], _cfg())


def test_batches_cover_every_row_once():
    parts = batches(100, 32, np.random.default_rng(0))
    assert sorted(np.concatenate(parts).tolist()) == list(range(100))
    assert max(len(p) for p in parts) <= 32 and min(len(p) for p in parts) >= 2


def test_zero_epochs_returns_initial_params_and_advances_priors():
    res = train_dcfdg(_domains(), _cfg(epochs_per_domain=0))
    fresh, _ = build_model(HyperParams(DIMS), "full", 3)
    for (k, p), q in zip(res.model.named_parameters().items(), fresh.parameters()):
        assert p.data.tobytes() == q.data.tobytes(), k
    assert res.log.records == []
    assert [int(p.steps[0]) for p in res.model.priors] == [3, 3]


def test_lstm_steps_equal_domain_count():
    res = train_dcfdg(_domains(4), _cfg(epochs_per_domain=1))
    assert all(int(p.steps[0]) == 4 for p in res.model.priors)


def test_training_is_deterministic():
    a = train_dcfdg(_domains(), _cfg()).log.to_csv()
    b = train_dcfdg(_domains(), _cfg()).log.to_csv()
    assert a == b
    assert a.splitlines()[0].startswith("t,epoch,step,recon_s")


def test_loss_decreases():
    res = train_dcfdg(_domains(2, 64), _cfg(epochs_per_domain=15, batch_size=32))
    means = res.log.epoch_means()
    assert means[-1][2] < means[0][2]


def test_log_rejects_out_of_order():
    res = train_dcfdg(_domains(1), _cfg(epochs_per_domain=1))
    log = TrainLog()
    rec = res.log.records[0]
    lb = LossBreakdown(**{k: rec[k] for k in LossBreakdown.COLUMNS})
    log.append(1, 0, 1, lb)
    with pytest.raises(ConfigError):
        log.append(1, 0, 0, lb)


def test_ablation_modes():
    h = HyperParams(DIMS, lambda_f=0.7)
    assert apply_ablation("full", h) == ("full", h)
    assert apply_ablation("no_fairness", h)[1].lambda_f == 0.0
    assert apply_ablation("no_disentangle", h)[0] == "no_disentangle"
    res = train_dcfdg(_domains(2), _cfg(ablation_mode="no_disentangle", epochs_per_domain=1))
    assert all(r["tc"] == 0.0 and r["fair"] == 0.0 for r in res.log.records)


def test_checkpoint_roundtrip_is_byte_identical(tmp_path):
    res = train_dcfdg(_domains(2), _cfg(epochs_per_domain=1))
    p1, p2 = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(p1, res.model, res.disc, HyperParams(DIMS))
    model, disc, hyper, _ = load_checkpoint(p1)
    save_checkpoint(p2, model, disc, hyper)
    assert p1.read_bytes() == p2.read_bytes()
    a, b = state_arrays(res.model, res.disc), state_arrays(model, disc)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    assert [int(p.steps[0]) for p in model.priors] == [2, 2]


def test_truncated_checkpoint_is_rejected(tmp_path):
    res = train_dcfdg(_domains(1), _cfg(epochs_per_domain=0))
    path = tmp_path / "c.ckpt"
    save_checkpoint(path, res.model, res.disc, HyperParams(DIMS))
    path.write_bytes(path.read_bytes()[:-100])
    with pytest.raises(CheckpointError, match="corrupt"):
        load_checkpoint(path)


def test_config_checkpoint_path_written(tmp_path):
    path = tmp_path / "run.ckpt"
    train_dcfdg(_domains(1), _cfg(epochs_per_domain=1, checkpoint_path=str(path)))
    assert load_checkpoint(path)[0].mode == "full"
