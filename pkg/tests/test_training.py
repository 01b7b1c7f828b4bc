import io
import logging

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from matsr.data import ImagePair, dihedral, dihedral_inverse, make_pair
from matsr.errors import ConfigurationError, NonFiniteError, ValidationError
from matsr.gradcheck import grad_check
from matsr.model import MATModel, read_checkpoint, tiny_preset
from matsr.tensor import Tensor
from matsr.training import (
    DEFAULT_MILESTONES, AdamState, TrainConfig, adam_step, format_lr, l1_loss, log_line, lr_at,
    sample_batch, train_loop, train_step,
)

from conftest import rand_t


# --- L1 ---------------------------------------------------------------------------

def test_l1_values(rng):
    a = rand_t(rng, 1, 3, 4, 4)
    assert float(l1_loss(a, a).data) == 0.0
    assert float(l1_loss(Tensor(a.data + 0.5, dtype=np.float64), a).data) == pytest.approx(0.5, abs=1e-12)
    with pytest.raises(ValidationError):
        l1_loss(a, rand_t(rng, 1, 3, 4, 5))


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_l1_adjoint(seed):
    rng = np.random.default_rng(seed)
    a, b = rand_t(rng, 1, 2, 3, 3), rand_t(rng, 1, 2, 3, 3)
    rep = grad_check(l1_loss, [a, b], seed=seed)
    assert rep.passed, str(rep)


# --- Adam -------------------------------------------------------------------------

def test_adam_zero_gradient_is_fixed_point():
    params = {"w": Tensor(np.array([1.0, -2.0]), dtype=np.float64)}
    state = AdamState.zeros_like(params)
    adam_step(params, {"w": np.zeros(2)}, state, lr=0.1)
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0])
    assert not state.m["w"].any() and not state.v["w"].any() and state.t == 1


def test_adam_first_step_is_sign():
    params = {"w": Tensor(np.zeros(3), dtype=np.float64)}
    state = AdamState.zeros_like(params)
    adam_step(params, {"w": np.array([3.0, -0.2, 1e-3])}, state, lr=0.01)
    np.testing.assert_allclose(params["w"].data, [-0.01, 0.01, -0.01], rtol=1e-4)


def test_adam_quadratic_descends():
    params = {"w": Tensor(np.array([1.0]), dtype=np.float64)}
    state = AdamState.zeros_like(params)
    prev = 1.0
    for _ in range(10):
        adam_step(params, {"w": 2 * params["w"].data}, state, lr=0.1)
        cur = abs(float(params["w"].data[0]))
        assert cur < prev
        prev = cur


def test_adam_nonfinite_names_parameter():
    params = {"conv.w": Tensor(np.zeros(2)), "b": Tensor(np.zeros(1))}
    with pytest.raises(NonFiniteError, match="conv.w"):
        adam_step(params, {"conv.w": np.array([np.nan, 0.0]), "b": np.zeros(1)},
                  AdamState.zeros_like(params), lr=0.1)


# --- schedule ----------------------------------------------------------------------

def test_lr_schedule_examples():
    cfg = TrainConfig()
    assert cfg.milestones == DEFAULT_MILESTONES and cfg.total_iters == 500_000
    assert lr_at(0, cfg) == 2e-4
    assert lr_at(250_000, cfg) == 1e-4
    assert lr_at(499_999, cfg) == pytest.approx(1.25e-5, rel=1e-12)


def test_lr_non_increasing_with_all_halvings():
    cfg = TrainConfig(lr0=1.0, milestones=(3, 5, 9), total_iters=12)
    lrs = [lr_at(i, cfg) for i in range(cfg.total_iters)]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert lrs[-1] == 0.5 ** 3


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        TrainConfig(milestones=(5, 3), total_iters=10)
    with pytest.raises(ConfigurationError):
        TrainConfig(milestones=(5, 10), total_iters=10)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr0=0.0)
    with pytest.raises(ConfigurationError):
        TrainConfig.from_dict({"lr": 1e-3})
    cfg = TrainConfig(milestones=(2,), total_iters=4)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_log_format():
    assert format_lr(2e-4) == "2.0e-4"
    assert log_line(1200, 2e-4, 0.034121) == "iter=1200 lr=2.0e-4 l1=0.03412"


# --- sampling ----------------------------------------------------------------------

def _pair(rng, name="p", h=12, w=10, scale=2):
    hr = Tensor(rng.random((1, 3, h * scale, w * scale)))
    return make_pair(hr, scale, name)


def test_crops_are_aligned_subwindows(rng):
    pair = _pair(rng)
    src = np.random.default_rng(0)
    for _ in range(20):
        lr, hr, ts = sample_batch([pair], 4, 2, src, batch=2)
        for b, t in enumerate(ts):
            lo, hi = dihedral_inverse(lr.data[b], t), dihedral_inverse(hr.data[b], t)
            full_lr, full_hr = pair.lr.data[0], pair.hr.data[0]
            hits = [(y, x) for y in range(9) for x in range(7)
                    if np.array_equal(full_lr[:, y:y + 4, x:x + 4], lo)]
            assert hits
            y, x = hits[0]
            np.testing.assert_array_equal(full_hr[:, 2 * y:2 * y + 8, 2 * x:2 * x + 8], hi)


def test_dihedral_inverse_roundtrip(rng):
    x = rng.random((3, 5, 7))
    for t in range(8):
        np.testing.assert_array_equal(dihedral_inverse(dihedral(x, t), t), x)
    np.testing.assert_array_equal(dihedral(x, 0), x)
    assert len({dihedral(x[:, :5, :5], t).tobytes() for t in range(8)}) == 8


def test_transform_frequencies(rng):
    pair = _pair(rng, h=6, w=6)
    src = np.random.default_rng(123)
    counts = np.zeros(8)
    for _ in range(10_000):
        _, _, ts = sample_batch([pair], 2, 2, src)
        counts[ts[0]] += 1
    freq = counts / counts.sum()
    assert np.all(np.abs(freq - 0.125) <= 0.02), freq


def test_small_images_skipped_with_warning(rng, caplog):
    big, small = _pair(rng, "big", 12, 12), _pair(rng, "small", 3, 3)
    with caplog.at_level(logging.WARNING):
        lr, _, _ = sample_batch([small, big], 6, 2, np.random.default_rng(0), batch=3)
    assert lr.shape == (3, 3, 6, 6)
    assert "small" in caplog.text
    with pytest.raises(ValidationError):
        sample_batch([small], 6, 2, np.random.default_rng(0))


# --- loop ------------------------------------------------------------------------------

def _tiny_setup(rng, n=2):
    pairs = [_pair(rng, f"im{i}", 16, 16) for i in range(n)]
    cfg = TrainConfig(lr0=1e-3, milestones=(4,), total_iters=6, batch=2, patch=12,
                      log_every=2, ckpt_every=3, seed=5)
    return MATModel.create(tiny_preset(), seed=0), cfg, pairs


def test_loop_logs_and_checkpoints(rng, tmp_path):
    model, cfg, pairs = _tiny_setup(rng)
    buf = io.StringIO()
    res = train_loop(model, cfg, pairs, checkpoint_dir=tmp_path, log_file=buf)
    assert len(res.losses) == 6
    lines = buf.getvalue().splitlines()
    assert [ln.split()[0] for ln in lines] == ["iter=2", "iter=4", "iter=6"]
    assert lines[-1].split()[1] == "lr=5.0e-4"
    assert sorted(p.name for p in tmp_path.glob("*.ckpt")) == ["iter_0000003.ckpt", "iter_0000006.ckpt"]
    assert read_checkpoint(res.checkpoint).step == 6
    assert all(np.all(np.isfinite(p.data)) for p in res.model.params.values())
    # the caller's model is untouched
    assert all(np.array_equal(model.params[k].data, MATModel.create(tiny_preset(), seed=0).params[k].data)
               for k in model.params)


def test_loop_reproducible(rng):
    model, cfg, pairs = _tiny_setup(rng)
    a = train_loop(model, cfg, pairs, stop_at=3)
    b = train_loop(model, cfg, pairs, stop_at=3)
    assert a.losses == b.losses
    assert a.log_lines == b.log_lines


def test_resume_is_bit_identical(rng, tmp_path):
    model, cfg, pairs = _tiny_setup(rng)
    full = train_loop(model, cfg, pairs)
    train_loop(model, cfg, pairs, checkpoint_dir=tmp_path, stop_at=3)
    resumed = train_loop(model, cfg, pairs, resume=tmp_path / "iter_0000003.ckpt")
    assert resumed.start_iter == 3
    assert resumed.losses == full.losses[3:]
    for k in full.model.params:
        assert resumed.model.params[k].data.tobytes() == full.model.params[k].data.tobytes()


def test_resume_rejects_other_config(rng, tmp_path):
    model, cfg, pairs = _tiny_setup(rng)
    train_loop(model, cfg, pairs, checkpoint_dir=tmp_path, stop_at=1)
    other = MATModel.create(tiny_preset().replace(channels=12))
    with pytest.raises(ConfigurationError):
        train_loop(other, cfg, pairs, resume=tmp_path / "iter_0000001.ckpt")


def test_scale_mismatch(rng):
    model, cfg, pairs = _tiny_setup(rng)
    with pytest.raises(ConfigurationError):
        train_loop(MATModel.create(tiny_preset(3)), cfg, pairs)


def test_nonfinite_loss_aborts_with_dump(rng, tmp_path):
    model, cfg, pairs = _tiny_setup(rng)
    bad = ImagePair("bad", Tensor(np.full((1, 3, 16, 16), np.nan)), pairs[0].hr, 2)
    with pytest.raises(NonFiniteError):
        train_loop(model, cfg, [bad], checkpoint_dir=tmp_path)
    ck = read_checkpoint(tmp_path / "abort.ckpt")
    assert ck.step == 0
    assert all(np.all(np.isfinite(a)) for a in ck.arrays.values())


def test_single_step_changes_every_parameter(rng):
    model, cfg, pairs = _tiny_setup(rng)
    work = model.copy()
    state = AdamState.zeros_like(work.params)
    loss = train_step(work, state, cfg, pairs, 0)
    assert np.isfinite(loss) and state.t == 1
    unchanged = [k for k in work.params if np.array_equal(work.params[k].data, model.params[k].data)]
    assert not unchanged
