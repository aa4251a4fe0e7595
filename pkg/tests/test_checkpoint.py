import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mscnmt import checkpoint as ck
from mscnmt.config import TrainConfig
from mscnmt.model import MscModel
from mscnmt.training import Adam, make_checkpoint

from conftest import tiny


def make(seed=0, step=3, cfg=None):
    cfg = cfg or tiny()
    model = MscModel(cfg, seed)
    opt = Adam(model.params)
    for p in model.params.values():
        p.grad = np.full(p.shape, 0.1)
    opt.step(1e-3)
    return make_checkpoint(model, TrainConfig(seed=seed), opt, step)


def test_header_layout():
    blob = ck.encode(make())
    assert blob[:4] == b"MSCK"
    assert struct.unpack_from("<I", blob, 4)[0] == ck.VERSION
    (n,) = struct.unpack_from("<Q", blob, 8)
    text = blob[16 : 16 + n].decode()
    assert "mode=msc" in text and "meta.step=3" in text


def test_save_load_save_byte_identical(tmp_path):
    a = ck.save(make(), tmp_path / "a.msck")
    b = ck.save(ck.load(a), tmp_path / "b.msck")
    assert a.read_bytes() == b.read_bytes()


def test_roundtrip_values_are_float32_exact(tmp_path):
    c = make()
    back = ck.load(ck.save(c, tmp_path / "x.msck"))
    for k, v in c.params.items():
        np.testing.assert_array_equal(back.params[k], v.astype(np.float32).astype(np.float64))
    assert set(back.adam_m) == set(c.params) and back.step == 3
    assert back.cfg == c.cfg and back.train_cfg == c.train_cfg


def test_no_temp_files_left(tmp_path):
    ck.save(make(), tmp_path / "x.msck")
    assert [p.name for p in tmp_path.iterdir()] == ["x.msck"]


def test_bad_magic_and_truncation():
    blob = ck.encode(make())
    with pytest.raises(ck.CheckpointError, match="magic"):
        ck.decode(b"XXXX" + blob[4:])
    with pytest.raises(ck.CheckpointError, match="truncated"):
        ck.decode(blob[:-10])


def test_average_identical_is_identity(tmp_path):
    path = ck.save(make(), tmp_path / "a.msck")
    avg = ck.average_checkpoints([path] * 4)
    one = ck.load(path)
    for k in one.params:
        np.testing.assert_array_equal(avg.params[k], one.params[k])


def test_average_of_zero_and_two_is_one(tmp_path):
    a, b = make(), make()
    a.params = {k: np.zeros_like(v) for k, v in a.params.items()}
    b.params = {k: np.full_like(v, 2.0) for k, v in b.params.items()}
    paths = [ck.save(a, tmp_path / "a.msck"), ck.save(b, tmp_path / "b.msck")]
    for v in ck.average_checkpoints(paths).params.values():
        assert np.all(v == 1.0)


def test_average_matches_elementwise_mean_and_is_order_free(tmp_path):
    paths = [ck.save(make(seed=s), tmp_path / f"{s}.msck") for s in range(5)]
    loaded = [ck.load(p) for p in paths]
    avg = ck.average_checkpoints(paths)
    rev = ck.average_checkpoints(paths[::-1])
    for k in avg.params:
        ref = np.mean([c.params[k] for c in loaded], axis=0)
        np.testing.assert_allclose(avg.params[k], ref, rtol=1e-15, atol=1e-15)
        np.testing.assert_allclose(rev.params[k], avg.params[k], rtol=1e-15, atol=1e-15)


def test_average_rejects_config_mismatch(tmp_path):
    a = ck.save(make(), tmp_path / "a.msck")
    b = ck.save(make(cfg=tiny("bsc")), tmp_path / "b.msck")
    with pytest.raises(ck.CheckpointError):
        ck.average_checkpoints([a, b])
    with pytest.raises(ck.CheckpointError):
        ck.average_checkpoints([])


@settings(max_examples=15, deadline=None)
@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4), st.integers(0, 99))
def test_encode_decode_encode_property(shapes, seed):
    rng = np.random.default_rng(seed)
    c = make()
    c.params = {f"t{i}": rng.normal(size=s) for i, s in enumerate(shapes)}
    c.adam_m = c.adam_v = {}
    blob = ck.encode(c)
    assert ck.encode(ck.decode(blob)) == blob
