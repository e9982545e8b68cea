import csv
import math

import numpy as np
import pytest
import torch

from xbld.errors import ConfigError
from xbld.modelzoo import ModelHandle
from xbld.refine import CentroidCache, RefineConfig, refine
from xbld.xblloss import LossCoefficients


class TestCentroidCache:
    def test_full_mask(self):
        assert CentroidCache((14, 14)).get("a", np.ones((224, 224))) == (6.5, 6.5)

    def test_hit_returns_cached_value(self):
        cache = CentroidCache((7, 7))
        m = np.zeros((28, 28))
        m[:8, :8] = 1
        first = cache.get("a", m)
        assert cache.get("a", m.copy()) == first and len(cache) == 1

    def test_changed_mask_invalidates(self):
        cache = CentroidCache((7, 7))
        m = np.zeros((28, 28))
        m[:8, :8] = 1
        before = cache.get("a", m)
        m2 = np.zeros((28, 28))
        m2[-8:, -8:] = 1
        assert cache.get("a", m2) != before

    def test_empty_mask_skipped(self):
        cache = CentroidCache((7, 7))
        g = cache.get("z", np.zeros((28, 28)))
        assert all(math.isnan(v) for v in g) and cache.skipped == {"z"}


def test_bad_config():
    with pytest.raises(ConfigError):
        RefineConfig(epochs=0)
    with pytest.raises(ConfigError):
        RefineConfig(method="cdep")


def _probe_expl(handle, data):
    from xbld.xblloss import make_batch, xbl_d_expl_loss

    batch = make_batch(handle, data.images, data.labels, data.con_masks, obj_masks=data.obj_masks)
    loss, _ = xbl_d_expl_loss(handle, batch)
    return loss.item()


def test_xbl_d_reduces_explanation_term(trained, train_split, tmp_path):
    data = train_split.subset(range(128))
    before = _probe_expl(trained, data)
    refined, trace = refine(trained, data, RefineConfig(epochs=4, seed=0, coeffs=LossCoefficients(
        2.7, 10.0, 1e-5)), out_dir=tmp_path)
    after = _probe_expl(refined, data)
    assert before > 0
    assert after < before
    assert refined.provenance["method"] == "xbl_d"
    # the parent model is left untouched
    assert _probe_expl(trained, data) == pytest.approx(before)


def test_logs_satisfy_breakdown_identity(trained, train_split, tmp_path):
    cfg = RefineConfig(epochs=1, seed=1)
    refine(trained, train_split.subset(range(64)), cfg, out_dir=tmp_path)
    with open(tmp_path / "losses.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2
    c = cfg.coeffs
    for r in rows:
        expected = c.lambda1 * float(r["ce"]) + c.lambda2 * float(r["expl"]) + c.lam * float(r["reg"])
        assert float(r["total"]) == pytest.approx(expected, rel=1e-6)


def test_outputs_and_reload(trained, train_split, test_split, tmp_path):
    refined, trace = refine(trained, train_split.subset(range(32)), RefineConfig(epochs=2),
                            out_dir=tmp_path, test=test_split.subset(range(20)))
    for name in ("trace.csv", "losses.csv", "checkpoint.pt", "meta.json"):
        assert (tmp_path / name).exists()
    assert len(trace) == 2 and all(0 <= a <= 1 for a in trace.column("test_accuracy"))
    loaded = ModelHandle.load(tmp_path, device="cpu")
    x = refined.prepare(test_split.images[:4])
    with torch.no_grad():
        assert torch.equal(refined.model(x), loaded.model(x))


def test_early_stop(trained, train_split):
    _, trace = refine(trained, train_split.subset(range(32)), RefineConfig(epochs=5, stop_loss=1e9))
    assert len(trace) == 1


def test_same_seed_same_weights(trained, train_split):
    data = train_split.subset(range(48))
    a, _ = refine(trained, data, RefineConfig(epochs=1, seed=3, method="rrr_g"))
    b, _ = refine(trained, data, RefineConfig(epochs=1, seed=3, method="rrr_g"))
    for pa, pb in zip(a.model.parameters(), b.model.parameters()):
        assert torch.equal(pa, pb)


@pytest.mark.parametrize("method", ["rrr", "rrr_g"])
def test_baselines_run(trained, train_split, method):
    refined, trace = refine(trained, train_split.subset(range(32)), RefineConfig(epochs=1, method=method))
    assert refined.provenance["method"] == method
    assert all(math.isfinite(v) for v in trace.epochs[0].values() if v is not None)


def test_lambda2_zero_warns(trained, train_split):
    with pytest.warns(RuntimeWarning, match="lambda2 = 0"):
        _, trace = refine(trained, train_split.subset(range(16)),
                          RefineConfig(epochs=1, coeffs=LossCoefficients(2.7, 0.0, 1e-5)))
    assert trace.column("expl") == [0.0]
