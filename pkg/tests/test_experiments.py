"""Smoke tests: every driver runs end to end on a tiny setup and reports the expected fields."""

import json

import numpy as np
import pytest

from anw.experiments import (
    EXPERIMENTS,
    DeskSetup,
    ModelCache,
    exp_augmentations,
    exp_blue,
    exp_defenses,
    exp_heldout,
    exp_mae,
    exp_mia,
    exp_multiuser,
    exp_quantity,
    exp_recovery,
    exp_signatures,
    loss_gap,
    recovery_run,
    run_experiment,
)
from anw.train import TrainConfig
from anw.verify import SignatureSpace, VerificationReport

SETUP = DeskSetup(num_images=80, height=8, width=8, num_classes=3, heldout_fraction=0.25, user_share=0.1)
CFG = TrainConfig(epochs=1, batch_size=16, width=2)
SPACE = SignatureSpace(4)


def test_setup_split():
    tr, ho = SETUP.data(0)
    assert len(tr) == 60 and len(ho) == 20
    assert SETUP.user_count(len(tr)) == 6
    tr2, _ = SETUP.data(0)
    assert tr.equals(tr2)


def test_cache_roundtrip(tmp_path):
    cache = ModelCache(tmp_path)
    a = recovery_run(0, 90.0, setup=SETUP, config=CFG, space=SPACE, cache=cache)
    files = sorted(p.name for p in tmp_path.iterdir())
    assert len(files) == 2
    b = recovery_run(0, 90.0, setup=SETUP, config=CFG, space=SPACE, cache=cache)
    assert a.model.equals(b.model)
    assert b.train_seconds == pytest.approx(a.train_seconds)
    assert json.loads(next(tmp_path.glob("*.json")).read_text())["seed"] == 0
    # output noise does not change the weights, so it shares the checkpoint
    recovery_run(0, 90.0, setup=SETUP, config=CFG.with_(dp_sigma2=0.1), space=SPACE, cache=cache)
    assert len(list(tmp_path.iterdir())) == 2


def test_recovery_run_users():
    run = recovery_run(1, 90.0, setup=SETUP, config=CFG, space=SPACE)
    assert len(run.watermark_indices) == 6 and len(run.clean_indices) == 6
    assert not set(run.watermark_indices) & set(run.clean_indices)
    assert set(run.reports) == {"watermarked", "clean", "heldout"}
    assert run.reports["watermarked"].matched is not None and run.reports["clean"].matched is None


def test_loss_gap():
    rep = VerificationReport("grid", 0.0, 15.0, [(0.0, 1.0), (30.0, 0.2), (60.0, 0.6)])
    assert loss_gap(rep) == pytest.approx(0.6)


def test_recovery_summary():
    out = exp_recovery(seeds=[0, 1], signature=90.0, setup=SETUP, config=CFG, space=SPACE)
    assert len(out["runs"]) == 2
    for k in ("match_rate", "innocence_rate", "heldout_innocence_rate", "adv_p", "mean_cosine"):
        assert k in out
    assert -1 <= out["mean_cosine"] <= 1


def test_quantity_and_signatures():
    q = exp_quantity(counts=(1, 3), setup=SETUP, config=CFG)
    assert [r["count"] for r in q["runs"]] == [1, 3]
    s = exp_signatures(setup=SETUP, config=CFG, space=SPACE)
    assert [r["signature"] for r in s["runs"]] == [90.0, 180.0, 270.0]


def test_augmentations_and_defenses():
    a = exp_augmentations(setup=SETUP, config=CFG, variants={"cutout": {"cutout": 3}})
    assert set(a["runs"]) == {"baseline", "cutout", "hue_jitter"}
    assert all("loss_gap" in r for r in a["runs"].values())
    d = exp_defenses(setup=SETUP, config=CFG, finetune_epochs=1)
    assert d["pruning"]["fraction"] == 0.3 and d["fine_tuning"]["images"] == 6


def test_multiuser_and_heldout():
    m = exp_multiuser(num_users=3, setup=SETUP, config=CFG, space=SPACE)
    assert m["shared"]["attack"] == [] and len(m["user_specific"]["attack"]) == 3
    h = exp_heldout(users=2, setup=SETUP, config=CFG, space=SPACE)
    assert len(h["users"]) == 2


def test_mia():
    out = exp_mia(num_users=2, user_size=4, known=5, setup=SETUP, config=CFG, space=SPACE)
    assert [u["member"] for u in out["users"]] == [True, False]
    for k in ("mia_std_accuracy", "mia_pow_accuracy", "anw_accuracy", "heldout_called_member"):
        assert 0 <= out[k] <= 1


def test_mae_and_blue():
    out = exp_mae(num_models=2, num_images=40, size=8, user_size=5, config=CFG)
    assert len(out["clean"]["with_user"]) == 1 and "mae" in out["watermarked"]
    b = exp_blue(pixels=8, setup=SETUP, config=CFG)
    assert len(b["losses"]) == 9 and isinstance(b["matched"], bool)


def test_dispatch():
    assert set(EXPERIMENTS) >= {"quantity", "signatures", "augmentations", "defenses", "multiuser", "mia", "mae", "heldout"}
    with pytest.raises(KeyError):
        run_experiment("nope")
    out = run_experiment("heldout", users=1, setup=SETUP, config=CFG, space=SPACE)
    assert out["experiment"] == "heldout"
