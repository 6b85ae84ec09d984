import json

import numpy as np
import pytest
import torch

from cbhvt import model as model_mod
from cbhvt.backend import ConfigurationError, NumericError
from cbhvt.cli import main
from cbhvt.data import SynthConfig, save_dataset, synth_generate
from cbhvt.harness import (RunRecord, TrainConfig, ablate, build_pipeline, comparison_pairs, evaluate,
                           format_table, infer, load_model, save_model, train)
from cbhvt.metrics import MatchCriterion, MetricsReport
from cbhvt.model import to_tensor


def tiny(n=4, seed=0, prefix="t"):
    return synth_generate(SynthConfig(n_images=n, image_size=64, blobs_per_image=(2, 3), radius_px=(5, 7),
                                      seed=seed, id_prefix=prefix))


def quick(**kw):
    base = dict(epochs=1, batch_size=2, seed=0, max_iterations=2)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def trained():
    data = tiny()
    return train(quick(epochs=2, max_iterations=4), data, log_every=0), data


def test_defaults_echo_table():
    c = TrainConfig()
    assert (c.epochs, c.learning_rate, c.weight_decay, c.momentum, c.optimizer, c.batch_size) == \
        (30, 0.0025, 0.0001, 0.9, "sgd", 4)


def test_config_errors_list_valid_options():
    with pytest.raises(ConfigurationError, match="Channel Generator-1"):
        TrainConfig(generator_combo="Channel Generator-9")
    with pytest.raises(ConfigurationError, match="Channel Merger-1"):
        build_pipeline("Channel Generator-1", "nope")
    with pytest.raises(ConfigurationError, match="bogus"):
        TrainConfig.from_dict({"bogus": 1})
    with pytest.raises(ConfigurationError):
        TrainConfig(optimizer="adam")


def test_config_hash_stable_under_reordering():
    d = TrainConfig(seed=3).to_dict()
    rev = TrainConfig.from_dict(dict(reversed(list(d.items()))))
    assert rev.hash() == TrainConfig(seed=3).hash()
    assert TrainConfig(seed=4).hash() != TrainConfig(seed=3).hash()


def test_parameter_count_deterministic():
    count = lambda: sum(p.numel() for p in build_pipeline("Channel Generator-1", "Channel Merger-1").parameters())
    torch.manual_seed(0)
    a = count()
    torch.manual_seed(1)
    assert count() == a


def test_zero_learning_rate_keeps_parameters():
    data = tiny()
    cfg = quick(learning_rate=0.0, weight_decay=0.0, max_iterations=None)
    torch.manual_seed(cfg.seed)
    rec = train(cfg, data, log_every=0)
    from cbhvt.harness import seed_everything
    from cbhvt.model import CBHVTNet
    seed_everything(cfg.seed)
    fresh = CBHVTNet(cfg.model_config())
    for (name, a), b in zip(rec.model.state_dict().items(), fresh.state_dict().values()):
        if "running" in name or "num_batches" in name:
            continue  # batch-norm statistics update without gradients
        assert torch.equal(a, b), name


def test_dead_branch_detector():
    model = build_pipeline("Channel Generator-1", "Channel Merger-1")
    model.train()
    s = tiny(1)[0]
    tgt = [{"boxes": s.boxes, "labels": s.labels, "masks": s.masks}]
    model.loss(to_tensor(s.image), tgt, torch.Generator().manual_seed(0)).total.backward()
    norms = {k: sum(float(p.grad.norm()) for p in ps if p.grad is not None)
             for k, ps in model.trainable_groups().items()}
    assert norms and all(v > 0 for v in norms.values()), {k: v for k, v in norms.items() if v == 0}


def test_loss_log_sums_exactly(trained):
    rec, _ = trained
    assert len(rec.losses) == 4
    for row in rec.losses:
        assert row["total"] == row["l_c"] + row["l_l"] + row["l_b"]


def test_evaluate_twice_identical(trained):
    rec, data = trained
    a = evaluate(rec.model, data)
    b = evaluate(rec.model, data)
    assert a == b


def test_checkpoint_round_trip(trained, tmp_path):
    rec, data = trained
    path = save_model(rec.model, tmp_path / "m.ckpt")
    loaded = load_model(path)
    assert evaluate(path, data) == evaluate(rec.model, data)
    assert loaded.config.to_dict() == rec.model.config.to_dict()


def test_infer_on_unlabeled(trained):
    rec, data = trained
    unlabeled = tiny(2, seed=7)
    for s in unlabeled:
        s.labeled = False
    with pytest.raises(ConfigurationError, match="infer"):
        evaluate(rec.model, unlabeled)
    dets = infer(rec.model, unlabeled)
    assert set(dets) == {s.id for s in unlabeled}


def test_toy_evaluation_hand_counts(trained, monkeypatch):
    rec, data = trained
    from cbhvt import harness
    from cbhvt.heads import Detection
    s = data[0]
    fake = {s.id: [Detection(tuple(s.boxes[0]), 1, 0.9, np.ones((1, 1), np.uint8)),
                   Detection((0.0, 0.0, 2.0, 2.0), 1, 0.8, np.ones((1, 1), np.uint8))]}
    monkeypatch.setattr(harness, "infer", lambda *a, **k: fake)
    rep = evaluate(rec.model, [s])
    assert (rep.tp, rep.fp, rep.fn) == (1, 1, len(s) - 1)


def test_run_record_saved(tmp_path):
    data = tiny()
    rec = train(quick(output_dir=str(tmp_path)), data, log_every=0)
    doc = json.loads((tmp_path / "run.json").read_text())
    assert doc["config_hash"] == rec.config_hash and len(doc["losses"]) == 2
    assert (tmp_path / "epoch_000.ckpt").exists() and (tmp_path / "final.ckpt").exists()
    assert MetricsReport(**{**doc["metrics"]["train"]}) == rec.metrics["train"]


def test_nan_aborts_with_component_and_last_good(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = model_mod.loss_bce

    def flaky(p, y):
        calls["n"] += 1
        out = real(p, y)
        # first epoch (2 steps × 2 images) is clean; the next step turns NaN
        return out * float("nan") if calls["n"] > 4 else out

    monkeypatch.setattr(model_mod, "loss_bce", flaky)
    with pytest.raises(NumericError, match="l_b"):
        train(quick(epochs=3, max_iterations=None, output_dir=str(tmp_path)), tiny(), log_every=0)
    assert (tmp_path / "last_good.ckpt").exists()
    load_model(tmp_path / "last_good.ckpt")


def test_batch_larger_than_dataset():
    with pytest.raises(ConfigurationError):
        train(quick(batch_size=8), tiny(2))


def test_ablate_rows_and_error_capture():
    pairs = comparison_pairs()
    assert len(pairs) == 6
    combos = ["Channel Generator-1", "Channel Generator-1"]
    mergers = ["Channel Merger-1", "Channel Merger-2"]
    rows = ablate(combos, mergers, quick(max_iterations=1), tiny(), {"test": tiny(2, 3, "u")})
    assert [r["name"] for r in rows] == ["Comparison Model-1", "Comparison Model-2"]
    assert all(r["status"] == "ok" and "test_f_score" in r for r in rows)
    bad = ablate(["Channel Generator-1", "Channel Generator-1"], ["Channel Merger-1", "missing"],
                 quick(max_iterations=1), tiny())
    assert bad[0]["status"] == "ok" and bad[1]["status"].startswith("error")
    assert "Comparison Model-2" in format_table(bad)


def test_six_ablation_rows_named(monkeypatch):
    from cbhvt import harness
    rec = RunRecord({}, "x", [{"total": 1.0}], [], {"train": MetricsReport.from_counts(1, 0, 0)})
    monkeypatch.setattr(harness, "train", lambda *a, **k: rec)
    pairs = comparison_pairs()
    rows = ablate([c for c, _ in pairs], [m for _, m in pairs], quick(), tiny())
    assert [r["name"] for r in rows] == [f"Comparison Model-{k}" for k in range(1, 7)]


# command line -------------------------------------------------------------------

def test_cli_end_to_end(tmp_path, capsys):
    train_dir, test_dir, out = tmp_path / "tr", tmp_path / "te", tmp_path / "run"
    save_dataset(tiny(4), train_dir)
    save_dataset(tiny(2, 5, "h"), test_dir)
    assert main(["synth", "--n", "2", "--size", "128", "--seed", "1", "--out", str(tmp_path / "s")]) == 0
    assert len(json.loads((tmp_path / "s" / "annotations.json").read_text())["images"]) == 2
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"epochs": 1, "batch_size": 2, "data": str(train_dir)}))
    assert main(["train", "--config", str(cfg), "--seed", "0", "--max-iterations", "1",
                 "--eval-data", str(test_dir), "--out", str(out)]) == 0
    run = json.loads((out / "run.json").read_text())
    assert run["config"]["max_iterations"] == 1 and "test" in run["metrics"]
    ckpt = str(out / "final.ckpt")
    assert main(["eval", "--checkpoint", ckpt, "--data", str(test_dir), "--out", str(tmp_path / "m.json")]) == 0
    assert main(["infer", "--checkpoint", ckpt, "--data", str(test_dir), "--out", str(tmp_path / "d.json")]) == 0
    assert json.loads((tmp_path / "d.json").read_text())["format_version"] == 1
    assert main(["report", "--run", str(out / "run.json"), "--metrics", str(tmp_path / "m.json"),
                 "--out", str(tmp_path / "rep")]) == 0
    assert (tmp_path / "rep" / "loss_curve.png").exists() and (tmp_path / "rep" / "metrics.md").exists()


def test_cli_exit_codes(tmp_path, capsys):
    with pytest.raises(SystemExit):
        main(["train", "--data", "x"])  # --seed is mandatory
    assert main(["train", "--seed", "0", "--data", str(tmp_path), "--combo", "bogus"]) == 2
    assert main(["train", "--seed", "0", "--data", str(tmp_path / "missing")]) == 3
    bad = tmp_path / "c.json"
    bad.write_text("[1, 2]")
    assert main(["train", "--seed", "0", "--config", str(bad)]) == 2


def test_cli_numeric_exit_code(tmp_path, monkeypatch):
    save_dataset(tiny(2), tmp_path / "d")
    monkeypatch.setattr(model_mod, "loss_bce", lambda p, y: torch.tensor(float("nan")))
    assert main(["train", "--seed", "0", "--data", str(tmp_path / "d"), "--batch-size", "2", "--epochs", "1"]) == 4


def test_cli_gradcheck_subset(capsys, monkeypatch):
    from cbhvt import harness
    from cbhvt.backend import GradCheckReport
    reports = [GradCheckReport("fpn[w]", 2e-6)]
    monkeypatch.setattr(harness, "gradcheck_suite", lambda seeds, tolerance: reports)
    assert main(["gradcheck", "--seeds", "1"]) == 0
    assert "PASS fpn" in capsys.readouterr().out
    reports.append(GradCheckReport("rpn_head[b]", 3e-3))
    assert main(["gradcheck", "--seeds", "1"]) == 4
    assert "FAIL rpn_head" in capsys.readouterr().out


def test_smoothed_loss_non_increasing():
    # full-batch overfit fixture; 10-step window means must never rise
    data = tiny()
    rec = train(TrainConfig(seed=0, epochs=10 ** 6, batch_size=4, learning_rate=0.01, max_iterations=100), data,
                log_every=0)
    totals = np.array([r["total"] for r in rec.losses])
    windows = totals.reshape(-1, 10).mean(1)
    assert np.all(np.diff(windows) <= 0), np.round(windows, 3)
