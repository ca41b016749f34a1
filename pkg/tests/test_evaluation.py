import numpy as np
import pytest

from seamcap import evaluation as ev
from seamcap.exceptions import ConfigError, EmptyTestSet
from seamcap.kinematics import forward_kinematics
from seamcap.simulator import stack_windows


def test_oracle_scores_zero(small_dataset):
    rep = ev.evaluate(ev.OracleModel(), small_dataset.splits(0)["test"])
    assert rep.overall_cm == 0.0 and all(v == 0.0 for v in rep.per_joint.values())


def test_mean_pose_matches_direct_computation(small_dataset):
    sp = small_dataset.splits(1)
    tr = stack_windows(sp["independent_train"], hop=4)
    base = ev.MeanPosePredictor().fit(None, tr["pose"])
    rep = ev.evaluate(base, sp["test"])
    # direct: distance of every test frame to the mean pose under the subject's skeleton
    d = []
    for s in sp["test"]:
        w = s.windows(hop=1)
        ref = forward_kinematics(tr["pose"].mean(0), s.skeleton)
        d.append(np.linalg.norm(w["joints"] - ref, axis=-1))
    assert rep.overall_cm == pytest.approx(np.concatenate(d).mean() * 100, rel=1e-12)


def test_report_invariants(tiny_regressor, small_dataset, tmp_path):
    sessions = small_dataset.splits(0)["test"] + small_dataset.splits(1)["test"]
    rep = ev.evaluate(tiny_regressor, sessions, config={"k": 1})
    assert np.mean(list(rep.per_joint.values())) == pytest.approx(rep.overall_cm, abs=1e-9)
    assert sum(v["frames"] for v in rep.per_category.values()) == rep.n_frames
    frames = sum(v["frames"] * v["cm"] for v in rep.per_category.values())
    assert frames / rep.n_frames == pytest.approx(rep.overall_cm, rel=1e-9)
    assert set(rep.per_subject) == {0, 1}
    assert rep.std_cm == pytest.approx(np.std(list(rep.per_subject.values())))
    again = ev.evaluate(tiny_regressor, sessions, config={"k": 1})
    assert again.to_dict() == rep.to_dict()
    rep.save(tmp_path)
    assert (tmp_path / "report.json").exists() and (tmp_path / "report_joints.svg").exists()
    assert "wristL" in (tmp_path / "report.txt").read_text()


def test_smoothing_changes_only_when_enabled(tiny_regressor, small_dataset):
    sessions = small_dataset.splits(0)["test"]
    a = ev.evaluate(tiny_regressor, sessions, smooth=False)
    b = ev.evaluate(tiny_regressor, sessions, smooth=True)
    assert a.fingerprint != b.fingerprint and a.n_frames == b.n_frames


def test_empty_test_set():
    with pytest.raises(EmptyTestSet):
        ev.evaluate(ev.OracleModel(), [])


def test_ablation_spec():
    spec = ev.AblationSpec("shoulderTop")
    assert spec.channels == [1, 2, 3, 5, 6, 7]
    assert spec.channel_names == ["shoulderFrontL", "shoulderBackL", "sleeveL",
                                  "shoulderFrontR", "shoulderBackR", "sleeveR"]
    with pytest.raises(ConfigError):
        ev.AblationSpec("collar")


def test_finetune_curve_budget_check(tiny_regressor, small_dataset):
    with pytest.raises(ConfigError):
        ev.finetune_curve({0: tiny_regressor}, small_dataset, [0.0, 100.0], hop=16, epochs=1)


def test_finetune_curve_runs(tiny_regressor, small_dataset, tmp_path):
    curve = ev.finetune_curve({0: tiny_regressor}, small_dataset, [0.0, 1.0], hop=16, epochs=1)
    assert curve.minutes == [0.0, 1.0] and len(curve.mpjpe_cm) == 2
    assert curve.mpjpe_cm[0] == pytest.approx(ev.evaluate(tiny_regressor, small_dataset.splits(0)["test"]).overall_cm)
    ev.plot_curve(curve, tmp_path / "c.svg")
    assert (tmp_path / "c.svg").read_text().lstrip().startswith("<?xml")


def test_protocol_and_ablation_small(small_dataset):
    params = dict(hidden=8, embed=8, dec_hidden=16, epochs=1, batch_size=64)
    res = ev.run_protocol(small_dataset, 0, params, hop=32, adaptive_epochs=1)
    assert res.adaptive.stage == "adaptive" and res.independent.stage == "independent"
    assert res.baseline_report.n_frames == res.report.n_frames
    out = ev.ablation(["sleeve"], small_dataset, 0, params, hop=32, baseline=res.report)
    assert out["sleeve"]["report"].n_frames == res.report.n_frames
    assert out["sleeve"]["delta_cm"] == pytest.approx(out["sleeve"]["report"].overall_cm - res.report.overall_cm)
