"""MPJPE reports, fine-tune budget curves and seam-removal ablations."""
from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array

from .estimator import SeamPoseRegressor, joints_for
from .exceptions import ConfigError, EmptyTestSet
from .kinematics import OUTPUT_JOINTS, POSE_DIM
from .neuralnet import smooth_predictions
from .signals import CHANNELS, SAMPLE_RATE, SEAM_GROUPS, channel_indices
from .simulator import stack_windows

# Published hardware figures, kept only as labels next to synthetic results.
REFERENCE_CM = {"adaptive": 6.0, "independent": 8.6}


class MeanPosePredictor(BaseEstimator):
    """Predicts the training-set mean pose vector for every window."""

    def fit(self, X, y, arm_length=None):
        y = check_array(y, dtype=np.float64)
        if y.shape[1] != POSE_DIM:
            raise ConfigError(f"y must have {POSE_DIM} columns")
        self.mean_pose_ = y.mean(axis=0)
        return self

    def predict(self, X):
        return np.tile(self.mean_pose_, (len(X), 1))

    def predict_joints(self, X, arm_length=None):
        return joints_for(self.predict(X), arm_length)


class OracleModel:
    """Returns the recorded joint positions; used to check the harness."""

    smooth = False

    def predict_session(self, session, windows):
        return windows["joints"]


@dataclass
class EvalReport:
    overall_cm: float
    std_cm: float
    n_frames: int
    per_subject: dict
    per_joint: dict
    per_category: dict
    fingerprint: str = ""
    meta: dict = field(default_factory=dict)

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kw):
        return json.dumps(self.to_dict(), **kw)

    def table(self) -> str:
        lines = [f"MPJPE {self.overall_cm:.2f} cm (std {self.std_cm:.2f} across subjects, "
                 f"{self.n_frames} frames)", "", f"{'joint':<12}{'cm':>8}"]
        lines += [f"{j:<12}{v:>8.2f}" for j, v in self.per_joint.items()]
        lines += ["", f"{'category':<14}{'cm':>8}{'frames':>9}"]
        lines += [f"{c:<14}{v['cm']:>8.2f}{v['frames']:>9d}" for c, v in self.per_category.items()]
        return "\n".join(lines)

    def save(self, directory, stem="report", plot=True):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        (d / f"{stem}.json").write_text(self.to_json(indent=2))
        (d / f"{stem}.txt").write_text(self.table() + "\n")
        if plot:
            plot_per_joint(self, d / f"{stem}_joints.svg")


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _predict_session(model, session, windows):
    if hasattr(model, "predict_session"):
        return model.predict_session(session, windows)
    return model.predict_joints(windows["X"], windows["arm_length"])


def evaluate(model, sessions, smooth: bool | None = None, channels=None,
             config: dict | None = None) -> EvalReport:
    """Per-frame MPJPE over every window of every session.

    Predictions are smoothed along each session with the trailing median
    filter unless ``smooth`` (or ``model.smooth``) is False.
    """
    sessions = list(sessions)
    if not sessions:
        raise EmptyTestSet("no test sessions")
    if smooth is None:
        smooth = getattr(model, "smooth", True)
    errs, cats, subj = [], [], []
    for s in sessions:
        w = s.windows(hop=1, channels=channels)
        if len(w["X"]) == 0:
            continue
        pred = _predict_session(model, s, w)
        if smooth:
            pred = smooth_predictions(pred.reshape(len(pred), -1)).reshape(pred.shape)
        errs.append(np.linalg.norm(pred - w["joints"], axis=-1) * 100.0)
        cats.append(w["category"])
        subj.append(np.full(len(pred), s.subject_id))
    if not errs:
        raise EmptyTestSet("sessions too short to produce a window")
    E, cats, subj = np.concatenate(errs), np.concatenate(cats), np.concatenate(subj)
    per_subject = {int(k): float(E[subj == k].mean()) for k in np.unique(subj)}
    per_category = {str(c): {"cm": float(E[cats == c].mean()), "frames": int((cats == c).sum())}
                    for c in np.unique(cats)}
    return EvalReport(
        overall_cm=float(E.mean()),
        std_cm=float(np.std(list(per_subject.values()))),
        n_frames=len(E),
        per_subject=per_subject,
        per_joint={j: float(v) for j, v in zip(OUTPUT_JOINTS, E.mean(axis=0))},
        per_category=per_category,
        fingerprint=fingerprint({"config": config or {}, "sessions": [x.name for x in sessions],
                                 "smooth": bool(smooth), "channels": channels}),
    )


# --------------------------------------------------------------------------
# Two-stage protocol


@dataclass
class ProtocolResult:
    independent: SeamPoseRegressor
    adaptive: SeamPoseRegressor
    baseline: MeanPosePredictor
    report: EvalReport
    baseline_report: EvalReport
    independent_report: EvalReport | None = None


def _windows(sessions, hop, channels):
    return stack_windows(sessions, hop=hop, channels=channels)


def run_protocol(dataset, target: int, params: dict | None = None, hop: int = 4,
                 channels=None, adaptive_epochs=None, adaptive_lr=None,
                 evaluate_independent=False, log=None) -> ProtocolResult:
    """Independent training on other subjects, then fine-tuning on ``target``.

    Returns the two fitted estimators and reports on the target's held-out
    sessions, plus the mean-pose baseline fitted on all training poses.
    """
    sp = dataset.splits(target)
    params = dict(params or {})
    params.update(stage="independent", warm_start=False)
    tr = _windows(sp["independent_train"], hop, channels)
    va = _windows(sp["independent_val"], hop, channels) if sp["independent_val"] else None
    ft = _windows(sp["adaptive_train"], hop, channels)

    ui = SeamPoseRegressor(**params)
    ui.fit(tr["X"], tr["pose"], tr["arm_length"],
           eval_set=None if va is None else (va["X"], va["pose"], va["arm_length"]), log=log)
    ua = copy.deepcopy(ui).set_params(stage="adaptive", warm_start=True, epochs=adaptive_epochs,
                                      learning_rate=adaptive_lr)
    ua.fit(ft["X"], ft["pose"], ft["arm_length"], log=log)

    base = MeanPosePredictor().fit(None, np.concatenate([tr["pose"], ft["pose"]]))
    cfg = {"params": ui.get_params(), "hop": hop, "target": target,
           "channels": channels, "dataset_seed": dataset.seed}
    return ProtocolResult(
        independent=ui, adaptive=ua, baseline=base,
        report=evaluate(ua, sp["test"], channels=channels, config=cfg),
        baseline_report=evaluate(base, sp["test"], channels=channels, config=cfg),
        independent_report=(evaluate(ui, sp["test"], channels=channels, config=cfg)
                            if evaluate_independent else None),
    )


# --------------------------------------------------------------------------
# Fine-tune budget curve


@dataclass
class FinetuneCurve:
    minutes: list
    mpjpe_cm: list
    std_cm: list
    per_subject: dict

    def to_dict(self):
        return asdict(self)


def finetune_curve(base_models: dict, dataset, minutes_grid, hop: int = 4,
                   epochs=None, learning_rate=None, log=None) -> FinetuneCurve:
    """Fine-tune each subject's independent model on the first ``m`` minutes
    of their fine-tune sessions for every ``m`` in ``minutes_grid``.

    ``base_models`` maps target subject id to a fitted independent model.
    """
    grid = sorted(float(m) for m in minutes_grid)
    per_subject = {}
    for target, base in base_models.items():
        sp = dataset.splits(target)
        ft = _windows(sp["adaptive_train"], hop, None)
        available = sum(s.duration_s for s in sp["adaptive_train"]) / 60.0
        # sessions lose a fraction of a frame period to the sensor clock phase
        if grid and grid[-1] > available + 1.0 / 60.0:
            raise ConfigError(f"budget {grid[-1]} min exceeds {available:.2f} min available")
        row = []
        for m in grid:
            n = int(round(m * 60.0 * SAMPLE_RATE / hop))
            model = base
            if n > 0:
                model = copy.deepcopy(base).set_params(stage="adaptive", warm_start=True,
                                                       epochs=epochs, learning_rate=learning_rate)
                model.fit(ft["X"][:n], ft["pose"][:n], ft["arm_length"][:n], log=log)
            row.append(evaluate(model, sp["test"]).overall_cm)
        per_subject[int(target)] = row
    M = np.array(list(per_subject.values()))
    return FinetuneCurve(grid, M.mean(axis=0).tolist(), M.std(axis=0).tolist(), per_subject)


# --------------------------------------------------------------------------
# Seam-removal ablation


@dataclass(frozen=True)
class AblationSpec:
    """Remove one left/right seam pair and retrain on the other six channels."""

    removed: str

    def __post_init__(self):
        if self.removed not in SEAM_GROUPS:
            raise ConfigError(f"unknown seam group {self.removed!r}; "
                              f"choose from {sorted(SEAM_GROUPS)}")

    @property
    def channels(self) -> list:
        return channel_indices((self.removed,))

    @property
    def channel_names(self) -> list:
        return [CHANNELS[i] for i in self.channels]


def ablation(specs, dataset, target: int = 0, params: dict | None = None, hop: int = 4,
             baseline: EvalReport | None = None, log=None) -> dict:
    """Full two-stage retrain per spec; returns {name: {"report", "delta_cm"}}.

    The 8-channel run is included under ``"none"`` unless ``baseline`` is given.
    """
    specs = [s if isinstance(s, AblationSpec) else AblationSpec(s) for s in specs]
    if baseline is None:
        baseline = run_protocol(dataset, target, params, hop, log=log).report
    out = {"none": {"report": baseline, "delta_cm": 0.0}}
    for spec in specs:
        rep = run_protocol(dataset, target, params, hop, channels=spec.channels, log=log).report
        out[spec.removed] = {"report": rep, "delta_cm": rep.overall_cm - baseline.overall_cm}
    return out


# --------------------------------------------------------------------------
# Plots


def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_per_joint(report: EvalReport, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(list(report.per_joint), list(report.per_joint.values()), color="tab:blue")
    ax.set_ylabel("MPJPE (cm)")
    ax.tick_params(axis="x", rotation=45)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)


def plot_curve(curve: FinetuneCurve, path):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.errorbar(curve.minutes, curve.mpjpe_cm, yerr=curve.std_cm, marker="o", capsize=3)
    ax.set_xlabel("fine-tune data (min)")
    ax.set_ylabel("MPJPE (cm)")
    ax.axhline(REFERENCE_CM["adaptive"], ls=":", color="grey", label="hardware reference")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)

