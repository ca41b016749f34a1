"""Pose network, loss, two-stage training loop, checkpoints and smoothing.

Architecture: per-frame linear embedding (C -> 96), a 2-layer
bidirectional LSTM, and a two-layer decoder applied to the last three time
steps, whose three 78-dim outputs are median-pooled into one pose vector.
Joint positions come from differentiable forward kinematics.
"""
from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .exceptions import (
    ConfigError, DataError, DivergenceDetected, NonFiniteActivation, NonFiniteGradient,
)
from .kinematics import (
    IDENTITY_6D, POSE_DIM, Skeleton, arm_offsets, forward_kinematics_torch,
)
from .signals import AugmentConfig, augment

TAIL = 3
STAGE_DEFAULTS = {"independent": (15, 8e-3), "adaptive": (10, 4e-4)}
_TOPOLOGY = Skeleton()


class RowStableLinear(nn.Linear):
    """``nn.Linear`` computed with a batched matmul over the leading axis.

    A per-sample GEMM keeps each sample's result bitwise independent of
    how many samples share the call.
    """

    def forward(self, x):
        B = x.shape[0]
        flat = x.reshape(B, -1, self.in_features)
        out = torch.baddbmm(self.bias, flat, self.weight.t().expand(B, -1, -1))
        return out.reshape(x.shape[:-1] + (self.out_features,))


@dataclass(frozen=True)
class Architecture:
    n_channels: int = 8
    embed: int = 96
    hidden: int = 256
    dec_hidden: int = 256
    out: int = POSE_DIM
    input_gain: float = 1.0  # fixed multiplier on normalised inputs


class PoseNet(nn.Module):
    def __init__(self, arch: Architecture = Architecture()):
        super().__init__()
        self.arch = arch
        H = arch.hidden
        self.embed = RowStableLinear(arch.n_channels, arch.embed)
        self.lstm1 = nn.LSTM(arch.embed, H, bidirectional=True, batch_first=True)
        # Second layer split by direction: the backward pass for the last
        # TAIL outputs only ever sees the last TAIL inputs.
        self.lstm2_fwd = nn.LSTM(2 * H, H, batch_first=True)
        self.lstm2_bwd = nn.LSTM(2 * H, H, batch_first=True)
        self.dec1 = RowStableLinear(2 * H, arch.dec_hidden)
        self.dec2 = RowStableLinear(arch.dec_hidden, arch.out)

    def reset_parameters(self, seed: int):
        """Fan-in uniform initialisation from a private generator.

        The output bias starts at the identity pose so the first forward
        pass yields valid rotations.
        """
        gen = torch.Generator().manual_seed(int(seed))
        with torch.no_grad():
            for mod in (self.embed, self.dec1, self.dec2):
                k = 1.0 / math.sqrt(mod.in_features)
                mod.weight.uniform_(-k, k, generator=gen)
                mod.bias.uniform_(-k, k, generator=gen)
            for lstm in (self.lstm1, self.lstm2_fwd, self.lstm2_bwd):
                k = 1.0 / math.sqrt(lstm.hidden_size)
                for p in lstm.parameters():
                    p.uniform_(-k, k, generator=gen)
            self.dec2.bias.copy_(torch.as_tensor(IDENTITY_6D[: self.arch.out]))
        return self

    def decode_tail(self, x):
        """Decoded vectors for the last TAIL time steps, (B, TAIL, out)."""
        h1, _ = self.lstm1(self.embed(x * self.arch.input_gain))
        f, _ = self.lstm2_fwd(h1)
        b, _ = self.lstm2_bwd(h1[:, -TAIL:].flip(1))
        z = torch.cat([f[:, -TAIL:], b.flip(1)], dim=-1)
        return self.dec2(torch.tanh(self.dec1(z)))

    def forward(self, x):
        """Median-pooled pose vectors (B, out) for windows x (B, T, C)."""
        out = self.decode_tail(x).median(dim=1).values
        if not bool(torch.isfinite(out).all()):
            raise NonFiniteActivation("non-finite network output")
        return out


def build_model(arch: Architecture = Architecture(), seed: int = 0,
                dtype=torch.float32) -> PoseNet:
    return PoseNet(arch).reset_parameters(seed).to(dtype)


def pose_and_joints(model: PoseNet, x, offsets):
    """Forward pass through FK; offsets (n_nodes, 3) or (B, n_nodes, 3)."""
    pose = model(x)
    return pose, forward_kinematics_torch(pose, offsets, _TOPOLOGY)


def pose_joint_loss(pose, joints, pose_t, joints_t):
    """Mean absolute pose error plus mean absolute joint error (metres)."""
    return (pose - pose_t).abs().mean() + (joints - joints_t).abs().mean()


def cosine_lr(step: int, total_steps: int, start_lr: float) -> float:
    """Cosine decay from ``start_lr`` at step 0 to 0 at ``total_steps``."""
    if total_steps <= 0:
        return start_lr
    return 0.5 * start_lr * (1.0 + math.cos(math.pi * min(step, total_steps) / total_steps))


@dataclass
class TrainConfig:
    stage: str = "independent"
    epochs: int | None = None
    start_lr: float | None = None
    batch_size: int = 512
    seed: int = 0
    augment: bool = True
    dtype: str = "float32"
    augment_config: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.stage not in STAGE_DEFAULTS:
            raise ConfigError(f"stage must be one of {sorted(STAGE_DEFAULTS)}")
        ep, lr = STAGE_DEFAULTS[self.stage]
        if self.epochs is None:
            self.epochs = ep
        if self.start_lr is None:
            self.start_lr = lr
        if self.epochs < 1 or self.batch_size < 1 or not self.start_lr > 0:
            raise ConfigError("epochs, batch_size and start_lr must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be float32 or float64")

    @property
    def torch_dtype(self):
        return getattr(torch, self.dtype)


def _as_batch(data: dict, idx, dtype, rng=None, aug: AugmentConfig | None = None):
    X = data["X"][idx]
    if rng is not None:
        X = augment(X, rng, aug)
    return (torch.as_tensor(np.asarray(X), dtype=dtype),
            torch.as_tensor(data["pose"][idx], dtype=dtype),
            torch.as_tensor(data["joints"][idx].reshape(len(idx), -1, 3), dtype=dtype),
            torch.as_tensor(data["offsets"][idx], dtype=dtype))


def prepare(data: dict) -> dict:
    """Validate a training dict and attach per-sample skeleton offsets."""
    for key in ("X", "pose", "joints", "arm_length"):
        if key not in data:
            raise DataError(f"training data lacks '{key}'")
    n = len(data["X"])
    if n == 0:
        raise DataError("empty training set")
    if any(len(data[k]) != n for k in ("pose", "joints", "arm_length")):
        raise DataError("training arrays differ in length")
    out = dict(data)
    if "offsets" not in out:
        lengths, inverse = np.unique(np.asarray(data["arm_length"]), return_inverse=True)
        out["offsets"] = arm_offsets(lengths)[inverse]
    return out


@torch.no_grad()
def evaluate_loss(model: PoseNet, data: dict, dtype, batch_size: int = 512):
    """Mean loss and MPJPE (cm) over a prepared data dict, no augmentation."""
    model.eval()
    n = len(data["X"])
    tot_loss = tot_err = 0.0
    for lo in range(0, n, batch_size):
        idx = np.arange(lo, min(n, lo + batch_size))
        x, pt, jt, off = _as_batch(data, idx, dtype)
        pose, joints = pose_and_joints(model, x, off)
        tot_loss += float(pose_joint_loss(pose, joints, pt, jt)) * len(idx)
        tot_err += float((joints - jt).norm(dim=-1).mean()) * len(idx)
    return tot_loss / n, tot_err / n * 100.0


class _FlushDenormals:
    """Subnormal floats appear in LSTM states late in training and slow CPU
    kernels several-fold; flush them to zero for the duration of a fit."""

    def __enter__(self):
        torch.set_flush_denormal(True)

    def __exit__(self, *exc):
        torch.set_flush_denormal(False)


def train(config: TrainConfig, data: dict, val: dict | None = None,
          init: PoseNet | None = None, arch: Architecture | None = None,
          log=None):
    """Train with Adam and a per-step cosine learning-rate schedule.

    ``data``/``val`` hold ``X`` (M, T, C), ``pose`` (M, 78), ``joints``
    (M, 8, 3) and ``arm_length`` (M,). The adaptive stage requires ``init``.
    Returns ``(model, rows)`` where rows are ``epoch, split, loss, mpjpe_cm``
    dicts; with a validation set the best-validation weights are returned.
    """
    with _FlushDenormals():
        return _train(config, data, val, init, arch, log)


def _train(config: TrainConfig, data: dict, val: dict | None = None,
          init: PoseNet | None = None, arch: Architecture | None = None,
          log=None):
    if config.stage == "adaptive" and init is None:
        raise ConfigError("the adaptive stage needs a trained user-independent model")
    dtype = config.torch_dtype
    data = prepare(data)
    val = prepare(val) if val is not None else None
    if init is not None:
        model = copy.deepcopy(init).to(dtype)
    else:
        arch = arch or Architecture(n_channels=data["X"].shape[-1])
        model = build_model(arch, config.seed, dtype)
    if model.arch.n_channels != data["X"].shape[-1]:
        raise ConfigError(f"model expects {model.arch.n_channels} channels, "
                          f"data has {data['X'].shape[-1]}")

    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.start_lr,
                           betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0)
    n = len(data["X"])
    steps_per_epoch = math.ceil(n / config.batch_size)
    total = steps_per_epoch * config.epochs
    rows = []

    initial_val = best_val = None
    best_state = None
    if val is not None:
        initial_val, _ = evaluate_loss(model, val, dtype)
        best_val = math.inf

    step = 0
    for epoch in range(config.epochs):
        model.train()
        order = rng.permutation(n)
        ep_loss = ep_err = 0.0
        for lo in range(0, n, config.batch_size):
            idx = np.sort(order[lo:lo + config.batch_size])
            x, pt, jt, off = _as_batch(data, idx, dtype,
                                       rng if config.augment else None,
                                       config.augment_config)
            for g in opt.param_groups:
                g["lr"] = cosine_lr(step, total, config.start_lr)
            pose, joints = pose_and_joints(model, x, off)
            loss = pose_joint_loss(pose, joints, pt, jt)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                raise DivergenceDetected(f"non-finite training loss at epoch {epoch}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            for p in model.parameters():
                if p.grad is not None and not bool(torch.isfinite(p.grad).all()):
                    raise NonFiniteGradient(f"non-finite gradient at epoch {epoch}")
            opt.step()
            step += 1
            ep_loss += loss_val * len(idx)
            ep_err += float((joints.detach() - jt).norm(dim=-1).mean()) * len(idx)
        rows.append({"epoch": epoch, "split": "train", "loss": ep_loss / n,
                     "mpjpe_cm": ep_err / n * 100.0})
        if val is not None:
            v_loss, v_err = evaluate_loss(model, val, dtype)
            rows.append({"epoch": epoch, "split": "val", "loss": v_loss, "mpjpe_cm": v_err})
            if not math.isfinite(v_loss) or v_loss > 10 * initial_val:
                raise DivergenceDetected(
                    f"validation loss {v_loss:.4g} at epoch {epoch} "
                    f"(initial {initial_val:.4g})")
            if v_loss < best_val:
                best_val = v_loss
                best_state = (epoch, copy.deepcopy(model.state_dict()))
        if log is not None:
            log(rows[-1] if val is None else rows[-2:])
    if best_state is not None:
        model.load_state_dict(best_state[1])
        model.best_epoch, model.best_val_loss = best_state[0], best_val
    else:
        model.best_epoch, model.best_val_loss = config.epochs - 1, None
    model.eval()
    return model, rows


def write_metrics_csv(path, rows):
    with open(path, "w") as fh:
        fh.write("epoch,split,loss,mpjpe_cm\n")
        for r in rows:
            fh.write(f"{r['epoch']},{r['split']},{r['loss']!r},{r['mpjpe_cm']!r}\n")


# --------------------------------------------------------------------------
# Checkpoints: little-endian tensor blobs + JSON manifest


def save_checkpoint(directory, model: PoseNet, **meta):
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    entries, offset = [], 0
    with open(d / "weights.bin", "wb") as fh:
        for name, t in model.state_dict().items():
            arr = t.detach().cpu().numpy()
            le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            blob = np.ascontiguousarray(le).tobytes()
            fh.write(blob)
            entries.append({"name": name, "shape": list(arr.shape),
                            "dtype": le.dtype.str, "offset": offset, "nbytes": len(blob)})
            offset += len(blob)
    manifest = {"arch": asdict(model.arch), "tensors": entries,
                "best_epoch": getattr(model, "best_epoch", None),
                "best_val_loss": getattr(model, "best_val_loss", None), **meta}
    (d / "manifest.json").write_text(json.dumps(manifest, indent=2, default=_jsonable))


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if hasattr(o, "__dataclass_fields__"):
        return asdict(o)
    raise TypeError(f"cannot serialise {type(o)}")


def load_checkpoint(directory):
    """Returns ``(model, manifest)``."""
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
        raw = (d / "weights.bin").read_bytes()
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read checkpoint {d}: {exc}") from exc
    model = PoseNet(Architecture(**manifest["arch"]))
    state = {}
    for e in manifest["tensors"]:
        arr = np.frombuffer(raw, dtype=e["dtype"], count=int(np.prod(e["shape"], dtype=int)),
                            offset=e["offset"]).reshape(e["shape"])
        state[e["name"]] = torch.from_numpy(arr.astype(arr.dtype.newbyteorder("=")))
    model.to(next(iter(state.values())).dtype)
    model.load_state_dict(state)
    model.best_epoch = manifest.get("best_epoch")
    model.best_val_loss = manifest.get("best_val_loss")
    model.eval()
    return model, manifest


# --------------------------------------------------------------------------
# Prediction smoothing


SMOOTH_WINDOW = 5


def _lower_median_rows(block):
    k = (block.shape[0] - 1) // 2
    return np.partition(block, k, axis=0)[k]


def smooth_predictions(preds, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Trailing running median over the first axis (lower median for short prefixes)."""
    preds = np.asarray(preds, dtype=float)
    out = np.empty_like(preds)
    head = min(window - 1, len(preds))
    for i in range(head):
        out[i] = _lower_median_rows(preds[: i + 1])
    if len(preds) >= window:
        view = np.lib.stride_tricks.sliding_window_view(preds, window, axis=0)
        k = (window - 1) // 2
        out[window - 1:] = np.partition(view, k, axis=-1)[..., k]
    return out


class RunningMedian:
    """Streaming form of ``smooth_predictions``."""

    def __init__(self, window: int = SMOOTH_WINDOW):
        self.window = window
        self._buf = []

    def push(self, value):
        self._buf.append(np.asarray(value, dtype=float))
        if len(self._buf) > self.window:
            self._buf.pop(0)
        return _lower_median_rows(np.stack(self._buf))
