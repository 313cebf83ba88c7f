"""Combined regression + limits loss, the Adam training loop, and a
finite-difference gradient check."""
from __future__ import annotations

import copy
import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import network
from .data_model import MidlineAnnotation
from .network import ModelConfig, NetworkOutputs

log = logging.getLogger(__name__)

BCE_CLAMP = 1e-7
HISTORY_COLUMNS = ("iteration", "total", "reg", "bce", "val_rmses")


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda1: float = 1.0
    lambda2: float = 1.0

    def __post_init__(self):
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.999)
    batch_size: int = 8
    iterations: int = 1200
    flip_prob: float = 0.5
    seed: int = 0
    val_every: int = 250

    def __post_init__(self):
        object.__setattr__(self, "betas", tuple(float(b) for b in self.betas))
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if not all(0 < b < 1 for b in self.betas):
            raise ValueError("betas must lie in (0, 1)")
        if self.batch_size < 1 or self.iterations < 0 or self.val_every < 1:
            raise ValueError("batch_size and val_every must be positive, iterations non-negative")
        if not 0 <= self.flip_prob <= 1:
            raise ValueError("flip_prob must lie in [0, 1]")


def load_config(path) -> tuple[TrainConfig, ModelConfig, LossWeights]:
    """Read a TOML file with optional [train], [model] and [loss] tables."""
    import tomli

    with open(path, "rb") as fh:
        doc = tomli.load(fh)
    unknown = set(doc) - {"train", "model", "loss"}
    if unknown:
        raise ValueError(f"{path}: unknown config sections {sorted(unknown)}")

    def build(cls, section):
        values = doc.get(section, {})
        names = {f.name for f in fields(cls)}
        extra = set(values) - names
        if extra:
            raise ValueError(f"{path}: unknown keys in [{section}]: {sorted(extra)}")
        return cls(**values)

    return build(TrainConfig, "train"), build(ModelConfig, "model"), build(LossWeights, "loss")


def targets_to_arrays(annotations, height: int):
    """Stack annotations into (gt_x, limits mask) arrays of shape N x H."""
    xs, masks = zip(*(a.dense(height) for a in annotations))
    return np.stack(xs), np.stack(masks)


def combined_loss(outputs: NetworkOutputs, targets, weights: LossWeights = LossWeights()):
    """Return (total, reg, bce) as scalar tensors.

    ``targets`` is either a list of MidlineAnnotation or a (gt_x, mask) pair
    of B x H arrays/tensors.
    """
    prob = outputs.midline_prob
    b, h, w = prob.shape
    if isinstance(targets, (list, tuple)) and targets and isinstance(targets[0], MidlineAnnotation):
        gt_x, mask = targets_to_arrays(targets, h)
    else:
        gt_x, mask = targets
    gt_x = torch.as_tensor(gt_x, dtype=prob.dtype, device=prob.device)
    mask = torch.as_tensor(mask, device=prob.device).to(prob.dtype)
    if gt_x.shape != (b, h) or mask.shape != (b, h) or outputs.limits_prob.shape != (b, h):
        raise ValueError("outputs and targets disagree in shape")

    xs = torch.arange(w, dtype=prob.dtype, device=prob.device)
    pred_x = (prob * xs).sum(dim=-1)
    sq = (gt_x - pred_x) ** 2 * mask
    n_rows = mask.sum(dim=1)
    per_slice = torch.where(n_rows > 0, sq.sum(dim=1) / n_rows.clamp(min=1), torch.zeros_like(n_rows))
    reg = per_slice.mean()

    p = outputs.limits_prob.clamp(BCE_CLAMP, 1 - BCE_CLAMP)
    bce = -(mask * torch.log(p) + (1 - mask) * torch.log(1 - p)).mean()
    total = weights.lambda1 * reg + weights.lambda2 * bce
    return total, reg, bce


@dataclass
class TrainResult:
    model: network.MidlineNet  # best-validation weights (last weights without validation data)
    history: list[dict] = field(default_factory=list)
    best_iteration: int | None = None
    best_val_rmses: float | None = None


def _stack(dataset, input_size):
    images = np.stack([np.asarray(img, dtype=np.float32) for img, _ in dataset])
    if images.shape[1:] != tuple(input_size):
        raise ValueError(f"samples are {images.shape[1:]}, model expects {tuple(input_size)}")
    gt_x, mask = targets_to_arrays([ann for _, ann in dataset], images.shape[1])
    return images, gt_x, mask


def predict_curves(model, images, chunk: int = 16) -> np.ndarray:
    """Expected midline per row for an N x H x W stack (no limits)."""
    out = []
    model.eval()
    with torch.no_grad():
        for i in range(0, len(images), chunk):
            batch = torch.as_tensor(np.asarray(images[i:i + chunk])[:, None])
            o = network.forward(model, batch)
            xs = torch.arange(o.midline_prob.shape[-1], dtype=o.midline_prob.dtype)
            out.append((o.midline_prob * xs).sum(-1).double().numpy())
    return np.concatenate(out)


def validation_rmses(model, images, gt_x, mask) -> float:
    """Mean per-slice RMSE over annotated validation slices (px)."""
    keep = mask.any(axis=1)
    if not keep.any():
        return float("nan")
    curves = predict_curves(model, images[keep])
    m = mask[keep]
    sq = ((curves - gt_x[keep]) ** 2) * m
    return float(np.mean(np.sqrt(sq.sum(1) / m.sum(1))))


def train(dataset, config: TrainConfig = TrainConfig(), model_config: ModelConfig = ModelConfig(),
          weights: LossWeights = LossWeights(), val_dataset=None, model=None) -> TrainResult:
    """Train on a list of (preprocessed image, MidlineAnnotation) samples.

    Each iteration draws ``batch_size`` slices uniformly with replacement and
    flips each one horizontally with probability ``flip_prob``.
    """
    if not dataset:
        raise ValueError("empty training dataset")
    images, gt_x, mask = _stack(dataset, model_config.input_size)
    w = images.shape[2]
    val = _stack(val_dataset, model_config.input_size) if val_dataset else None

    if model is None:
        model = network.build_model(model_config)
    torch.manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.Adam(model.parameters(), lr=config.learning_rate, betas=config.betas)

    result = TrainResult(model)
    best_state = None
    for it in range(1, config.iterations + 1):
        idx = rng.integers(len(images), size=config.batch_size)
        flip = rng.random(config.batch_size) < config.flip_prob
        x, gx, m = images[idx].copy(), gt_x[idx].copy(), mask[idx]
        x[flip] = x[flip][..., ::-1]
        gx[flip] = np.where(m[flip], (w - 1) - gx[flip], 0.0)

        model.train()
        out = network.forward(model, torch.from_numpy(x[:, None]))
        total, reg, bce = combined_loss(out, (gx, m), weights)
        if not torch.isfinite(total):
            raise TrainingError(f"non-finite loss at iteration {it}: total={total.item()} reg={reg.item()} bce={bce.item()}")
        opt.zero_grad(set_to_none=True)
        total.backward()
        opt.step()

        record = {"iteration": it, "total": total.item(), "reg": reg.item(), "bce": bce.item(), "val_rmses": float("nan")}
        if val is not None and (it % config.val_every == 0 or it == config.iterations):
            score = validation_rmses(model, *val)
            record["val_rmses"] = score
            if result.best_val_rmses is None or score < result.best_val_rmses:
                result.best_val_rmses, result.best_iteration = score, it
                best_state = copy.deepcopy(model.state_dict())
            log.info("iter %d total %.4f reg %.4f bce %.4f val RMSEs %.3f px", it, *list(record.values())[1:])
        elif it % 50 == 0:
            log.info("iter %d total %.4f reg %.4f bce %.4f", it, record["total"], record["reg"], record["bce"])
        result.history.append(record)

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return result


def write_history(path, history) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: ("" if isinstance(row[k], float) and math.isnan(row[k]) else row[k]) for k in HISTORY_COLUMNS})


def read_history(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [
            {k: (int(v) if k == "iteration" else float(v) if v != "" else float("nan")) for k, v in row.items()}
            for row in csv.DictReader(fh)
        ]


def grad_check(model, batch, targets, weights: LossWeights = LossWeights(), epsilon: float = 1e-3,
               n_params: int = 128, seed: int = 0) -> float:
    """Max relative error between autograd and central finite differences over
    ``n_params`` randomly chosen scalar parameters, in float64.

    The relative error of a parameter is |a - g| / max(|a|, |g|, 1e-8).
    """
    model = copy.deepcopy(model).double().eval()
    batch = torch.as_tensor(np.asarray(batch), dtype=torch.float64)

    def loss():
        return combined_loss(network.forward(model, batch), targets, weights)[0]

    model.zero_grad()
    loss().backward()
    params = [p for p in model.parameters() if p.requires_grad]
    sizes = np.array([p.numel() for p in params])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    rng = np.random.default_rng(seed)
    picks = rng.choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False)

    worst = 0.0
    with torch.no_grad():
        for flat in picks:
            k = int(np.searchsorted(offsets, flat, side="right") - 1)
            p, i = params[k].view(-1), int(flat - offsets[k])
            analytic = params[k].grad.view(-1)[i].item() if params[k].grad is not None else 0.0
            orig = p[i].item()
            p[i] = orig + epsilon
            up = loss().item()
            p[i] = orig - epsilon
            down = loss().item()
            p[i] = orig
            numeric = (up - down) / (2 * epsilon)
            err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
