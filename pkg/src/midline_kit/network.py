"""Two-headed convolutional network: a residual encoder-decoder that emits a
row-wise distribution over x, and a limits head that emits one midline-presence
probability per row."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CKPT_MAGIC = "midline-kit.ckpt.v1"


@dataclass(frozen=True)
class ModelConfig:
    input_size: tuple[int, int] = (160, 160)
    depth: int = 3
    base_channels: int = 8
    shared_layers: int = 2
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if len(self.input_size) != 2:
            raise ValueError("input_size must be (H, W)")
        if self.depth < 0 or self.base_channels <= 0 or self.shared_layers < 0:
            raise ValueError("depth, shared_layers must be >= 0 and base_channels > 0")
        m = 2 ** self.depth
        h, w = self.input_size
        if h <= 0 or w <= 0 or h % m or w % m:
            raise ValueError(f"input size {self.input_size} is not divisible by 2**depth={m}")


@dataclass
class NetworkOutputs:
    midline_logits: torch.Tensor  # B x H x W
    midline_prob: torch.Tensor  # B x H x W, rows sum to 1
    limits_prob: torch.Tensor  # B x H


def row_softmax(logits):
    """Softmax over the last (x) axis with a per-row max shift.

    Accepts numpy arrays or tensors and returns the same kind.
    """
    if isinstance(logits, torch.Tensor):
        shifted = logits - logits.max(dim=-1, keepdim=True).values
        e = torch.exp(shifted)
        return e / e.sum(dim=-1, keepdim=True)
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _norm(ch: int) -> nn.GroupNorm:
    # per-sample statistics keep outputs independent of batch composition
    return nn.GroupNorm(min(4, ch), ch)


class ResBlock(nn.Module):
    """conv3x3-GN-SiLU-conv3x3-GN plus identity (or 1x1 projection) shortcut, then SiLU."""

    def __init__(self, in_ch: int, out_ch: int, stride: int = 1, norm: bool = True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1)
        self.norm1 = _norm(out_ch) if norm else nn.Identity()
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.norm2 = _norm(out_ch) if norm else nn.Identity()
        self.shortcut = None
        if in_ch != out_ch or stride != 1:
            self.shortcut = nn.Conv2d(in_ch, out_ch, 1, stride=stride)

    def forward(self, x):
        identity = x if self.shortcut is None else self.shortcut(x)
        out = F.silu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        return F.silu(out + identity)


class MidlineNet(nn.Module):
    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c = config.base_channels

        shared = []
        in_ch = 1
        for _ in range(config.shared_layers):
            shared.append(ResBlock(in_ch, c))
            in_ch = c
        self.shared = nn.Sequential(*shared)
        self.shared_out = in_ch

        # midline head: residual U-Net, stride-2 downsampling, linear upsampling
        chans = [c * 2 ** i for i in range(config.depth + 1)]
        self.enc0 = ResBlock(self.shared_out, chans[0])
        self.down = nn.ModuleList(ResBlock(chans[i], chans[i + 1], stride=2) for i in range(config.depth))
        self.up = nn.ModuleList(ResBlock(chans[i + 1] + chans[i], chans[i]) for i in range(config.depth))
        self.midline_out = nn.Conv2d(chans[0], 1, 1)

        # limits head
        # no normalization here: it multiplies near-ties in the max pool below, which
        # makes the loss kinked at finite-difference scale
        self.limits_blocks = nn.Sequential(ResBlock(self.shared_out, c, norm=False), ResBlock(c, c, norm=False))
        self.limits_conv1 = nn.Conv1d(c, c, 3, padding=1)
        self.limits_conv2 = nn.Conv1d(c, 1, 3, padding=1)

    def forward(self, x: torch.Tensor):
        """Return (midline_logits B×H×W, limits_logits B×H)."""
        h, w = x.shape[-2:]
        m = 2 ** self.config.depth
        ph, pw = (-h) % m, (-w) % m
        if ph or pw:
            x = F.pad(x, (0, pw, 0, ph), mode="reflect")

        feats = self.shared(x)

        skips = [self.enc0(feats)]
        for block in self.down:
            skips.append(block(skips[-1]))
        y = skips[-1]
        for level in reversed(range(self.config.depth)):
            skip = skips[level]
            y = F.interpolate(y, size=skip.shape[-2:], mode="bilinear", align_corners=False)
            y = self.up[level](torch.cat([y, skip], dim=1))
        midline_logits = self.midline_out(y)[:, 0, :h, :w]

        z = self.limits_blocks(feats)[..., :h, :w]
        z = z.amax(dim=-1)  # global max pool along Ox -> B×C×H
        z = F.silu(self.limits_conv1(z))
        limits_logits = self.limits_conv2(z)[:, 0]
        return midline_logits, limits_logits


def build_model(config: ModelConfig) -> MidlineNet:
    """Construct the network with parameters drawn deterministically from ``config.seed``."""
    gen_state = torch.random.get_rng_state()
    try:
        torch.manual_seed(config.seed)
        model = MidlineNet(config)
    finally:
        torch.random.set_rng_state(gen_state)
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


def forward(model: MidlineNet, batch) -> NetworkOutputs:
    """Run the network on a B×1×H×W batch whose spatial size matches the config."""
    if not isinstance(batch, torch.Tensor):
        batch = torch.as_tensor(np.asarray(batch))
    if batch.ndim != 4 or batch.shape[1] != 1:
        raise ValueError(f"expected a B x 1 x H x W batch, got shape {tuple(batch.shape)}")
    if tuple(batch.shape[-2:]) != model.config.input_size:
        raise ValueError(f"batch spatial size {tuple(batch.shape[-2:])} != model input size {model.config.input_size}")
    param = next(model.parameters())
    batch = batch.to(dtype=param.dtype, device=param.device)
    if not torch.isfinite(batch).all():
        raise ValueError("batch contains non-finite values")
    logits, limits_logits = model(batch)
    return NetworkOutputs(logits, row_softmax(logits), torch.sigmoid(limits_logits))


def save_checkpoint(path, model: MidlineNet, extra: dict | None = None) -> None:
    """Write config and float32 parameters to a single .npz container."""
    path = Path(path)
    meta = {"magic": CKPT_MAGIC, "config": asdict(model.config), "extra": extra or {}}
    arrays = {f"param/{k}": v.detach().cpu().numpy().astype("<f4") for k, v in model.state_dict().items()}
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, **arrays)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[MidlineNet, dict]:
    with np.load(Path(path), allow_pickle=False) as data:
        if "__meta__" not in data.files:
            raise ValueError(f"{path}: not a midline-kit checkpoint")
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("magic") != CKPT_MAGIC:
            raise ValueError(f"{path}: unsupported checkpoint format {meta.get('magic')!r}")
        state = {k[len("param/"):]: torch.from_numpy(data[k].astype(np.float32)) for k in data.files if k.startswith("param/")}
    model = build_model(ModelConfig(**meta["config"]))
    model.load_state_dict(state)
    model.eval()
    return model, meta.get("extra", {})
