"""Two-headed 3D U-Net: shared representation, segmentor and domain predictor."""
from __future__ import annotations

import hashlib
import io
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Tuple, Union

import torch
from torch import nn

GROUPS = ("repr", "seg", "dp")
CHECKPOINT_FORMAT = "OODCKPT1"


@dataclass(frozen=True)
class ArchConfig:
    in_channels: int = 1
    levels: int = 3
    base_channels: int = 8
    n_domains: int = 2
    input_shape: Tuple[int, int, int] = (32, 32, 24)
    dp_blocks: int = 3

    def validate(self) -> None:
        if self.in_channels != 1:
            raise ValueError("only single-channel inputs are supported")
        if self.levels < 1 or self.base_channels < 1 or self.dp_blocks < 1:
            raise ValueError("levels, base_channels and dp_blocks must be >= 1")
        if self.n_domains < 2:
            raise ValueError("n_domains must be >= 2")
        factor = 2 ** self.levels
        if any(n % factor for n in self.input_shape):
            raise ValueError(f"input_shape {self.input_shape} not divisible by 2**levels = {factor}")
        bottleneck = [n // factor for n in self.input_shape]
        # instance normalization needs more than one voxel per channel
        if bottleneck[0] * bottleneck[1] * bottleneck[2] < 2:
            raise ValueError(f"input_shape {self.input_shape} too small for {self.levels} levels")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d) -> "ArchConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        return cls(**d)


def conv_block(c_in: int, c_out: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(c_in, c_out, 3, padding=1),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.LeakyReLU(0.01),
        nn.Conv3d(c_out, c_out, 3, padding=1),
        nn.InstanceNorm3d(c_out, affine=True),
        nn.LeakyReLU(0.01),
    )


class UNetBackbone(nn.Module):
    """Encoder/decoder with skip connections; output keeps the input resolution."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        ch = [cfg.base_channels * 2 ** i for i in range(cfg.levels + 1)]
        self.stem = conv_block(cfg.in_channels, ch[0])
        self.down = nn.ModuleList(
            nn.Sequential(nn.Conv3d(ch[i], ch[i + 1], 2, stride=2), nn.LeakyReLU(0.01))
            for i in range(cfg.levels)
        )
        self.encode = nn.ModuleList(conv_block(ch[i + 1], ch[i + 1]) for i in range(cfg.levels))
        self.up = nn.ModuleList(
            nn.ConvTranspose3d(ch[i + 1], ch[i], 2, stride=2) for i in reversed(range(cfg.levels))
        )
        self.decode = nn.ModuleList(conv_block(2 * ch[i], ch[i]) for i in reversed(range(cfg.levels)))

    def forward(self, x):
        skips = [self.stem(x)]
        for down, enc in zip(self.down, self.encode):
            skips.append(enc(down(skips[-1])))
        h = skips.pop()
        for up, dec in zip(self.up, self.decode):
            h = dec(torch.cat([up(h), skips.pop()], dim=1))
        return h


class DomainHead(nn.Module):
    """Strided convolutions, global average pooling and a linear classifier."""

    def __init__(self, cfg: ArchConfig):
        super().__init__()
        layers: List[nn.Module] = []
        c = cfg.base_channels
        for i in range(cfg.dp_blocks):
            c_out = cfg.base_channels * 2 ** (i + 1)
            layers += [nn.Conv3d(c, c_out, 3, stride=2, padding=1), nn.LeakyReLU(0.01)]
            c = c_out
        self.conv = nn.Sequential(*layers)
        self.fc = nn.Linear(c, cfg.n_domains)

    def forward(self, features):
        h = self.conv(features)
        return self.fc(h.mean(dim=(2, 3, 4)))


class TwoHeadUNet(nn.Module):
    def __init__(self, cfg: ArchConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.repr = UNetBackbone(cfg)
        self.seg = nn.Conv3d(cfg.base_channels, 1, 1)
        self.dp = DomainHead(cfg)

    def _check_input(self, images):
        expected = (self.cfg.in_channels, *self.cfg.input_shape)
        if images.dim() != 5 or tuple(images.shape[1:]) != expected:
            raise ValueError(f"expected images of shape (B, {', '.join(map(str, expected))}), "
                             f"got {tuple(images.shape)}")

    def _check_features(self, features):
        expected = (self.cfg.base_channels, *self.cfg.input_shape)
        if features.dim() != 5 or tuple(features.shape[1:]) != expected:
            raise ValueError(f"expected features of shape (B, {', '.join(map(str, expected))}), "
                             f"got {tuple(features.shape)}")

    def features(self, images):
        self._check_input(images)
        return self.repr(images)

    def segment(self, features):
        self._check_features(features)
        return self.seg(features)

    def domain(self, features):
        self._check_features(features)
        return self.dp(features)

    def forward(self, images):
        f = self.features(images)
        return self.segment(f), self.domain(f)

    def group_parameters(self, group: str) -> List[nn.Parameter]:
        if group not in GROUPS:
            raise ValueError(f"unknown parameter group {group!r}")
        return list(getattr(self, group).parameters())

    def named_group_parameters(self) -> Dict[str, Dict[str, nn.Parameter]]:
        out: Dict[str, Dict[str, nn.Parameter]] = {g: {} for g in GROUPS}
        for name, p in self.named_parameters():
            out[name.split(".", 1)[0]][name] = p
        return out


# Functional surface ------------------------------------------------------------


def init_model(cfg: ArchConfig, seed: int = 0) -> TwoHeadUNet:
    """Deterministically initialized network; the global RNG state is left untouched."""
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return TwoHeadUNet(cfg)


def forward_features(model: TwoHeadUNet, images):
    return model.features(images)


def forward_segment(model: TwoHeadUNet, features):
    return model.segment(features)


def forward_domain(model: TwoHeadUNet, features):
    return model.domain(features)


def gradients(model: TwoHeadUNet, loss: torch.Tensor, groups: Iterable[str],
              retain_graph: bool = False) -> Dict[str, torch.Tensor]:
    """Gradients of ``loss`` for the parameters of the requested groups only.

    Raises if the loss does not depend on any parameter of a requested group.
    """
    groups = list(dict.fromkeys(groups))
    named = model.named_group_parameters()
    names, params = [], []
    for g in groups:
        if g not in named:
            raise ValueError(f"unknown parameter group {g!r}")
        names += list(named[g])
        params += list(named[g].values())
    grads = torch.autograd.grad(loss, params, retain_graph=retain_graph, allow_unused=True)
    out = {}
    for g in groups:
        group_names = set(named[g])
        if all(grads[i] is None for i, n in enumerate(names) if n in group_names):
            raise ValueError(f"loss is not connected to parameter group {g!r}")
    for n, p, gr in zip(names, params, grads):
        out[n] = torch.zeros_like(p) if gr is None else gr
    return out


def apply_gradients(model: TwoHeadUNet, grads: Dict[str, torch.Tensor]) -> None:
    """Install ``grads`` as ``.grad``; parameters not listed get ``None``."""
    for name, p in model.named_parameters():
        p.grad = grads.get(name)


def parameter_count(model: TwoHeadUNet) -> Dict[str, int]:
    return {g: sum(p.numel() for p in ps.values()) for g, ps in model.named_group_parameters().items()}


# Checkpoints ---------------------------------------------------------------------


def _digest(tensors: Dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(tensors):
        t = tensors[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(model: TwoHeadUNet, path: Union[str, Path], extra: dict = None) -> None:
    """Write a named-tensor archive tagged with groups and the ArchConfig.

    Layout (a ``torch.save`` dict): ``format`` ("OODCKPT1"), ``arch``
    (ArchConfig fields), ``tensors`` (name -> tensor, parameters and buffers),
    ``groups`` (name -> repr/seg/dp), ``sha256`` over the tensors, ``extra``.
    """
    tensors = {k: v.detach().cpu().clone() for k, v in model.state_dict().items()}
    payload = {
        "format": CHECKPOINT_FORMAT,
        "arch": model.cfg.to_dict(),
        "tensors": tensors,
        "groups": {k: k.split(".", 1)[0] for k in tensors},
        "sha256": _digest(tensors),
        "extra": extra or {},
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    Path(path).write_bytes(buf.getvalue())


def read_checkpoint(path: Union[str, Path]) -> dict:
    payload = torch.load(Path(path), map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not an {CHECKPOINT_FORMAT} checkpoint")
    return payload


def verify_checkpoint(path: Union[str, Path]) -> List[str]:
    """Integrity problems found in a checkpoint file (empty when intact)."""
    try:
        payload = read_checkpoint(path)
    except Exception as exc:  # unreadable or wrong format
        return [f"{path}: {exc}"]
    problems = []
    tensors = payload["tensors"]
    if _digest(tensors) != payload.get("sha256"):
        problems.append(f"{path}: tensor digest mismatch")
    try:
        reference = TwoHeadUNet(ArchConfig.from_dict(payload["arch"])).state_dict()
    except Exception as exc:
        return problems + [f"{path}: invalid arch config ({exc})"]
    if set(reference) != set(tensors):
        problems.append(f"{path}: tensor names do not match the architecture")
    for name, t in tensors.items():
        if name in reference and tuple(reference[name].shape) != tuple(t.shape):
            problems.append(f"{path}: shape mismatch for {name}")
        if payload["groups"].get(name) not in GROUPS:
            problems.append(f"{path}: {name} has no valid group tag")
        if t.is_floating_point() and not torch.isfinite(t).all():
            problems.append(f"{path}: non-finite values in {name}")
    return problems


def load_checkpoint(path: Union[str, Path]) -> Tuple[TwoHeadUNet, dict]:
    payload = read_checkpoint(path)
    problems = verify_checkpoint(path)
    if problems:
        raise ValueError("; ".join(problems))
    model = TwoHeadUNet(ArchConfig.from_dict(payload["arch"]))
    model.load_state_dict(payload["tensors"])
    return model, payload.get("extra", {})
