"""Two small 3D encoder-decoder subnets with distinct inductive biases.

``residual-unet`` downsamples with strided residual blocks and upsamples by
trilinear interpolation plus concatenated skips. ``vnet-style`` adds the block
input channelwise (V-Net residuals), downsamples with 2x2x2 strided convs and
upsamples with transposed convs. Both return logits and a per-voxel embedding
projected from the last decoder layer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

ARCHES = ("residual-unet", "vnet-style")


@dataclass
class SubnetConfig:
    arch: str = "residual-unet"
    base_channels: int = 8
    feature_dim: int = 16
    num_classes: int = 2
    depth: int = 3

    def __post_init__(self):
        if self.arch not in ARCHES:
            raise ValueError(f"unknown arch {self.arch!r}, expected one of {ARCHES}")
        if self.base_channels < 2 or self.feature_dim < 2 or self.depth < 2:
            raise ValueError("base_channels, feature_dim and depth must all be >= 2")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


@dataclass
class SubnetOutput:
    logits: torch.Tensor
    features: torch.Tensor


def _norm(ch):
    return nn.InstanceNorm3d(ch, affine=True)


class ResBlock(nn.Module):
    def __init__(self, cin, cout, stride=1):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, stride=stride, padding=1)
        self.norm1 = _norm(cout)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1)
        self.norm2 = _norm(cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv3d(cin, cout, 1, stride=stride)

    def forward(self, x):
        h = F.relu(self.norm1(self.conv1(x)))
        h = self.norm2(self.conv2(h))
        s = x if self.skip is None else self.skip(x)
        return F.relu(h + s)


class ResidualUNet(nn.Module):
    def __init__(self, cfg: SubnetConfig):
        super().__init__()
        chs = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        self.stem = ResBlock(1, chs[0])
        self.down = nn.ModuleList(ResBlock(chs[i], chs[i + 1], stride=2) for i in range(cfg.depth - 1))
        self.up = nn.ModuleList(ResBlock(chs[i + 1] + chs[i], chs[i]) for i in range(cfg.depth - 1))
        self.out_channels = chs[0]

    def forward(self, x):
        skips = [self.stem(x)]
        for blk in self.down:
            skips.append(blk(skips[-1]))
        h = skips.pop()
        for i in reversed(range(len(self.up))):
            skip = skips.pop()
            h = F.interpolate(h, size=skip.shape[2:], mode="trilinear", align_corners=False)
            h = self.up[i](torch.cat([h, skip], dim=1))
        return h


class VStage(nn.Module):
    """Conv stack with a V-Net style channelwise residual connection."""

    def __init__(self, cin, cout, n_convs):
        super().__init__()
        layers = []
        for k in range(n_convs):
            layers += [nn.Conv3d(cin if k == 0 else cout, cout, 3, padding=1), _norm(cout)]
            if k < n_convs - 1:
                layers.append(nn.PReLU(cout))
        self.body = nn.Sequential(*layers)
        self.act = nn.PReLU(cout)
        self.cin, self.cout = cin, cout

    def forward(self, x):
        h = self.body(x)
        if self.cin == self.cout:
            res = x
        elif self.cout % self.cin == 0:
            res = x.repeat(1, self.cout // self.cin, 1, 1, 1)
        else:
            res = x.mean(dim=1, keepdim=True).expand_as(h)
        return self.act(h + res)


class VNetStyle(nn.Module):
    def __init__(self, cfg: SubnetConfig):
        super().__init__()
        chs = [cfg.base_channels * 2**i for i in range(cfg.depth)]
        self.enc = nn.ModuleList()
        self.down = nn.ModuleList()
        for i, c in enumerate(chs):
            self.enc.append(VStage(1 if i == 0 else c, c, 1 if i == 0 else 2))
            if i < cfg.depth - 1:
                self.down.append(nn.Sequential(nn.Conv3d(c, chs[i + 1], 2, stride=2), _norm(chs[i + 1]), nn.PReLU(chs[i + 1])))
        self.upconv = nn.ModuleList(nn.ConvTranspose3d(chs[i + 1], chs[i], 2, stride=2) for i in range(cfg.depth - 1))
        self.dec = nn.ModuleList(VStage(2 * chs[i], chs[i], 2) for i in range(cfg.depth - 1))
        self.reduce = nn.ModuleList(nn.Conv3d(2 * chs[i], chs[i], 1) for i in range(cfg.depth - 1))
        self.out_channels = chs[0]

    def forward(self, x):
        skips = []
        h = x
        for i, stage in enumerate(self.enc):
            h = stage(h)
            if i < len(self.down):
                skips.append(h)
                h = self.down[i](h)
        for i in reversed(range(len(self.dec))):
            h = self.upconv[i](h)
            cat = torch.cat([h, skips[i]], dim=1)
            h = self.dec[i](cat) + self.reduce[i](cat)
        return h


class Subnet(nn.Module):
    def __init__(self, cfg: SubnetConfig):
        super().__init__()
        self.config = cfg
        self.backbone = ResidualUNet(cfg) if cfg.arch == "residual-unet" else VNetStyle(cfg)
        c = self.backbone.out_channels
        self.feature_head = nn.Conv3d(c, cfg.feature_dim, 1)
        self.logit_head = nn.Conv3d(c, cfg.num_classes, 1)

    def forward(self, x: torch.Tensor) -> SubnetOutput:
        if x.dim() == 3:
            x = x[None, None]
        elif x.dim() == 4:
            x = x[:, None]
        check_shape(x.shape[2:], self.config.depth)
        h = self.backbone(x)
        return SubnetOutput(logits=self.logit_head(h), features=self.feature_head(h))


def check_shape(spatial, depth):
    factor = 2 ** (depth - 1)
    for axis, n in zip("HWD", spatial):
        if n % factor:
            raise ValueError(f"axis {axis} has size {n}, not divisible by {factor}")


def init_subnet(cfg: SubnetConfig, seed: int, dtype=torch.float32) -> Subnet:
    """Build a subnet with Kaiming fan-in weights drawn from a seeded generator."""
    net = Subnet(cfg).to(dtype)
    gen = torch.Generator().manual_seed(int(seed))
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.zero_()
            elif p.dim() >= 2:
                std = (2.0 / fan_in(name, p)) ** 0.5
                p.copy_(torch.randn(p.shape, generator=gen, dtype=dtype) * std)
            # norm scales and PReLU slopes keep their module defaults
    return net


def fan_in(name: str, p: torch.Tensor) -> int:
    if "upconv" in name:
        # ConvTranspose3d weights are (in, out, k, k, k)
        return p.shape[0] * p[0, 0].numel()
    return p[0].numel()


def forward(net: Subnet, volume) -> SubnetOutput:
    x = volume.data if hasattr(volume, "data") and not isinstance(volume, torch.Tensor) else volume
    x = torch.as_tensor(np.asarray(x) if not isinstance(x, torch.Tensor) else x)
    param = next(net.parameters())
    return net(x.to(param.dtype))


def count_parameters(net: nn.Module) -> int:
    return sum(p.numel() for p in net.parameters())


CKPT_MAGIC = b"DSCKPT01"
CKPT_VERSION = 1


def save_tensors(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named tensors as a JSON header followed by f32-le payloads."""
    entries, chunks, offset = [], [], 0
    for name, t in tensors.items():
        arr = np.ascontiguousarray(t.detach().cpu().numpy(), dtype="<f4")
        buf = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(buf)})
        chunks.append(buf)
        offset += len(buf)
    header = json.dumps({"format_version": CKPT_VERSION, "dtype": "f32-le", "tensors": entries, "meta": meta or {}}).encode()
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)
    tmp.replace(path)


def load_tensors(path) -> tuple[dict, dict]:
    raw = Path(path).read_bytes()
    if raw[:8] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file (bad magic)")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen])
    if header.get("format_version") != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {header.get('format_version')}")
    base = 16 + hlen
    out = {}
    for e in header["tensors"]:
        start = base + e["offset"]
        chunk = raw[start : start + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise ValueError(f"{path}: truncated payload for tensor {e['name']}")
        arr = np.frombuffer(chunk, dtype="<f4").reshape(e["shape"]).copy()
        out[e["name"]] = torch.from_numpy(arr)
    return out, header["meta"]


def save_checkpoint(path, net: Subnet) -> None:
    save_tensors(path, dict(net.state_dict()), {"config": asdict(net.config)})


def load_checkpoint(path) -> Subnet:
    tensors, meta = load_tensors(path)
    net = Subnet(SubnetConfig(**meta["config"]))
    net.load_state_dict(tensors)
    return net
