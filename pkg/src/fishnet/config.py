"""Declarative network configuration and its ``key = value`` text format.

Example::

    name = fishnet-tiny
    num_stages = 3
    input_shape = 3, 32, 32
    channels = 16, 32, 64
    tail_blocks = 1, 1, 1
    body_blocks = 1, 1, 1
    head_blocks = 1, 1, 1
    reduction_k = 1, 2, 2
    num_classes = 10

Lists are comma-separated integers, ``#`` starts a comment and unknown keys
are rejected.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

from .errors import ConfigError

ARCHS = ("fishnet", "resnet_control", "plain_cnn")
STEMS = ("conv7x7_s2", "two_residual_blocks")
DOWNSAMPLERS = ("max2", "max3", "avg2", "conv")

_LIST_KEYS = ("input_shape", "channels", "tail_blocks", "body_blocks", "head_blocks",
              "reduction_k")
_INT_KEYS = ("num_stages", "body_dilation", "group_width", "num_classes", "se_ratio")
_STR_KEYS = ("name", "arch", "stem", "downsample")


@dataclass(frozen=True)
class FishNetConfig:
    num_stages: int
    input_shape: tuple
    channels: tuple
    tail_blocks: tuple
    body_blocks: tuple = ()
    head_blocks: tuple = ()
    # reduction_k[s] is the rate of the UR-block fed by stage s; stage 0 has none
    reduction_k: tuple = ()
    num_classes: int = 10
    name: str = "fishnet"
    arch: str = "fishnet"
    stem: str = "conv7x7_s2"
    downsample: str = "max2"
    body_dilation: int = 2
    # channels per group at stage 0, doubled every stage; 0 disables grouping
    group_width: int = 0
    se_ratio: int = 16

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)

    # -- derived quantities --------------------------------------------------

    def stage_resolution(self, s):
        """Spatial size (H, W) of stage ``s``: input / 2**(s + 1)."""
        _, h, w = self.input_shape
        return h >> (s + 1), w >> (s + 1)

    def groups_for(self, width, stage):
        if not self.group_width:
            return 1
        gw = self.group_width << stage
        if width % gw:
            raise ConfigError(
                f"bottleneck width {width} not divisible by group width {gw}", stage)
        return width // gw

    def body_channels(self):
        """Channels of the body feature at every stage (index = stage)."""
        s_max = self.num_stages - 1
        out = [0] * self.num_stages
        out[s_max] = self.channels[s_max]
        for s in range(s_max, 0, -1):
            out[s - 1] = (out[s] + self.channels[s]) // self.reduction_k[s]
        return out

    def head_channels(self):
        """Channels entering the head at every stage, plus the final concat width."""
        body = self.body_channels()
        out = [self.channels[0]]
        for s in range(self.num_stages - 1):
            out.append(out[s] + body[s])
        return out, out[-1] + body[-1]

    # -- validation -------------------------------------------------------------

    def validate(self):
        if self.arch not in ARCHS:
            raise ConfigError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.stem not in STEMS:
            raise ConfigError(f"unknown stem {self.stem!r}; expected one of {STEMS}")
        if self.downsample not in DOWNSAMPLERS:
            raise ConfigError(f"unknown downsample {self.downsample!r}")
        if self.num_stages < 2:
            raise ConfigError(f"num_stages must be >= 2, got {self.num_stages}")
        if len(self.input_shape) != 3 or min(self.input_shape) < 1:
            raise ConfigError(f"input_shape must be C,H,W with positive dims, got {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        lists = {"channels": self.channels, "tail_blocks": self.tail_blocks}
        if self.arch == "fishnet":
            lists.update(body_blocks=self.body_blocks, head_blocks=self.head_blocks,
                         reduction_k=self.reduction_k)
        for key, val in lists.items():
            if len(val) != self.num_stages:
                raise ConfigError(
                    f"{key} has {len(val)} entries, expected num_stages={self.num_stages}")
        _, h, w = self.input_shape
        div = 1 << self.num_stages
        for s in range(self.num_stages):
            rh, rw = self.stage_resolution(s)
            if rh < 1 or rw < 1:
                raise ConfigError(f"spatial size collapses below 1 ({h}x{w} input)", s)
        if h % div or w % div:
            raise ConfigError(
                f"input {h}x{w} must be divisible by 2**num_stages={div} so every "
                "stage halves exactly", self.num_stages - 1)
        for s in range(self.num_stages):
            if self.channels[s] < 4:
                raise ConfigError(f"channels must be >= 4, got {self.channels[s]}", s)
            if self.tail_blocks[s] < 1:
                raise ConfigError("tail needs at least one block per stage", s)
        if self.arch != "fishnet":
            return self
        if self.body_dilation < 1:
            raise ConfigError("body_dilation must be >= 1")
        for s in range(self.num_stages):
            if self.head_blocks[s] < 1:
                raise ConfigError("head needs at least one block per stage", s)
            if self.body_blocks[s] < (1 if s > 0 else 0):
                raise ConfigError("every UR-block needs at least one refinement unit", s)
            if self.reduction_k[s] < 1:
                raise ConfigError(f"reduction_k must be >= 1, got {self.reduction_k[s]}", s)
        body = [0] * self.num_stages
        body[-1] = self.channels[-1]
        for s in range(self.num_stages - 1, 0, -1):
            cat = body[s] + self.channels[s]
            k = self.reduction_k[s]
            if cat % k:
                raise ConfigError(
                    f"UR-block input channels {cat} not divisible by reduction_k={k}", s)
            body[s - 1] = cat // k
            if body[s - 1] < 4:
                raise ConfigError(f"UR-block output has {body[s - 1]} channels (< 4)", s)
        return self


def parse_config(text, source="<config>"):
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            if key in _LIST_KEYS:
                values[key] = tuple(int(v) for v in val.split(",") if v.strip())
            elif key in _INT_KEYS:
                values[key] = int(val)
            elif key in _STR_KEYS:
                values[key] = val
            else:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {val!r}") from None
    for req in ("num_stages", "input_shape", "channels", "tail_blocks"):
        if req not in values:
            raise ConfigError(f"{source}: missing required key {req!r}")
    return FishNetConfig(**values)


def format_config(cfg):
    """Inverse of :func:`parse_config`; key order is fixed."""
    lines = []
    for f in dataclasses.fields(cfg):
        val = getattr(cfg, f.name)
        if isinstance(val, tuple):
            if not val:
                continue
            val = ", ".join(str(v) for v in val)
        lines.append(f"{f.name} = {val}")
    return "\n".join(lines) + "\n"


def builtin_configs():
    return sorted(p.name for p in resources.files("fishnet.configs").iterdir()
                  if p.name.endswith(".cfg"))


def load_config(path_or_name):
    """Read a config file; bare names fall back to the bundled configs."""
    path = Path(path_or_name)
    if path.exists():
        text = path.read_text()
    else:
        name = path.name if path.suffix == ".cfg" else path.name + ".cfg"
        res = resources.files("fishnet.configs") / name
        if not res.is_file():
            raise ConfigError(f"config file not found: {path_or_name}")
        text = res.read_text()
    return parse_config(text, source=str(path_or_name))
