"""Run configuration: flat ``key=value`` files with range validation.

Documented keys (defaults in brackets):

=================  ==============================================================
cell               vanilla-relu | lstm | gru | m-gru | li-gru  [li-gru]
layers             recurrent layers, 1..64  [2]
units              units per direction, 1..4096  [64]
bidirectional      true | false  [true]
keep_prob          dropout keep probability, (0, 1]  [1.0]
bn                 auto | true | false; auto = batch norm for li-gru only  [auto]
recurrent_init     orthogonal | glorot  [orthogonal]
init_scale         multiplier on every initial weight matrix, > 0  [1.0]
lr                 Adam learning rate, > 0  [0.001]
lr_threshold       dev-error improvement below which lr halves, >= 0  [0.001]
epochs             >= 0  [20]
batch_size         >= 1  [8]
reshuffle          shuffle the batch order each epoch  [false]
seed               non-negative integer  [0]
weight_noise       stddev of Gaussian weight noise, >= 0; 0 disables  [0.0]
head               framewise | ctc  [framewise]
label_map          path of a label map used when scoring CTC output  [""]
precision          float64 | float32  [float64]
num_classes        classes (0 = infer from the training targets)  [0]
train_features     path  [""]
train_targets      path  [""]
dev_features       path  [""]
dev_targets        path  [""]
out_dir            directory for log, checkpoints and summaries  [""]
=================  ==============================================================
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .cells import CELL_KINDS
from .network import HEADS, StackConfig

_BOOL = {"true": True, "false": False, "1": True, "0": False, "yes": True, "no": False}


class ConfigError(ValueError):
    """Carries every validation problem found, not only the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


@dataclass
class RunConfig:
    cell: str = "li-gru"
    layers: int = 2
    units: int = 64
    bidirectional: bool = True
    keep_prob: float = 1.0
    bn: str = "auto"
    recurrent_init: str = "orthogonal"
    init_scale: float = 1.0
    lr: float = 1e-3
    lr_threshold: float = 0.001
    epochs: int = 20
    batch_size: int = 8
    reshuffle: bool = False
    seed: int = 0
    weight_noise: float = 0.0
    head: str = "framewise"
    label_map: str = ""
    precision: str = "float64"
    num_classes: int = 0
    train_features: str = ""
    train_targets: str = ""
    dev_features: str = ""
    dev_targets: str = ""
    out_dir: str = ""

    def problems(self) -> list[str]:
        p = []
        if self.cell not in CELL_KINDS:
            p.append(f"cell: {self.cell!r} not one of {', '.join(CELL_KINDS)}")
        if not 1 <= self.layers <= 64:
            p.append(f"layers: {self.layers} outside 1..64")
        if not 1 <= self.units <= 4096:
            p.append(f"units: {self.units} outside 1..4096")
        if not 0.0 < self.keep_prob <= 1.0:
            p.append(f"keep_prob: {self.keep_prob} outside (0, 1]")
        if self.bn not in ("auto", "true", "false"):
            p.append(f"bn: {self.bn!r} not one of auto, true, false")
        if self.recurrent_init not in ("orthogonal", "glorot"):
            p.append(f"recurrent_init: {self.recurrent_init!r} not one of orthogonal, glorot")
        if not (np.isfinite(self.init_scale) and self.init_scale > 0):
            p.append(f"init_scale: {self.init_scale} must be a positive finite number")
        if not (np.isfinite(self.lr) and self.lr > 0):
            p.append(f"lr: {self.lr} must be a positive finite number")
        if not (np.isfinite(self.lr_threshold) and self.lr_threshold >= 0):
            p.append(f"lr_threshold: {self.lr_threshold} must be >= 0")
        if self.epochs < 0:
            p.append(f"epochs: {self.epochs} must be >= 0")
        if self.batch_size < 1:
            p.append(f"batch_size: {self.batch_size} must be >= 1")
        if self.seed < 0:
            p.append(f"seed: {self.seed} must be >= 0")
        if not (np.isfinite(self.weight_noise) and self.weight_noise >= 0):
            p.append(f"weight_noise: {self.weight_noise} must be >= 0")
        if self.head not in HEADS:
            p.append(f"head: {self.head!r} not one of {', '.join(HEADS)}")
        if self.precision not in ("float64", "float32"):
            p.append(f"precision: {self.precision!r} not one of float64, float32")
        if self.num_classes < 0:
            p.append(f"num_classes: {self.num_classes} must be >= 0")
        if self.label_map and self.head != "ctc":
            p.append("label_map: only used with head=ctc")
        return p

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def stack_config(self) -> StackConfig:
        bn = {"auto": None, "true": True, "false": False}[self.bn]
        return StackConfig(cell=self.cell, layers=self.layers, units=self.units,
                           bidirectional=self.bidirectional, keep_prob=self.keep_prob, bn=bn,
                           recurrent_init=self.recurrent_init, init_scale=self.init_scale)

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        lines = []
        for k, v in self.to_dict().items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, pairs: dict) -> "RunConfig":
        values = self.to_dict()
        values.update(_coerce_all(pairs))
        return RunConfig(**values)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}


def _coerce_all(raw: dict) -> dict:
    problems, out = [], {}
    for key, text in raw.items():
        if key not in _FIELDS:
            problems.append(f"{key}: unknown key")
            continue
        kind = _FIELDS[key].type
        text = str(text).strip()
        try:
            if kind == "bool":
                if text.lower() not in _BOOL:
                    raise ValueError
                out[key] = _BOOL[text.lower()]
            elif kind == "int":
                out[key] = int(text)
            elif kind == "float":
                out[key] = float(text)
            else:
                out[key] = text
        except ValueError:
            problems.append(f"{key}: cannot parse {text!r} as {kind}")
    if problems:
        raise ConfigError(problems)
    return out


def parse_config_text(text: str, origin: str = "<config>") -> dict:
    """``key=value`` lines; ``#`` starts a comment; blank lines skipped."""
    raw, problems = {}, []
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            problems.append(f"{origin}:{lineno}: expected key=value, got {line!r}")
            continue
        k, v = line.split("=", 1)
        raw[k.strip()] = v.strip()
    if problems:
        raise ConfigError(problems)
    return raw


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides``; validated."""
    raw = {}
    if path:
        raw.update(parse_config_text(Path(path).read_text(), str(path)))
    raw.update(overrides or {})
    return RunConfig().with_overrides(raw).validate()
