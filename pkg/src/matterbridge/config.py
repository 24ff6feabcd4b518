"""Run configuration: model dimensions, optimizer settings, stage schedules.

A config is a flat JSON document.  Its canonical-JSON SHA-256 prefix is
the config hash stored in checkpoints, so resuming detects silently
changed settings.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass

from .errors import ContractError, ValidationError
from .ioutil import canonical_json


@dataclass
class Config:
    # model dimensions
    seed: int = 42
    d_enc: int = 32
    L_enc: int = 2
    cutoff: float = 6.0
    d_b: int = 32
    n_q: int = 32
    L_b: int = 4
    n_heads: int = 4
    d_lm: int = 64
    L_lm: int = 2
    lm_heads: int = 4
    max_len: int = 320
    max_text: int = 256
    # objectives
    tau: float = 0.07
    symmetric_contrastive: bool = False
    lm_trainable: bool = False
    # optimizer
    warmup_start_lr: float = 1e-6
    pretrain_peak_lr: float = 2e-4
    pretrain_floor_lr: float = 0.0
    finetune_peak_lr: float = 1e-4
    finetune_floor_lr: float = 1e-5
    weight_decay: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    # schedule
    batch_size: int = 8
    pretrain_accum: int = 5
    finetune_accum: int = 16
    pretrain_epochs: int = 2
    finetune_epochs: int = 2
    warmup_frac: float = 0.05
    checkpoint_interval: int = 300

    def validate(self):
        positive = (
            "warmup_start_lr", "pretrain_peak_lr", "finetune_peak_lr",
            "finetune_floor_lr",
        )
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValidationError(f"{name} must be > 0")
        if self.pretrain_floor_lr < 0:
            raise ValidationError("pretrain_floor_lr must be >= 0")
        if self.pretrain_floor_lr >= self.pretrain_peak_lr:
            raise ValidationError("pretrain floor must be below peak")
        if self.finetune_floor_lr >= self.finetune_peak_lr:
            raise ValidationError("finetune floor must be below peak")
        if min(self.batch_size, self.pretrain_accum, self.finetune_accum) < 1:
            raise ValidationError("batch and accumulation sizes must be >= 1")
        if not 0.0 <= self.warmup_frac < 1.0:
            raise ValidationError("warmup_frac must be in [0, 1)")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)


_FIELDS = {f.name for f in dataclasses.fields(Config)}


def config_from_dict(obj):
    unknown = set(obj) - _FIELDS
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return Config(**obj).validate()


def load_config(path):
    with open(path, "r", encoding="utf-8") as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as e:
            raise ContractError(f"config {path} is not valid JSON: {e.msg}") from None
    return config_from_dict(obj)


def save_config(path, cfg):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(canonical_json(cfg.to_dict()))
        fh.write("\n")


def config_hash(cfg):
    return hashlib.sha256(canonical_json(cfg.to_dict()).encode()).hexdigest()[:16]
