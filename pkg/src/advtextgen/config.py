"""Experiment configuration: dataclasses plus a flat key=value file format.

One flat namespace covers corpus, model, training, and attack/eval knobs so a
single config file pins an entire reproducible run.
"""

from __future__ import annotations

import hashlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path


def derive_seed(seed: int, tag: str) -> int:
    """Stable per-purpose sub-seed so RNG streams stay independent."""
    digest = hashlib.sha256(f"{seed}:{tag}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little") % (2**63 - 1)


@dataclass
class TrainingConfig:
    """Knobs for VAE pretraining and the joint min-max loop."""

    phi: float = 5.0
    kl_ramp_start: int = 500
    kl_ramp_end: int = 2500
    keep_rate: float = 0.75
    t_start: float = 1.0
    t_end: float = 0.1
    t_decay_steps: int = 600
    batch_size: int = 64
    lr_gen: float = 1e-3
    lr_disc: float = 1e-3
    lr_target: float = 1e-3
    target_epochs: int = 6
    pretrain_steps: int = 3000
    joint_cycles: int = 800
    disc_steps: int = 1
    disable_disc: bool = False
    non_saturating: bool = False
    grad_clip: float = 5.0
    early_stop_window: int = 0
    early_stop_rel_change: float = 0.001
    target_class_map: str = "flip"
    seed: int = 0

    def validate(self, num_classes: int) -> None:
        if self.phi < 0:
            raise ValueError("phi must be nonnegative")
        if self.kl_ramp_start > self.kl_ramp_end:
            raise ValueError("kl_ramp_start must not exceed kl_ramp_end")
        if not 0.0 <= self.keep_rate <= 1.0:
            raise ValueError("keep_rate must lie in [0, 1]")
        if self.t_end > self.t_start or self.t_end <= 0:
            raise ValueError("temperature schedule needs 0 < t_end <= t_start")
        mapping = resolve_target_class_map(self.target_class_map, num_classes)
        for k in range(num_classes):
            if mapping[k] == k:
                raise ValueError(f"target_class_map sends class {k} to itself")


@dataclass
class ExperimentConfig:
    """Everything a full run needs, serialized as flat key=value lines."""

    # synthetic corpus / data
    vocab_size: int = 120
    num_texts: int = 2000
    max_len: int = 20
    min_freq: int = 1
    vocab_max_size: int = 5000
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    # model dimensions
    num_classes: int = 2
    d_w: int = 64
    filter_widths: tuple[int, ...] = (3, 4, 5)
    n_filters: int = 32
    d_emb: int = 64
    d_z: int = 32
    d_c: int = 8
    gen_hidden: int = 128
    disc_hidden: tuple[int, ...] = (256, 64)
    lm_emb: int = 64
    lm_hidden: int = 96
    lm_steps: int = 1500

    # attack / evaluation
    beam_width: int = 4
    epsilon_fgsm: float = 1.0
    modify_fraction: float = 0.10
    max_deepfool_iters: int = 20
    n_unrestricted: int = 2000
    n_pairwise: int = 500
    annotation_n: int = 100
    torch_threads: int = 1

    training: TrainingConfig = field(default_factory=TrainingConfig)

    @property
    def fixed_len(self) -> int:
        """Fixed model length m: room for max_len tokens plus the EOS position."""
        return self.max_len + 1

    def validate(self) -> None:
        if not 0.0 < self.modify_fraction <= 1.0:
            raise ValueError("modify_fraction must lie in (0, 1]")
        if self.epsilon_fgsm <= 0:
            raise ValueError("epsilon_fgsm must be positive")
        self.training.validate(self.num_classes)


def resolve_target_class_map(rule: str, num_classes: int) -> dict[int, int]:
    """Attack target class for each condition class.

    "flip" is 1-k (binary only), "cycle" is (k+1) mod |Y|, and an explicit map
    is written as "0:1,1:0".
    """
    if rule == "flip":
        if num_classes != 2:
            raise ValueError("target_class_map 'flip' requires exactly 2 classes")
        return {0: 1, 1: 0}
    if rule == "cycle":
        return {k: (k + 1) % num_classes for k in range(num_classes)}
    mapping = {}
    try:
        for pair in rule.split(","):
            src, dst = pair.split(":")
            mapping[int(src)] = int(dst)
    except ValueError as exc:
        raise ValueError(f"cannot parse target_class_map {rule!r}") from exc
    for k in range(num_classes):
        if k not in mapping:
            raise ValueError(f"target_class_map {rule!r} misses class {k}")
        if not 0 <= mapping[k] < num_classes:
            raise ValueError(f"target_class_map sends {k} outside the label space")
    return mapping


_TUPLE_FIELDS = {"split_ratios": float, "filter_widths": int, "disc_hidden": int}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse_value(raw: str, ftype) -> object:
    if ftype is bool:
        if raw not in ("true", "false"):
            raise ValueError(f"boolean field expects true/false, got {raw!r}")
        return raw == "true"
    if ftype is int:
        return int(raw)
    if ftype is float:
        return float(raw)
    if ftype is str:
        return raw
    raise ValueError(f"unsupported field type {ftype}")


def save_config(cfg: ExperimentConfig, path: str | Path) -> None:
    lines = []
    for f in fields(ExperimentConfig):
        if f.name == "training":
            continue
        lines.append(f"{f.name} = {_format_value(getattr(cfg, f.name))}")
    for f in fields(TrainingConfig):
        lines.append(f"{f.name} = {_format_value(getattr(cfg.training, f.name))}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def load_config(path: str | Path) -> ExperimentConfig:
    cfg = ExperimentConfig()
    exp_fields = {f.name: f for f in fields(ExperimentConfig)}
    train_fields = {f.name: f for f in fields(TrainingConfig)}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key in train_fields and key not in exp_fields:
            target, f = cfg.training, train_fields[key]
        elif key in exp_fields and key != "training":
            target, f = cfg, exp_fields[key]
        else:
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        if key in _TUPLE_FIELDS:
            elem = _TUPLE_FIELDS[key]
            value = tuple(elem(v.strip()) for v in raw.split(",") if v.strip())
        else:
            ftype = {"int": int, "float": float, "bool": bool, "str": str}[f.type] if isinstance(f.type, str) else f.type
            value = _parse_value(raw, ftype)
        setattr(target, key, value)
    cfg.validate()
    return cfg


def config_as_dict(cfg: ExperimentConfig) -> dict:
    """Flat dict snapshot for run manifests."""
    d = asdict(cfg)
    training = d.pop("training")
    d.update(training)
    return d
