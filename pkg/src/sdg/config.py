"""Flat key=value run configuration with a strict schema.

One `key=value` per line, `#` starts a comment, blank lines ignored.
Unknown keys are errors; CLI `--set key=value` overrides win over the
file. The fully resolved config is echoed into every run's output
directory so a run can be reproduced from its artifacts alone.
"""

from __future__ import annotations

from dataclasses import dataclass

from .model import SDGConfig
from .schedule import SCHEDULE_KINDS
from .training import TrainConfig


def _parse_bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("true", "1", "yes"):
        return True
    if v in ("false", "0", "no"):
        return False
    raise ValueError(f"expected boolean, got {s!r}")


def _parse_optional_int(s: str):
    return None if s.strip().lower() in ("", "none", "auto") else int(s)


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    # model
    "L": (int, 30),
    "d": (int, 64),
    "K": (int, 32),
    "n_layers": (int, 1),
    "schedule_kind": (str, "cosine"),
    "lambda_diff": (float, 0.2),
    "lambda_inter": (float, 1.0),
    "task_loss": (str, "bce"),
    "heads": (int, 2),
    "ffn_dim": (_parse_optional_int, None),
    "dropout": (float, 0.1),
    "sequence_diffusion": (_parse_bool, True),
    "diffusion_enabled": (_parse_bool, True),
    "diff_loss_kind": (str, "cosine"),
    "denoiser_kind": (str, "cross_attention"),
    "repeat_time_encoding": (_parse_bool, False),
    # training
    "batch_size": (int, 200),
    "lr": (float, 1e-4),
    "max_epochs": (int, 50),
    "patience": (int, 10),
    "seed": (int, 0),
    "eval_negatives": (int, 100),
    # split
    "train_frac": (float, 0.70),
    "val_frac": (float, 0.15),
}

_MODEL_KEYS = ("L", "d", "K", "n_layers", "schedule_kind", "lambda_diff",
               "lambda_inter", "task_loss", "heads", "ffn_dim", "dropout",
               "sequence_diffusion", "diffusion_enabled", "diff_loss_kind",
               "denoiser_kind", "repeat_time_encoding")
_TRAIN_KEYS = ("batch_size", "lr", "max_epochs", "patience", "seed",
               "eval_negatives")


@dataclass
class RunConfig:
    values: dict

    def __post_init__(self):
        if self.values["schedule_kind"] not in SCHEDULE_KINDS:
            raise ValueError(
                f"schedule_kind must be one of {SCHEDULE_KINDS}, "
                f"got {self.values['schedule_kind']!r}")
        if not (0 < self.values["train_frac"] < 1 and 0 < self.values["val_frac"] < 1):
            raise ValueError("split fractions must lie in (0, 1)")
        if self.values["train_frac"] + self.values["val_frac"] >= 1:
            raise ValueError("train_frac + val_frac must be < 1")
        # constructing the sub-configs validates the rest
        self.model_config()
        self.train_config()

    def __getitem__(self, key):
        return self.values[key]

    def model_config(self) -> SDGConfig:
        return SDGConfig(**{k: self.values[k] for k in _MODEL_KEYS})

    def train_config(self) -> TrainConfig:
        return TrainConfig(**{k: self.values[k] for k in _TRAIN_KEYS})


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ValueError(f"{source}:{lineno}: unknown config key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            out[key] = parser(value)
        except ValueError as e:
            raise ValueError(f"{source}:{lineno}: bad value for {key}: {e}") from e
    return out


def load_run_config(path=None, overrides=None) -> RunConfig:
    """File values layered over defaults, then --set overrides on top."""
    values = {k: default for k, (_, default) in SCHEMA.items()}
    if path is not None:
        with open(path, encoding="utf-8") as f:
            values.update(parse_config_text(f.read(), source=str(path)))
    for item in overrides or ():
        if "=" not in item:
            raise ValueError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        key, value = key.strip(), value.strip()
        if key not in SCHEMA:
            raise ValueError(f"--set: unknown config key {key!r}")
        values[key] = SCHEMA[key][0](value)
    return RunConfig(values)


def format_config(cfg: RunConfig) -> str:
    lines = []
    for key in SCHEMA:
        v = cfg.values[key]
        if v is None:
            v = "none"
        elif isinstance(v, bool):
            v = "true" if v else "false"
        lines.append(f"{key}={v}")
    return "\n".join(lines) + "\n"
