"""Run configuration: INI file with sections, environment overrides, CLI overrides.

Precedence (lowest first): built-in defaults, config file, ``ONESTOP_<SECTION>_<KEY>``
environment variables, ``--set section.key=value`` / dedicated CLI flags.
"""

from __future__ import annotations

import configparser
import copy
import io
import os

from .training import STAGE_ORDER, TrainConfig
from .transformer import ModelConfig

DEFAULTS: dict[str, dict] = {
    "data": {
        "train": "",
        "valid": "",
        "window": 160,
        "stride": 80,
        "min_freq": 1,
        "reject_threshold": 0.2,
    },
    "model": {
        "profile": "toy",      # toy: 2+2 layers, width 64; base: 6+6 layers, width 768
        "d_model": 0,          # 0 keeps the profile value
        "heads": 0,
        "d_ff": 0,
        "encoder_layers": 0,
        "decoder_layers": 0,
        "max_document_len": 0,
        "max_question_len": 0,
    },
    "train": {
        "lambda": 0.2,
        "batch_size": 16,
        "epochs": 4,
        "qg_epochs": 0,        # 0 keeps ``epochs``
        "span_epochs": 0,
        "joint_epochs": 0,
        "base_lr": 1e-4,
        "warmup_ratio": 0.05,
        "dropout": 0.1,
        "seed": 0,
        "stages": ",".join(STAGE_ORDER),
        "patience": 2,
        "clip_norm": 1.0,
        "max_steps": 0,        # 0 = no cap
        "init": "random",
        "denoise_epochs": 1,
        "out_dir": "runs/onestop",
    },
    "decode": {
        "beam": 3,
        "max_len": 32,
        "top_n": 5,
        "max_answer_len": 30,
        "window": 160,
        "stride": 80,
    },
}

ENV_PREFIX = "ONESTOP_"


def _coerce(value, like):
    if isinstance(like, bool):
        return str(value).strip().lower() in ("1", "true", "yes", "on")
    if isinstance(like, int):
        return int(value)
    if isinstance(like, float):
        return float(value)
    return str(value)


def _set(cfg: dict, section: str, key: str, value) -> None:
    if section not in cfg:
        raise KeyError(f"unknown config section [{section}]")
    if key not in cfg[section]:
        raise KeyError(f"unknown config key {section}.{key}")
    cfg[section][key] = _coerce(value, DEFAULTS[section][key])


def load_config(path=None, overrides: dict | None = None, environ=None) -> dict:
    """Resolve the run configuration to a nested ``{section: {key: value}}`` dict."""
    cfg = copy.deepcopy(DEFAULTS)
    if path:
        parser = configparser.ConfigParser()
        if not parser.read(path, encoding="utf-8"):
            raise FileNotFoundError(f"config file not found: {path}")
        for section in parser.sections():
            for key, value in parser.items(section):
                _set(cfg, section, key, value)
    env = os.environ if environ is None else environ
    for name, value in env.items():
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        section, _, key = rest.partition("_")
        if section in cfg and key in cfg[section]:
            _set(cfg, section, key, value)
    for dotted, value in (overrides or {}).items():
        section, _, key = dotted.partition(".")
        _set(cfg, section, key, value)
    return cfg


def model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    m = cfg["model"]
    t = cfg["train"]
    if m["profile"] == "toy":
        base = ModelConfig.toy(vocab_size).to_dict()
    elif m["profile"] == "base":
        base = ModelConfig(vocab_size=vocab_size).to_dict()
    else:
        raise ValueError(f"unknown model profile {m['profile']!r}")
    for key in ("d_model", "heads", "d_ff", "encoder_layers", "decoder_layers", "max_document_len", "max_question_len"):
        if m[key]:
            base[key] = m[key]
    base["dropout"] = t["dropout"]
    base["vocab_size"] = vocab_size
    return ModelConfig(**base)


def train_config(cfg: dict) -> TrainConfig:
    t = cfg["train"]
    stage_epochs = {s: t[f"{s}_epochs"] for s in STAGE_ORDER if t[f"{s}_epochs"]}
    return TrainConfig(
        lam=t["lambda"],
        batch_size=t["batch_size"],
        epochs=t["epochs"],
        base_lr=t["base_lr"],
        warmup_ratio=t["warmup_ratio"],
        dropout=t["dropout"],
        seed=t["seed"],
        stages=tuple(s.strip() for s in t["stages"].split(",") if s.strip()),
        patience=t["patience"],
        clip_norm=t["clip_norm"],
        max_steps=t["max_steps"] or None,
        stage_epochs=stage_epochs,
        max_answer_len=cfg["decode"]["max_answer_len"],
        init=t["init"],
        denoise_epochs=t["denoise_epochs"],
    )


def dump_ini(cfg: dict) -> str:
    parser = configparser.ConfigParser()
    for section, values in cfg.items():
        parser[section] = {k: str(v) for k, v in values.items()}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
