"""Experiment configuration: plain-text key=value sections, full echo.

Every run artifact embeds the resolved configuration, including the
deviation knobs (bn_mode, normalize_before_fuse, fpr_limit), so a result
can always be traced to the exact settings that produced it. Seed
precedence: command line --seed, then the ZAL3D_SEED environment variable,
then the config file.
"""

from __future__ import annotations

import configparser
import io
import os
from dataclasses import dataclass, replace

from .errors import ConfigError
from .networks import LossConfig
from .pseudo import SynthesisConfig
from .scoring import ScoreConfig

ENV_SEED = "ZAL3D_SEED"

DEFAULTS = {
    "data": {
        "train_classes": "wavy-plane",
        "test_class": "sphere",
        "irrelevant_classes": "cylinder",
    },
    "synth": {
        "size": "224",
        "extent": "1.0",
        "noise": "0.0",
        "train_count": "20",
        "test_normal_count": "10",
        "test_anomalous_count": "10",
        "irrelevant_count": "4",
        "defect_kinds": "bump,dent,hole",
        "defect_radius_px": "0",
        "defect_amplitude": "0.12",
    },
    "randnet": {"width": "1.0", "bn_mode": "spatial", "tau": "0.001"},
    "pseudo": {
        "surround_s": "16",
        "removal_lo": "0.2",
        "removal_hi": "0.8",
        "negatives_per_positive": "16",
        "min_foreground_fraction": "0.5",
    },
    "train": {
        "temperature": "0.07",
        "w_con": "1.0",
        "w_rd": "100.0",
        "epochs": "5",
        "lr": "0.001",
        "positives_per_batch": "4",
        "max_positives": "0",
        "width1": "32",
        "width2": "64",
        "radius1": "0.1",
        "radius2": "0.25",
        "center": "true",
    },
    "bank": {"coreset_ratio": "0.1"},
    "scoring": {
        "b": "3",
        "eta": "0.1",
        "w_d": "0.5",
        "w_c": "0.5",
        "sigma": "4.0",
        "normalize_before_fuse": "true",
    },
    "eval": {"fpr_limit": "0.3"},
    "run": {"seed": "0", "threads": "1", "patch_size": "8"},
}


def _parse_bool(raw: str, key: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ConfigError(f"{key}: expected a boolean, got {raw!r}")


def _parse_list(raw: str) -> tuple[str, ...]:
    return tuple(s.strip() for s in raw.split(",") if s.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    train_classes: tuple
    test_class: str
    irrelevant_classes: tuple
    size: int
    extent: float
    noise: float
    train_count: int
    test_normal_count: int
    test_anomalous_count: int
    irrelevant_count: int
    defect_kinds: tuple
    defect_radius_px: float
    defect_amplitude: float
    width: float
    bn_mode: str
    tau: float
    surround_s: int
    removal_lo: float
    removal_hi: float
    negatives_per_positive: int
    min_foreground_fraction: float
    temperature: float
    w_con: float
    w_rd: float
    epochs: int
    lr: float
    positives_per_batch: int
    max_positives: int
    net_widths: tuple
    net_radii: tuple
    center: bool
    coreset_ratio: float
    b: int
    eta: float
    w_d: float
    w_c: float
    sigma: float
    normalize_before_fuse: bool
    fpr_limit: float
    seed: int
    threads: int
    patch_size: int

    def __post_init__(self):
        overlap = set(self.train_classes) | set(self.irrelevant_classes)
        if self.test_class in overlap:
            raise ConfigError(
                f"test class {self.test_class!r} must stay disjoint from "
                "train and task-irrelevant classes"
            )
        if not self.train_classes:
            raise ConfigError("need at least one training class")
        if self.size % 32:
            raise ConfigError("map size must be divisible by 32")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    def synthesis_config(self, seed=None) -> SynthesisConfig:
        return SynthesisConfig(
            tau=self.tau,
            surround_s=self.surround_s,
            removal_lo=self.removal_lo,
            removal_hi=self.removal_hi,
            negatives_per_positive=self.negatives_per_positive,
            min_foreground_fraction=self.min_foreground_fraction,
            seed=self.seed if seed is None else seed,
        )

    def loss_config(self) -> LossConfig:
        return LossConfig(self.temperature, self.w_con, self.w_rd)

    def score_config(self) -> ScoreConfig:
        return ScoreConfig(
            self.b, self.eta, self.w_d, self.w_c, self.sigma,
            self.normalize_before_fuse,
        )

    def with_overrides(self, **kwargs) -> "ExperimentConfig":
        return replace(self, **kwargs)

    def to_sections(self) -> dict:
        return {
            "data": {
                "train_classes": ",".join(self.train_classes),
                "test_class": self.test_class,
                "irrelevant_classes": ",".join(self.irrelevant_classes),
            },
            "synth": {
                "size": self.size,
                "extent": self.extent,
                "noise": self.noise,
                "train_count": self.train_count,
                "test_normal_count": self.test_normal_count,
                "test_anomalous_count": self.test_anomalous_count,
                "irrelevant_count": self.irrelevant_count,
                "defect_kinds": ",".join(self.defect_kinds),
                "defect_radius_px": self.defect_radius_px,
                "defect_amplitude": self.defect_amplitude,
            },
            "randnet": {"width": self.width, "bn_mode": self.bn_mode, "tau": self.tau},
            "pseudo": {
                "surround_s": self.surround_s,
                "removal_lo": self.removal_lo,
                "removal_hi": self.removal_hi,
                "negatives_per_positive": self.negatives_per_positive,
                "min_foreground_fraction": self.min_foreground_fraction,
            },
            "train": {
                "temperature": self.temperature,
                "w_con": self.w_con,
                "w_rd": self.w_rd,
                "epochs": self.epochs,
                "lr": self.lr,
                "positives_per_batch": self.positives_per_batch,
                "max_positives": self.max_positives,
                "width1": self.net_widths[0],
                "width2": self.net_widths[1],
                "radius1": self.net_radii[0],
                "radius2": self.net_radii[1],
                "center": self.center,
            },
            "bank": {"coreset_ratio": self.coreset_ratio},
            "scoring": {
                "b": self.b,
                "eta": self.eta,
                "w_d": self.w_d,
                "w_c": self.w_c,
                "sigma": self.sigma,
                "normalize_before_fuse": self.normalize_before_fuse,
            },
            "eval": {"fpr_limit": self.fpr_limit},
            "run": {
                "seed": self.seed,
                "threads": self.threads,
                "patch_size": self.patch_size,
            },
        }

    def to_ini(self) -> str:
        out = io.StringIO()
        for section, entries in self.to_sections().items():
            out.write(f"[{section}]\n")
            for key, value in entries.items():
                if isinstance(value, bool):
                    value = "true" if value else "false"
                out.write(f"{key} = {value}\n")
            out.write("\n")
        return out.getvalue()


def _merged(text: str) -> dict:
    parser = configparser.ConfigParser(interpolation=None)
    parser.read_string(text)
    merged = {s: dict(kv) for s, kv in DEFAULTS.items()}
    for section in parser.sections():
        if section not in merged:
            raise ConfigError(f"unknown config section [{section}]")
        for key, value in parser[section].items():
            if key not in merged[section]:
                raise ConfigError(f"unknown key {key!r} in section [{section}]")
            merged[section][key] = value
    return merged


def from_text(text: str) -> ExperimentConfig:
    m = _merged(text)

    def fval(sec, key):
        try:
            return float(m[sec][key])
        except ValueError as err:
            raise ConfigError(f"[{sec}] {key}: {err}") from err

    def ival(sec, key):
        try:
            return int(m[sec][key])
        except ValueError as err:
            raise ConfigError(f"[{sec}] {key}: {err}") from err

    return ExperimentConfig(
        train_classes=_parse_list(m["data"]["train_classes"]),
        test_class=m["data"]["test_class"].strip(),
        irrelevant_classes=_parse_list(m["data"]["irrelevant_classes"]),
        size=ival("synth", "size"),
        extent=fval("synth", "extent"),
        noise=fval("synth", "noise"),
        train_count=ival("synth", "train_count"),
        test_normal_count=ival("synth", "test_normal_count"),
        test_anomalous_count=ival("synth", "test_anomalous_count"),
        irrelevant_count=ival("synth", "irrelevant_count"),
        defect_kinds=_parse_list(m["synth"]["defect_kinds"]),
        defect_radius_px=fval("synth", "defect_radius_px"),
        defect_amplitude=fval("synth", "defect_amplitude"),
        width=fval("randnet", "width"),
        bn_mode=m["randnet"]["bn_mode"].strip(),
        tau=fval("randnet", "tau"),
        surround_s=ival("pseudo", "surround_s"),
        removal_lo=fval("pseudo", "removal_lo"),
        removal_hi=fval("pseudo", "removal_hi"),
        negatives_per_positive=ival("pseudo", "negatives_per_positive"),
        min_foreground_fraction=fval("pseudo", "min_foreground_fraction"),
        temperature=fval("train", "temperature"),
        w_con=fval("train", "w_con"),
        w_rd=fval("train", "w_rd"),
        epochs=ival("train", "epochs"),
        lr=fval("train", "lr"),
        positives_per_batch=ival("train", "positives_per_batch"),
        max_positives=ival("train", "max_positives"),
        net_widths=(ival("train", "width1"), ival("train", "width2")),
        net_radii=(fval("train", "radius1"), fval("train", "radius2")),
        center=_parse_bool(m["train"]["center"], "center"),
        coreset_ratio=fval("bank", "coreset_ratio"),
        b=ival("scoring", "b"),
        eta=fval("scoring", "eta"),
        w_d=fval("scoring", "w_d"),
        w_c=fval("scoring", "w_c"),
        sigma=fval("scoring", "sigma"),
        normalize_before_fuse=_parse_bool(
            m["scoring"]["normalize_before_fuse"], "normalize_before_fuse"
        ),
        fpr_limit=fval("eval", "fpr_limit"),
        seed=ival("run", "seed"),
        threads=ival("run", "threads"),
        patch_size=ival("run", "patch_size"),
    )


def load(path) -> ExperimentConfig:
    with open(path) as fh:
        return from_text(fh.read())


def default() -> ExperimentConfig:
    return from_text("")


def resolve_seed(cli_seed, cfg: ExperimentConfig) -> int:
    """--seed beats ZAL3D_SEED beats the config file."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(ENV_SEED)
    if env is not None:
        try:
            return int(env)
        except ValueError as err:
            raise ConfigError(f"{ENV_SEED}={env!r} is not an integer") from err
    return cfg.seed
