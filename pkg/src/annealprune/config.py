"""Experiment configuration: sectioned ``key = value`` text files.

Every key is optional; defaults reproduce the CIFAR-10 annealed-pruning run::

    [data]
    dataset = cifar10          ; cifar10 | mnist | synth
    path = data/cifar-10-batches-bin

    [model]
    model = baseline-cnn       ; baseline-cnn | mlp
    hidden = 512               ; mlp hidden widths, comma separated

    [regularizer]
    kind = ap                  ; none | dropout | ap
    q = 0.25
    p = 0.1
    mu = 1
    start = 3
    post = 3
    b0 = 0.5
    mode = prune-largest       ; prune-largest | prune-smallest
    target = first-dense       ; or a layer index

    [train]
    epochs = 20
    batch_size = 32
    lr = 0.01
    seed = 0
    repeats = 10
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from .pruning import MODES, ApHyperparams

DATASETS = ("cifar10", "mnist", "synth")
MODELS = ("baseline-cnn", "mlp")
REGULARIZERS = ("none", "dropout", "ap")
DTYPES = ("float32", "float64")


class ConfigError(ValueError):
    """Invalid or inconsistent configuration value."""


@dataclass
class ExperimentConfig:
    # data
    dataset: str = "cifar10"
    path: str = ""
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    test_fraction: float = 0.2
    train_limit: int = 0
    test_limit: int = 0
    synth_classes: int = 4
    synth_per_class: int = 100
    synth_dim: int = 16
    synth_spread: float = 0.1
    synth_seed: int = 0
    # model
    model: str = "baseline-cnn"
    hidden: tuple = (512,)
    # regularizer
    regularizer: str = "ap"
    q: float = 0.25
    ap: ApHyperparams = field(default_factory=ApHyperparams)
    target: str = "first-dense"
    # train
    epochs: int = 20
    batch_size: int = 32
    lr: float = 0.01
    seed: int = 0
    repeats: int = 10
    dtype: str = "float32"
    # output
    out: str = "runs/experiment"
    record_seconds: bool = False
    plots: bool = True

    def validate(self) -> "ExperimentConfig":
        def need(cond, msg):
            if not cond:
                raise ConfigError(msg)

        need(self.dataset in DATASETS, f"data.dataset must be one of {DATASETS}, got {self.dataset!r}")
        need(self.model in MODELS, f"model.model must be one of {MODELS}, got {self.model!r}")
        need(self.regularizer in REGULARIZERS,
             f"regularizer.kind must be one of {REGULARIZERS}, got {self.regularizer!r}")
        need(self.dtype in DTYPES, f"train.dtype must be one of {DTYPES}, got {self.dtype!r}")
        need(0 <= self.q < 1, f"regularizer.q must lie in [0, 1), got {self.q}")
        need(self.epochs >= 1, f"train.epochs must be >= 1, got {self.epochs}")
        need(self.batch_size >= 1, f"train.batch_size must be >= 1, got {self.batch_size}")
        need(self.lr > 0, f"train.lr must be positive, got {self.lr}")
        need(self.seed >= 0, f"train.seed must be non-negative, got {self.seed}")
        need(self.repeats >= 1, f"train.repeats must be >= 1, got {self.repeats}")
        need(0 < self.test_fraction < 1, f"data.test_fraction must lie in (0, 1), got {self.test_fraction}")
        need(self.train_limit >= 0 and self.test_limit >= 0, "data limits must be non-negative")
        need(all(h >= 1 for h in self.hidden), f"model.hidden widths must be positive, got {self.hidden}")
        if self.model == "baseline-cnn":
            need(self.dataset != "mnist", "baseline-cnn needs 32x32x3 input; use model = mlp for mnist")
        if self.dataset == "cifar10":
            need(bool(self.path), "data.path must name the CIFAR-10 binary directory")
        if self.dataset == "mnist":
            need(bool(self.path) or bool(self.train_images and self.train_labels),
                 "mnist needs data.path or data.train_images + data.train_labels")
        if self.dataset == "synth":
            need(self.synth_classes >= 2, "data.synth_classes must be >= 2")
            need(self.synth_per_class >= 1, "data.synth_per_class must be >= 1")
            need(self.synth_dim >= 1, "data.synth_dim must be >= 1")
            need(self.synth_spread >= 0, "data.synth_spread must be non-negative")
        if self.target != "first-dense":
            need(self.target.isdigit(), f"regularizer.target must be first-dense or a layer index, got {self.target!r}")
        if self.regularizer == "ap":
            n = self.epochs - self.ap.post - self.ap.start + 1
            need(n >= 1, f"AP needs epochs - post - start + 1 >= 1 (got {n})")
        return self

    def input_shape(self) -> tuple:
        if self.dataset == "cifar10":
            return (32, 32, 3)
        if self.dataset == "mnist":
            return (28, 28, 1)
        return (1, 1, self.synth_dim)

    def to_text(self) -> str:
        parser = configparser.ConfigParser()
        parser["data"] = {k: str(getattr(self, k)) for k in _SECTIONS["data"]}
        parser["model"] = {"model": self.model, "hidden": ",".join(str(h) for h in self.hidden)}
        reg = {"kind": self.regularizer, "q": str(self.q), "target": self.target}
        reg.update({k: str(v) for k, v in dataclasses.asdict(self.ap).items()})
        parser["regularizer"] = reg
        parser["train"] = {k: str(getattr(self, k)) for k in _SECTIONS["train"]}
        parser["output"] = {"dir": self.out, "record_seconds": str(self.record_seconds).lower(),
                            "plots": str(self.plots).lower()}
        lines = []
        for section in parser.sections():
            lines.append(f"[{section}]")
            lines += [f"{k} = {v}" for k, v in parser[section].items()]
            lines.append("")
        return "\n".join(lines)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_SECTIONS = {
    "data": ("dataset", "path", "train_images", "train_labels", "test_images", "test_labels",
             "test_fraction", "train_limit", "test_limit", "synth_classes", "synth_per_class",
             "synth_dim", "synth_spread", "synth_seed"),
    "train": ("epochs", "batch_size", "lr", "seed", "repeats", "dtype"),
}
_AP_KEYS = ("p", "mu", "start", "post", "b0", "mode")


def _coerce(name: str, raw: str, like):
    try:
        if isinstance(like, bool):
            low = raw.strip().lower()
            if low not in ("true", "false", "yes", "no", "1", "0", "on", "off"):
                raise ValueError(raw)
            return low in ("true", "yes", "1", "on")
        if isinstance(like, int):
            return int(raw)
        if isinstance(like, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {type(like).__name__}") from None
    return raw.strip()


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"))
    try:
        parser.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigError(f"{source}: {exc}".splitlines()[0]) from None
    cfg = ExperimentConfig()
    values = {}
    ap = dataclasses.asdict(cfg.ap)
    known = {"data", "model", "regularizer", "train", "output"}
    for section in parser.sections():
        if section not in known:
            raise ConfigError(f"{source}: unknown section [{section}]")
        for key, raw in parser[section].items():
            name = f"{section}.{key}"
            if section in _SECTIONS and key in _SECTIONS[section]:
                values[key] = _coerce(name, raw, getattr(cfg, key))
            elif section == "model" and key == "model":
                values["model"] = raw.strip()
            elif section == "model" and key == "hidden":
                try:
                    values["hidden"] = tuple(int(h) for h in raw.split(",") if h.strip())
                except ValueError:
                    raise ConfigError(f"{name}: expected comma-separated integers, got {raw!r}") from None
            elif section == "regularizer" and key == "kind":
                values["regularizer"] = raw.strip()
            elif section == "regularizer" and key == "q":
                values["q"] = _coerce(name, raw, cfg.q)
            elif section == "regularizer" and key == "target":
                values["target"] = raw.strip()
            elif section == "regularizer" and key in _AP_KEYS:
                ap[key] = _coerce(name, raw, ap[key])
            elif section == "output" and key == "dir":
                values["out"] = raw.strip()
            elif section == "output" and key in ("record_seconds", "plots"):
                values[key] = _coerce(name, raw, getattr(cfg, key))
            else:
                raise ConfigError(f"{source}: unknown key {name}")
    if ap["mode"] not in MODES:
        raise ConfigError(f"regularizer.mode must be one of {MODES}, got {ap['mode']!r}")
    try:
        values["ap"] = ApHyperparams(**ap)
    except ValueError as exc:
        raise ConfigError(f"regularizer: {exc}") from None
    return ExperimentConfig(**values).validate()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config ({exc.strerror or exc})") from None
    return parse_config(text, str(path))


def apply_overrides(cfg: ExperimentConfig, assignments) -> ExperimentConfig:
    """Apply ``section.key=value`` strings on top of ``cfg``."""
    if not assignments:
        return cfg
    sections: dict[str, list[str]] = {}
    for item in assignments:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} is not section.key=value")
        lhs, value = item.split("=", 1)
        section, key = lhs.strip().split(".", 1)
        sections.setdefault(section, []).append(f"{key} = {value.strip()}")
    base = cfg.to_text()
    extra = "\n".join(f"[{s}]\n" + "\n".join(lines) for s, lines in sections.items())
    parser = configparser.ConfigParser(inline_comment_prefixes=(";", "#"), strict=False)
    parser.read_string(base)
    parser.read_string(extra)
    merged = []
    for section in parser.sections():
        merged.append(f"[{section}]")
        merged += [f"{k} = {v}" for k, v in parser[section].items()]
    return parse_config("\n".join(merged), "<overrides>")
