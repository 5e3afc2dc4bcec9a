"""Run configuration files.

INI-style ``key = value`` lines grouped under ``[data]``, ``[modules]``,
``[train]`` and ``[run]``.  Module recipes follow the grammar in
:mod:`antree.modules` and may be quoted.  Relative data paths resolve against
the current working directory.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .modules import ModuleSpec
from .training import TrainConfig
from .tree import GrowthSpecs

PRESETS = (
    "ant-sarcos",
    "ant-mnist-a",
    "ant-mnist-b",
    "ant-mnist-c",
    "ant-cifar10-a",
    "ant-cifar10-b",
    "ant-cifar10-c",
)


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    kind: str = "idx"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    train_csv: str | None = None
    test_csv: str | None = None
    input_cols: int | None = None
    target_cols: int | None = None
    num_classes: int = 10
    input_shape: tuple[int, ...] = ()
    preprocess: str = "none"
    per_feature_mean: bool = False
    train_subset: int | None = None
    test_subset: int | None = None


@dataclass
class RunConfig:
    data: DataConfig
    router: str
    transformer: str
    solver: str
    downsample_freq: int
    train: TrainConfig
    seed: int = 0
    out_dir: str = "runs/out"
    source: str | None = field(default=None, compare=False)

    def specs(self) -> GrowthSpecs:
        return GrowthSpecs(
            ModuleSpec.parse("router", self.router),
            ModuleSpec.parse("transformer", self.transformer, self.downsample_freq),
            ModuleSpec.parse("solver", self.solver),
        )

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed, train=replace(self.train, rng_seed=seed))

    def to_text(self) -> str:
        cp = configparser.ConfigParser(interpolation=None)
        cp["data"] = {
            f.name: _fmt(getattr(self.data, f.name))
            for f in fields(self.data)
            if getattr(self.data, f.name) is not None
        }
        cp["modules"] = {
            "router": f'"{self.router}"',
            "transformer": f'"{self.transformer}"',
            "solver": f'"{self.solver}"',
            "downsample_freq": str(self.downsample_freq),
        }
        cp["train"] = {
            f.name: _fmt(getattr(self.train, f.name))
            for f in fields(self.train)
            if f.name != "rng_seed" and getattr(self.train, f.name) is not None
        }
        cp["run"] = {"seed": str(self.seed), "out_dir": self.out_dir}
        buf = io.StringIO()
        cp.write(buf)
        return buf.getvalue()


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _unquote(s: str) -> str:
    s = s.strip()
    if len(s) >= 2 and s[0] == s[-1] and s[0] in "\"'":
        return s[1:-1]
    return s


def _convert(raw: str, default, name: str):
    raw = _unquote(raw)
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, tuple):
            parts = [p for p in raw.replace("x", ",").split(",") if p.strip()]
            kind = type(default[0]) if default else int
            return tuple(kind(p) for p in parts)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"invalid value {raw!r} for {name}") from None
    if default is None and raw.lower() in ("none", ""):
        return None
    return raw


_OPTIONAL_INTS = {"train_subset", "test_subset", "input_cols", "target_cols", "max_depth", "max_steps"}


def _fill(cls, section: dict, defaults, section_name: str, skip=()):
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in known:
            raise ConfigError(f"unknown key {key!r} in [{section_name}]")
        default = getattr(defaults, key)
        if key in _OPTIONAL_INTS:
            val = _unquote(raw)
            kwargs[key] = None if val.lower() in ("none", "") else _convert(val, 0, key)
        elif key == "adam_betas":
            kwargs[key] = _convert(raw, (0.0, 0.0), key)
        else:
            kwargs[key] = _convert(raw, default, key)
    return kwargs


def parse_config(text: str, source: str | None = None) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from None
    for sec in cp.sections():
        if sec not in ("data", "modules", "train", "run"):
            raise ConfigError(f"unknown section [{sec}]")
    for sec in ("data", "modules"):
        if not cp.has_section(sec):
            raise ConfigError(f"missing section [{sec}]")
    data = DataConfig(**_fill(DataConfig, dict(cp["data"]), DataConfig(), "data"))
    mods = dict(cp["modules"])
    for key in ("router", "transformer", "solver"):
        if key not in mods:
            raise ConfigError(f"[modules] needs a {key} recipe")
    unknown = set(mods) - {"router", "transformer", "solver", "downsample_freq"}
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [modules]")
    run = dict(cp["run"]) if cp.has_section("run") else {}
    seed = int(_unquote(run.get("seed", "0")))
    train_kwargs = _fill(TrainConfig, dict(cp["train"]) if cp.has_section("train") else {}, TrainConfig(), "train")
    try:
        train = TrainConfig(**train_kwargs, rng_seed=seed)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [train] section: {exc}") from None
    cfg = RunConfig(
        data=data,
        router=_unquote(mods["router"]),
        transformer=_unquote(mods["transformer"]),
        solver=_unquote(mods["solver"]),
        downsample_freq=int(_unquote(mods.get("downsample_freq", "0"))),
        train=train,
        seed=seed,
        out_dir=_unquote(run.get("out_dir", "runs/out")),
        source=source,
    )
    try:
        cfg.specs()
    except ValueError as exc:
        raise ConfigError(f"invalid module recipe: {exc}") from None
    if data.kind not in ("idx", "csv"):
        raise ConfigError(f"[data] kind must be idx or csv, got {data.kind!r}")
    return cfg


def preset_text(name: str) -> str:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    return resources.files("antree").joinpath("presets", f"{name}.cfg").read_text()


def load_config(path_or_preset: str) -> RunConfig:
    """Read a config file, or a bundled preset when given a preset name."""
    p = Path(path_or_preset)
    if p.exists():
        return parse_config(p.read_text(), str(p))
    if path_or_preset in PRESETS:
        return parse_config(preset_text(path_or_preset), path_or_preset)
    raise FileNotFoundError(f"config file not found: {path_or_preset}")
