"""Benchmark configuration: topology, line data, device records, setpoints."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

from .params import (
    AvrParams,
    EquGridParams,
    GflParams,
    GovTurbineParams,
    ParameterError,
    PerUnitBase,
    SmParams,
    record_from_dict,
    record_to_dict,
)

STAR_LENGTHS = ("l1", "l2", "lcc")
TRIANGLE_LENGTHS = ("l1p", "l2p", "l3p")
# length key -> branch name
BRANCH_OF = {"l1": "z1", "l2": "z2", "lcc": "zcc", "l1p": "z1p", "l2p": "z2p", "l3p": "z3p"}
STAR_BRANCHES = ("z1", "z2", "zcc")
TRIANGLE_BRANCHES = ("z1p", "z2p", "z3p")

_RECORDS = {
    "base": PerUnitBase,
    "sm": SmParams,
    "avr": AvrParams,
    "gov": GovTurbineParams,
    "gfl": GflParams,
    "grid": EquGridParams,
}


@dataclass(frozen=True)
class LineData:
    """Per-km line data. ``r_per_km`` is the resistance unless
    ``per_km_is_magnitude`` is set, in which case it is |Z| per km."""

    r_per_km: float = 0.05
    x_over_r: float = 1.04
    per_km_is_magnitude: bool = False


@dataclass(frozen=True)
class BenchmarkConfig:
    topology: str = "star"
    lines: dict = field(default_factory=lambda: {"l1": 5.0, "l2": 5.0, "lcc": 20.0})
    # explicit branch impedances in ohm, keyed by branch name, override lengths
    impedances: dict = field(default_factory=dict)
    line_data: LineData = field(default_factory=LineData)
    base: PerUnitBase = field(default_factory=PerUnitBase)
    sm: SmParams = field(default_factory=SmParams)
    avr: AvrParams = field(default_factory=AvrParams)
    gov: GovTurbineParams = field(default_factory=GovTurbineParams)
    gfl: GflParams = field(default_factory=GflParams)
    grid: EquGridParams = field(default_factory=EquGridParams)
    P_inv: float = 0.2
    P_sm: float = 0.2
    Q_inv: float = 0.0
    include_inverter: bool = True

    def __post_init__(self):
        if self.topology not in ("star", "triangle"):
            raise ParameterError(f"topology: expected 'star' or 'triangle', got {self.topology!r}")
        keys = STAR_LENGTHS if self.topology == "star" else TRIANGLE_LENGTHS
        branches = STAR_BRANCHES if self.topology == "star" else TRIANGLE_BRANCHES
        for k, v in self.lines.items():
            if k not in keys:
                raise ParameterError(f"lines.{k}: not a {self.topology}-form length (expected {', '.join(keys)})")
            if not v > 0:
                raise ParameterError(f"lines.{k}: length must be > 0 km, got {v}")
        for b in self.impedances:
            if b not in branches:
                raise ParameterError(f"impedances.{b}: not a {self.topology}-form branch")
        for k, b in zip(keys, branches):
            if k not in self.lines and b not in self.impedances:
                raise ParameterError(f"lines.{k}: missing (give a length or impedances.{b})")
        if self.P_sm < 0:
            raise ParameterError("setpoints.P_sm must be >= 0")

    @property
    def branches(self):
        return STAR_BRANCHES if self.topology == "star" else TRIANGLE_BRANCHES


def with_param(cfg: BenchmarkConfig, path: str, value) -> BenchmarkConfig:
    """Return a copy of ``cfg`` with the dotted ``path`` set to ``value``.

    Paths: ``lines.lcc`` (``_km`` suffix accepted), ``gfl.Ki``, ``setpoints.P_inv``,
    ``impedances.z1p`` (value ``(r, x)`` in ohm), ``base.s_base``, ...
    """
    head, _, tail = path.partition(".")
    if not tail:
        raise ParameterError(f"parameter path {path!r} must look like 'group.name'")
    if head == "lines":
        key = tail[:-3] if tail.endswith("_km") else tail
        lines = dict(cfg.lines)
        lines[key] = float(value)
        return replace(cfg, lines=lines)
    if head == "impedances":
        imp = dict(cfg.impedances)
        imp[tail] = tuple(float(v) for v in value)
        return replace(cfg, impedances=imp)
    if head == "setpoints":
        if tail not in ("P_inv", "P_sm", "Q_inv"):
            raise ParameterError(f"unknown setpoint {tail!r}")
        return replace(cfg, **{tail: float(value)})
    if head == "line_data":
        return replace(cfg, line_data=replace(cfg.line_data, **{tail: value}))
    if head in _RECORDS:
        rec = getattr(cfg, head)
        if tail not in {f.name for f in fields(rec)}:
            raise ParameterError(f"unknown parameter {path!r}")
        return replace(cfg, **{head: replace(rec, **{tail: float(value)})})
    raise ParameterError(f"unknown parameter group in path {path!r}")


def get_param(cfg: BenchmarkConfig, path: str) -> float:
    head, _, tail = path.partition(".")
    if head == "lines":
        return cfg.lines[tail[:-3] if tail.endswith("_km") else tail]
    if head == "setpoints":
        return getattr(cfg, tail)
    if head in _RECORDS:
        return getattr(getattr(cfg, head), tail)
    raise ParameterError(f"cannot read parameter {path!r}")


def config_from_dict(data: dict) -> BenchmarkConfig:
    data = copy.deepcopy(data)
    kwargs = {}
    for key, cls in _RECORDS.items():
        if key in data:
            kwargs[key] = record_from_dict(cls, data.pop(key), key)
    net = data.pop("network", {})
    if "topology" in net:
        kwargs["topology"] = net["topology"]
    if "lengths_km" in net:
        kwargs["lines"] = {k: float(v) for k, v in net["lengths_km"].items() if not k.startswith("_")}
    if "impedances_ohm" in net:
        kwargs["impedances"] = {k: (float(v[0]), float(v[1])) for k, v in net["impedances_ohm"].items()
                                if not k.startswith("_")}
    if "line_data" in net:
        ld = {k: v for k, v in net["line_data"].items() if not k.startswith("_")}
        try:
            kwargs["line_data"] = LineData(**ld)
        except TypeError as exc:
            raise ParameterError(f"network.line_data: {exc}") from None
    sp = data.pop("setpoints", {})
    for k in ("P_inv", "P_sm", "Q_inv"):
        if k in sp:
            kwargs[k] = float(sp[k])
    if "vg_ref" in sp:
        kwargs["avr"] = replace(kwargs.get("avr", AvrParams()), vg_ref=float(sp["vg_ref"]))
    if "include_inverter" in data:
        kwargs["include_inverter"] = bool(data.pop("include_inverter"))
    unknown = sorted(k for k in data if not k.startswith("_"))
    if unknown:
        raise ParameterError(f"unknown top-level key(s): {', '.join(unknown)}")
    return BenchmarkConfig(**kwargs)


def config_to_dict(cfg: BenchmarkConfig) -> dict:
    out = {key: record_to_dict(getattr(cfg, key)) for key in _RECORDS}
    out["network"] = {
        "topology": cfg.topology,
        "lengths_km": dict(cfg.lines),
        "impedances_ohm": {k: list(v) for k, v in cfg.impedances.items()},
        "line_data": {
            "r_per_km": cfg.line_data.r_per_km,
            "x_over_r": cfg.line_data.x_over_r,
            "per_km_is_magnitude": cfg.line_data.per_km_is_magnitude,
        },
    }
    out["setpoints"] = {"P_inv": cfg.P_inv, "P_sm": cfg.P_sm, "Q_inv": cfg.Q_inv, "vg_ref": cfg.avr.vg_ref}
    out["include_inverter"] = cfg.include_inverter
    return out


def load_config(path) -> BenchmarkConfig:
    with open(path) as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParameterError(f"{path}: invalid JSON ({exc})") from None
    return config_from_dict(data)


def save_config(cfg: BenchmarkConfig, path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(cfg), indent=2, sort_keys=True) + "\n")


def nominal_config(**overrides) -> BenchmarkConfig:
    """The shipped nominal scenario (``data/nominal.json``)."""
    text = resources.files("coupling_modes").joinpath("data/nominal.json").read_text()
    cfg = config_from_dict(json.loads(text))
    for path, value in overrides.items():
        cfg = with_param(cfg, path.replace("__", "."), value)
    return cfg
