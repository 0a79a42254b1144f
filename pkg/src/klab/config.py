"""Experiment configuration: parsing, validation and canonical serialization.

A configuration is a JSON or YAML mapping:

    name: counterexample
    drift: {kind: counterexample, alpha: 0.6}
    numeric: {d: 1, L: 8.0, n: 128, dt: 0.001, T: 0.5, lam_sweep: [5, 10, 20, 40, 80]}
    mc: {n_paths: 1000, seed: 0}
    outputs: {dir: out, format: csv}
    params: {}            # experiment-specific extras

Missing sections are filled from defaults. Validation collects every
violation before failing.
"""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from typing import Any, Mapping

import yaml

from .core import DriftSpecError, KlabError, make_drift

REGISTRY = (
    "counterexample",
    "ou-check",
    "resolvent",
    "zvonkin",
    "flow-holder",
    "girsanov",
    "derivative",
    "spde-regularity",
    "uniqueness",
    "norms",
    "mollify",
)

DEFAULTS: dict[str, Any] = {
    "drift": {"kind": "counterexample", "alpha": 0.6},
    "numeric": {"d": 1, "L": 8.0, "n": 128, "dt": 1e-2, "T": 1.0, "lam_sweep": [5.0, 10.0, 20.0, 40.0, 80.0]},
    "mc": {"n_paths": 1000, "seed": 0},
    "outputs": {"dir": "klab-out", "format": "csv"},
    "params": {},
}

FORMATS = ("csv",)


class ConfigError(KlabError):
    def __init__(self, violations: list[str]):
        self.violations = list(violations)
        super().__init__("invalid configuration:\n  - " + "\n  - ".join(self.violations))


@dataclass(frozen=True)
class ExperimentConfig:
    name: str
    drift: dict = field(default_factory=dict)
    numeric: dict = field(default_factory=dict)
    mc: dict = field(default_factory=dict)
    outputs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "drift": copy.deepcopy(self.drift),
            "numeric": copy.deepcopy(self.numeric),
            "mc": copy.deepcopy(self.mc),
            "outputs": copy.deepcopy(self.outputs),
            "params": copy.deepcopy(self.params),
        }

    @property
    def seed(self) -> int:
        return int(self.mc["seed"])

    def with_overrides(self, seed: int | None = None, out: str | None = None, **params) -> "ExperimentConfig":
        data = self.to_dict()
        if seed is not None:
            data["mc"]["seed"] = int(seed)
        if out is not None:
            data["outputs"]["dir"] = str(out)
        data["params"].update({k: v for k, v in params.items() if v is not None})
        return from_mapping(data)


def _merge(base: dict, extra: Mapping) -> dict:
    out = copy.deepcopy(base)
    for k, v in extra.items():
        out[k] = copy.deepcopy(v)
    return out


def _validate(data: dict) -> list[str]:
    errs: list[str] = []
    name = data.get("name")
    if name not in REGISTRY:
        errs.append(f"name: {name!r} is not a registered experiment ({', '.join(REGISTRY)})")
    drift = data["drift"]
    if not isinstance(drift, Mapping):
        errs.append("drift: must be a mapping")
    else:
        kind = drift.get("kind")
        if kind == "counterexample":
            alpha = drift.get("alpha", 0.6)
            if not isinstance(alpha, (int, float)) or not (0.5 < float(alpha) < 1.0):
                errs.append(f"drift.alpha: {alpha!r} must lie in the open interval (1/2, 1)")
            if drift.get("sign", 1) not in (1, -1):
                errs.append("drift.sign: must be +1 or -1")
        elif kind in ("zero", "constant"):
            pass
        else:
            errs.append(f"drift.kind: {kind!r} must be one of zero, constant, counterexample in a config file")
        if not errs or all(not e.startswith("drift") for e in errs):
            try:
                make_drift(dict(drift, d=data["numeric"].get("d", 1)))
            except (DriftSpecError, TypeError, ValueError) as exc:
                errs.append(f"drift: {exc}")
    num = data["numeric"]
    if not isinstance(num, Mapping):
        errs.append("numeric: must be a mapping")
    else:
        d = num.get("d")
        if not isinstance(d, int) or d < 1:
            errs.append(f"numeric.d: {d!r} must be a positive integer")
        for key in ("L", "dt", "T"):
            val = num.get(key)
            if not isinstance(val, (int, float)) or not val > 0:
                errs.append(f"numeric.{key}: {val!r} must be a positive number")
        n = num.get("n")
        if not isinstance(n, int) or n < 8 or n % 2:
            errs.append(f"numeric.n: {n!r} must be an even integer >= 8")
        sweep = num.get("lam_sweep")
        if not isinstance(sweep, list) or not sweep or not all(isinstance(x, (int, float)) and x > 0 for x in sweep):
            errs.append("numeric.lam_sweep: must be a non-empty list of positive numbers")
        elif any(b <= a for a, b in zip(sweep, sweep[1:])):
            errs.append("numeric.lam_sweep: must be strictly ascending")
    mc = data["mc"]
    if not isinstance(mc, Mapping):
        errs.append("mc: must be a mapping")
    else:
        npaths = mc.get("n_paths")
        if not isinstance(npaths, int) or npaths < 1:
            errs.append(f"mc.n_paths: {npaths!r} must be a positive integer")
        seed = mc.get("seed")
        if not isinstance(seed, int) or seed < 0:
            errs.append(f"mc.seed: {seed!r} must be a nonnegative integer")
    outs = data["outputs"]
    if not isinstance(outs, Mapping):
        errs.append("outputs: must be a mapping")
    else:
        if not isinstance(outs.get("dir"), str) or not outs.get("dir"):
            errs.append("outputs.dir: must be a non-empty string")
        if outs.get("format") not in FORMATS:
            errs.append(f"outputs.format: {outs.get('format')!r} must be one of {FORMATS}")
    if not isinstance(data["params"], Mapping):
        errs.append("params: must be a mapping")
    unknown = set(data) - {"name", "drift", "numeric", "mc", "outputs", "params"}
    for k in sorted(unknown):
        errs.append(f"{k}: unknown top-level key")
    return errs


def from_mapping(doc: Mapping) -> ExperimentConfig:
    if not isinstance(doc, Mapping):
        raise ConfigError(["document must be a key-value mapping"])
    data: dict[str, Any] = {k: copy.deepcopy(v) for k, v in doc.items()}
    for section in ("numeric", "mc", "outputs"):
        given = data.get(section, {})
        data[section] = _merge(DEFAULTS[section], given) if isinstance(given, Mapping) else given
    if "drift" not in data:
        data["drift"] = copy.deepcopy(DEFAULTS["drift"])
    data.setdefault("params", {})
    errs = _validate(data)
    if errs:
        raise ConfigError(errs)
    return ExperimentConfig(
        data["name"], dict(data["drift"]), dict(data["numeric"]), dict(data["mc"]), dict(data["outputs"]), dict(data["params"])
    )


def parse_config(text: str) -> ExperimentConfig:
    """Parse a JSON or YAML document into a validated configuration."""
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError([f"not a valid JSON/YAML document: {exc}"]) from None
    if doc is None:
        doc = {}
    return from_mapping(doc)


def default_config(name: str) -> ExperimentConfig:
    return from_mapping({"name": name})


def serialize(cfg: ExperimentConfig) -> str:
    """Canonical JSON text; parse_config(serialize(c)) == c."""
    return json.dumps(cfg.to_dict(), sort_keys=True, indent=2) + "\n"
