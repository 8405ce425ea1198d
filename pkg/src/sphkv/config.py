"""Plain-text run configuration: sections of `key = value` lines plus the
tier table block.

The format is deliberately structured-format-free so a run is pinned by
one human-diffable file. Parsing is fail-closed: unknown sections or
keys are rejected, and emit -> parse -> emit is the identity, which the
test suite checks.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .codec import TierSpec, TierTable
from .controller import ControllerConfig
from .frontier import SweepConfig
from .gate import GateConfig
from .workload import WorkloadConfig

DEFAULT_TIERS = (
    TierSpec(0, 0, 0, 0),
    TierSpec(1, 2, 4, 8),
    TierSpec(2, 4, 6, 8),
    TierSpec(3, 6, 8, 8),
    TierSpec(4, 8, 10, 8),
    TierSpec(5, 12, 14, 8),
    TierSpec(6, 15, 16, 8),
)


@dataclass
class GateSettings:
    enabled: bool = False
    tau_drop: float = 0.3
    tau_prot: float = 0.7
    alpha: float = 1.0

    def build(self) -> GateConfig | None:
        if not self.enabled:
            return None
        return GateConfig(self.tau_drop, self.tau_prot, self.alpha)


@dataclass
class RunConfig:
    workload: WorkloadConfig = field(default_factory=WorkloadConfig)
    tiers: TierTable = field(default_factory=lambda: TierTable(DEFAULT_TIERS))
    controller: ControllerConfig = field(default_factory=ControllerConfig)
    gate: GateSettings = field(default_factory=GateSettings)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    rollout_budget_frac: float = 1.0
    calibration_sample: int = 512
    out_dir: str = "out"


def _emit_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if v is None:
        return "none"
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):  # spans
            return ",".join(f"{a}:{b}" for a, b in v)
        return ",".join(_emit_value(x) for x in v)
    return str(v)


def _parse_typed(raw: str, template):
    raw = raw.strip()
    if isinstance(template, bool):
        if raw not in ("true", "false"):
            raise ValueError(f"expected true/false, got {raw!r}")
        return raw == "true"
    if template is None or raw == "none":
        return None if raw == "none" else int(raw)
    if isinstance(template, int):
        return int(raw)
    if isinstance(template, float):
        return float(raw)
    if isinstance(template, tuple):
        if raw == "":
            return ()
        items = raw.split(",")
        if template and isinstance(template[0], tuple) or (not template and ":" in raw):
            return tuple(tuple(int(x) for x in item.split(":")) for item in items)
        if template and isinstance(template[0], float):
            return tuple(float(x) for x in items)
        if template and isinstance(template[0], int):
            return tuple(int(x) for x in items)
        return tuple(x.strip() for x in items)
    return raw


_SECTIONS = {
    "workload": ("workload", WorkloadConfig),
    "controller": ("controller", ControllerConfig),
    "gate": ("gate", GateSettings),
    "sweep": ("sweep", SweepConfig),
}

_RUN_KEYS = ("rollout_budget_frac", "calibration_sample", "out_dir")

# keys whose dataclass default is None need an explicit parse type
_NONE_TYPED = {"critical_step": int}


def emit(cfg: RunConfig) -> str:
    """Canonical text form; `parse(emit(cfg))` equals cfg."""
    lines = []
    for section, (attr, cls) in _SECTIONS.items():
        obj = getattr(cfg, attr)
        lines.append(f"[{section}]")
        for f in fields(cls):
            if section == "controller" and f.name == "lam":
                lines.append(f"lambda = {_emit_value(obj.lam)}")
            else:
                lines.append(f"{f.name} = {_emit_value(getattr(obj, f.name))}")
        lines.append("")
    lines.append("[tiers]")
    lines.append(cfg.tiers.serialize())
    lines.append("")
    lines.append("[run]")
    for k in _RUN_KEYS:
        lines.append(f"{k} = {_emit_value(getattr(cfg, k))}")
    lines.append("")
    return "\n".join(lines)


def parse(text: str) -> RunConfig:
    """Parse the canonical text form; unknown sections or keys reject."""
    cfg = RunConfig()
    section = None
    tier_lines = []
    updates: dict[str, dict] = {name: {} for name in _SECTIONS}
    run_updates: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1]
            if section not in (*_SECTIONS, "tiers", "run"):
                raise ValueError(f"line {lineno}: unknown section [{section}]")
            continue
        if section is None:
            raise ValueError(f"line {lineno}: key outside any section")
        if section == "tiers":
            tier_lines.append(line)
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, raw = (p.strip() for p in line.split("=", 1))
        if section == "run":
            if key not in _RUN_KEYS:
                raise ValueError(f"line {lineno}: unknown key {key!r} in [run]")
            run_updates[key] = _parse_typed(raw, getattr(cfg, key))
            continue
        attr, cls = _SECTIONS[section]
        name = "lam" if (section == "controller" and key == "lambda") else key
        valid = {f.name for f in fields(cls)}
        if name not in valid:
            raise ValueError(f"line {lineno}: unknown key {key!r} in [{section}]")
        template = getattr(getattr(cfg, attr), name)
        if template is None and name in _NONE_TYPED:
            template = None  # parsed as optional int
        updates[section][name] = _parse_typed(raw, template)

    if tier_lines:
        cfg = replace(cfg, tiers=TierTable.parse("\n".join(tier_lines)))
    for section, (attr, _) in _SECTIONS.items():
        if updates[section]:
            cfg = replace(cfg, **{attr: replace(getattr(cfg, attr), **updates[section])})
    if run_updates:
        cfg = replace(cfg, **run_updates)
    return cfg


def load(path: str) -> RunConfig:
    with open(path) as f:
        return parse(f.read())


def save(cfg: RunConfig, path: str):
    with open(path, "w") as f:
        f.write(emit(cfg))
