"""Scenario configuration, the bundled scenarios and the scenario runner."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .network import NetworkError, ScriptAction, parse_script
from .protocol import World, WorldConfig, write_artifacts
from .verifier import REQUIREMENTS, Artifacts, Verdict, verdict_records, verify

STAGES = ("preparation", "vehicle")
BUNDLED = ("honest-e2e", "tamper-ecu-link", "replay-ecu-link", "drop-step17", "delay-step17")


class ConfigError(ValueError):
    """The scenario configuration is malformed or inconsistent."""


@dataclass
class ScenarioConfig:
    name: str = "custom"
    description: str = ""
    seed: int = 0
    backend: str = "real"
    vehicles: list = field(default_factory=lambda: [{"vin": "VIN0001", "initial_ecu_version": 1}])
    supplier_versions: dict = field(default_factory=lambda: {"ecu-fw": [2, 3]})
    round_ttl: int = 2000
    eta: int = 8
    stages: list = field(default_factory=lambda: ["preparation", "vehicle", "preparation", "vehicle"])
    adversary_script: list = field(default_factory=list)  # parsed ScriptAction lines
    checks: list = field(default_factory=lambda: list(REQUIREMENTS))

    def world_config(self) -> WorldConfig:
        (sw_id, versions), = self.supplier_versions.items()
        return WorldConfig(
            seed=self.seed,
            backend=self.backend,
            vehicles={v["vin"]: v["initial_ecu_version"] for v in self.vehicles},
            software_id=sw_id,
            releases=tuple(versions),
            round_ttl=self.round_ttl,
            eta=self.eta,
            script=[ScriptAction(**a.to_json()) for a in self.adversary_script],
        )


def _int(raw: dict, key: str, default: int, minimum: int) -> int:
    value = raw.get(key, default)
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise ConfigError(f"{key} must be an integer >= {minimum}")
    return value


def parse_config(raw: Any, base_dir: Path | None = None) -> ScenarioConfig:
    """Validate a decoded JSON config; script paths resolve against ``base_dir``."""
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    known = set(ScenarioConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    cfg = ScenarioConfig(
        name=str(raw.get("name", "custom")),
        description=str(raw.get("description", "")),
        seed=_int(raw, "seed", 0, 0),
        round_ttl=_int(raw, "round_ttl", 2000, 1),
        eta=_int(raw, "eta", 8, 1),
    )
    backend = raw.get("backend", "real")
    if backend not in ("real", "mock"):
        raise ConfigError("backend must be 'real' or 'mock'")
    cfg.backend = backend

    vehicles = raw.get("vehicles", cfg.vehicles)
    if not isinstance(vehicles, list) or not vehicles:
        raise ConfigError("vehicles must be a non-empty list")
    seen = set()
    for v in vehicles:
        if not isinstance(v, dict) or not isinstance(v.get("vin"), str) or not v["vin"] or "@" in v["vin"] or "/" in v["vin"]:
            raise ConfigError(f"bad vehicle entry {v!r}")
        if v["vin"] in seen:
            raise ConfigError(f"duplicate VIN {v['vin']}")
        seen.add(v["vin"])
        _int(v, "initial_ecu_version", 0, 0)
    cfg.vehicles = [{"vin": v["vin"], "initial_ecu_version": v.get("initial_ecu_version", 0)} for v in vehicles]

    versions = raw.get("supplier_versions", cfg.supplier_versions)
    if not isinstance(versions, dict) or len(versions) != 1:
        raise ConfigError("supplier_versions must map exactly one software id to its release list")
    (sw_id, releases), = versions.items()
    if not isinstance(releases, list) or not releases or not all(isinstance(x, int) and not isinstance(x, bool) for x in releases):
        raise ConfigError("supplier_versions releases must be a non-empty list of integers")
    cfg.supplier_versions = {str(sw_id): list(releases)}

    stages = raw.get("stages", cfg.stages)
    if not isinstance(stages, list) or not stages or any(s not in STAGES for s in stages):
        raise ConfigError(f"stages must be a non-empty list drawn from {STAGES}")
    if stages.count("preparation") > len(releases):
        raise ConfigError("more preparation stages than supplier releases")
    cfg.stages = list(stages)

    checks = raw.get("checks", cfg.checks)
    if not isinstance(checks, list) or not checks or any(c not in REQUIREMENTS for c in checks):
        raise ConfigError(f"checks must be a non-empty subset of {list(REQUIREMENTS)}")
    cfg.checks = list(checks)

    script = raw.get("adversary_script")
    if script is not None:
        try:
            if isinstance(script, str):
                path = Path(script)
                if not path.is_absolute() and base_dir is not None:
                    path = base_dir / path
                cfg.adversary_script = parse_script(path.read_text().splitlines())
            elif isinstance(script, list):
                cfg.adversary_script = parse_script(script)
            else:
                raise ConfigError("adversary_script must be a path or a list of actions")
        except OSError as exc:
            raise ConfigError(f"cannot read adversary script: {exc}") from exc
        except NetworkError as exc:
            raise ConfigError(f"bad adversary script: {exc}") from exc
    return cfg


def load_config(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return parse_config(raw, path.parent)


def bundled_path(name: str) -> Path:
    if name not in BUNDLED:
        raise ConfigError(f"unknown bundled scenario {name!r}")
    return Path(str(resources.files("unisuf") / "bundled" / f"{name}.json"))


def bundled(name: str) -> ScenarioConfig:
    return load_config(bundled_path(name))


def list_scenarios() -> list[tuple[str, str]]:
    return [(name, bundled(name).description) for name in BUNDLED]


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    world: World
    verdicts: list  # of Verdict

    @property
    def selected(self) -> list[Verdict]:
        return [v for v in self.verdicts if v.requirement in self.config.checks]

    @property
    def exit_code(self) -> int:
        return 0 if all(v.passed for v in self.selected) else 1


def run_scenario(cfg: ScenarioConfig, out_dir: str | Path | None = None) -> ScenarioResult:
    try:
        world = World(cfg.world_config())
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    world.run_stages(cfg.stages)
    verdicts = verify(Artifacts.from_world(world))
    if out_dir is not None:
        write_artifacts(world, Path(out_dir), verdict_records(verdicts))
    return ScenarioResult(cfg, world, verdicts)
