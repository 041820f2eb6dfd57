"""Scenario files: TOML documents validated into ``ScenarioConfig``.

A scenario names the run mode, the model rates, the costs, the time grid
and the initial state (or the cluster layout for network runs). Any
validation problem surfaces as ``ConfigError`` with the offending field
and the line of the file that holds it.
"""
import re

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from swirs.errors import ConfigError
from swirs.services.control_service import CostSpec, SweepOptions
from swirs.services.model_service import ControlVector, ModelParams, State, TimeGrid
from swirs.services.network_service import NetworkSpec

Mode = Literal["simulate", "optimize", "stability", "sweep", "network", "bound"]
MODES: Tuple[str, ...] = ("simulate", "optimize", "stability", "sweep", "network", "bound")

_CONFIG = ConfigDict(frozen=True, extra="forbid")


class SweepRange(BaseModel):
    """One swept model rate: ``steps`` evenly spaced values from ``min`` to ``max``."""

    model_config = _CONFIG

    name: str
    min: float
    max: float
    steps: int = Field(ge=2)

    @model_validator(mode="after")
    def _check_range(self) -> "SweepRange":
        if self.name not in ModelParams.names():
            raise ValueError(f"unknown model parameter {self.name!r}; expected one of {', '.join(ModelParams.names())}")
        if not self.max > self.min:
            raise ValueError(f"empty range: max ({self.max}) must exceed min ({self.min})")
        return self


class SweepConfig(BaseModel):
    model_config = _CONFIG

    x: SweepRange
    y: SweepRange
    fixed_policy: ControlVector = ControlVector(u1=0.5, u2=0.5, u3=0.5)
    controlled: bool = True

    @model_validator(mode="after")
    def _check_distinct(self) -> "SweepConfig":
        if self.x.name == self.y.name:
            raise ValueError(f"both sweep axes vary {self.x.name!r}")
        return self


class NetworkConfig(BaseModel):
    """Cluster layout; ``target_cluster`` is 0-based."""

    model_config = _CONFIG

    a: List[List[float]]
    b: List[List[float]]
    initial: List[State] = Field(min_length=1)
    target_cluster: int = Field(default=0, ge=0)
    optimize: bool = False
    literal_sigma: bool = False
    control: Optional[List[ControlVector]] = None

    @model_validator(mode="after")
    def _check_target(self) -> "NetworkConfig":
        if self.target_cluster >= len(self.initial):
            raise ValueError(f"target_cluster {self.target_cluster} outside 0..{len(self.initial) - 1}")
        if self.control is not None and len(self.control) != len(self.initial):
            raise ValueError(f"control lists {len(self.control)} clusters, initial lists {len(self.initial)}")
        return self


class OutputConfig(BaseModel):
    model_config = _CONFIG

    dir: Optional[str] = None


class ScenarioConfig(BaseModel):
    """A complete, validated scenario."""

    model_config = _CONFIG

    name: str = Field(min_length=1, pattern=r"^[A-Za-z0-9_.-]+$")
    mode: Mode
    params: ModelParams
    costs: CostSpec = CostSpec()
    grid: TimeGrid
    initial: Optional[State] = None
    control: Optional[ControlVector] = None
    sweep: Optional[SweepConfig] = None
    network: Optional[NetworkConfig] = None
    sweep_options: SweepOptions = SweepOptions()
    output: OutputConfig = OutputConfig()

    @model_validator(mode="after")
    def _check_mode(self) -> "ScenarioConfig":
        if self.mode in ("simulate", "optimize", "sweep") and self.initial is None:
            raise ValueError(f"mode {self.mode!r} requires an [initial] state")
        if self.mode == "sweep" and self.sweep is None:
            raise ValueError("mode 'sweep' requires a [sweep] table")
        if self.mode in ("network", "bound") and self.network is None:
            raise ValueError(f"mode {self.mode!r} requires a [network] table")
        return self

    def network_spec(self) -> NetworkSpec:
        return NetworkSpec(a=self.network.a, b=self.network.b, initial=self.network.initial)


_HEADER = re.compile(r"^\s*\[\[?\s*([^\]]+?)\s*\]\]?\s*(#.*)?$")
_KEY = re.compile(r"^\s*([A-Za-z0-9_\-\"']+)\s*=")
_DECODE_LINE = re.compile(r"line (\d+)")


def _key_line(lines: Sequence[str], start: int, key: str) -> Optional[int]:
    """First line at or after ``start`` assigning ``key``, stopping at the next table header."""
    for n in range(start, len(lines)):
        if _HEADER.match(lines[n]):
            return None
        m = _KEY.match(lines[n])
        if m and m.group(1).strip("\"'") == key:
            return n + 1
    return None


def _index_after(loc: Sequence[Union[str, int]], name: str) -> Optional[int]:
    i = list(loc).index(name)
    if i + 1 < len(loc) and isinstance(loc[i + 1], int):
        return loc[i + 1]
    return None


def locate(text: str, loc: Sequence[Union[str, int]]) -> Optional[int]:
    """1-based line of the deepest key or table header on ``loc`` present in ``text``."""
    lines = text.splitlines()
    headers: Dict[str, List[int]] = {}
    for n, line in enumerate(lines):
        m = _HEADER.match(line)
        if m:
            headers.setdefault(m.group(1).replace(" ", ""), []).append(n)
    names = [p for p in loc if isinstance(p, str)]
    if not names:
        return None
    for depth in range(len(names), 0, -1):
        table = ".".join(names[:depth])
        if table not in headers:
            continue
        rows = headers[table]
        occurrence = _index_after(loc, names[depth - 1])
        start = rows[occurrence] if occurrence is not None and occurrence < len(rows) else rows[0]
        if depth < len(names):
            found = _key_line(lines, start + 1, names[depth])
            if found is not None:
                return found
        return start + 1
    return _key_line(lines, 0, names[0])


def parse_scenario(text: str, mode: Optional[str] = None, source: str = "<string>") -> ScenarioConfig:
    """Validate TOML text into a ScenarioConfig; ``mode`` overrides the file's mode.

    Raises:
        ConfigError: on TOML syntax errors and on any validation failure.
    """
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        m = _DECODE_LINE.search(str(e))
        raise ConfigError(f"{source}: {e}", line=int(m.group(1)) if m else None)
    if mode is not None:
        data["mode"] = mode
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as e:
        first = e.errors()[0]
        loc = first.get("loc", ())
        field = ".".join(str(p) for p in loc) or None
        line = locate(text, loc)
        label = f"{field}: " if field else ""
        raise ConfigError(f"{source}: {label}{first.get('msg', 'invalid value')}", field=field, line=line)


def load_scenario(path: Union[str, Path], mode: Optional[str] = None) -> ScenarioConfig:
    """Read and validate a scenario file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigError(f"cannot read scenario {path}: {e.strerror or e}", field="config")
    return parse_scenario(text, mode=mode, source=str(path))
