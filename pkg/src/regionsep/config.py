"""TOML run configuration with a strict schema (unknown keys are errors)."""
from __future__ import annotations

from pathlib import Path
from typing import Literal, Optional, Union

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from .network.model import ModelConfig, preset
from .sim.scene import PROFILES, SimProfile, get_profile

__all__ = ["ConfigError", "RunConfig", "SimulateSection", "ModelSection", "TrainSection",
           "AblateSection", "load_config", "parse_config"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    def overrides(self, exclude: set[str]) -> dict:
        return {k: v for k, v in self.model_dump(exclude=exclude).items() if v is not None}


Pair = tuple[float, float]
Triple = tuple[float, float, float]


class SimulateSection(_Strict):
    profile: str = "angular"
    noise: Optional[str] = None
    duration_s: Optional[Pair] = None
    t60: Optional[Pair] = None
    room_min: Optional[Triple] = None
    room_max: Optional[Triple] = None
    speakers: Optional[tuple[int, int]] = None
    speech_sir: Optional[Pair] = None
    width_deg: Optional[Pair] = None
    dist_threshold: Optional[Pair] = None
    array: Optional[str] = None

    def to_profile(self) -> SimProfile:
        if self.profile not in PROFILES:
            raise ConfigError(f"simulate.profile: unknown profile {self.profile!r}; known: {sorted(PROFILES)}")
        try:
            return get_profile(self.profile, **self.overrides({"profile"}))
        except ValueError as exc:
            raise ConfigError(f"simulate: {exc}") from None


class ModelSection(_Strict):
    preset: str = "toy"
    variant: Literal["A", "D"] = "A"
    R: Optional[int] = Field(None, ge=1)
    H: Optional[int] = Field(None, ge=1)
    P: Optional[int] = Field(None, ge=1)
    bands: Optional[str] = None
    array: Optional[str] = None
    pairs: Union[Literal["all"], tuple[int, ...], tuple[tuple[int, int], ...], None] = None
    aggregation: Optional[str] = None
    sampling: Optional[str] = None
    spatial: Optional[tuple[str, ...]] = None
    normalize_direction: Optional[bool] = None

    def to_config(self) -> ModelConfig:
        try:
            return preset(self.preset, **self.overrides({"preset"}))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from None


class TrainSection(_Strict):
    steps: int = Field(200, ge=1)
    batch_size: int = Field(4, ge=1)
    lr: float = Field(1e-3, gt=0)
    loss_lambda: float = Field(0.01, ge=0)  # weight of the Q=0 spectral L1 term
    steps_per_epoch: int = Field(1000, ge=1)
    data: Literal["profile", "narrow"] = "profile"
    scenes: int = Field(16, ge=1)
    duration_s: float = Field(1.0, gt=0)
    log_every: int = Field(10, ge=1)
    checkpoint_every: int = Field(100, ge=1)


class AblateSection(_Strict):
    dimension: Literal["sampling", "aggregation", "mics", "diameter"] = "sampling"
    grid: Optional[tuple[str, ...]] = None
    steps: int = Field(200, ge=1)
    repeats: int = Field(3, ge=1)
    train_scenes: int = Field(32, ge=1)
    eval_scenes: int = Field(16, ge=1)
    duration_s: float = Field(1.0, gt=0)
    data: Literal["profile", "narrow"] = "narrow"


class RunConfig(_Strict):
    corpus: Optional[str] = None
    simulate: SimulateSection = SimulateSection()
    model: ModelSection = ModelSection()
    train: TrainSection = TrainSection()
    ablate: AblateSection = AblateSection()


def _describe(exc: ValidationError) -> str:
    lines = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"])
        lines.append(f"{loc}: {err['msg']}")
    return "; ".join(lines)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(f"{source}: {_describe(exc)}") from None


def load_config(path: str | Path | None) -> RunConfig:
    """Defaults when ``path`` is None."""
    if path is None:
        return RunConfig()
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    return parse_config(text, str(path))
