"""Scene metadata and the scene-regularization filter."""

from collections.abc import Iterable
from typing import TypeVar, Union

from pydantic import BaseModel, Field, field_validator

from density_adapt.config import FilterRule, format_clock, parse_clock
from density_adapt.utils import setup_logger

logger = setup_logger("density_adapt.scene")

# Upper count bound of each level category.
LEVEL_COUNT_CEILINGS: dict[int, int] = {
    0: 10,
    1: 25,
    2: 50,
    3: 100,
    4: 300,
    5: 600,
    6: 1000,
    7: 2000,
    8: 4000,
}

WEATHER_NAMES: dict[int, str] = {
    0: "clear",
    1: "clouds",
    2: "rain",
    3: "foggy",
    4: "thunder",
    5: "overcast",
    6: "extra sunny",
}


class SceneMeta(BaseModel):
    """Per-image scene attributes used by the filter."""

    level: int = Field(ge=0, le=8)
    time: int = Field(ge=0, lt=1440, description="Minutes since midnight")
    weather: int = Field(ge=0, le=6)
    count: int = Field(ge=0)
    ratio: float = Field(ge=0.0, le=1.0)

    @field_validator("time", mode="before")
    @classmethod
    def _parse_time(cls, value: Union[str, int]) -> int:
        return parse_clock(value)

    def to_json_dict(self) -> dict:
        """Render in the on-disk annotation layout (time as HH:MM)."""
        data = self.model_dump()
        data["time"] = format_clock(self.time)
        return data


def scene_filter(meta: SceneMeta, rule: FilterRule) -> bool:
    """
    Decide whether a scene passes a regularization rule.

    Every range is inclusive on both ends.

    Args:
        meta: Scene attributes
        rule: Filter rule

    Returns:
        True if the scene is accepted
    """
    start, end = rule.time_window
    count_lo, count_hi = rule.count_range
    ratio_lo, ratio_hi = rule.ratio_range
    return (
        meta.level in rule.levels
        and start <= meta.time <= end
        and meta.weather in rule.weathers
        and count_lo <= meta.count <= count_hi
        and ratio_lo <= meta.ratio <= ratio_hi
    )


T = TypeVar("T")


def select_scenes(samples: Iterable[T], rule: FilterRule, keep_unlabeled: bool = False) -> list[T]:
    """
    Keep the samples whose ``meta`` passes ``rule``.

    Args:
        samples: Objects with a ``meta`` attribute (SceneMeta or None)
        rule: Filter rule
        keep_unlabeled: Whether samples without metadata survive

    Returns:
        The accepted samples, order preserved
    """
    kept, dropped = [], 0
    for sample in samples:
        meta = getattr(sample, "meta", None)
        if (meta is None and keep_unlabeled) or (meta is not None and scene_filter(meta, rule)):
            kept.append(sample)
        else:
            dropped += 1

    logger.info("Scene regularization applied", extra={"kept": len(kept), "dropped": dropped})
    return kept
