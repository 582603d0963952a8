"""Learning-rate cycling and sparsity sweep planning.

The recovery learning rate decays linearly within a cycle of length T and
snaps back at every cycle boundary:

    lr(t) = lr_max - (lr_max - lr_min) * (t mod T) / T

so lr(0) = lr_max and the value stays strictly above lr_min. The cycle
length is meant to equal the sweep interval so each pruning event starts
a fresh cycle.

A sweep prunes to ``targets[i]`` at step ``i * interval`` and emits a
checkpoint after the recovery window that follows each event.

Config files are plain ``key = value`` lines (``#`` comments allowed)
with the keys lr.max, lr.min, lr.period, sweep.targets (comma-separated)
and sweep.interval.
"""

from __future__ import annotations

from dataclasses import dataclass

DEFAULT_LR_MAX = 5e-4
DEFAULT_LR_MIN = 1e-5
DEFAULT_PERIOD = 20


@dataclass(frozen=True)
class LrSchedule:
    """Cyclic linear decay from lr_max toward (never reaching) lr_min."""

    lr_max: float = DEFAULT_LR_MAX
    lr_min: float = DEFAULT_LR_MIN
    period: int = DEFAULT_PERIOD

    def __post_init__(self) -> None:
        if not self.lr_max > self.lr_min > 0.0:
            raise ValueError(
                f"need lr_max > lr_min > 0, got {self.lr_max} and {self.lr_min}"
            )
        if self.period < 1:
            raise ValueError(f"period must be >= 1, got {self.period}")


def lr_at(schedule: LrSchedule, step: int) -> float:
    """Learning rate at integer step ``step`` (>= 0)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    frac = (step % schedule.period) / schedule.period
    return schedule.lr_max - (schedule.lr_max - schedule.lr_min) * frac


@dataclass(frozen=True)
class SweepPlan:
    """Strictly increasing sparsity targets hit every ``interval`` steps."""

    targets: tuple[float, ...]
    interval: int

    def __post_init__(self) -> None:
        if len(self.targets) == 0:
            raise ValueError("a sweep needs at least one target")
        if any(not 0.0 < t < 1.0 for t in self.targets):
            raise ValueError(f"targets must lie in (0, 1), got {self.targets}")
        if any(b <= a for a, b in zip(self.targets, self.targets[1:])):
            raise ValueError(f"targets must be strictly increasing, got {self.targets}")
        if self.interval < 1:
            raise ValueError(f"interval must be >= 1, got {self.interval}")

    def events(self) -> list[tuple[int, float]]:
        """(step, target) pairs; the first event fires at step 0."""
        return [(i * self.interval, t) for i, t in enumerate(self.targets)]

    def checkpoint_steps(self) -> list[tuple[int, float]]:
        """(step, target) where each checkpoint is emitted: one recovery
        window after its event."""
        return [(i * self.interval + self.interval, t) for i, t in enumerate(self.targets)]

    @property
    def total_steps(self) -> int:
        return len(self.targets) * self.interval


def plan_sweep(targets: tuple[float, ...] | list[float], interval: int) -> SweepPlan:
    return SweepPlan(tuple(float(t) for t in targets), int(interval))


_CONFIG_KEYS = ("lr.max", "lr.min", "lr.period", "sweep.targets", "sweep.interval")


def parse_config(text: str) -> dict[str, object]:
    """Parse ``key = value`` lines into typed values.

    Returns a dict with any of: lr.max (float), lr.min (float),
    lr.period (int), sweep.targets (tuple of floats), sweep.interval (int).
    Unknown keys and malformed lines raise ValueError.
    """
    out: dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONFIG_KEYS:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in ("lr.max", "lr.min"):
            out[key] = float(value)
        elif key in ("lr.period", "sweep.interval"):
            out[key] = int(value)
        else:  # sweep.targets
            out[key] = tuple(float(v) for v in value.split(",") if v.strip())
    return out


def load_config(path: str) -> dict[str, object]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def schedule_from_config(cfg: dict[str, object]) -> LrSchedule:
    return LrSchedule(
        lr_max=float(cfg.get("lr.max", DEFAULT_LR_MAX)),
        lr_min=float(cfg.get("lr.min", DEFAULT_LR_MIN)),
        period=int(cfg.get("lr.period", DEFAULT_PERIOD)),
    )
