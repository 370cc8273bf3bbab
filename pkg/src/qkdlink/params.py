"""Parameter records shared by the link model, the simulator and the CLI.

All rates are events per second, times are seconds. The event pipeline
works in integer 125 ps ticks; conversions happen at module boundaries.
"""

from __future__ import annotations

from dataclasses import dataclass, fields


@dataclass(frozen=True)
class SourceParams:
    """Pair-source characterization: singles rates, pair rate, visibilities.

    ``detected_rates=True`` marks the rates as saturated values read off the
    counters of a source-bench measurement (detectors directly connected,
    full dead-time load); the link model then removes the dead-time
    compression before evaluating the rate equations.
    """

    r1: float
    r2: float
    rc: float
    v_hv: float = 0.975
    v_diag: float = 0.921
    detected_rates: bool = False

    def __post_init__(self):
        if min(self.r1, self.r2, self.rc) < 0:
            raise ValueError("rates must be non-negative")
        if self.rc > min(self.r1, self.r2):
            raise ValueError("pair rate cannot exceed either singles rate")
        for v in (self.v_hv, self.v_diag):
            if not 0.0 <= v <= 1.0:
                raise ValueError("visibilities must lie in [0, 1]")

    @property
    def intrinsic_qber(self) -> float:
        return 0.5 * (1.0 - 0.5 * (self.v_hv + self.v_diag))


@dataclass(frozen=True)
class ChannelParams:
    """Optical channel: scalar transmission plus external background rate."""

    transmission: float
    r_bg: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.transmission <= 1.0:
            raise ValueError("transmission must lie in [0, 1]")
        if self.r_bg < 0:
            raise ValueError("background rate must be non-negative")


@dataclass(frozen=True)
class DetectorParams:
    """Receiver module: dead time, coincidence window, detector count."""

    tau_d: float = 1e-6
    tau_c: float = 2e-9
    n_detectors: int = 4

    def __post_init__(self):
        if self.tau_d <= 0 or self.tau_c <= 0:
            raise ValueError("tau_d and tau_c must be positive")
        if self.n_detectors != 4:
            raise ValueError("the analyzer module has exactly 4 detectors")


def parse_kv_file(path) -> dict[str, str]:
    """Read a flat ``key=value`` text file; ``#`` starts a comment."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


_BOOL_STRINGS = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


def _convert(value: str, typ):
    if typ is bool:
        try:
            return _BOOL_STRINGS[value.lower()]
        except KeyError:
            raise ValueError(f"not a boolean: {value!r}") from None
    return typ(value)


def load_model_params(path):
    """Build (SourceParams, ChannelParams, DetectorParams) from a key=value file.

    Recognized keys are the field names of the three records; unknown keys
    are rejected so typos do not silently fall back to defaults.
    """
    raw = parse_kv_file(path)
    classes = (SourceParams, ChannelParams, DetectorParams)
    known = {f.name: (cls, f) for cls in classes for f in fields(cls)}
    unknown = set(raw) - set(known)
    if unknown:
        raise ValueError(f"unknown parameter(s): {', '.join(sorted(unknown))}")
    kwargs: dict[type, dict] = {cls: {} for cls in classes}
    for key, val in raw.items():
        cls, fld = known[key]
        typ = {"float": float, "int": int, "bool": bool}.get(fld.type, float)
        kwargs[cls][key] = _convert(val, typ)
    return tuple(cls(**kwargs[cls]) for cls in classes)
