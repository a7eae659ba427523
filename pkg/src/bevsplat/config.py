"""Pipeline configuration stored as ``key = value`` text with ``#`` comments."""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace

from .errors import ContractError
from .pointgen import CULL_MODES
from .serialize import METHODS


@dataclass(frozen=True)
class PipelineConfig:
    grid: float = 0.01
    n_pe: int = 10
    window: int = 64
    scene_seed: int = 0
    style_seed: int = 1
    decoder_seed: int = 2
    density: bool = True
    cull_mode: str = "ray"
    attrs: str = "rgb"
    supersample: int = 2
    background: tuple = (1.0, 1.0, 1.0)
    serialization: str = "linear"
    hilbert_bits: int = 10
    c_fs: int = 61
    c_z: int = 256
    threads: int = 1

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if not self.grid > 0:
            raise ContractError("grid must be positive")
        if self.n_pe < 1 or self.window < 1 or self.supersample < 1 or self.threads < 1:
            raise ContractError("n_pe, window, supersample and threads must be >= 1")
        if self.cull_mode not in CULL_MODES:
            raise ContractError(f"cull_mode must be one of {CULL_MODES}")
        if self.serialization not in METHODS:
            raise ContractError(f"serialization must be one of {METHODS}")
        if not 1 <= self.hilbert_bits <= 20:
            raise ContractError("hilbert_bits must be in 1..20")
        if len(self.background) != 3 or not all(0.0 <= c <= 1.0 for c in self.background):
            raise ContractError("background needs three values in [0, 1]")
        if self.c_fs < 1 or self.c_z < 1:
            raise ContractError("c_fs and c_z must be >= 1")

    def to_text(self) -> str:
        lines = ["# bevsplat pipeline configuration"]
        for k, v in asdict(self).items():
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, tuple):
                v = ",".join(repr(float(c)) for c in v)
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{k} = {v}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PipelineConfig":
        values = {}
        for n, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"config line {n}: expected key = value")
            k, v = (s.strip() for s in line.split("=", 1))
            values[k] = v
        return cls().updated(values)

    def updated(self, values: dict) -> "PipelineConfig":
        """Copy with string or typed overrides applied."""
        types = {f.name: f.type for f in fields(self)}
        parsed = {}
        for k, v in values.items():
            if v is None:
                continue
            if k not in types:
                raise ContractError(f"unknown config key {k!r}")
            parsed[k] = _coerce(k, getattr(self, k), v)
        return replace(self, **parsed)


def _coerce(key, default, v):
    if not isinstance(v, str):
        return tuple(float(c) for c in v) if isinstance(default, tuple) else v
    try:
        if isinstance(default, bool):
            if v.lower() in ("1", "true", "yes", "on"):
                return True
            if v.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(v)
        if isinstance(default, int):
            return int(v)
        if isinstance(default, float):
            return float(v)
        if isinstance(default, tuple):
            return tuple(float(c) for c in v.split(","))
    except ValueError:
        raise ContractError(f"bad value for {key}: {v!r}") from None
    return v


def load_config(path) -> PipelineConfig:
    with open(path) as f:
        return PipelineConfig.from_text(f.read())
