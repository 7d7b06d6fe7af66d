"""Benchmark configuration: JSON document plus flag overrides."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

from ..errors import ConfigurationError

ALL_KERNELS = (
    "apply_m",
    "apply_h",
    "apply_h_gemm",
    "mmult",
    "tmmult",
    "tr_tmmult",
    "energy",
    "gradient",
)


@dataclass
class BenchConfig:
    atoms: int = 40
    rings: int = 10  # atoms per ring
    ring_spacing: float = 4.0  # Bohr
    tube_radius: float = 7.5  # Bohr
    degree: int = 2
    radius: float = 8.0  # localization radius, Bohr
    block_size: int = 8  # B, orbitals per column block
    vectors_per_atom: int = 2
    extents: list | None = None  # explicit mesh extents, else auto-sized
    spacing: list = field(default_factory=lambda: [2.5, 2.5, 2.5])
    coarse_level: int = 1
    n_ranks: int = 1
    reps: int = 10
    kernels: list = field(default_factory=lambda: list(ALL_KERNELS))
    seed: int = 0
    lane_width: int = 8
    potential: float = -1.0  # constant background potential for H kernels

    def validate(self):
        if self.atoms < 1 or self.rings < 1:
            raise ConfigurationError("atoms and rings must be positive")
        if self.degree not in (1, 2, 3, 4):
            raise ConfigurationError("degree must be in 1..4")
        if self.radius < 0:
            raise ConfigurationError("radius must be non-negative")
        if self.block_size < 1:
            raise ConfigurationError("block size must be >= 1")
        if self.vectors_per_atom < 1:
            raise ConfigurationError("vectors_per_atom must be >= 1")
        if self.n_ranks < 1:
            raise ConfigurationError("n_ranks must be >= 1")
        if self.reps < 1:
            raise ConfigurationError("reps must be >= 1")
        bad = [k for k in self.kernels if k not in ALL_KERNELS]
        if bad:
            raise ConfigurationError(
                f"unknown kernels {bad}; choose from {list(ALL_KERNELS)}"
            )
        return self

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> "BenchConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigurationError(f"unknown config fields: {sorted(unknown)}")
        return cls(**doc).validate()

    @classmethod
    def from_json_file(cls, path) -> "BenchConfig":
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from exc
        return cls.from_dict(doc)
