"""Analytic operation counters shared by the kernels."""

from dataclasses import dataclass, field


@dataclass
class OpCounters:
    flops: int = 0
    dof_lane_slots: int = 0
    col_blocks_visited: int = 0
    cells_visited: int = 0
    bytes_moved: int = 0
    extra: dict = field(default_factory=dict)

    def merge(self, other: "OpCounters") -> None:
        self.flops += other.flops
        self.dof_lane_slots += other.dof_lane_slots
        self.col_blocks_visited += other.col_blocks_visited
        self.cells_visited += other.cells_visited
        self.bytes_moved += other.bytes_moved

    @property
    def flops_per_dof(self) -> float:
        return self.flops / self.dof_lane_slots if self.dof_lane_slots else 0.0
