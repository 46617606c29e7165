"""Variable-rate spray planning from geo-tagged leaf classifications.

Detections land in a local metric grid anchored at the field's southwest
corner (equirectangular projection; sub-decimeter error at 5-acre scale).
Per-cell severity is the diseased fraction of detections, and dosage follows
a linear ramp from base_rate at the severity threshold up to max_rate at
severity 1.  Unsampled cells are never sprayed and carry an explicit flag so
an operator can escalate instead of spraying blind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError

M_PER_DEG_LAT = 110_540.0
M_PER_DEG_LON_EQ = 111_320.0
_EXTENT_EPS = 1e-9  # forgive sub-nanometer float error in extent/cell division


@dataclass(frozen=True)
class DetectionRecord:
    latitude: float
    longitude: float
    label: str  # "healthy" | "anthracnose"
    confidence: float = 1.0

    def __post_init__(self):
        if self.label not in ("healthy", "anthracnose"):
            raise ContractError(f"unknown label {self.label!r}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ContractError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class FieldGrid:
    origin_lat: float  # southwest corner
    origin_lon: float
    cell_size_m: float
    rows: int
    cols: int

    def __post_init__(self):
        if self.cell_size_m <= 0:
            raise ContractError("cell size must be positive")
        if self.rows < 1 or self.cols < 1:
            raise ContractError("grid must contain at least one cell")

    @property
    def cell_area_ha(self) -> float:
        return self.cell_size_m ** 2 / 10_000.0

    def locate(self, lat: float, lon: float) -> tuple[int, int] | None:
        """Cell (row, col) for a coordinate; None when outside the grid.

        Cells are half-open, so a point exactly on a shared boundary belongs
        to the cell with the larger index.
        """
        north, east = self.to_meters(lat, lon)
        row = math.floor(north / self.cell_size_m)
        col = math.floor(east / self.cell_size_m)
        if 0 <= row < self.rows and 0 <= col < self.cols:
            return row, col
        return None

    def to_meters(self, lat: float, lon: float) -> tuple[float, float]:
        north = (lat - self.origin_lat) * M_PER_DEG_LAT
        east = (lon - self.origin_lon) * M_PER_DEG_LON_EQ * math.cos(
            math.radians(self.origin_lat))
        return north, east


def grid_from_bounds(sw: tuple[float, float], ne: tuple[float, float],
                     cell_size_m: float) -> FieldGrid:
    """Grid covering the box between a southwest and a northeast corner."""
    if cell_size_m <= 0:
        raise ContractError("cell size must be positive")
    if ne[0] <= sw[0] or ne[1] <= sw[1]:
        raise ContractError("ne corner must lie strictly north-east of sw corner")
    north = (ne[0] - sw[0]) * M_PER_DEG_LAT
    east = (ne[1] - sw[1]) * M_PER_DEG_LON_EQ * math.cos(math.radians(sw[0]))
    rows = max(1, math.ceil(north / cell_size_m - _EXTENT_EPS))
    cols = max(1, math.ceil(east / cell_size_m - _EXTENT_EPS))
    return FieldGrid(sw[0], sw[1], cell_size_m, rows, cols)


@dataclass(frozen=True)
class SeverityMap:
    grid: FieldGrid
    severity: np.ndarray        # (rows, cols) float64 in [0, 1]
    sampled: np.ndarray         # (rows, cols) bool
    diseased_counts: np.ndarray  # (rows, cols) int64
    total_counts: np.ndarray     # (rows, cols) int64
    out_of_bounds: int


def aggregate(records: list[DetectionRecord], grid: FieldGrid) -> SeverityMap:
    """Per-cell diseased fraction; out-of-bounds records are counted, not dropped."""
    diseased = np.zeros((grid.rows, grid.cols), np.int64)
    total = np.zeros((grid.rows, grid.cols), np.int64)
    oob = 0
    for rec in records:
        cell = grid.locate(rec.latitude, rec.longitude)
        if cell is None:
            oob += 1
            continue
        total[cell] += 1
        if rec.label == "anthracnose":
            diseased[cell] += 1
    severity = np.divide(diseased, total, where=total > 0,
                         out=np.zeros((grid.rows, grid.cols)))
    return SeverityMap(grid, severity, total > 0, diseased, total, oob)


@dataclass(frozen=True)
class SprayPolicy:
    threshold: float = 0.2
    base_rate: float = 2.0  # L/ha at the threshold
    max_rate: float = 6.0   # L/ha at severity 1

    def __post_init__(self):
        if not 0.0 <= self.threshold <= 1.0:
            raise ContractError("threshold must lie in [0, 1]")
        if self.base_rate < 0:
            raise ContractError("base_rate must be non-negative")
        if self.base_rate > self.max_rate:
            raise ContractError("base_rate cannot exceed max_rate")


@dataclass(frozen=True)
class SprayPlan:
    grid: FieldGrid
    severity: np.ndarray
    sampled: np.ndarray
    dosage: np.ndarray  # (rows, cols) L/ha
    policy: SprayPolicy

    @property
    def total_liters(self) -> float:
        return float(self.dosage.sum()) * self.grid.cell_area_ha


def plan_spray(severity_map: SeverityMap, policy: SprayPolicy) -> SprayPlan:
    """Dosage ramp: 0 below threshold or unsampled, base_rate at threshold,
    max_rate at severity 1."""
    sev = severity_map.severity
    if policy.threshold >= 1.0:
        ramp = np.where(sev >= 1.0, float(policy.max_rate), 0.0)
    else:
        frac = (sev - policy.threshold) / (1.0 - policy.threshold)
        ramp = policy.base_rate + (policy.max_rate - policy.base_rate) * frac
    dosage = np.where((sev >= policy.threshold) & severity_map.sampled, ramp, 0.0)
    return SprayPlan(severity_map.grid, sev.copy(), severity_map.sampled.copy(),
                     dosage, policy)


@dataclass(frozen=True)
class SavingsReport:
    uniform_liters: float
    variable_liters: float
    reduction: float  # 1 - variable/uniform


def compare_uniform(plan: SprayPlan, uniform_rate: float) -> SavingsReport:
    """Pesticide savings of the variable plan vs spraying uniform_rate everywhere."""
    if uniform_rate <= 0:
        raise ContractError("uniform_rate must be positive")
    area_ha = plan.grid.rows * plan.grid.cols * plan.grid.cell_area_ha
    uniform = uniform_rate * area_ha
    variable = plan.total_liters
    return SavingsReport(uniform, variable, 1.0 - variable / uniform)


# ---------------------------------------------------------------------------
# text formats
# ---------------------------------------------------------------------------

def parse_detections(text: str) -> list[DetectionRecord]:
    """Parse tab-separated detection lines: lat, lon, label, confidence."""
    records = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.rstrip("\n").split("\t")
        if len(parts) != 4:
            raise ContractError(f"line {lineno}: expected 4 tab-separated fields")
        lat, lon, label, conf = parts
        records.append(DetectionRecord(float(lat), float(lon), label, float(conf)))
    return records


def format_plan(plan: SprayPlan) -> str:
    """Grid header then one row-major line per cell: row, col, severity,
    sampled, dosage."""
    g = plan.grid
    lines = [
        f"origin\t{g.origin_lat!r}\t{g.origin_lon!r}",
        f"cell_size_m\t{g.cell_size_m!r}",
        f"rows\t{g.rows}",
        f"cols\t{g.cols}",
        f"policy\t{plan.policy.threshold!r}\t{plan.policy.base_rate!r}\t{plan.policy.max_rate!r}",
        "row\tcol\tseverity\tsampled\tdosage_l_per_ha",
    ]
    for r in range(g.rows):
        for c in range(g.cols):
            lines.append(f"{r}\t{c}\t{plan.severity[r, c]!r}"
                         f"\t{int(plan.sampled[r, c])}\t{plan.dosage[r, c]!r}")
    return "\n".join(lines) + "\n"
