"""Intersection structures, the built-in catalog, and scenario files.

Movement slots use one canonical order everywhere::

    0 N   1 NL   2 E   3 EL   4 W   5 WL   6 S   7 SL

A slot is named after the approach the vehicles come from (``N`` is the
through movement entering from the north road, ``NL`` its left turn).
Roads in ``lanes_per_road`` are listed clockwise from north: (N, E, S, W).
Right turns are uncontrolled and have no slot.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

MOVEMENT_NAMES = ("N", "NL", "E", "EL", "W", "WL", "S", "SL")
N_MOVEMENTS = 8

ROAD_N, ROAD_E, ROAD_S, ROAD_W = 0, 1, 2, 3

# approach road of each slot
SLOT_ROAD = (ROAD_N, ROAD_N, ROAD_E, ROAD_E, ROAD_W, ROAD_W, ROAD_S, ROAD_S)
# road reached by each slot (through heads straight across, left turns left)
SLOT_DEST = (ROAD_S, ROAD_E, ROAD_W, ROAD_S, ROAD_E, ROAD_N, ROAD_N, ROAD_W)
# road reached by the uncontrolled right turn from each approach road
RIGHT_DEST = {ROAD_N: ROAD_W, ROAD_E: ROAD_N, ROAD_S: ROAD_E, ROAD_W: ROAD_S}

# one clockwise quarter turn: N->E->S->W for both through and left slots
QUARTER_TURN = (2, 3, 6, 7, 0, 1, 4, 5)

YELLOW_S = 3.0
DETECTOR_LENGTH_M = 100.0
DEFAULT_MIN_GREEN_S = 5.0


class ConfigError(ValueError):
    """Raised for malformed or inconsistent scenario configuration."""


@dataclass(frozen=True)
class MovementSlot:
    index: int
    present: bool
    is_straight: bool
    lane_count: int

    @property
    def name(self) -> str:
        return MOVEMENT_NAMES[self.index]


@dataclass(frozen=True)
class PhaseSpec:
    movement_indices: tuple[int, ...]

    def __contains__(self, m: int) -> bool:
        return m in self.movement_indices


@dataclass(frozen=True)
class IntersectionSpec:
    id: str
    roads: int
    lanes_per_road: tuple[int, int, int, int]
    movements: tuple[MovementSlot, ...]
    phases: tuple[PhaseSpec, ...]
    min_green_s: float = DEFAULT_MIN_GREEN_S
    yellow_s: float = YELLOW_S
    detector_length_m: float = DETECTOR_LENGTH_M

    def __post_init__(self):
        validate_intersection(self)

    @property
    def present(self) -> np.ndarray:
        return np.array([m.present for m in self.movements], dtype=bool)

    @property
    def lane_counts(self) -> np.ndarray:
        return np.array([m.lane_count if m.present else 0 for m in self.movements], dtype=np.int64)

    @property
    def n_phases(self) -> int:
        return len(self.phases)

    def phase_mask(self, k: int) -> np.ndarray:
        mask = np.zeros(N_MOVEMENTS, dtype=bool)
        mask[list(self.phases[k].movement_indices)] = True
        return mask


@dataclass(frozen=True)
class DemandProfile:
    """Piecewise-constant per-movement multipliers on the base arrival rates.

    ``segments`` holds ``(start_s, scales)`` pairs sorted by start time; with
    ``period_s`` set the pattern repeats.
    """

    segments: tuple[tuple[float, tuple[float, ...]], ...]
    period_s: Optional[float] = None

    def scales_at(self, t: np.ndarray) -> np.ndarray:
        t = np.asarray(t, dtype=np.float64)
        if self.period_s:
            t = np.mod(t, self.period_s)
        starts = np.array([s for s, _ in self.segments])
        table = np.array([sc for _, sc in self.segments], dtype=np.float64)
        idx = np.searchsorted(starts, t, side="right") - 1
        return table[np.clip(idx, 0, len(starts) - 1)]


@dataclass(frozen=True)
class ScenarioSpec:
    intersection: IntersectionSpec
    arrival_rates: tuple[float, ...]
    duration_s: int
    seed: int = 0
    demand_profile: Optional[DemandProfile] = None
    split: str = ""

    def __post_init__(self):
        validate_scenario(self)

    @property
    def id(self) -> str:
        return self.intersection.id


def validate_intersection(spec: IntersectionSpec) -> None:
    if spec.roads not in (3, 4):
        raise ConfigError(f"{spec.id}: roads must be 3 or 4, got {spec.roads}")
    if len(spec.lanes_per_road) != 4 or any(int(n) < 0 for n in spec.lanes_per_road):
        raise ConfigError(f"{spec.id}: lanes_per_road must be 4 nonnegative integers")
    if sum(1 for n in spec.lanes_per_road if n > 0) != spec.roads:
        raise ConfigError(f"{spec.id}: number of nonzero lanes_per_road entries must equal roads")
    if len(spec.movements) != N_MOVEMENTS:
        raise ConfigError(f"{spec.id}: exactly 8 movement slots required")
    for i, slot in enumerate(spec.movements):
        if slot.index != i:
            raise ConfigError(f"{spec.id}: movement slot {i} carries index {slot.index}")
        if slot.is_straight != (i % 2 == 0):
            raise ConfigError(
                f"{spec.id}: movement {MOVEMENT_NAMES[i]} has is_straight={slot.is_straight}; "
                "even slots are through, odd slots are left turns"
            )
        if slot.present and slot.lane_count < 1:
            raise ConfigError(f"{spec.id}: present movement {MOVEMENT_NAMES[i]} needs lane_count >= 1")
    if len(spec.phases) < 2:
        raise ConfigError(f"{spec.id}: at least 2 phases required")
    for k, ph in enumerate(spec.phases):
        if not ph.movement_indices:
            raise ConfigError(f"{spec.id}: phase {k} is empty")
        for m in ph.movement_indices:
            if not 0 <= m < N_MOVEMENTS:
                raise ConfigError(f"{spec.id}: phase {k} references movement index {m} outside 0..7")
            if not spec.movements[m].present:
                raise ConfigError(
                    f"{spec.id}: phase {k} references absent movement {MOVEMENT_NAMES[m]}"
                )
    if spec.min_green_s <= 0 or spec.yellow_s < 0:
        raise ConfigError(f"{spec.id}: min_green_s must be positive and yellow_s nonnegative")


def validate_scenario(sc: ScenarioSpec) -> None:
    if len(sc.arrival_rates) != N_MOVEMENTS:
        raise ConfigError(f"{sc.id}: arrival_rates needs 8 entries")
    for i, r in enumerate(sc.arrival_rates):
        if r < 0 or not np.isfinite(r):
            raise ConfigError(f"{sc.id}: arrival rate for {MOVEMENT_NAMES[i]} must be finite and >= 0")
        if r > 0 and not sc.intersection.movements[i].present:
            raise ConfigError(f"{sc.id}: nonzero arrival rate on absent movement {MOVEMENT_NAMES[i]}")
    if sc.duration_s <= 0:
        raise ConfigError(f"{sc.id}: duration_s must be > 0")
    if sc.demand_profile is not None:
        starts = [s for s, _ in sc.demand_profile.segments]
        if not starts or starts[0] != 0 or sorted(starts) != starts:
            raise ConfigError(f"{sc.id}: demand_profile segments must start at 0 and be sorted")
        for _, scales in sc.demand_profile.segments:
            if len(scales) != N_MOVEMENTS or min(scales) < 0:
                raise ConfigError(f"{sc.id}: demand_profile scales need 8 nonnegative entries")


# ---------------------------------------------------------------------------
# construction helpers


def _lane_split(lanes_per_road: Sequence[int]) -> list[int]:
    """Assign each road's lanes to its through, left and right-turn movements.

    One lane goes to the right turn when its destination exists, one to the
    left turn when the through movement also exists, the rest to whichever
    controlled movement is left over.
    """
    counts = [0] * N_MOVEMENTS
    for road in range(4):
        n = lanes_per_road[road]
        if n == 0:
            continue
        thru, left = [i for i in range(N_MOVEMENTS) if SLOT_ROAD[i] == road]
        has_thru = lanes_per_road[SLOT_DEST[thru]] > 0
        has_left = lanes_per_road[SLOT_DEST[left]] > 0
        spare = n - (1 if lanes_per_road[RIGHT_DEST[road]] > 0 else 0)
        if has_thru and has_left:
            counts[left] = 1
            counts[thru] = max(1, spare - 1)
        elif has_thru:
            counts[thru] = max(1, spare)
        elif has_left:
            counts[left] = max(1, spare)
    return counts


def make_intersection(
    id: str,
    lanes_per_road: Sequence[int],
    phases: Sequence[Sequence[int]],
    min_green_s: float = DEFAULT_MIN_GREEN_S,
) -> IntersectionSpec:
    """Build an intersection whose movements follow from the road layout."""
    lanes = tuple(int(n) for n in lanes_per_road)
    counts = _lane_split(lanes)
    slots = tuple(
        MovementSlot(i, counts[i] > 0, i % 2 == 0, counts[i]) for i in range(N_MOVEMENTS)
    )
    return IntersectionSpec(
        id=id,
        roads=sum(1 for n in lanes if n > 0),
        lanes_per_road=lanes,
        movements=slots,
        phases=tuple(PhaseSpec(tuple(sorted(p))) for p in phases),
        min_green_s=min_green_s,
    )


def rotate(spec, quarter_turns: int):
    """Rotate an intersection (or scenario) clockwise by 90 degrees per turn.

    Slots, road lane counts and phase contents are all remapped; a scenario's
    arrival rates and demand scales follow their movements.
    """
    if quarter_turns not in (0, 1, 2, 3):
        raise ValueError("quarter_turns must be 0, 1, 2 or 3")
    if isinstance(spec, ScenarioSpec):
        perm = rotation_map(quarter_turns)
        prof = spec.demand_profile
        if prof is not None:
            prof = DemandProfile(
                tuple((s, _remap(sc, perm)) for s, sc in prof.segments), prof.period_s
            )
        return replace(
            spec,
            intersection=rotate(spec.intersection, quarter_turns),
            arrival_rates=_remap(spec.arrival_rates, perm),
            demand_profile=prof,
        )
    perm = rotation_map(quarter_turns)
    old = spec.movements
    slots = [None] * N_MOVEMENTS
    for i, s in enumerate(old):
        j = perm[i]
        slots[j] = MovementSlot(j, s.present, j % 2 == 0, s.lane_count)
    lanes = tuple(int(x) for x in np.roll(spec.lanes_per_road, quarter_turns))
    phases = tuple(
        PhaseSpec(tuple(sorted(perm[m] for m in p.movement_indices))) for p in spec.phases
    )
    return replace(spec, lanes_per_road=lanes, movements=tuple(slots), phases=phases)


def rotation_map(quarter_turns: int) -> tuple[int, ...]:
    """Slot index each slot lands on after ``quarter_turns`` clockwise turns."""
    perm = tuple(range(N_MOVEMENTS))
    for _ in range(quarter_turns % 4):
        perm = tuple(QUARTER_TURN[p] for p in perm)
    return perm


def _remap(values, perm):
    out = [0.0] * N_MOVEMENTS
    for i, v in enumerate(values):
        out[perm[i]] = v
    return tuple(out)


# ---------------------------------------------------------------------------
# catalog

N, NL, E, EL, W, WL, S, SL = range(8)

_FOUR_PHASE = [[N, S], [NL, SL], [E, W], [EL, WL]]
_TWO_PHASE = [[N, S, NL, SL], [E, W, EL, WL]]
_T_PHASES = [[E, W], [E, EL], [SL]]

# saturation flow of one lane in veh/s (2 s headway)
_LANE_CAPACITY = 0.5

# flow ratios (demand / lane capacity) per movement slot; the N-S axis is
# the major road for four-way layouts
_FLOW_RATIO_4WAY = (0.20, 0.12, 0.14, 0.08, 0.14, 0.08, 0.20, 0.12)
_FLOW_RATIO_3WAY = (0.0, 0.0, 0.24, 0.12, 0.24, 0.0, 0.0, 0.10)

# demand swings between the two axes every 15 minutes
_AXIS_SWING = DemandProfile(
    segments=(
        (0.0, (1.3, 1.3, 0.7, 0.7, 0.7, 0.7, 1.3, 1.3)),
        (900.0, (0.7, 0.7, 1.3, 1.3, 1.3, 1.3, 0.7, 0.7)),
    ),
    period_s=1800.0,
)

DEFAULT_DURATION_S = 3600


def _scenario(inter: IntersectionSpec, ratios, split: str, seed: int) -> ScenarioSpec:
    lanes = inter.lane_counts
    rates = tuple(
        float(round(r * _LANE_CAPACITY * lanes[i], 6)) if inter.movements[i].present else 0.0
        for i, r in enumerate(ratios)
    )
    return ScenarioSpec(
        intersection=inter,
        arrival_rates=rates,
        duration_s=DEFAULT_DURATION_S,
        seed=seed,
        demand_profile=_AXIS_SWING,
        split=split,
    )


def builtin_catalog() -> list[ScenarioSpec]:
    """The eleven intersections: eight training layouts then three test ones."""
    big = (5, 4, 4, 4)
    small = (3, 3, 3, 3)
    tee = (0, 4, 4, 4)
    int1_3 = [[NL, SL], [N, NL], [N, S], [EL, WL], [E, W]]
    entries = [
        (make_intersection("INT1-1", big, _FOUR_PHASE), _FLOW_RATIO_4WAY, "train"),
        (make_intersection("INT1-2", big, [[N, S], [E, W], [NL, SL], [EL, WL]]), _FLOW_RATIO_4WAY, "train"),
        (make_intersection("INT1-3", big, int1_3), _FLOW_RATIO_4WAY, "train"),
        (make_intersection("INT2-1", small, _FOUR_PHASE), _FLOW_RATIO_4WAY, "train"),
        (make_intersection("INT2-2", small, [[E, W], [EL, WL], [N, S], [NL, SL]]), _FLOW_RATIO_4WAY, "train"),
        (make_intersection("INT2-3", small, _TWO_PHASE), _FLOW_RATIO_4WAY, "train"),
        (make_intersection("INT3-1", tee, _T_PHASES), _FLOW_RATIO_3WAY, "train"),
        (make_intersection("INT3-2", tee, [[E, W], [SL], [E, EL]]), _FLOW_RATIO_3WAY, "train"),
        (make_intersection("INT4", (5, 4, 5, 4), _FOUR_PHASE), _FLOW_RATIO_4WAY, "test"),
        (make_intersection("INT5", big, _TWO_PHASE), _FLOW_RATIO_4WAY, "test"),
    ]
    out = [_scenario(inter, ratios, split, seed) for seed, (inter, ratios, split) in enumerate(entries)]
    int6 = rotate(out[6], INT6_QUARTER_TURNS)
    int6 = replace(int6, intersection=replace(int6.intersection, id="INT6"), split="test", seed=10)
    out.append(int6)
    return out


# INT6 is INT3-1 turned three quarter turns clockwise: (0,4,4,4) -> (4,4,4,0)
INT6_QUARTER_TURNS = 3


def catalog_by_id() -> dict[str, ScenarioSpec]:
    return {sc.id: sc for sc in builtin_catalog()}


def training_scenarios() -> list[ScenarioSpec]:
    return [sc for sc in builtin_catalog() if sc.split == "train"]


def test_scenarios() -> list[ScenarioSpec]:
    return [sc for sc in builtin_catalog() if sc.split == "test"]


test_scenarios.__test__ = False  # keep pytest from collecting it


def catalog_table(scenarios: Optional[Sequence[ScenarioSpec]] = None) -> str:
    scenarios = builtin_catalog() if scenarios is None else scenarios
    rows = ["id      split  roads  lanes          phases  movements"]
    for sc in scenarios:
        it = sc.intersection
        present = ",".join(MOVEMENT_NAMES[i] for i in range(8) if it.movements[i].present)
        rows.append(
            f"{it.id:<7} {sc.split:<6} {it.roads:<6} {str(it.lanes_per_road):<14} "
            f"{it.n_phases:<7} {present}"
        )
    return "\n".join(rows)


# ---------------------------------------------------------------------------
# scenario files


def scenario_to_dict(sc: ScenarioSpec) -> dict:
    it = sc.intersection
    d = {
        "id": it.id,
        "roads": it.roads,
        "lanes_per_road": list(it.lanes_per_road),
        "movements": [
            {"present": m.present, "is_straight": m.is_straight, "lane_count": m.lane_count}
            for m in it.movements
        ],
        "phases": [list(p.movement_indices) for p in it.phases],
        "min_green_s": it.min_green_s,
        "arrival_rates": list(sc.arrival_rates),
        "duration_s": sc.duration_s,
        "seed": sc.seed,
    }
    if it.yellow_s != YELLOW_S:
        d["yellow_s"] = it.yellow_s
    if it.detector_length_m != DETECTOR_LENGTH_M:
        d["detector_length_m"] = it.detector_length_m
    if sc.demand_profile is not None:
        d["demand_profile"] = {
            "period_s": sc.demand_profile.period_s,
            "segments": [[s, list(sc_)] for s, sc_ in sc.demand_profile.segments],
        }
    if sc.split:
        d["split"] = sc.split
    return d


def dump_scenario(sc: ScenarioSpec) -> str:
    return json.dumps(scenario_to_dict(sc), indent=2)


_REQUIRED = ("id", "roads", "lanes_per_road", "movements", "phases", "arrival_rates", "duration_s")


def scenario_from_dict(d: dict) -> ScenarioSpec:
    if not isinstance(d, dict):
        raise ConfigError("scenario document must be a JSON object")
    missing = [k for k in _REQUIRED if k not in d]
    if missing:
        raise ConfigError(f"missing required keys: {', '.join(missing)}")
    try:
        movements = tuple(
            MovementSlot(
                index=i,
                present=bool(m["present"]),
                is_straight=bool(m.get("is_straight", i % 2 == 0)),
                lane_count=int(m.get("lane_count", 0)) if m["present"] else 0,
            )
            for i, m in enumerate(d["movements"])
        )
        phases = []
        for p in d["phases"]:
            if not isinstance(p, list):
                raise ConfigError("each phase must be an array of movement indices")
            phases.append(PhaseSpec(tuple(sorted(int(m) for m in p))))
        inter = IntersectionSpec(
            id=str(d["id"]),
            roads=int(d["roads"]),
            lanes_per_road=tuple(int(n) for n in d["lanes_per_road"]),
            movements=movements,
            phases=tuple(phases),
            min_green_s=float(d.get("min_green_s", DEFAULT_MIN_GREEN_S)),
            yellow_s=float(d.get("yellow_s", YELLOW_S)),
            detector_length_m=float(d.get("detector_length_m", DETECTOR_LENGTH_M)),
        )
        profile = None
        if d.get("demand_profile") is not None:
            p = d["demand_profile"]
            profile = DemandProfile(
                segments=tuple((float(s), tuple(float(x) for x in sc)) for s, sc in p["segments"]),
                period_s=None if p.get("period_s") is None else float(p["period_s"]),
            )
        return ScenarioSpec(
            intersection=inter,
            arrival_rates=tuple(float(r) for r in d["arrival_rates"]),
            duration_s=int(d["duration_s"]),
            seed=int(d.get("seed", 0)),
            demand_profile=profile,
            split=str(d.get("split", "")),
        )
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"malformed scenario field: {exc}") from exc


def parse_scenario(config_text: str) -> ScenarioSpec:
    """Parse and validate one JSON scenario document."""
    try:
        d = json.loads(config_text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"syntax error at line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(d)


def load_scenario(path) -> ScenarioSpec:
    with open(path) as f:
        return parse_scenario(f.read())
