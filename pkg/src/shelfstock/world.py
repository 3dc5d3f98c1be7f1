"""Store domain model: products, shelves, markers, planogram, tasks, scenario files.

A Scenario is the single source of geometric truth shared by the simulator and
the controllers. It is immutable after load and safe to share across threads.
Scenario files are JSON; all lengths are meters, angles radians, planar poses
[x, y, yaw] and 6-DoF marker poses position [x, y, z] plus scalar-last
quaternion [qx, qy, qz, qw].
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

from .geometry import obb_corners, obbs_overlap, quat_norm

GTIN_DIGITS = 14


class ScenarioError(ValueError):
    """Raised when a scenario file fails validation; message names the entity."""


@dataclass(frozen=True)
class Product:
    gtin: str
    width: float
    depth: float
    height: float
    shape: str  # "box" or "cylinder"; drives the placement spacing rule
    has_prod_yolo: bool = True

    def footprint(self) -> tuple[float, float]:
        if self.shape == "cylinder":
            return (self.width, self.width)
        return (self.width, self.depth)


@dataclass(frozen=True)
class Shelf:
    shelf_id: str
    pose: tuple[float, float, float]  # x, y, yaw of the shelf frame in world
    width: float  # usable width along the shelf x-axis
    level_heights: tuple[float, ...]  # strictly increasing, meters above floor
    marker_id: int


@dataclass(frozen=True)
class MarkerPose:
    position: tuple[float, float, float]
    quaternion: tuple[float, float, float, float]


@dataclass(frozen=True)
class Slot:
    shelf_id: str
    level: int
    x_lo: float
    x_hi: float


@dataclass(frozen=True)
class Task:
    task_id: int
    gtin: str
    quantity: int
    enqueued_at: float = 0.0


@dataclass(frozen=True)
class CartItem:
    gtin: str
    x: float  # cart-frame position on the cart top
    y: float
    yaw: float = 0.0


@dataclass(frozen=True)
class Cart:
    pose: tuple[float, float, float]
    size: tuple[float, float]  # top surface extent, cart frame x by y
    height: float
    items: tuple[CartItem, ...] = ()
    approach_pose: tuple[float, float, float] | None = None


@dataclass(frozen=True)
class Dock:
    pose: tuple[float, float, float]  # docked base pose (heading away from charger)
    staging_pose: tuple[float, float, float]
    marker_id: int


@dataclass(frozen=True)
class PerceptionProfile:
    name: str
    accuracy: float
    recall: float
    inference_time: float


@dataclass(frozen=True)
class Scenario:
    name: str
    seed: int
    markers: dict[int, MarkerPose]
    shelves: tuple[Shelf, ...]
    cart: Cart
    products: dict[str, Product]
    planogram: dict[str, Slot]
    robot_start: tuple[float, float, float]
    dock: Dock
    profiles: dict[str, PerceptionProfile]
    profile_assignment: dict[str, str] = field(default_factory=dict)
    experiments: dict = field(default_factory=dict)

    def shelf(self, shelf_id: str) -> Shelf:
        for s in self.shelves:
            if s.shelf_id == shelf_id:
                return s
        raise LookupError(f"unknown shelf id {shelf_id!r}")

    def profile_for(self, gtin: str) -> PerceptionProfile:
        """Product-specific profile when available, fallback profile otherwise."""
        name = self.profile_assignment.get(gtin)
        if name is None:
            name = "product" if self.products[gtin].has_prod_yolo else "fallback"
        return self.profiles[name]


def query_planogram(planogram: dict[str, Slot], gtin: str) -> Slot:
    """Return the unique slot assignment for a GTIN.

    Raises LookupError for unknown GTINs; the place executor records the task
    failure instead of crashing the run.
    """
    try:
        return planogram[gtin]
    except KeyError:
        raise LookupError(f"gtin {gtin!r} not in planogram") from None


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ScenarioError(msg)


def _validate_gtin(gtin: str) -> None:
    _require(
        isinstance(gtin, str) and len(gtin) == GTIN_DIGITS and gtin.isdigit(),
        f"gtin {gtin!r} must be exactly {GTIN_DIGITS} decimal digits",
    )


def _validate(scn: Scenario) -> Scenario:
    for gtin, p in scn.products.items():
        _validate_gtin(gtin)
        _require(gtin == p.gtin, f"product key {gtin!r} does not match field {p.gtin!r}")
        _require(
            p.width > 0 and p.depth > 0 and p.height > 0,
            f"product {gtin}: dimensions must be positive",
        )
        _require(p.shape in ("box", "cylinder"), f"product {gtin}: unknown shape {p.shape!r}")

    for mid, m in scn.markers.items():
        _require(
            abs(quat_norm(m.quaternion) - 1.0) <= 1e-9,
            f"marker {mid}: quaternion not unit-norm",
        )

    seen_markers: set[int] = set()
    for s in scn.shelves:
        _require(s.width > 0, f"shelf {s.shelf_id}: width must be positive")
        _require(
            all(b > a for a, b in zip(s.level_heights, s.level_heights[1:])),
            f"shelf {s.shelf_id}: level heights must be strictly increasing",
        )
        _require(s.marker_id in scn.markers, f"shelf {s.shelf_id}: marker {s.marker_id} not in marker map")
        _require(s.marker_id not in seen_markers, f"marker {s.marker_id} attached to more than one shelf")
        seen_markers.add(s.marker_id)

    by_level: dict[tuple[str, int], list[tuple[float, float, str]]] = {}
    for gtin, slot in scn.planogram.items():
        _require(gtin in scn.products, f"planogram entry {gtin}: unknown product")
        shelf = scn.shelf(slot.shelf_id)
        _require(
            0 <= slot.level < len(shelf.level_heights),
            f"planogram {gtin}: level {slot.level} outside shelf {slot.shelf_id}",
        )
        _require(
            0.0 <= slot.x_lo < slot.x_hi <= shelf.width + 1e-12,
            f"planogram {gtin}: slot [{slot.x_lo}, {slot.x_hi}] outside shelf width {shelf.width}",
        )
        by_level.setdefault((slot.shelf_id, slot.level), []).append((slot.x_lo, slot.x_hi, gtin))
    for (shelf_id, level), slots in by_level.items():
        slots.sort()
        for (lo_a, hi_a, ga), (lo_b, hi_b, gb) in zip(slots, slots[1:]):
            _require(
                hi_a <= lo_b + 1e-12,
                f"planogram slots overlap on shelf {shelf_id} level {level}: {ga} and {gb}",
            )

    _require(scn.dock.marker_id in scn.markers, f"dock marker {scn.dock.marker_id} not in marker map")

    # cart contents must not interpenetrate
    footprints = []
    for i, item in enumerate(scn.cart.items):
        _require(item.gtin in scn.products, f"cart item {i}: unknown gtin {item.gtin}")
        w, d = scn.products[item.gtin].footprint()
        footprints.append((obb_corners(item.x, item.y, w, d, item.yaw), item.gtin, i))
    for i in range(len(footprints)):
        for j in range(i + 1, len(footprints)):
            a, ga, ia = footprints[i]
            b, gb, ib = footprints[j]
            _require(
                not obbs_overlap(a, b, margin=-1e-9),
                f"cart items {ia} ({ga}) and {ib} ({gb}) overlap",
            )
    return scn


def _pose3(v, what: str) -> tuple[float, float, float]:
    _require(isinstance(v, list) and len(v) == 3, f"{what}: expected [x, y, yaw]")
    return (float(v[0]), float(v[1]), float(v[2]))


def scenario_from_dict(d: dict) -> Scenario:
    try:
        markers = {
            int(mid): MarkerPose(tuple(m["position"]), tuple(m["quaternion"]))
            for mid, m in d["markers"].items()
        }
        shelves = tuple(
            Shelf(
                shelf_id=s["id"],
                pose=_pose3(s["pose"], f"shelf {s['id']} pose"),
                width=float(s["width"]),
                level_heights=tuple(float(h) for h in s["level_heights"]),
                marker_id=int(s["marker_id"]),
            )
            for s in d["shelves"]
        )
        cart_d = d["cart"]
        cart = Cart(
            pose=_pose3(cart_d["pose"], "cart pose"),
            size=(float(cart_d["size"][0]), float(cart_d["size"][1])),
            height=float(cart_d["height"]),
            items=tuple(
                CartItem(it["gtin"], float(it["x"]), float(it["y"]), float(it.get("yaw", 0.0)))
                for it in cart_d.get("items", [])
            ),
            approach_pose=_pose3(cart_d["approach_pose"], "cart approach pose")
            if "approach_pose" in cart_d
            else None,
        )
        products = {
            g: Product(
                gtin=g,
                width=float(p["width"]),
                depth=float(p["depth"]),
                height=float(p["height"]),
                shape=p["shape"],
                has_prod_yolo=bool(p.get("has_prod_yolo", True)),
            )
            for g, p in d["products"].items()
        }
        planogram = {
            g: Slot(e["shelf"], int(e["level"]), float(e["slot"][0]), float(e["slot"][1]))
            for g, e in d["planogram"].items()
        }
        dock_d = d["dock"]
        dock = Dock(
            pose=_pose3(dock_d["pose"], "dock pose"),
            staging_pose=_pose3(dock_d["staging_pose"], "dock staging pose"),
            marker_id=int(dock_d["marker_id"]),
        )
        profiles = {
            name: PerceptionProfile(
                name=name,
                accuracy=float(p["accuracy"]),
                recall=float(p["recall"]),
                inference_time=float(p["inference_time"]),
            )
            for name, p in d["perception"]["profiles"].items()
        }
        assignment = dict(d["perception"].get("assignment", {}))
        scn = Scenario(
            name=d["name"],
            seed=int(d["seed"]),
            markers=markers,
            shelves=shelves,
            cart=cart,
            products=products,
            planogram=planogram,
            robot_start=_pose3(d["robot_start"], "robot_start"),
            dock=dock,
            profiles=profiles,
            profile_assignment=assignment,
            experiments=d.get("experiments", {}),
        )
    except ScenarioError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"scenario parse error: {exc}") from exc
    for name, prof in scn.profiles.items():
        _require(0.0 <= prof.accuracy <= 1.0, f"profile {name}: accuracy out of [0, 1]")
        _require(0.0 <= prof.recall <= 1.0, f"profile {name}: recall out of [0, 1]")
        _require(prof.inference_time >= 0.0, f"profile {name}: negative inference time")
    return _validate(scn)


def scenario_to_dict(scn: Scenario) -> dict:
    return {
        "name": scn.name,
        "seed": scn.seed,
        "markers": {
            str(mid): {"position": list(m.position), "quaternion": list(m.quaternion)}
            for mid, m in scn.markers.items()
        },
        "shelves": [
            {
                "id": s.shelf_id,
                "pose": list(s.pose),
                "width": s.width,
                "level_heights": list(s.level_heights),
                "marker_id": s.marker_id,
            }
            for s in scn.shelves
        ],
        "cart": {
            "pose": list(scn.cart.pose),
            "size": list(scn.cart.size),
            "height": scn.cart.height,
            "items": [
                {"gtin": it.gtin, "x": it.x, "y": it.y, "yaw": it.yaw} for it in scn.cart.items
            ],
            **(
                {"approach_pose": list(scn.cart.approach_pose)}
                if scn.cart.approach_pose is not None
                else {}
            ),
        },
        "products": {
            g: {
                "width": p.width,
                "depth": p.depth,
                "height": p.height,
                "shape": p.shape,
                "has_prod_yolo": p.has_prod_yolo,
            }
            for g, p in scn.products.items()
        },
        "planogram": {
            g: {"shelf": e.shelf_id, "level": e.level, "slot": [e.x_lo, e.x_hi]}
            for g, e in scn.planogram.items()
        },
        "robot_start": list(scn.robot_start),
        "dock": {
            "pose": list(scn.dock.pose),
            "staging_pose": list(scn.dock.staging_pose),
            "marker_id": scn.dock.marker_id,
        },
        "perception": {
            "profiles": {
                name: {
                    "accuracy": p.accuracy,
                    "recall": p.recall,
                    "inference_time": p.inference_time,
                }
                for name, p in scn.profiles.items()
            },
            "assignment": scn.profile_assignment,
        },
        "experiments": scn.experiments,
    }


def dumps_scenario(scn: Scenario) -> str:
    """Canonical serialization: sorted keys, two-space indent, trailing newline.

    Canonical form makes write -> read -> write byte-identical.
    """
    return json.dumps(scenario_to_dict(scn), sort_keys=True, indent=2) + "\n"


def save_scenario(scn: Scenario, path: str | Path) -> None:
    Path(path).write_text(dumps_scenario(scn), encoding="utf-8")


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    if not path.exists():
        raise ScenarioError(f"scenario file not found: {path}")
    try:
        d = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    return scenario_from_dict(d)


def marker_world_transform(scn: Scenario, marker_id: int):
    from .geometry import se3_from_pose

    m = scn.markers[marker_id]
    return se3_from_pose(m.position, m.quaternion)


def shelf_level_height(scn: Scenario, slot: Slot) -> float:
    return scn.shelf(slot.shelf_id).level_heights[slot.level]


def slot_world_segment(scn: Scenario, slot: Slot) -> tuple[tuple[float, float], tuple[float, float]]:
    """World endpoints of the slot interval along the shelf face."""
    shelf = scn.shelf(slot.shelf_id)
    x0, y0, yaw = shelf.pose
    c, s = math.cos(yaw), math.sin(yaw)
    lo = (x0 + c * slot.x_lo, y0 + s * slot.x_lo)
    hi = (x0 + c * slot.x_hi, y0 + s * slot.x_hi)
    return lo, hi
