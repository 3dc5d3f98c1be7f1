"""Programmatic builders for the bundled scenarios.

The packaged mock_supermarket.json is generated from build_mock_supermarket()
by scripts/make_scenarios.py; tests compare the two so the file can never
drift from the builder.
"""

from __future__ import annotations

import math
from importlib import resources
from pathlib import Path

import numpy as np

from .geometry import quat_from_matrix
from .world import Scenario, load_scenario, scenario_from_dict

# Table-calibrated classifier profiles: fine-tuned per-product model vs the
# slow generic fallback.
PRODUCT_PROFILE = {"accuracy": 0.975, "recall": 0.930, "inference_time": 0.2}
FALLBACK_PROFILE = {"accuracy": 0.847, "recall": 0.826, "inference_time": 6.9}

BOX_GTINS = ("00614141000015", "00614141000022", "00614141000039")
CYL_GTINS = ("00614141000046", "00614141000053", "00614141000060")
ALL_GTINS = BOX_GTINS + CYL_GTINS


def _face_marker_quaternion(shelf_yaw: float) -> list[float]:
    """Tag +z points out of the shelf face into the aisle, tag +x along the face."""
    e = np.array([math.cos(shelf_yaw), math.sin(shelf_yaw), 0.0])
    n = np.array([math.sin(shelf_yaw), -math.cos(shelf_yaw), 0.0])
    R = np.column_stack([e, np.array([0.0, 0.0, 1.0]), n])
    return [float(v) for v in quat_from_matrix(R)]


def _dock_marker_quaternion(face_dir: float) -> list[float]:
    n = np.array([math.cos(face_dir), math.sin(face_dir), 0.0])
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(up, n)
    R = np.column_stack([x, up, n])
    return [float(v) for v in quat_from_matrix(R)]


def reliability_tasks() -> list[list]:
    """70 stocking tasks totaling 724 objects (~10 per task)."""
    tasks = []
    for i in range(70):
        qty = 11 if i % 3 == 0 else 10
        tasks.append([ALL_GTINS[i % len(ALL_GTINS)], qty])
    assert sum(q for _, q in tasks) == 724
    return tasks


def timing_tasks() -> list[list]:
    return [[ALL_GTINS[i % len(ALL_GTINS)], 4] for i in range(9)]


def mock_supermarket_dict(seed: int = 7) -> dict:
    products = {}
    for g in BOX_GTINS:
        products[g] = {"width": 0.10, "depth": 0.06, "height": 0.20, "shape": "box", "has_prod_yolo": True}
    for g in CYL_GTINS:
        products[g] = {"width": 0.066, "depth": 0.066, "height": 0.115, "shape": "cylinder", "has_prod_yolo": True}

    shelves = [
        {"id": "A1", "pose": [0.0, 2.0, 0.0], "width": 1.5, "level_heights": [0.20, 0.55, 0.90], "marker_id": 11},
        {"id": "A2", "pose": [0.0, 5.0, 0.0], "width": 1.5, "level_heights": [0.20, 0.55, 0.90], "marker_id": 12},
    ]
    markers = {
        "11": {"position": [0.75, 2.0, 1.00], "quaternion": _face_marker_quaternion(0.0)},
        "12": {"position": [0.75, 5.0, 1.00], "quaternion": _face_marker_quaternion(0.0)},
        "100": {"position": [-1.75, 0.3, 0.5], "quaternion": _dock_marker_quaternion(0.0)},
    }
    planogram = {
        BOX_GTINS[0]: {"shelf": "A1", "level": 0, "slot": [0.02, 1.47]},
        BOX_GTINS[1]: {"shelf": "A1", "level": 1, "slot": [0.02, 1.47]},
        BOX_GTINS[2]: {"shelf": "A1", "level": 2, "slot": [0.02, 1.47]},
        CYL_GTINS[0]: {"shelf": "A2", "level": 0, "slot": [0.02, 0.85]},
        CYL_GTINS[1]: {"shelf": "A2", "level": 1, "slot": [0.02, 0.85]},
        CYL_GTINS[2]: {"shelf": "A2", "level": 2, "slot": [0.02, 0.85]},
    }
    return {
        "name": "mock_supermarket",
        "seed": seed,
        "robot_start": [1.0, 0.5, 0.0],
        "markers": markers,
        "shelves": shelves,
        "cart": {
            "pose": [2.6, 1.0, 1.5707963267948966],
            "size": [0.9, 0.6],
            "height": 0.80,
            "approach_pose": [1.9, 1.0, 1.5707963267948966],
            "items": [],
        },
        "products": products,
        "planogram": planogram,
        "dock": {
            "pose": [-1.5, 0.3, 0.0],
            "staging_pose": [-0.5, 0.3, 3.141592653589793],
            "marker_id": 100,
        },
        "perception": {
            "profiles": {"product": dict(PRODUCT_PROFILE), "fallback": dict(FALLBACK_PROFILE)},
            "assignment": {},
        },
        "experiments": {
            "reliability": {
                "tasks": reliability_tasks(),
                "distractors": 6,
                "clear_slot_on_task_start": True,
            },
            "timing": {
                "tasks": timing_tasks(),
                "distractors": 6,
                "clear_slot_on_task_start": True,
                "fast_inference": 0.2,
                "slow_inference": 6.9,
            },
            "economics": {
                "time_per_item": {"autonomous": 68.2, "teleop": 54.7, "human": 6.82},
            },
            "lastmeter": {"shelf": "A1", "target": [-0.85, -0.2, 0.0], "max_offset": 0.5},
        },
    }


def build_mock_supermarket(seed: int = 7) -> Scenario:
    return scenario_from_dict(mock_supermarket_dict(seed))


def resolve_scenario(name_or_path: str) -> Scenario:
    """Load a scenario from a path, or a bundled scenario by bare name."""
    p = Path(name_or_path)
    if p.exists():
        return load_scenario(p)
    ref = resources.files("shelfstock") / "scenarios" / f"{name_or_path}.json"
    if ref.is_file():
        with resources.as_file(ref) as fp:
            return load_scenario(fp)
    raise FileNotFoundError(f"no scenario file or bundled scenario named {name_or_path!r}")
