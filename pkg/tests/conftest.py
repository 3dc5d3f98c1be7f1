import pytest

from shelfstock.scenarios import build_mock_supermarket, mock_supermarket_dict
from shelfstock.world import scenario_from_dict


def tiny_scenario_dict():
    """Smallest useful store: one shelf, one marker, one product, dock."""
    return {
        "name": "tiny",
        "seed": 1,
        "robot_start": [0.0, 0.0, 0.0],
        "markers": {
            "1": {
                "position": [0.5, 2.0, 1.0],
                "quaternion": [0.7071067811865475, 0.0, 0.0, 0.7071067811865476],
            },
            "100": {"position": [-1.75, 0.3, 0.5], "quaternion": [0.5, 0.5, 0.5, 0.5]},
        },
        "shelves": [
            {"id": "S", "pose": [0.0, 2.0, 0.0], "width": 1.0, "level_heights": [0.2, 0.6], "marker_id": 1}
        ],
        "cart": {
            "pose": [2.6, 1.0, 1.5707963267948966],
            "size": [0.9, 0.6],
            "height": 0.8,
            "approach_pose": [3.3, 1.0, 1.5707963267948966],
            "items": [{"gtin": "00000000000017", "x": 0.0, "y": -0.2, "yaw": 0.0}],
        },
        "products": {
            "00000000000017": {
                "width": 0.1,
                "depth": 0.06,
                "height": 0.2,
                "shape": "box",
                "has_prod_yolo": True,
            }
        },
        "planogram": {"00000000000017": {"shelf": "S", "level": 0, "slot": [0.0, 0.5]}},
        "dock": {
            "pose": [-1.5, 0.3, 0.0],
            "staging_pose": [-0.5, 0.3, 3.141592653589793],
            "marker_id": 100,
        },
        "perception": {
            "profiles": {
                "product": {"accuracy": 0.975, "recall": 0.93, "inference_time": 0.2},
                "fallback": {"accuracy": 0.847, "recall": 0.826, "inference_time": 6.9},
            },
            "assignment": {},
        },
        "experiments": {},
    }


@pytest.fixture
def tiny_scenario():
    return scenario_from_dict(tiny_scenario_dict())


@pytest.fixture(scope="session")
def mock_scenario():
    return build_mock_supermarket()


@pytest.fixture
def mock_dict():
    return mock_supermarket_dict()
