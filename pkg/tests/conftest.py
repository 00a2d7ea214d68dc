from pathlib import Path

import pytest

from neemtrace.simworld import Close, Grasp, MoveTo, Open, Plan, Pour, Release, Scene, SceneEntity
from neemtrace.store import Store

TESTDATA = Path(__file__).resolve().parent.parent / "testdata"
G = 1_000_000  # µg per gram


def tabletop(bottle_g=300, cup_open=True, obstacle=False, bottle_transparent=True):
    ents = [
        SceneEntity("bottle", "bottle", (400_000, 0, 100_000), bottle_g * G, True, True, 800_000, bottle_transparent),
        SceneEntity("canister", "canister", (300_000, -250_000, 100_000), 500 * G, True, False, 0, False),
        SceneEntity("cup", "cup", (400_000, 200_000, 80_000), 120 * G, True, cup_open, 0, False),
    ]
    if obstacle:
        ents.append(SceneEntity("wall", "obstacle", (450_000, 100_000, 150_000), 0, False, False, 0, False))
    return Scene(tuple(ents), gripper_pose=(400_000, 0, 100_000))


def six_step(volume=150_000):
    return Plan(
        (
            Grasp("bottle"),
            MoveTo((400_000, 200_000, 180_000)),
            Pour("bottle", "cup", volume),
            Release(),
            Open("canister"),
            Close("canister"),
        ),
        name="pour_water",
    )


@pytest.fixture
def store(tmp_path):
    return Store(tmp_path / "store")


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
