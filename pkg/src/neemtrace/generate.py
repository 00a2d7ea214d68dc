"""Seeded scene and plan generators for tests and demos.

Everything here draws from :class:`~neemtrace.prng.SplitMix64`, so a
generator seed fixes the output exactly.
"""

from __future__ import annotations

from .prng import SplitMix64
from .simworld import Close, Grasp, MoveTo, Open, Plan, Pour, Release, Scene, SceneEntity

GRAM_UG = 1_000_000


def _between(rng: SplitMix64, lo: int, hi: int) -> int:
    return lo + rng.below(hi - lo + 1)


def _spot(rng: SplitMix64):
    return (_between(rng, 200_000, 600_000), _between(rng, -300_000, 300_000), _between(rng, 50_000, 200_000))


def task_scene(rng: SplitMix64, *, bottle_mass_ug=None, destination_open=True, obstacle=False) -> Scene:
    """Bottle at the gripper, an empty cup, a closed canister, optionally an obstacle."""
    bottle_pose = _spot(rng)
    mass = bottle_mass_ug if bottle_mass_ug is not None else _between(rng, 50, 400) * GRAM_UG
    ents = [
        SceneEntity("bottle", "bottle", bottle_pose, mass, True, True, _between(rng, 500, 1000) * 1000, True),
        SceneEntity("canister", "canister", _spot(rng), _between(rng, 100, 800) * GRAM_UG, True, False, 0, False),
        SceneEntity("cup", "cup", _spot(rng), _between(rng, 50, 300) * GRAM_UG, True, destination_open, 0, False),
    ]
    if obstacle:
        ents.append(SceneEntity("wall", "obstacle", _spot(rng), 0, False, False, 0, False))
    return Scene(tuple(ents), gripper_pose=bottle_pose)


def task_plan(scene: Scene, rng: SplitMix64) -> Plan:
    """The six-step template: grasp, move, pour, release, open, close."""
    cup = next(e for e in scene.entities if e.id == "cup")
    above = (cup.pose[0], cup.pose[1], cup.pose[2] + 100_000)
    volume = _between(rng, 10, 200) * 1000
    return Plan(
        (
            Grasp("bottle"),
            MoveTo(above),
            Pour("bottle", "cup", volume),
            Release(),
            Open("canister"),
            Close("canister"),
        )
    )


def nominal_task(seed: int, **scene_kw) -> tuple[Scene, Plan]:
    rng = SplitMix64(seed)
    scene = task_scene(rng, **scene_kw)
    return scene, task_plan(scene, rng)


def random_plan(scene: Scene, rng: SplitMix64, length: int | None = None) -> Plan:
    """Arbitrary action sequence over the scene; many actions will fail."""
    ids = [e.id for e in scene.entities]
    n = length if length is not None else _between(rng, 1, 12)
    actions = []
    for _ in range(n):
        kind = rng.below(6)
        if kind == 0:
            if rng.below(4) == 0 or not ids:
                target = (_between(rng, -1_200_000, 1_200_000), _between(rng, -1_200_000, 1_200_000), _between(rng, 0, 600_000))
            else:
                target = scene.entities[rng.below(len(scene.entities))].pose
            actions.append(MoveTo(target))
        elif not ids:
            actions.append(Release())
        elif kind == 1:
            actions.append(Grasp(ids[rng.below(len(ids))]))
        elif kind == 2:
            actions.append(Release())
        elif kind == 3:
            actions.append(Open(ids[rng.below(len(ids))]))
        elif kind == 4:
            actions.append(Close(ids[rng.below(len(ids))]))
        else:
            src, dst = ids[rng.below(len(ids))], ids[rng.below(len(ids))]
            actions.append(Pour(src, dst, _between(rng, 1, 400) * 1000))
    return Plan(tuple(actions))


def random_task(seed: int) -> tuple[Scene, Plan]:
    rng = SplitMix64(seed)
    scene = task_scene(rng, destination_open=rng.below(2) == 0, obstacle=rng.below(2) == 0)
    if rng.below(2):
        return scene, task_plan(scene, rng)
    return scene, random_plan(scene, rng)
