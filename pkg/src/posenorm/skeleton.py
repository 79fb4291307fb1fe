"""Joint schema for the 14-joint full-body layout (LSP ordering)."""

from dataclasses import dataclass, field

import numpy as np

JOINT_NAMES = (
    "r-ankle", "r-knee", "r-hip", "l-hip", "l-knee", "l-ankle",
    "r-wrist", "r-elbow", "r-shoulder", "l-shoulder", "l-elbow", "l-wrist",
    "neck", "head-top",
)

LIMB_NAMES = ("l-arm", "r-arm", "l-leg", "r-leg")


@dataclass(frozen=True)
class Skeleton:
    joint_names: tuple
    limb_defs: tuple  # (root, middle, end) index triples
    torso_joints: tuple  # l-shoulder, r-shoulder, l-hip, r-hip
    neck_index: int
    head_index: int
    limb_names: tuple = LIMB_NAMES

    def __post_init__(self):
        n = len(self.joint_names)
        if n != 14:
            raise ValueError(f"expected 14 joints, got {n}")
        if len(self.limb_defs) != 4:
            raise ValueError(f"expected 4 limbs, got {len(self.limb_defs)}")
        ends = set()
        for limb in self.limb_defs:
            if len(set(limb)) != 3 or not all(0 <= j < n for j in limb):
                raise ValueError(f"bad limb triple {limb}")
            if limb[0] not in self.torso_joints:
                raise ValueError(f"limb root {limb[0]} is not a torso joint")
            if limb[2] in ends:
                raise ValueError(f"joint {limb[2]} ends two limbs")
            ends.add(limb[2])

    @property
    def num_joints(self):
        return len(self.joint_names)

    def index(self, name):
        return self.joint_names.index(name)

    def flip_permutation(self):
        """Index permutation that swaps left and right joint labels."""
        perm = []
        for name in self.joint_names:
            if name.startswith("l-"):
                name = "r-" + name[2:]
            elif name.startswith("r-"):
                name = "l-" + name[2:]
            perm.append(self.joint_names.index(name))
        return perm

    def limb_of(self, joint):
        """Limb index owning ``joint`` as middle or end joint, else None."""
        for i, (_, middle, end) in enumerate(self.limb_defs):
            if joint in (middle, end):
                return i
        return None


def canonical_skeleton():
    idx = {name: i for i, name in enumerate(JOINT_NAMES)}
    limbs = (
        (idx["l-shoulder"], idx["l-elbow"], idx["l-wrist"]),
        (idx["r-shoulder"], idx["r-elbow"], idx["r-wrist"]),
        (idx["l-hip"], idx["l-knee"], idx["l-ankle"]),
        (idx["r-hip"], idx["r-knee"], idx["r-ankle"]),
    )
    torso = (idx["l-shoulder"], idx["r-shoulder"], idx["l-hip"], idx["r-hip"])
    return Skeleton(JOINT_NAMES, limbs, torso, idx["neck"], idx["head-top"])


@dataclass
class KeypointSet:
    """Joint coordinates in image pixels (x right, y down) plus visibility."""

    points: np.ndarray  # (K, 2)
    visible: np.ndarray = field(default=None)  # (K,) bool

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)
        if self.visible is None:
            self.visible = np.ones(len(self.points), dtype=bool)
        self.visible = np.asarray(self.visible, dtype=bool).reshape(-1)
        if len(self.visible) != len(self.points):
            raise ValueError("points and visible differ in length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("keypoint coordinates must be finite")

    def __len__(self):
        return len(self.points)

    def copy(self):
        return KeypointSet(self.points.copy(), self.visible.copy())

    def validate(self, sk):
        if len(self) != sk.num_joints:
            raise ValueError(f"expected {sk.num_joints} joints, got {len(self)}")

    def __eq__(self, other):
        if not isinstance(other, KeypointSet):
            return NotImplemented
        return (np.array_equal(self.points, other.points)
                and np.array_equal(self.visible, other.visible))


def torso_center(kp, sk):
    kp.validate(sk)
    return kp.points[list(sk.torso_joints)].mean(axis=0)
