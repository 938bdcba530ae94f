"""Label spaces: the 11 HELEN categories, the 9-channel working space, the 6 parts."""
from __future__ import annotations

from dataclasses import dataclass

HELEN_CATEGORIES = (
    "background", "skin", "l_brow", "r_brow", "l_eye", "r_eye",
    "nose", "u_lip", "i_mouth", "l_lip", "hair",
)

# Working space: skin and hair fold into background.
CLASSES = ("background", "l_brow", "r_brow", "l_eye", "r_eye", "nose", "u_lip", "i_mouth", "l_lip")
NUM_CLASSES = len(CLASSES)
HELEN_TO_CLASS = (0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 0)


@dataclass(frozen=True)
class Part:
    name: str
    kind: str  # fine network shared by parts of the same kind
    classes: tuple[int, ...]  # working-space classes covered, in fine-channel order


PARTS = (
    Part("l_brow", "brow", (1,)),
    Part("r_brow", "brow", (2,)),
    Part("l_eye", "eye", (3,)),
    Part("r_eye", "eye", (4,)),
    Part("nose", "nose", (5,)),
    Part("mouth", "mouth", (6, 7, 8)),
)
NUM_PARTS = len(PARTS)
PART_NAMES = tuple(p.name for p in PARTS)
PART_KINDS = ("brow", "eye", "nose", "mouth")


def part_index(name: str) -> int:
    try:
        return PART_NAMES.index(name)
    except ValueError:
        raise ValueError(f"unknown part {name!r}; expected one of {PART_NAMES}") from None


def fine_channels(kind: str) -> int:
    """Fine-net output channels for a part kind (background + its classes)."""
    for p in PARTS:
        if p.kind == kind:
            return 1 + len(p.classes)
    raise ValueError(f"unknown part kind {kind!r}")


# Report rows: merged categories as in the usual HELEN table.
REPORT_ROWS = (
    ("eyes", (3, 4)),
    ("brows", (1, 2)),
    ("nose", (5,)),
    ("I-mouth", (7,)),
    ("U-lip", (6,)),
    ("L-lip", (8,)),
    ("mouth", (6, 7, 8)),
)
