"""Grasp classes and their stable serialization tokens.

The integer codes are a wire contract shared by manifests and checkpoints;
they must never be renumbered.
"""

from __future__ import annotations

import enum


class GraspLabel(enum.IntEnum):
    """The four prosthesis grip patterns."""

    PINCH = 0
    PALMAR_WRIST_NEUTRAL = 1
    TRIPOD = 2
    PALMAR_WRIST_PRONATED = 3

    @property
    def token(self) -> str:
        """Stable snake_case token used in manifest files."""
        return _LABEL_TO_TOKEN[self]

    @classmethod
    def from_token(cls, token: str) -> "GraspLabel":
        """Decode a manifest token; raises KeyError for unknown tokens."""
        return _TOKEN_TO_LABEL[token]


_LABEL_TO_TOKEN = {
    GraspLabel.PINCH: "pinch",
    GraspLabel.PALMAR_WRIST_NEUTRAL: "palmar_wn",
    GraspLabel.TRIPOD: "tripod",
    GraspLabel.PALMAR_WRIST_PRONATED: "palmar_wp",
}

_TOKEN_TO_LABEL = {token: label for label, token in _LABEL_TO_TOKEN.items()}

#: Human-readable names, indexed by label code (reports, confusion matrices).
LABEL_NAMES = (
    "pinch",
    "palmar wrist neutral",
    "tripod",
    "palmar wrist pronated",
)

NUM_CLASSES = len(GraspLabel)
