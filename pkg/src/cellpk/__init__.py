"""Lossless rotation augmentation, two-network fusion and PK evaluation for
cellularity regression on histopathology-style patches."""

from .augment import rotate_lossless, rotation_set, sample_session_angles
from .metric import average_pk, kendall_tau_b, pk, unpaired_t_test
from .models import build_tiny_deep, build_tiny_shallow, fuse, presets

__version__ = "0.1.0"

__all__ = [
    "rotate_lossless",
    "rotation_set",
    "sample_session_angles",
    "average_pk",
    "kendall_tau_b",
    "pk",
    "unpaired_t_test",
    "build_tiny_deep",
    "build_tiny_shallow",
    "fuse",
    "presets",
]
