from .errors import DataError, SprError, StorageError, UsageError
from .representation import HierStructuredPose, Pose, Scene, StructuredPose
from .skeleton import SkeletonSpec

__all__ = [
    "DataError", "SprError", "StorageError", "UsageError",
    "HierStructuredPose", "Pose", "Scene", "StructuredPose", "SkeletonSpec",
]
