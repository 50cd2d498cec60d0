"""Synthetic BEV scenes and their on-disk splits."""

from eanmap.data.storage import load_split, read_manifest, save_split, verify_split
from eanmap.data.synthetic import Scene, SceneConfig, generate_scene, generate_split

__all__ = [
    "Scene",
    "SceneConfig",
    "generate_scene",
    "generate_split",
    "load_split",
    "read_manifest",
    "save_split",
    "verify_split",
]
