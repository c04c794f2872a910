"""Online signed-distance-field reconstruction with Atlanta-world structure.

A stream of posed depth frames trains a small MLP field continually; keyframes
additionally contribute an explicit planar map of axis-aligned rectangular
surfels whose normals follow the scene's Atlanta directions (one vertical,
several horizontals).  Surfels shape both the sample distribution and extra
loss terms, and can be fused into the field at evaluation time.
"""

from .atlanta import AtlantaFrame, AtlantaInitError, LocalAF
from .dataio import (CameraIntrinsics, SceneSpec, SequenceSource, aw_apartment,
                     builtin_scene, load_sequence, render_depth, scene_sdf,
                     synth_sequence, write_sequence)
from .export_eval import (EvalReport, Mesh, PlanarMap, combine_explicit,
                          evaluate, export_mesh, export_planar_map,
                          export_slice, load_mesh, load_planar_map,
                          marching_cubes, point_rect_distance, sdf_slice)
from .geom import Pose
from .model import AdamWState, SdfModel, load_checkpoint, save_checkpoint
from .surfel import Surfel, extract_keyframe_surfels
from .trainer import Engine, Keyframe

__version__ = "0.1.0"

__all__ = [
    "AdamWState", "AtlantaFrame", "AtlantaInitError", "CameraIntrinsics",
    "Engine", "EvalReport", "Keyframe", "LocalAF", "Mesh", "PlanarMap", "Pose",
    "SceneSpec", "SdfModel", "SequenceSource", "Surfel", "aw_apartment",
    "builtin_scene", "combine_explicit", "evaluate", "export_mesh",
    "export_planar_map", "export_slice", "extract_keyframe_surfels",
    "load_checkpoint", "load_mesh", "load_planar_map", "load_sequence",
    "marching_cubes", "point_rect_distance", "render_depth", "save_checkpoint",
    "scene_sdf", "sdf_slice", "synth_sequence", "write_sequence",
    "__version__",
]
