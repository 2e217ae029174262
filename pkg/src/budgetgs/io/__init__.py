from .colmap import DataError, SceneBundle, load_colmap, scene_extent, write_colmap
from .images import load_image, load_mask, save_image, save_mask
from .ply import ModelFormatError, load_model, save_model
from .synthetic import SyntheticSpec, make_synthetic_scene, quadrant_mask, write_scene
