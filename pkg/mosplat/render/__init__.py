"""
Differentiable splatting: tiled rasterizer, per-pixel oracle, novel views and image IO.
"""
from .image_io import read_image, read_mask, read_plane, write_contact_sheet, write_image, write_plane
from .novel_view import PROTOCOL_ANGLES, orbit_camera, recentered_camera, render_novel_view_set
from .oracle import PixelSample, composite_pixel_oracle, render_oracle
from .rasterizer import RenderOutput, render, render_counter

__all__ = [
    "read_image", "read_mask", "read_plane", "write_contact_sheet", "write_image", "write_plane",
    "PROTOCOL_ANGLES", "orbit_camera", "recentered_camera", "render_novel_view_set",
    "PixelSample", "composite_pixel_oracle", "render_oracle",
    "RenderOutput", "render", "render_counter",
]
