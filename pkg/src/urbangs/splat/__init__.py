"""Gaussian containers and the differentiable splatting renderer."""
from .gaussians import (GaussianGrads, GaussianSet, logit, normalize_quats, quat_multiply, quat_to_rotmat,
                        rotmat_to_quat, sigmoid, smallest_axis_normal)
from .render import (ALPHA_MIN, RenderContext, RenderOutput, backward, render, render_backward,
                     render_with_context)

__all__ = [
    "ALPHA_MIN", "GaussianGrads", "GaussianSet", "RenderContext", "RenderOutput", "backward", "logit",
    "normalize_quats", "quat_multiply", "quat_to_rotmat", "render", "render_backward", "render_with_context",
    "rotmat_to_quat", "sigmoid", "smallest_axis_normal",
]
