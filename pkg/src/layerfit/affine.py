"""Six-parameter affine motion models and dense flow synthesis.

A motion is a vector (a1..a6) applied in normalized image coordinates:

    u_n = a1 + a2 * xn + a3 * yn
    v_n = a4 + a5 * xn + a6 * yn

where (xn, yn) map pixel centers linearly into [-1, 1]^2 and the normalized
displacements are rescaled back to pixel units by (W-1)/2 and (H-1)/2.
Working in normalized coordinates keeps all six parameters at comparable
magnitudes, which conditions gradient-based fitting far better than raw
pixel coordinates; the family of expressible flows is identical.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

N_PARAMS = 6
COORD_CONVENTION = "normalized"


def validate_params(params: np.ndarray) -> np.ndarray:
    """Check an affine parameter vector and return it as float64."""
    params = np.asarray(params, dtype=np.float64)
    if params.shape != (N_PARAMS,):
        raise ValueError(f"affine params must have shape (6,), got {params.shape}")
    if not np.isfinite(params).all():
        raise ValueError("affine params contain non-finite values")
    return params


@dataclass(frozen=True)
class CoordMap:
    """Pixel-to-normalized coordinate mapping for a fixed grid size.

    For a side of extent N > 1 the scale factor is (N-1)/2 and the center is
    (N-1)/2, so pixel centers land exactly on [-1, 1]. Degenerate single-pixel
    sides use scale 1 so translations stay expressible.
    """

    width: int
    height: int
    xn: np.ndarray = field(init=False, repr=False, compare=False)
    yn: np.ndarray = field(init=False, repr=False, compare=False)
    sx: float = field(init=False, repr=False, compare=False)
    sy: float = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise ValueError(f"grid must be at least 1x1, got {self.width}x{self.height}")
        sx = (self.width - 1) / 2.0 if self.width > 1 else 1.0
        sy = (self.height - 1) / 2.0 if self.height > 1 else 1.0
        cx = (self.width - 1) / 2.0
        cy = (self.height - 1) / 2.0
        xs = np.arange(self.width, dtype=np.float64)
        ys = np.arange(self.height, dtype=np.float64)
        xn, yn = np.meshgrid((xs - cx) / sx, (ys - cy) / sy)
        object.__setattr__(self, "xn", xn)
        object.__setattr__(self, "yn", yn)
        object.__setattr__(self, "sx", sx)
        object.__setattr__(self, "sy", sy)


def dense_flow(params: np.ndarray, cmap: CoordMap) -> np.ndarray:
    """Evaluate the affine motion at every pixel, in pixel units.

    Returns a (H, W, 2) flow field. Linear in the parameters.
    """
    a = validate_params(params)
    u = (a[0] + a[1] * cmap.xn + a[2] * cmap.yn) * cmap.sx
    v = (a[3] + a[4] * cmap.xn + a[5] * cmap.yn) * cmap.sy
    return np.stack([u, v], axis=-1)


def flow_param_vjp(grad_flow: np.ndarray, cmap: CoordMap) -> np.ndarray:
    """Accumulate a per-pixel flow cotangent into the six parameters.

    grad_flow is (H, W, 2); the result is the gradient of
    sum(grad_flow * dense_flow(params)) with respect to params.
    """
    grad_flow = np.asarray(grad_flow, dtype=np.float64)
    if grad_flow.shape != (cmap.height, cmap.width, 2):
        raise ValueError(
            f"grad_flow shape {grad_flow.shape} does not match grid "
            f"{cmap.height}x{cmap.width}"
        )
    gu = grad_flow[:, :, 0] * cmap.sx
    gv = grad_flow[:, :, 1] * cmap.sy
    return np.array(
        [
            gu.sum(),
            (gu * cmap.xn).sum(),
            (gu * cmap.yn).sum(),
            gv.sum(),
            (gv * cmap.xn).sum(),
            (gv * cmap.yn).sum(),
        ]
    )


def params_to_json(params: np.ndarray) -> dict:
    """Serialize a parameter vector with its coordinate convention tag."""
    return {"coords": COORD_CONVENTION, "params": [float(p) for p in validate_params(params)]}


def params_from_json(obj: dict) -> np.ndarray:
    """Deserialize a parameter vector, checking the coordinate convention."""
    if obj.get("coords") != COORD_CONVENTION:
        raise ValueError(f"unknown coordinate convention: {obj.get('coords')!r}")
    return validate_params(np.array(obj["params"], dtype=np.float64))
