"""Coordinate grids, affine/non-rigid warps and differentiable resampling.

All coordinates live in the normalized cube [-1, 1]^n with the corner-aligned
convention: -1 and +1 are the centres of the first and last voxel on each axis.
Point vectors follow the ``grid_sample`` ordering, i.e. component 0 is the
coordinate along the *last* array axis (x), component 1 along the one before
it (y), and so on.

Tensor layouts used throughout the package:

* images / feature maps: ``(B, C, *spatial)``
* grids and displacement fields: ``(B, *spatial, n)``
* affine transforms: ``(B, n, n + 1)`` acting as ``p -> M[:, :n] @ p + M[:, n]``
"""
from __future__ import annotations

from typing import Optional, Sequence

import torch
import torch.nn.functional as F

INTERP_MODES = ("linear", "nearest")


class NonFiniteGridError(ValueError, FloatingPointError):
    """A sampling grid holds NaN or infinite coordinates."""


def axis_coordinates(size: int, dtype=None, device=None) -> torch.Tensor:
    """Corner-aligned coordinates of one axis; a size-1 axis maps to 0."""
    if size < 1:
        raise ValueError(f"axis size must be >= 1, got {size}")
    if size == 1:
        return torch.zeros(1, dtype=dtype, device=device)
    i = torch.arange(size, dtype=torch.float64, device=device)
    coords = -1.0 + 2.0 * i / (size - 1)
    return coords.to(dtype or torch.get_default_dtype())


def identity_grid(spatial_shape: Sequence[int], n: Optional[int] = None, dtype=None, device=None) -> torch.Tensor:
    """Identity sampling grid of shape ``(*spatial_shape, n)``."""
    spatial_shape = tuple(int(s) for s in spatial_shape)
    if n is None:
        n = len(spatial_shape)
    if n not in (2, 3):
        raise ValueError(f"only 2D and 3D grids are supported, got n={n}")
    if len(spatial_shape) != n:
        raise ValueError(f"spatial_shape {spatial_shape} does not have {n} axes")
    axes = [axis_coordinates(s, dtype=dtype, device=device) for s in spatial_shape]
    mesh = torch.meshgrid(*axes, indexing="ij")
    # reverse so that component 0 runs along the last array axis
    return torch.stack(mesh[::-1], dim=-1)


def identity_affine(n: int, batch: Optional[int] = None, dtype=None, device=None) -> torch.Tensor:
    eye = torch.eye(n, n + 1, dtype=dtype or torch.get_default_dtype(), device=device)
    if batch is None:
        return eye
    return eye.expand(batch, n, n + 1).clone()


def translation(t: Sequence[float], dtype=None) -> torch.Tensor:
    t = torch.as_tensor(t, dtype=dtype or torch.get_default_dtype())
    A = identity_affine(t.numel(), dtype=t.dtype)
    A[:, -1] = t
    return A


def scaling(s: Sequence[float], dtype=None) -> torch.Tensor:
    s = torch.as_tensor(s, dtype=dtype or torch.get_default_dtype())
    n = s.numel()
    A = torch.zeros(n, n + 1, dtype=s.dtype)
    A[:, :n] = torch.diag(s)
    return A


def _homogeneous(A: torch.Tensor) -> torch.Tensor:
    n = A.shape[-2]
    bottom = torch.zeros(*A.shape[:-2], 1, n + 1, dtype=A.dtype, device=A.device)
    bottom[..., 0, n] = 1.0
    return torch.cat([A, bottom], dim=-2)


def compose_affine(outer: torch.Tensor, inner: torch.Tensor) -> torch.Tensor:
    """Affine of ``p -> outer(inner(p))``."""
    return (_homogeneous(outer) @ _homogeneous(inner))[..., :-1, :]


def invert_affine(A: torch.Tensor) -> torch.Tensor:
    n = A.shape[-2]
    det = torch.linalg.det(A[..., :n])
    if torch.any(det.abs() <= 1e-9):
        raise ValueError("affine transform has a singular linear part")
    return torch.linalg.inv(_homogeneous(A))[..., :-1, :]


def _batched(x: torch.Tensor, ndim: int) -> torch.Tensor:
    return x if x.dim() == ndim else x.unsqueeze(0)


def warp_grid(grid: torch.Tensor, A: torch.Tensor, u: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Map every grid point p to ``A @ [p + u(p); 1]``.

    ``grid`` may be unbatched ``(*spatial, n)`` or batched; the result is batched
    whenever any input is.
    """
    n = grid.shape[-1]
    if A.shape[-2:] != (n, n + 1):
        raise ValueError(f"affine of shape {tuple(A.shape)} does not act on {n}D points")
    points = grid
    if u is not None:
        if u.shape[-(n + 1):] != grid.shape[-(n + 1):]:
            raise ValueError(f"displacement field {tuple(u.shape)} does not match grid {tuple(grid.shape)}")
        points = grid + u
    if A.dim() == 2:
        return points @ A[:, :n].T + A[:, n]
    points = _batched(points, n + 2)
    view = (A.shape[0],) + (1,) * (points.dim() - 2) + (n,)
    linear = torch.einsum("b...j,bij->b...i", points, A[:, :, :n])
    return linear + A[:, :, n].reshape(view)


def sample(image: torch.Tensor, grid: torch.Tensor, interp: str = "linear", pad_value: float = -1.0) -> torch.Tensor:
    """Read ``image`` (B, C, *spatial) at the normalized points of ``grid``.

    Points outside [-1, 1]^n read ``pad_value``; multilinear mode is
    differentiable w.r.t. both the image and the grid.
    """
    if interp not in INTERP_MODES:
        raise ValueError(f"unknown interpolation mode {interp!r}; expected one of {INTERP_MODES}")
    n = image.dim() - 2
    if grid.shape[-1] != n:
        raise ValueError(f"{grid.shape[-1]}D grid cannot sample a {n}D image")
    grid = _batched(grid, n + 2)
    if not torch.isfinite(grid).all():
        raise NonFiniteGridError("sampling grid contains non-finite coordinates")
    if grid.shape[0] != image.shape[0]:
        grid = grid.expand(image.shape[0], *grid.shape[1:])
    mode = "bilinear" if interp == "linear" else "nearest"
    # single precision unnormalization puts voxel centres off by ~1e-6 voxels,
    # enough to break the exact-identity property, so sample in double
    work = torch.promote_types(image.dtype, torch.float64)
    # zero padding on the shifted image gives exactly pad_value outside the domain
    shifted = image.to(work) - pad_value
    out = F.grid_sample(shifted, grid.to(work), mode=mode, padding_mode="zeros", align_corners=True)
    return (out + pad_value).to(image.dtype)


def warp_image(
    image: torch.Tensor,
    A: torch.Tensor,
    u: Optional[torch.Tensor] = None,
    interp: str = "linear",
    pad_value: float = -1.0,
) -> torch.Tensor:
    """``image`` composed with the warp ``p -> A(p + u(p))``."""
    work = torch.promote_types(image.dtype, torch.float64)
    grid = identity_grid(image.shape[2:], dtype=work, device=image.device)
    u = None if u is None else u.to(work)
    return sample(image, warp_grid(grid, A.to(work), u), interp, pad_value)


def resize_field(u: torch.Tensor, spatial_shape: Sequence[int]) -> torch.Tensor:
    """Linearly resample a displacement field onto another grid resolution.

    Values stay in normalized units, which are resolution independent.
    """
    if tuple(u.shape[1:-1]) == tuple(spatial_shape):
        return u
    n = u.shape[-1]
    channels_first = torch.movedim(u, -1, 1)
    grid = identity_grid(spatial_shape, n, dtype=u.dtype, device=u.device)
    out = sample(channels_first, grid, "linear", pad_value=0.0)
    return torch.movedim(out, 1, -1)
