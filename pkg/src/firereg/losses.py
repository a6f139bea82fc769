"""Synthesis, registration and regularization losses and the full forward pass."""
from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Dict, Optional, Tuple

import torch

from . import geometry
from .networks import FireModel

REPORT_FIELDS = (
    "syn_acc", "syn_fea", "syn_cyc", "syn_align",
    "reg_acc", "reg_ic",
    "r_syn", "r_reg", "r_smooth", "lambda", "total",
)


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str):
        super().__init__(f"non-finite value in loss term {term!r}")
        self.term = term


def rms(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Root-mean-square difference over all elements."""
    if a.shape != b.shape:
        raise ValueError(f"rms operands differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    ms = torch.mean((a - b) ** 2)
    # sqrt has an infinite slope at 0, which identical operands hit exactly;
    # use the zero subgradient there instead of propagating NaN
    positive = ms > 0
    return torch.where(positive, torch.sqrt(torch.where(positive, ms, torch.ones_like(ms))), ms)


def lambda_smooth(n: int, N: int) -> float:
    """Weight of the smoothness term: 2^(2n) / (10 N) for N points in an image."""
    if n not in (2, 3):
        raise ValueError(f"n must be 2 or 3, got {n}")
    if N < 1:
        raise ValueError(f"number of points must be positive, got {N}")
    return 2.0 ** (2 * n) / (10.0 * N)


def _second_difference(u: torch.Tensor, axis: int) -> torch.Tensor:
    """Central second difference along ``axis``; zero on the two border slices.

    Only points where the 3-point stencil fits contribute, so affine fields
    have exactly zero Laplacian everywhere.
    """
    size = u.shape[axis]
    if size < 3:
        return torch.zeros_like(u)
    inner = u.narrow(axis, 2, size - 2) - 2 * u.narrow(axis, 1, size - 2) + u.narrow(axis, 0, size - 2)
    edge = torch.zeros_like(u.narrow(axis, 0, 1))
    return torch.cat([edge, inner, edge], dim=axis)


def laplacian(u: torch.Tensor) -> torch.Tensor:
    """Discrete Laplacian (index spacing) of a field ``(B, *spatial, n)``, per component."""
    n = u.shape[-1]
    return sum(_second_difference(u, axis) for axis in range(1, n + 1))


def _forward_difference(u: torch.Tensor, axis: int) -> torch.Tensor:
    size = u.shape[axis]
    return u.narrow(axis, 1, size - 1) - u.narrow(axis, 0, size - 1)


def field_energy(u: torch.Tensor, operator: str = "laplacian") -> torch.Tensor:
    """Squared L2 norm of the differentiated field, averaged over the batch."""
    if operator == "laplacian":
        sq = laplacian(u) ** 2
        return sq.reshape(u.shape[0], -1).sum(dim=1).mean()
    if operator == "gradient":
        n = u.shape[-1]
        total = 0
        for axis in range(1, n + 1):
            d = _forward_difference(u, axis) ** 2
            total = total + d.reshape(u.shape[0], -1).sum(dim=1)
        return total.mean()
    raise ValueError(f"unknown smoothness operator {operator!r}")


def smoothness(u_ab: torch.Tensor, u_ba: torch.Tensor, operator: str = "laplacian") -> torch.Tensor:
    return field_energy(u_ab, operator) + field_energy(u_ba, operator)


@dataclass
class LossOptions:
    """Ablation switches; the defaults are the full model."""

    use_reg_ic: bool = True
    smooth_lambda: Optional[float] = None  # None -> lambda_smooth(n, N)
    smooth_operator: str = "laplacian"


@dataclass
class ForwardBundle:
    xa: torch.Tensor
    xb: torch.Tensor
    fa: torch.Tensor
    fb: torch.Tensor
    affine_ab: torch.Tensor
    affine_ba: torch.Tensor
    field_ab: torch.Tensor
    field_ba: torch.Tensor
    fa_af: torch.Tensor          # G(x^A) warped by the affine part only
    fb_af: torch.Tensor
    fa_warped: torch.Tensor      # G(x^A) warped by the full transform
    fb_warped: torch.Tensor
    xb_hat: torch.Tensor         # F^{A->B}(G(x^A))
    xa_hat: torch.Tensor
    xb_hat_t: torch.Tensor       # F^{A->B}(G(x^A) o phi^{A->B})
    xa_hat_t: torch.Tensor
    xa_warped: torch.Tensor      # x^A o phi^{A->B}
    xb_warped: torch.Tensor
    xa_roundtrip: Optional[torch.Tensor]  # x^A o phi^{A->B} o phi^{B->A}
    xb_roundtrip: Optional[torch.Tensor]
    xb_cyc: torch.Tensor         # F^{B->A}(G(xb_hat))  (compared with x^A)
    xa_cyc: torch.Tensor
    f_xb_hat: torch.Tensor       # G(xb_hat)
    f_xa_hat: torch.Tensor
    xb_reg: torch.Tensor         # F^{A->B}(G(x^A o phi^{A->B}))
    xa_reg: torch.Tensor
    xb_syn_af: torch.Tensor      # F^{A->B}(G(x^A) o phi_af^{A->B})
    xa_syn_af: torch.Tensor
    xb_reg_af: torch.Tensor      # F^{A->B}(G(x^A o phi_af^{A->B}))
    xa_reg_af: torch.Tensor


@dataclass
class LossReport:
    syn_acc: torch.Tensor
    syn_fea: torch.Tensor
    syn_cyc: torch.Tensor
    syn_align: torch.Tensor
    reg_acc: torch.Tensor
    reg_ic: torch.Tensor
    r_syn: torch.Tensor
    r_reg: torch.Tensor
    r_smooth: torch.Tensor
    lam: float
    total: torch.Tensor

    def as_dict(self) -> Dict[str, float]:
        """Plain floats keyed by the CSV column names."""
        out = {}
        for f in fields(self):
            key = "lambda" if f.name == "lam" else f.name
            v = getattr(self, f.name)
            out[key] = float(v.detach()) if torch.is_tensor(v) else float(v)
        return out


def synthesis_loss(b: ForwardBundle) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    parts = {
        "syn_acc": rms(b.xb_hat_t, b.xb) + rms(b.xa_hat_t, b.xa),
        "syn_fea": rms(b.fa, b.fb_warped) + rms(b.fb, b.fa_warped),
        "syn_cyc": rms(b.xb_cyc, b.xa) + rms(b.xa_cyc, b.xb),
        "syn_align": rms(b.fa, b.f_xb_hat) + rms(b.fb, b.f_xa_hat),
    }
    return sum(parts.values()), parts


def registration_loss(b: ForwardBundle, use_ic: bool = True) -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    parts = {"reg_acc": rms(b.xb_reg, b.xb) + rms(b.xa_reg, b.xa)}
    if use_ic:
        parts["reg_ic"] = rms(b.xa, b.xa_roundtrip) + rms(b.xb, b.xb_roundtrip)
    else:
        parts["reg_ic"] = b.xa.new_zeros(())
    return sum(parts.values()), parts


def regularization(b: ForwardBundle, lam: float, operator: str = "laplacian") -> Tuple[torch.Tensor, Dict[str, torch.Tensor]]:
    parts = {
        "r_syn": rms(b.xb, b.xb_syn_af) + rms(b.xa, b.xa_syn_af),
        "r_reg": rms(b.xb, b.xb_reg_af) + rms(b.xa, b.xa_reg_af),
        "r_smooth": smoothness(b.field_ab, b.field_ba, operator),
    }
    return parts["r_syn"] + parts["r_reg"] + lam * parts["r_smooth"], parts


def _split(t: torch.Tensor, k: int):
    return torch.chunk(t, k, dim=0)


def run_forward(model: FireModel, xa: torch.Tensor, xb: torch.Tensor, use_ic: bool = True) -> ForwardBundle:
    """Compute every intermediate needed by the losses, each exactly once.

    Encoder and decoder calls are batched along the sample axis; instance
    normalization keeps samples independent.
    """
    f = model.encode(torch.cat([xa, xb]))
    fa, fb = _split(f, 2)
    A_ab, u_ab, fa_af = model.transform_from_features(fa, fb, "AB")
    A_ba, u_ba, fb_af = model.transform_from_features(fb, fa, "BA")
    for name, t in (("affine_ab", A_ab), ("affine_ba", A_ba), ("field_ab", u_ab), ("field_ba", u_ba)):
        if not torch.isfinite(t).all():
            raise NonFiniteLossError(name)
    fa_warped = model.warp_features(fa, A_ab, u_ab)
    fb_warped = model.warp_features(fb, A_ba, u_ba)

    xb_hat, xb_hat_t, xb_syn_af = _split(model.decode(torch.cat([fa, fa_warped, fa_af]), "AB"), 3)
    xa_hat, xa_hat_t, xa_syn_af = _split(model.decode(torch.cat([fb, fb_warped, fb_af]), "BA"), 3)

    xa_warped = geometry.warp_image(xa, A_ab, u_ab)
    xb_warped = geometry.warp_image(xb, A_ba, u_ba)
    xa_af = geometry.warp_image(xa, A_ab)
    xb_af = geometry.warp_image(xb, A_ba)

    f2 = model.encode(torch.cat([xb_hat, xa_warped, xa_af, xa_hat, xb_warped, xb_af]))
    f_xb_hat, f_xa_w, f_xa_af, f_xa_hat, f_xb_w, f_xb_af = _split(f2, 6)
    # images that started in domain A are decoded by F^{A->B} and vice versa
    xa_cyc, xb_reg, xb_reg_af = _split(model.decode(torch.cat([f_xa_hat, f_xa_w, f_xa_af]), "AB"), 3)
    xb_cyc, xa_reg, xa_reg_af = _split(model.decode(torch.cat([f_xb_hat, f_xb_w, f_xb_af]), "BA"), 3)

    if use_ic:
        xa_roundtrip = geometry.warp_image(xa_warped, A_ba, u_ba)
        xb_roundtrip = geometry.warp_image(xb_warped, A_ab, u_ab)
    else:
        xa_roundtrip = xb_roundtrip = None

    return ForwardBundle(
        xa=xa, xb=xb, fa=fa, fb=fb,
        affine_ab=A_ab, affine_ba=A_ba, field_ab=u_ab, field_ba=u_ba,
        fa_af=fa_af, fb_af=fb_af, fa_warped=fa_warped, fb_warped=fb_warped,
        xb_hat=xb_hat, xa_hat=xa_hat, xb_hat_t=xb_hat_t, xa_hat_t=xa_hat_t,
        xa_warped=xa_warped, xb_warped=xb_warped,
        xa_roundtrip=xa_roundtrip, xb_roundtrip=xb_roundtrip,
        xb_cyc=xb_cyc, xa_cyc=xa_cyc, f_xb_hat=f_xb_hat, f_xa_hat=f_xa_hat,
        xb_reg=xb_reg, xa_reg=xa_reg,
        xb_syn_af=xb_syn_af, xa_syn_af=xa_syn_af,
        xb_reg_af=xb_reg_af, xa_reg_af=xa_reg_af,
    )


def full_forward(
    model: FireModel,
    xa: torch.Tensor,
    xb: torch.Tensor,
    options: Optional[LossOptions] = None,
) -> Tuple[ForwardBundle, LossReport]:
    """One forward pass of the whole model and the breakdown of the total loss."""
    options = options or LossOptions()
    for name, x in (("x^A", xa), ("x^B", xb)):
        if not torch.isfinite(x).all():
            raise NonFiniteLossError(name)
    bundle = run_forward(model, xa, xb, use_ic=options.use_reg_ic)
    lam = options.smooth_lambda
    if lam is None:
        lam = lambda_smooth(model.cfg.n, math.prod(model.cfg.image_shape))
    _, syn = synthesis_loss(bundle)
    _, reg = registration_loss(bundle, use_ic=options.use_reg_ic)
    _, rgl = regularization(bundle, lam, options.smooth_operator)
    terms = {**syn, **reg, **rgl}
    for name, value in terms.items():
        if not torch.isfinite(value):
            raise NonFiniteLossError(name)
    # accumulate in double so the total matches the sum of its reported parts
    total = sum(v.double() for k, v in terms.items() if k != "r_smooth") + lam * terms["r_smooth"].double()
    report = LossReport(lam=float(lam), total=total, **terms)
    return bundle, report
