"""Two-layer synthesis of the second frame and its photometric objective.

Frame 1 is split into a foreground layer (closer to the camera) and a
background layer by a scalar latent field p. Each layer owns an affine
motion; layer pixels are transported by forward splatting and recomposited
with the foreground occluding the background. Output pixels covered by
neither layer are flagged dis-occluded and excluded from the loss.

Forward recipe (all intermediates retained on a tape):

    pc            = clamp01(p)
    (ab, af)      = softmax_binning(pc)            # bin 0 -> background
    (ab, af)      = maxout_disjoint(ab, af)        # disjoint support
    flow_fg/bg    = dense_flow(params_fg/bg)
    w_fg/bg       = alpha * flow                   # continuous alpha scales flow
    L_fg/bg       = binarize(alpha) * frame1       # hard alpha gates intensity
    Lhat_fg/bg    = splat(L, w)
    ahat          = splat(af, w_fg)
    frame2_hat    = bin(ahat) * Lhat_fg + (1 - bin(ahat)) * Lhat_bg

The two binarize steps are constants in the backward pass. The gradient for
p therefore flows only through the alpha-scaled flows, and the gradient for
the motion parameters only through the splat geometry. A `relaxed` mode
replaces both binarize steps with the identity in forward and backward; it
exists so the assembled chain rule can be checked against finite differences
in a setting with no gradient-stopped paths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .affine import CoordMap, dense_flow, flow_param_vjp, validate_params
from .alpha import (
    BinningConfig,
    binarize,
    clamp01,
    clamp01_vjp,
    maxout_disjoint,
    maxout_disjoint_vjp,
    softmax_binning,
    softmax_binning_vjp,
)
from .imagery import validate_image
from .splat import SplatPlan

CHARBONNIER_EPS = 1e-3
DEFAULT_EPS_D = 1e-6
BIN_THRESHOLD = 0.5


@dataclass
class Latents:
    """Everything the fit optimizes: two motions and the assignment field.

    p is stored pre-clamp; the pipeline applies clamp01 on entry. Also used
    as the container for gradients with the same layout.
    """

    params_fg: np.ndarray
    params_bg: np.ndarray
    p: np.ndarray

    def copy(self) -> "Latents":
        return Latents(self.params_fg.copy(), self.params_bg.copy(), self.p.copy())

    def all_finite(self) -> bool:
        return bool(
            np.isfinite(self.params_fg).all()
            and np.isfinite(self.params_bg).all()
            and np.isfinite(self.p).all()
        )


@dataclass
class SynthesisTape:
    """All intermediates of one forward synthesis, for backward and debugging."""

    frame1: np.ndarray
    p: np.ndarray
    pc: np.ndarray
    alpha_bg_pre: np.ndarray
    alpha_fg_pre: np.ndarray
    alpha_bg: np.ndarray
    alpha_fg: np.ndarray
    mask_bg: np.ndarray
    mask_fg: np.ndarray
    flow_fg: np.ndarray
    flow_bg: np.ndarray
    w_fg: np.ndarray
    w_bg: np.ndarray
    layer_fg: np.ndarray
    layer_bg: np.ndarray
    layer_fg_warped: np.ndarray
    layer_bg_warped: np.ndarray
    alpha_fg_warped: np.ndarray
    alpha_hat_mask: np.ndarray
    frame2_hat: np.ndarray
    disoccluded: np.ndarray
    relaxed: bool = False
    selector: np.ndarray | None = field(default=None, repr=False)
    plan_fg: SplatPlan | None = field(default=None, repr=False)
    plan_bg: SplatPlan | None = field(default=None, repr=False)


@dataclass(frozen=True)
class LossReport:
    loss: float
    valid_pixel_count: int
    disoccluded_count: int

    @property
    def degenerate(self) -> bool:
        """True when every pixel is dis-occluded and the loss is vacuously 0."""
        return self.valid_pixel_count == 0


def disocclusion_mask(frame2_hat: np.ndarray, epsilon: float = DEFAULT_EPS_D) -> np.ndarray:
    """Mark pixels no layer covered: all channels within epsilon of zero.

    The mask is a constant in the backward pass.
    """
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")
    return (np.abs(frame2_hat) <= epsilon).all(axis=2).astype(np.uint8)


def charbonnier(x: np.ndarray, eps: float = CHARBONNIER_EPS) -> np.ndarray:
    """Robust penalty sqrt(x^2 + eps^2); smooth everywhere, |x| for large x."""
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(x * x + eps * eps)


def charbonnier_deriv(x: np.ndarray, eps: float = CHARBONNIER_EPS) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x / np.sqrt(x * x + eps * eps)


def synthesize(
    frame1: np.ndarray,
    lat: Latents,
    cfg: BinningConfig,
    cmap: CoordMap,
    eps_d: float = DEFAULT_EPS_D,
    relaxed: bool = False,
) -> SynthesisTape:
    """Run the full layered forward pass and return the tape."""
    frame1 = validate_image(frame1)
    h, w = frame1.shape[:2]
    if (cmap.height, cmap.width) != (h, w):
        raise ValueError(f"coordinate map {cmap.height}x{cmap.width} does not match frame {h}x{w}")
    if lat.p.shape != (h, w):
        raise ValueError(f"latent field shape {lat.p.shape} does not match frame {h}x{w}")
    validate_params(lat.params_fg)
    validate_params(lat.params_bg)

    pc = clamp01(lat.p)
    ab_pre, af_pre = softmax_binning(pc, cfg)
    ab, af = maxout_disjoint(ab_pre, af_pre)
    mask_fg = binarize(af, BIN_THRESHOLD)
    mask_bg = binarize(ab, BIN_THRESHOLD)

    flow_fg = dense_flow(lat.params_fg, cmap)
    flow_bg = dense_flow(lat.params_bg, cmap)
    w_fg = af[:, :, None] * flow_fg
    w_bg = ab[:, :, None] * flow_bg

    if relaxed:
        layer_fg = af[:, :, None] * frame1
        layer_bg = ab[:, :, None] * frame1
    else:
        layer_fg = mask_fg[:, :, None] * frame1
        layer_bg = mask_bg[:, :, None] * frame1

    # The intensity and alpha of the foreground ride the same flow; splat them
    # as one stacked field so the landing geometry is computed once. The plans
    # are kept on the tape for the backward pass.
    plan_fg = SplatPlan(w_fg)
    plan_bg = SplatPlan(w_bg)
    stacked = plan_fg.splat(np.concatenate([layer_fg, af[:, :, None]], axis=2))
    layer_fg_warped = stacked[:, :, :3]
    alpha_fg_warped = stacked[:, :, 3]
    layer_bg_warped = plan_bg.splat(layer_bg)

    # Overlapping footprints of a single layer can push the warped alpha a
    # hair above 1; clip before thresholding / selecting.
    ahat_clipped = np.clip(alpha_fg_warped, 0.0, 1.0)
    alpha_hat_mask = binarize(ahat_clipped, BIN_THRESHOLD)
    if relaxed:
        selector = ahat_clipped
        frame2_hat = selector[:, :, None] * layer_fg_warped + (1.0 - selector[:, :, None]) * layer_bg_warped
    else:
        selector = None
        sel = alpha_hat_mask[:, :, None].astype(np.float64)
        frame2_hat = sel * layer_fg_warped + (1.0 - sel) * layer_bg_warped

    disoccluded = disocclusion_mask(frame2_hat, eps_d)

    return SynthesisTape(
        frame1=frame1,
        p=np.asarray(lat.p, dtype=np.float64),
        pc=pc,
        alpha_bg_pre=ab_pre,
        alpha_fg_pre=af_pre,
        alpha_bg=ab,
        alpha_fg=af,
        mask_bg=mask_bg,
        mask_fg=mask_fg,
        flow_fg=flow_fg,
        flow_bg=flow_bg,
        w_fg=w_fg,
        w_bg=w_bg,
        layer_fg=layer_fg,
        layer_bg=layer_bg,
        layer_fg_warped=layer_fg_warped,
        layer_bg_warped=layer_bg_warped,
        alpha_fg_warped=alpha_fg_warped,
        alpha_hat_mask=alpha_hat_mask,
        frame2_hat=frame2_hat,
        disoccluded=disoccluded,
        relaxed=relaxed,
        selector=selector,
        plan_fg=plan_fg,
        plan_bg=plan_bg,
    )


def photometric_loss(
    frame2: np.ndarray, tape: SynthesisTape, eps_d: float | None = None
) -> LossReport:
    """Robust reconstruction loss over non-dis-occluded pixels.

    Summed over pixels and the three channels. eps_d recomputes the
    dis-occlusion mask at a different tolerance; by default the tape's mask
    is reused so forward, loss, and backward all see the same valid region.
    """
    frame2 = validate_image(frame2)
    if frame2.shape != tape.frame2_hat.shape:
        raise ValueError(
            f"frame2 shape {frame2.shape} does not match synthesis {tape.frame2_hat.shape}"
        )
    d = tape.disoccluded if eps_d is None else disocclusion_mask(tape.frame2_hat, eps_d)
    valid = (1.0 - d).astype(np.float64)
    loss = float((valid[:, :, None] * charbonnier(frame2 - tape.frame2_hat)).sum())
    n_dis = int(d.sum())
    return LossReport(
        loss=loss,
        valid_pixel_count=int(d.size - n_dis),
        disoccluded_count=n_dis,
    )


def backward(
    tape: SynthesisTape, frame2: np.ndarray, cfg: BinningConfig, cmap: CoordMap
) -> Latents:
    """Reverse-mode gradient of the photometric loss for (params_fg, params_bg, p).

    The dis-occlusion mask and both binarize steps are constants, so in the
    standard mode the p-gradient arrives exclusively through the alpha-scaled
    flows and the motion gradients through the splat geometry. On a relaxed
    tape the binarize steps were the identity and the extra continuous paths
    (alpha-gated intensities, warped-alpha compositing) are included.
    """
    frame2 = validate_image(frame2)
    if frame2.shape != tape.frame2_hat.shape:
        raise ValueError(
            f"frame2 shape {frame2.shape} does not match synthesis {tape.frame2_hat.shape}"
        )
    valid = (1.0 - tape.disoccluded).astype(np.float64)[:, :, None]
    g_f2hat = valid * charbonnier_deriv(tape.frame2_hat - frame2)

    if tape.relaxed:
        sel = tape.selector[:, :, None]
    else:
        sel = tape.alpha_hat_mask[:, :, None].astype(np.float64)
    g_lhat_fg = sel * g_f2hat
    g_lhat_bg = (1.0 - sel) * g_f2hat

    if tape.relaxed:
        # Selector path: frame2_hat depends on the clipped warped alpha. Its
        # cotangent rides the same flow as the intensity splat, so pull both
        # back in one stacked vjp; the flow cotangent must be complete before
        # w = alpha * flow is split below.
        g_sel = (g_f2hat * (tape.layer_fg_warped - tape.layer_bg_warped)).sum(axis=2)
        inside = (tape.alpha_fg_warped > 0.0) & (tape.alpha_fg_warped < 1.0)
        g_ahat = g_sel * inside
        g_stacked, g_wfg = tape.plan_fg.vjp(
            np.concatenate([g_lhat_fg, g_ahat[:, :, None]], axis=2),
            np.concatenate([tape.layer_fg, tape.alpha_fg[:, :, None]], axis=2),
        )
        g_layer_fg = g_stacked[:, :, :3]
        g_af_splat = g_stacked[:, :, 3]
    else:
        g_layer_fg, g_wfg = tape.plan_fg.vjp(g_lhat_fg, tape.layer_fg)
    g_layer_bg, g_wbg = tape.plan_bg.vjp(g_lhat_bg, tape.layer_bg)

    # w = alpha * flow splits its cotangent into both factors.
    g_af = (g_wfg * tape.flow_fg).sum(axis=2)
    g_ab = (g_wbg * tape.flow_bg).sum(axis=2)

    if tape.relaxed:
        g_af = g_af + g_af_splat
        # Alpha-gated intensity path (binarize replaced by identity).
        g_af = g_af + (g_layer_fg * tape.frame1).sum(axis=2)
        g_ab = g_ab + (g_layer_bg * tape.frame1).sum(axis=2)

    g_flow_fg = g_wfg * tape.alpha_fg[:, :, None]
    g_flow_bg = g_wbg * tape.alpha_bg[:, :, None]
    g_params_fg = flow_param_vjp(g_flow_fg, cmap)
    g_params_bg = flow_param_vjp(g_flow_bg, cmap)

    g_ab_pre, g_af_pre = maxout_disjoint_vjp(g_ab, g_af, tape.alpha_bg_pre, tape.alpha_fg_pre)
    g_pc = softmax_binning_vjp(g_ab_pre, g_af_pre, tape.alpha_bg_pre, tape.alpha_fg_pre, cfg)
    g_p = clamp01_vjp(g_pc, tape.p)

    return Latents(params_fg=g_params_fg, params_bg=g_params_bg, p=g_p)
