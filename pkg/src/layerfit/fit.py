"""Per-pair optimization of the layered model with Adam and multi-start.

There is no training set and no network: each image pair gets its own fresh
latents (two affine motions plus the assignment field), optimized directly
against the photometric reconstruction loss, and the restart with the lowest
final loss wins.

Restart 0 is an informed proposal computed from the image pair alone:
an exhaustive integer-shift search finds the dominant translation, a second
search over the poorly-explained region finds a competing translation, and
each pixel is seeded to whichever motion explains it, with pixels neither
motion explains (about to be occluded) defaulting to the background layer.
Pure gradient descent from random noise was measured unable to reassign
interior pixels (the loss gradient senses only sub-pixel sliding of a
pixel's own landing, never a comparison between the two motions), so random
restarts alone stall in the all-pixels-one-layer minimum; they are kept as
fallback starts for motion patterns the translation search cannot seed.

Schedules: random restarts anneal the binning temperature from soft to
sharp so their masks can reorganize early; the informed restart starts
sharp, since softening it was measured to destroy a good initialization.
Both decay the learning rates geometrically over the second half so Adam,
whose steps otherwise stay at learning-rate scale, can settle. After every
step the assignment field is projected back onto [0, 1]: outside that range
the pipeline's clamp kills its gradient and Adam's momentum would strand
pixels there permanently.

Everything is deterministic given (inputs, config): restart seeds derive
from (seed, restart_index) only, the proposal uses no randomness, and
restart selection compares recorded scalars with the restart index as
tie-break, so running restarts in parallel cannot change the result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import numpy as np

from .affine import CoordMap
from .alpha import BinningConfig
from .imagery import bilinear_resize, validate_image
from .synthesis import Latents, LossReport, backward, photometric_loss, synthesize

MIN_SIDE = 16


class DegenerateFitError(RuntimeError):
    """Every restart ended fully dis-occluded or aborted; no usable result."""


@dataclass(frozen=True)
class FitConfig:
    lr_params: float = 0.02
    lr_alpha: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iters: int = 2000
    restarts: int = 5
    tau_start: float = 0.5
    tau_end: float = 0.05
    anneal_frac: float = 0.4
    lr_decay_floor: float = 0.01
    conv_rel_tol: float = 1e-6
    conv_window: int = 50
    eps_d: float = 1e-6
    search_radius: int = 9
    informed_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr_params <= 0 or self.lr_alpha <= 0:
            raise ValueError("learning rates must be positive")
        if self.restarts < 1:
            raise ValueError("need at least one restart")
        if not (0 < self.tau_end <= self.tau_start):
            raise ValueError("tau schedule must satisfy 0 < tau_end <= tau_start")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AdamState:
    m: Latents
    v: Latents
    t: int = 0

    @staticmethod
    def zeros_like(lat: Latents) -> "AdamState":
        def z(l):
            return Latents(
                np.zeros_like(l.params_fg), np.zeros_like(l.params_bg), np.zeros_like(l.p)
            )

        return AdamState(m=z(lat), v=z(lat), t=0)


@dataclass
class FitResult:
    latents: Latents
    final_loss: float
    final_report: LossReport
    loss_curve: list
    restart_index: int
    iterations: int
    restart_losses: list
    restart_flags: list


def tau_at(cfg: FitConfig, t: int) -> float:
    """Geometric temperature schedule over the first anneal_frac of iterations."""
    n = max(1, int(round(cfg.anneal_frac * cfg.max_iters)))
    if t >= n:
        return cfg.tau_end
    return cfg.tau_start * (cfg.tau_end / cfg.tau_start) ** (t / n)


def adam_step(
    lat: Latents, grad: Latents, st: AdamState, cfg: FitConfig
) -> tuple[Latents, AdamState]:
    """One bias-corrected Adam update; motions and the assignment field get
    separate learning rates (6 scalars versus a full pixel grid)."""
    if not grad.all_finite():
        raise ValueError("non-finite gradient")
    t = st.t + 1
    bc1 = 1.0 - cfg.beta1**t
    bc2 = 1.0 - cfg.beta2**t

    def upd(x, g, m, v, lr):
        m2 = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v2 = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        step = lr * (m2 / bc1) / (np.sqrt(v2 / bc2) + cfg.adam_eps)
        return x - step, m2, v2

    pf, mf, vf = upd(lat.params_fg, grad.params_fg, st.m.params_fg, st.v.params_fg, cfg.lr_params)
    pb, mb, vb = upd(lat.params_bg, grad.params_bg, st.m.params_bg, st.v.params_bg, cfg.lr_params)
    p, mp, vp = upd(lat.p, grad.p, st.m.p, st.v.p, cfg.lr_alpha)
    return Latents(pf, pb, p), AdamState(m=Latents(mf, mb, mp), v=Latents(vf, vb, vp), t=t)


def init_latents(width: int, height: int, restart_index: int, seed: int) -> Latents:
    """Random initialization, deterministic in (seed, restart_index).

    Motions start small (translations up to 0.1, linear terms up to 0.05 in
    normalized units). The assignment field starts at 0.5 plus low-frequency
    noise in [-0.2, 0.2]: spatially coherent blobs break the layer symmetry
    without saturating the binning.
    """
    if seed < 0 or restart_index < 0:
        raise ValueError("seed and restart_index must be non-negative")
    rng = np.random.default_rng([seed, restart_index])

    def draw_params():
        a = np.empty(6)
        a[0] = rng.uniform(-0.1, 0.1)
        a[1:3] = rng.uniform(-0.05, 0.05, 2)
        a[3] = rng.uniform(-0.1, 0.1)
        a[4:6] = rng.uniform(-0.05, 0.05, 2)
        return a

    params_fg = draw_params()
    params_bg = draw_params()
    gh = max(2, round(height / 12)) + 1
    gw = max(2, round(width / 12)) + 1
    coarse = rng.uniform(-1.0, 1.0, (gh, gw))
    p = 0.5 + 0.2 * bilinear_resize(coarse, height, width)
    return Latents(params_fg, params_bg, p)


def _box3(a: np.ndarray) -> np.ndarray:
    """3x3 box filter with edge replication, separable."""
    out = a.copy()
    out[1:] += a[:-1]
    out[:-1] += a[1:]
    out[0] += a[0]
    out[-1] += a[-1]
    o2 = out.copy()
    o2[:, 1:] += out[:, :-1]
    o2[:, :-1] += out[:, 1:]
    o2[:, 0] += out[:, 0]
    o2[:, -1] += out[:, -1]
    return o2 / 9.0


def _shift_residual(frame1: np.ndarray, frame2: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Mean absolute difference per pixel under an integer trial shift.

    Pixel x of frame 1 is compared against frame2(x + d); positions whose
    target falls outside the frame get +inf.
    """
    h, w = frame1.shape[:2]
    r = np.full((h, w), np.inf)
    xs0, xs1 = max(0, -dx), min(w, w - dx)
    ys0, ys1 = max(0, -dy), min(h, h - dy)
    if xs1 <= xs0 or ys1 <= ys0:
        return r
    a = frame1[ys0:ys1, xs0:xs1]
    b = frame2[ys0 + dy : ys1 + dy, xs0 + dx : xs1 + dx]
    r[ys0:ys1, xs0:xs1] = np.abs(b - a).mean(axis=2)
    return r


def propose_latents(frame1: np.ndarray, frame2: np.ndarray, search_radius: int = 9) -> Latents:
    """Deterministic two-motion proposal from the image pair alone.

    1. Exhaustive integer-shift search for the dominant translation.
    2. A second search restricted to the region the dominant shift fails to
       explain yields a competing translation.
    3. Each pixel is assigned to the motion that matches its content; pixels
       neither motion explains (typically background about to be occluded)
       default to the background layer. The minority region becomes the top
       layer. The assignment field is seeded at 0.15 / 0.85 so it is committed
       but still adjustable by the optimizer.

    Uses only the two frames; no ground truth, no precomputed flow.
    """
    frame1 = validate_image(frame1)
    frame2 = validate_image(frame2)
    h, w = frame1.shape[:2]
    rad = search_radius

    def best_shift(weight=None, exclude=None):
        best = None
        for dy in range(-rad, rad + 1):
            for dx in range(-rad, rad + 1):
                if exclude is not None and max(abs(dx - exclude[0]), abs(dy - exclude[1])) < 1:
                    continue
                r = _shift_residual(frame1, frame2, dx, dy)
                if weight is None:
                    m = np.isfinite(r)
                else:
                    m = weight & np.isfinite(r)
                if m.sum() < 30:
                    continue
                c = r[m].mean()
                if best is None or c < best[0]:
                    best = (c, dx, dy)
        return best

    _, dx1, dy1 = best_shift()
    r1 = _shift_residual(frame1, frame2, dx1, dy1)
    fin = np.isfinite(r1)
    r1f = np.where(fin, r1, r1[fin].max() if fin.any() else 1.0)
    thr = r1f.mean() + 0.5 * r1f.std()
    unexplained = _box3((r1f > thr).astype(np.float64)) > 0.4
    second = best_shift(weight=unexplained, exclude=(dx1, dy1))
    if second is None:
        dx2, dy2 = dx1, dy1
    else:
        _, dx2, dy2 = second

    big = 1e3
    r2 = _shift_residual(frame1, frame2, dx2, dy2)
    r1c = np.where(np.isfinite(r1), r1, big)
    r2c = np.where(np.isfinite(r2), r2, big)
    s1, s2 = _box3(r1c), _box3(r2c)
    match_r = 3.0 * np.median(np.minimum(r1c, r2c)) + 0.01
    match_s = 3.0 * np.median(np.minimum(s1, s2)) + 0.01
    # A pixel joins a motion when both its own content and its neighborhood
    # agree; unexplained pixels stay with the dominant layer.
    region2 = ((s2 < s1) & (r2c < match_r)) | ((r2c < r1c) & (s2 < match_s))
    if (dx2, dy2) == (dx1, dy1):
        region2 = np.zeros((h, w), dtype=bool)

    if region2.mean() <= 0.5:
        fg_d, bg_d, fg_region = (dx2, dy2), (dx1, dy1), region2
    else:
        region1 = ((s1 <= s2) & (r1c < match_r)) | ((r1c <= r2c) & (s1 < match_s))
        fg_d, bg_d, fg_region = (dx1, dy1), (dx2, dy2), region1

    sx = (w - 1) / 2.0 if w > 1 else 1.0
    sy = (h - 1) / 2.0 if h > 1 else 1.0
    params_fg = np.array([fg_d[0] / sx, 0.0, 0.0, fg_d[1] / sy, 0.0, 0.0])
    params_bg = np.array([bg_d[0] / sx, 0.0, 0.0, bg_d[1] / sy, 0.0, 0.0])
    p = 0.15 + 0.7 * fg_region.astype(np.float64)
    return Latents(params_fg, params_bg, p)


def _lr_scale(cfg: FitConfig, t: int, n_anneal: int) -> float:
    if t < n_anneal:
        return 1.0
    span = max(1, cfg.max_iters - n_anneal)
    return cfg.lr_decay_floor ** ((t - n_anneal) / span)


def _converged(curve: list, t: int, n_anneal: int, cfg: FitConfig) -> bool:
    if t < n_anneal + cfg.conv_window:
        return False
    ref = curve[t - cfg.conv_window]
    return abs(ref - curve[t]) <= cfg.conv_rel_tol * max(abs(curve[t]), 1e-12)


def fit_pair(frame1: np.ndarray, frame2: np.ndarray, cfg: FitConfig) -> FitResult:
    """Fit the two-layer model to one image pair and return the best restart.

    Restarts are scored by the loss at the final (sharpest) temperature so
    early-stopped and full-length runs are compared on the same objective.
    Raises DegenerateFitError when every restart ends aborted or fully
    dis-occluded.
    """
    frame1 = validate_image(frame1)
    frame2 = validate_image(frame2)
    if frame1.shape != frame2.shape:
        raise ValueError(f"frame shapes differ: {frame1.shape} vs {frame2.shape}")
    h, w = frame1.shape[:2]
    if h < MIN_SIDE or w < MIN_SIDE:
        raise ValueError(f"frames must be at least {MIN_SIDE}x{MIN_SIDE}, got {h}x{w}")

    cmap = CoordMap(w, h)
    n_anneal = max(1, int(round(cfg.anneal_frac * cfg.max_iters)))
    final_cfg = BinningConfig(tau=cfg.tau_end)

    outcomes = []
    for r in range(cfg.restarts):
        informed = cfg.informed_start and r == 0
        if informed:
            lat = propose_latents(frame1, frame2, cfg.search_radius)
        else:
            lat = init_latents(w, h, r, cfg.seed)
        st = AdamState.zeros_like(lat)
        curve: list[float] = []
        flag = "ok"
        iters = 0
        for t in range(cfg.max_iters):
            tau = cfg.tau_end if informed else tau_at(cfg, t)
            bin_cfg = BinningConfig(tau=tau)
            tape = synthesize(frame1, lat, bin_cfg, cmap, eps_d=cfg.eps_d)
            rep = photometric_loss(frame2, tape)
            curve.append(rep.loss)
            iters = t + 1
            if rep.degenerate:
                # No valid pixels, no gradient; nothing further can happen.
                flag = "degenerate"
                break
            grad = backward(tape, frame2, bin_cfg, cmap)
            if not grad.all_finite():
                flag = "aborted"
                break
            scale = _lr_scale(cfg, t, n_anneal)
            step_cfg = (
                cfg
                if scale == 1.0
                else FitConfig(
                    **{**cfg.to_dict(), "lr_params": cfg.lr_params * scale, "lr_alpha": cfg.lr_alpha * scale}
                )
            )
            lat, st = adam_step(lat, grad, st, step_cfg)
            np.clip(lat.p, 0.0, 1.0, out=lat.p)
            if _converged(curve, t, n_anneal, cfg):
                break
        tape_f = synthesize(frame1, lat, final_cfg, cmap, eps_d=cfg.eps_d)
        rep_f = photometric_loss(frame2, tape_f)
        if flag == "ok" and rep_f.degenerate:
            flag = "degenerate"
        outcomes.append((lat, rep_f, curve, iters, flag))

    usable = [i for i, o in enumerate(outcomes) if o[4] == "ok"]
    if not usable:
        raise DegenerateFitError(
            f"all {cfg.restarts} restarts degenerate or aborted "
            f"(flags: {[o[4] for o in outcomes]})"
        )
    best = min(usable, key=lambda i: (outcomes[i][1].loss, i))
    lat, rep_f, curve, iters, _ = outcomes[best]
    return FitResult(
        latents=lat,
        final_loss=rep_f.loss,
        final_report=rep_f,
        loss_curve=curve,
        restart_index=best,
        iterations=iters,
        restart_losses=[(o[1].loss if o[4] == "ok" else math.inf) for o in outcomes],
        restart_flags=[o[4] for o in outcomes],
    )
