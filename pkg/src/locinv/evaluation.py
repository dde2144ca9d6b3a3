"""Attention IoU curves, method comparison, and image-fidelity metrics."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Optional, Sequence

import numpy as np
from scipy import ndimage

from .attention import AttentionSnapshot, mean_snapshot, normalize_map
from .errors import InputError

log = logging.getLogger(__name__)

THRESHOLDS = np.linspace(0.0, 1.0, 101)


@dataclass
class IoUCurve:
    thresholds: np.ndarray
    iou: np.ndarray
    noun_position: int = -1
    timestep_policy: str = "mean-over-final-k"

    @property
    def auc(self) -> float:
        return float(np.trapezoid(self.iou, self.thresholds))

    @property
    def peak(self) -> float:
        return float(self.iou.max())


def iou_curve(grid: np.ndarray, mask: np.ndarray, noun_position: int = -1,
              thresholds: np.ndarray = THRESHOLDS, policy: str = "mean-over-final-k") -> IoUCurve:
    """IoU of ``grid >= theta`` against ``mask`` for every threshold; an empty union counts as 1."""
    grid = np.asarray(grid, np.float64)
    mask = np.asarray(mask, bool)
    if grid.shape != mask.shape:
        raise InputError(f"map shape {grid.shape} != mask shape {mask.shape}")
    pred = grid[None] >= thresholds[:, None, None]
    inter = (pred & mask[None]).sum(axis=(1, 2))
    union = (pred | mask[None]).sum(axis=(1, 2))
    iou = np.where(union > 0, inter / np.maximum(union, 1), 1.0)
    return IoUCurve(thresholds.copy(), iou, noun_position, policy)


def select_snapshot(snaps: Mapping[int, AttentionSnapshot], policy: str = "mean-over-final-k",
                    k: int = 10, t: Optional[int] = None) -> AttentionSnapshot:
    if policy == "per-t":
        if t not in snaps:
            raise InputError(f"no snapshot at t={t}")
        return snaps[t]
    if policy != "mean-over-final-k":
        raise InputError(f"unknown timestep policy {policy!r}")
    final = [snaps[s] for s in sorted(snaps)[:k]]
    if not final:
        raise InputError("no snapshots to average")
    return mean_snapshot(final)


def entry_curves(snaps: Mapping[int, AttentionSnapshot], targets: Mapping[int, np.ndarray],
                 policy: str = "mean-over-final-k", k: int = 10, t: Optional[int] = None
                 ) -> list[IoUCurve]:
    snap = select_snapshot(snaps, policy, k, t)
    out = []
    for pos, mask in sorted(targets.items()):
        grid = normalize_map(snap.maps[pos].detach().cpu().numpy().astype(np.float64))
        out.append(iou_curve(grid, mask, pos, policy=policy))
    return out


@dataclass
class MethodComparison:
    thresholds: np.ndarray
    curves: dict[str, np.ndarray]
    summary: dict[str, dict] = field(default_factory=dict)

    def rows(self):
        for method, curve in self.curves.items():
            for th, v in zip(self.thresholds, curve):
                yield {"threshold": round(float(th), 2), "method": method, "mean_iou": float(v)}

    def to_csv(self, path):
        import csv

        with open(path, "w", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=["threshold", "method", "mean_iou"])
            writer.writeheader()
            for row in self.rows():
                writer.writerow(row)


def compare_methods(dumps: Mapping[str, Mapping[str, Mapping[int, AttentionSnapshot]]],
                    targets: Mapping[str, Mapping[int, np.ndarray]],
                    policy: str = "mean-over-final-k", k: int = 10, t: Optional[int] = None
                    ) -> MethodComparison:
    """Mean IoU curve per method over every (entry, noun); missing dumps are skipped."""
    if not dumps:
        raise InputError("no methods to compare")
    resolutions = {s.resolution for per_entry in dumps.values() for snaps in per_entry.values()
                   for s in snaps.values()}
    if len(resolutions) > 1:
        raise InputError(f"attention dumps disagree in resolution: {sorted(resolutions)}")
    curves, summary = {}, {}
    for method, per_entry in dumps.items():
        collected, skipped = [], []
        for entry_id in sorted(targets):
            snaps = per_entry.get(entry_id)
            if not snaps:
                log.warning("method %s has no attention dump for entry %s", method, entry_id)
                skipped.append(entry_id)
                continue
            collected += entry_curves(snaps, targets[entry_id], policy, k, t)
        if collected:
            mean = np.mean([c.iou for c in collected], axis=0)
        else:
            mean = np.full_like(THRESHOLDS, np.nan)
        curves[method] = mean
        summary[method] = {
            "auc": float(np.trapezoid(mean, THRESHOLDS)) if collected else None,
            "peak_iou": float(mean.max()) if collected else None,
            "peak_threshold": float(THRESHOLDS[int(np.argmax(mean))]) if collected else None,
            "curves": len(collected),
            "skipped_entries": skipped,
        }
    return MethodComparison(THRESHOLDS.copy(), curves, summary)


# --- image metrics -------------------------------------------------------------

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def ssim_map(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> np.ndarray:
    """Gaussian-window SSIM map of two single-channel images (population covariances)."""
    a = a.astype(np.float64)
    b = b.astype(np.float64)

    def blur(x):
        return ndimage.gaussian_filter(x, SSIM_SIGMA, mode="reflect", truncate=SSIM_TRUNCATE)

    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a ** 2
    var_b = blur(b * b) - mu_b ** 2
    cov = blur(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    return ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2))


def _ssim_pad() -> int:
    return int(SSIM_TRUNCATE * SSIM_SIGMA + 0.5)


def ssim(a: np.ndarray, b: np.ndarray, region: Optional[np.ndarray] = None) -> float:
    """Mean SSIM over channels of [C, H, W] images.

    Without ``region`` the border of half a window is excluded, as in Wang et
    al.; with a boolean ``region`` the SSIM map is averaged over those pixels.
    """
    a, b = _chw(a), _chw(b)
    pad = _ssim_pad()
    if min(a.shape[-2:]) <= 2 * pad:
        raise InputError(f"SSIM needs images larger than {2 * pad} pixels, got {a.shape[-2:]}")
    vals = []
    for ca, cb in zip(a, b):
        s = ssim_map(ca, cb)
        if region is None:
            vals.append(s[pad:-pad, pad:-pad].mean())
        else:
            vals.append(s[region].mean())
    return float(np.mean(vals))


def _chw(x) -> np.ndarray:
    x = np.asarray(x, np.float64)
    return x[None] if x.ndim == 2 else x


def psnr_from_mse(mse: float, data_range: float = 1.0) -> float:
    return math.inf if mse == 0 else 10 * math.log10(data_range ** 2 / mse)


MetricProvider = Callable[[np.ndarray, np.ndarray, Optional[np.ndarray]], float]
_PROVIDERS: dict[str, MetricProvider] = {}


def register_metric_provider(name: str, fn: MetricProvider):
    """Register an extra metric (LPIPS, CLIP score, DINO similarity...)."""
    _PROVIDERS[name] = fn


def unregister_metric_provider(name: str):
    _PROVIDERS.pop(name, None)


@dataclass
class MetricReport:
    full: dict
    background: Optional[dict]
    pixels: dict
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"full": _jsonable(self.full), "background": _jsonable(self.background),
                "pixels": self.pixels, "extra": _jsonable(self.extra)}


def _jsonable(d):
    if d is None:
        return None
    return {k: ("inf" if isinstance(v, float) and math.isinf(v) else v) for k, v in d.items()}


def image_metrics(edited, reference, background_mask: Optional[np.ndarray] = None) -> MetricReport:
    """MSE / PSNR / SSIM over the full image and over the background.

    ``background_mask`` is True on background pixels (outside the edited
    object's prior). Background metrics are ``None`` when that region is empty;
    SSIM is ``None`` for images smaller than its window.
    """
    e, r = _chw(edited), _chw(reference)
    if e.shape != r.shape:
        raise InputError(f"image shapes differ: {e.shape} vs {r.shape}")
    if e.min() < 0 or e.max() > 1 or r.min() < 0 or r.max() > 1:
        raise InputError("images must lie in [0, 1]")
    h, w = e.shape[-2:]
    diff2 = (e - r) ** 2
    mse = float(diff2.mean())
    with_ssim = min(h, w) > 2 * _ssim_pad()
    full = {"mse": mse, "psnr": psnr_from_mse(mse), "ssim": ssim(e, r) if with_ssim else None}
    bg = None
    n_bg = 0
    if background_mask is not None:
        m = np.asarray(background_mask, bool)
        if m.shape != (h, w):
            raise InputError(f"background mask {m.shape} does not match image {(h, w)}")
        n_bg = int(m.sum())
        if n_bg:
            bmse = float(diff2[:, m].mean())
            bg = {"mse": bmse, "psnr": psnr_from_mse(bmse),
                  "ssim": ssim(e, r, region=m) if with_ssim else None}
    pixels = {"total": h * w, "background": n_bg, "foreground": h * w - n_bg}
    extra = {name: float(fn(e, r, background_mask)) for name, fn in _PROVIDERS.items()}
    return MetricReport(full, bg, pixels, extra)


def aggregate_reports(reports: Sequence[MetricReport]) -> dict:
    """Mean of each metric over the reports (infinite PSNRs are excluded from the mean)."""
    out = {}
    for part in ("full", "background"):
        keys = sorted({k for r in reports for k in (getattr(r, part) or {})})
        agg = {}
        for k in keys:
            vals = [getattr(r, part)[k] for r in reports
                    if getattr(r, part) and getattr(r, part).get(k) is not None]
            finite = [v for v in vals if math.isfinite(v)]
            agg[k] = float(np.mean(finite)) if finite else ("inf" if vals else None)
        out[part] = agg
    out["count"] = len(reports)
    return out
