"""Aggregation of captured cross-attention into per-token spatial maps."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .adapters.base import AttentionSink
from .errors import InputError


@dataclass
class AttentionSnapshot:
    t: int
    maps: torch.Tensor  # [num_tokens, r, r], unnormalized (mean of softmax rows)
    layer_count: int
    d_key: int

    @property
    def resolution(self) -> int:
        return self.maps.shape[-1]

    @property
    def num_tokens(self) -> int:
        return self.maps.shape[0]

    def detach(self) -> "AttentionSnapshot":
        return AttentionSnapshot(self.t, self.maps.detach().clone(), self.layer_count, self.d_key)

    def numpy(self) -> np.ndarray:
        return self.maps.detach().cpu().numpy().astype(np.float32)


@dataclass
class TokenMap:
    grid: np.ndarray  # [r, r]
    token_position: int


def aggregate(sink: AttentionSink, resolution: int, t: int = 0,
              layer_ids: Optional[Sequence[str]] = None) -> AttentionSnapshot:
    """Mean over heads and over every captured cross-attention layer at ``resolution``."""
    if not sink.records:
        raise InputError("attention sink is empty")
    picked = [w for lid, r, w in sink.records
              if r == resolution and (layer_ids is None or lid in layer_ids)]
    if not picked:
        available = sorted({r for _, r, _ in sink.records})
        raise InputError(f"no cross-attention layer at resolution {resolution}; available: {available}")
    per_layer = torch.stack([w.mean(dim=0) for w in picked])  # [layers, r*r, tokens]
    mean = per_layer.mean(dim=0)
    hw, tokens = mean.shape
    if hw != resolution * resolution:
        raise InputError(f"layer maps have {hw} cells, expected {resolution}x{resolution}")
    maps = mean.transpose(0, 1).reshape(tokens, resolution, resolution)
    return AttentionSnapshot(t, maps, len(picked), tokens)


def token_map(snap: AttentionSnapshot, position: int, normalize: bool = True) -> TokenMap:
    if not 0 <= position < snap.num_tokens:
        raise InputError(f"token position {position} outside [0, {snap.num_tokens})")
    grid = snap.maps[position].detach().cpu().numpy().astype(np.float64)
    if normalize:
        grid = normalize_map(grid)
    return TokenMap(grid, position)


def normalize_map(grid: np.ndarray) -> np.ndarray:
    peak = grid.max()
    return grid / peak if peak > 0 else np.zeros_like(grid)


def mean_snapshot(snaps: Sequence[AttentionSnapshot]) -> AttentionSnapshot:
    maps = torch.stack([s.maps.detach() for s in snaps]).mean(dim=0)
    return AttentionSnapshot(min(s.t for s in snaps), maps, snaps[0].layer_count, snaps[0].d_key)


# Snapshots on disk are plain .npy files: the npy header carries the shape and
# dtype, the payload is the row-major float32 grid stack.

def save_snapshot(snap: AttentionSnapshot, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, snap.numpy())
    return path


def snapshot_path(directory, t: int) -> Path:
    return Path(directory) / f"t{t:03d}.npy"


def load_snapshot(path, t: Optional[int] = None) -> AttentionSnapshot:
    path = Path(path)
    arr = np.load(path)
    if arr.ndim != 3 or arr.shape[1] != arr.shape[2]:
        raise InputError(f"{path}: expected [tokens, r, r], got {arr.shape}")
    if t is None:
        t = int(path.stem.lstrip("t"))
    return AttentionSnapshot(t, torch.from_numpy(arr), 1, arr.shape[0])


def load_snapshots(directory) -> dict[int, AttentionSnapshot]:
    return {s.t: s for s in (load_snapshot(p) for p in sorted(Path(directory).glob("t*.npy")))}


def cell_sums_ok(snap: AttentionSnapshot, tol: float = 1e-4) -> bool:
    sums = snap.maps.detach().sum(dim=0)
    return bool(torch.all((sums - 1).abs() <= tol)) and bool(torch.all(snap.maps >= 0))

