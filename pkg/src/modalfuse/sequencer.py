"""Sequence construction: slice triples, K x K patching, canonical flattening.

A (B, M, C, D, H, W) batch becomes (B*M*C*(D/3)*K*K, 3, H/K, W/K) patch
images: consecutive non-overlapping slice triples form the 3 channels and
each triple image is cut into a K x K grid. The canonical flat order is
sample-major, then modality, then channel, then slice triple, then grid
row, then grid column (ORDER_VERSION pins it).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError

ORDER_VERSION = 1


@dataclass(frozen=True)
class SequencePlan:
    """Bookkeeping for one patching run; enough to invert the flattening."""

    batch: int
    modalities: int
    channels: int
    depth: int
    height: int
    width: int
    k: int

    @property
    def triple_count(self) -> int:
        return self.depth // 3

    @property
    def tokens_per_sample(self) -> int:
        return self.modalities * self.channels * self.triple_count * self.k * self.k

    @property
    def total_patches(self) -> int:
        return self.batch * self.tokens_per_sample

    @property
    def patch_extent(self) -> tuple[int, int, int]:
        return (3, self.height // self.k, self.width // self.k)


def check_divisibility(depth: int, height: int, width: int, k: int) -> None:
    if depth % 3 != 0:
        raise ContractError(f"depth {depth} not divisible by 3 (slice triples)")
    if height % k != 0:
        raise ContractError(f"height {height} not divisible by K={k}")
    if width % k != 0:
        raise ContractError(f"width {width} not divisible by K={k}")


def build_patch_batch(volumes: np.ndarray, k: int) -> tuple[np.ndarray, SequencePlan]:
    """Serialize a (B, M, C, D, H, W) array into patch images.

    Returns the (total, 3, H/K, W/K) patch array and the plan describing
    the canonical order. Lossless: see ``invert_patch_batch``.
    """
    if volumes.ndim != 6:
        raise ContractError(f"expected (B,M,C,D,H,W) volume batch, got {volumes.shape}")
    b, m, c, d, h, w = volumes.shape
    k = int(k)
    if k < 1:
        raise ContractError(f"K must be >= 1, got {k}")
    check_divisibility(d, h, w, k)
    plan = SequencePlan(b, m, c, d, h, w, k)
    t, ph, pw = d // 3, h // k, w // k
    tiled = volumes.reshape(b, m, c, t, 3, k, ph, k, pw)
    # (b, m, c, t, gy, gx, channel, i, j) then flatten the leading six axes
    patches = tiled.transpose(0, 1, 2, 3, 5, 7, 4, 6, 8)
    patches = np.ascontiguousarray(patches).reshape(plan.total_patches, 3, ph, pw)
    return patches, plan


def invert_patch_batch(patches: np.ndarray, plan: SequencePlan) -> np.ndarray:
    """Reassemble the original (B, M, C, D, H, W) array from patches."""
    b, m, c = plan.batch, plan.modalities, plan.channels
    t, k = plan.triple_count, plan.k
    ph, pw = plan.height // k, plan.width // k
    if patches.shape != (plan.total_patches, 3, ph, pw):
        raise ContractError(
            f"patch array shape {patches.shape} does not match plan "
            f"{(plan.total_patches, 3, ph, pw)}")
    tiled = patches.reshape(b, m, c, t, k, k, 3, ph, pw)
    tiled = tiled.transpose(0, 1, 2, 3, 6, 4, 7, 5, 8)
    return np.ascontiguousarray(tiled).reshape(
        b, m, c, plan.depth, plan.height, plan.width)


def regroup_tokens(features: np.ndarray, plan: SequencePlan) -> np.ndarray:
    """Regroup flat per-patch features (total, P) to (B, tokens, P)."""
    if features.ndim != 2 or features.shape[0] != plan.total_patches:
        raise ContractError(
            f"feature count {features.shape} does not match plan total "
            f"{plan.total_patches}")
    return features.reshape(plan.batch, plan.tokens_per_sample, features.shape[1])
