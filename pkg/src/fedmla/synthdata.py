"""Deterministic multi-domain segmentation data.

Every sample is a smooth blob on a textured background. Geometry comes from a
per-sample content seed; each domain then applies its own intensity style
``a * x**gamma + b + noise``, so masks never depend on style.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

MAX_DOMAINS = 8
MIN_PER_DOMAIN = 20
MAX_RETRIES = 16


@dataclass(frozen=True)
class DomainStyle:
    scale: float = 1.0
    offset: float = 0.0
    gamma: float = 1.0
    texture_freq: float = 2.0
    noise: float = 0.0

    def __post_init__(self):
        if not 0.3 <= self.scale <= 3.0:
            raise ValueError(f"scale must lie in [0.3, 3], got {self.scale}")
        if not 0.5 <= self.gamma <= 2.0:
            raise ValueError(f"gamma must lie in [0.5, 2], got {self.gamma}")
        if not 0.0 <= self.noise <= 0.1:
            raise ValueError(f"noise must lie in [0, 0.1], got {self.noise}")
        if self.texture_freq <= 0:
            raise ValueError("texture_freq must be positive")

    @property
    def is_identity(self) -> bool:
        return self.scale == 1.0 and self.offset == 0.0 and self.gamma == 1.0 and self.noise == 0.0


# Index 0 is the canonical (identity) domain. Entries are spaced so that domain
# intensity means stay at least 0.1 apart; the golden test pins this table.
_STYLE_TABLE: Tuple[DomainStyle, ...] = (
    DomainStyle(1.0, 0.0, 1.0, 2.0, 0.0),
    DomainStyle(1.3, -0.32, 0.8, 3.0, 0.03),
    DomainStyle(0.8, 0.27, 1.3, 4.0, 0.02),
    DomainStyle(1.6, 0.15, 1.2, 2.5, 0.05),
    DomainStyle(0.5, -0.09, 0.9, 5.0, 0.04),
    DomainStyle(1.1, 0.51, 1.6, 3.5, 0.01),
    DomainStyle(2.0, -0.17, 0.6, 1.5, 0.06),
    DomainStyle(0.6, 0.8, 1.1, 4.5, 0.08),
)


def default_styles(k_plus_1: int) -> List[DomainStyle]:
    if not 1 <= k_plus_1 <= MAX_DOMAINS:
        raise ValueError(f"default_styles supports 1..{MAX_DOMAINS} domains, got {k_plus_1}")
    return list(_STYLE_TABLE[:k_plus_1])


def apply_style(content: np.ndarray, style: DomainStyle,
                rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Map a content image in [0, 1] to a styled image (no clamping)."""
    out = style.scale * np.power(content, style.gamma) + style.offset
    if style.noise > 0:
        if rng is None:
            raise ValueError("a noisy style needs an rng")
        out = out + rng.normal(0.0, style.noise, size=content.shape)
    return out


def _blob_mask(rng: np.random.Generator, size: int, scale: float = 1.0,
               center: Optional[Tuple[float, float]] = None) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(float) + 0.5
    mask = np.zeros((size, size), dtype=bool)
    if center is None:
        center = tuple(rng.uniform(0.35, 0.65, size=2) * size)
    for _ in range(int(rng.integers(2, 5))):
        cy = center[0] + rng.normal(0.0, 0.07 * size * scale)
        cx = center[1] + rng.normal(0.0, 0.07 * size * scale)
        ry, rx = rng.uniform(0.10, 0.22, size=2) * size * scale
        theta = rng.uniform(0, np.pi)
        amp, lobes, phase = rng.uniform(0.0, 0.15), int(rng.integers(2, 6)), rng.uniform(0, 2 * np.pi)
        dy, dx = yy - cy, xx - cx
        u = dx * np.cos(theta) + dy * np.sin(theta)
        v = -dx * np.sin(theta) + dy * np.cos(theta)
        rho = np.sqrt((u / rx) ** 2 + (v / ry) ** 2)
        ang = np.arctan2(v / ry, u / rx)
        mask |= rho < 1.0 + amp * np.sin(lobes * ang + phase)
    return mask


def render_content(content_seed, size: int, texture_freq: float = 2.0,
                   structures: int = 1) -> Tuple[np.ndarray, np.ndarray]:
    """Content image in [0, 1] (H x W) and masks (structures x H x W, uint8).

    The masks depend on ``content_seed`` only; ``texture_freq`` changes the
    background pattern.
    """
    if structures not in (1, 2):
        raise ValueError("structures must be 1 or 2")
    rng = np.random.default_rng(content_seed)
    for _ in range(MAX_RETRIES):
        outer = _blob_mask(rng, size)
        masks = [outer]
        if structures == 2:
            ys, xs = np.nonzero(outer)
            if ys.size:
                inner = _blob_mask(rng, size, scale=0.45, center=(ys.mean() + 0.5, xs.mean() + 0.5)) & outer
                masks.append(inner)
            else:
                masks.append(outer)
        if all(0 < m.sum() < m.size for m in masks):
            break
    else:
        raise RuntimeError(f"could not draw a non-degenerate blob in {MAX_RETRIES} tries")

    yy, xx = np.mgrid[0:size, 0:size].astype(float) / size
    ph = rng.uniform(0, 2 * np.pi, size=4)
    texture = np.sin(2 * np.pi * texture_freq * xx + ph[0]) * np.cos(2 * np.pi * texture_freq * yy + ph[1])
    shading = 0.5 * (np.sin(2 * np.pi * 0.5 * xx + ph[2]) + np.cos(2 * np.pi * 0.5 * yy + ph[3]))
    image = 0.28 + 0.09 * texture + 0.05 * shading
    fg_level = rng.uniform(0.62, 0.72)
    image = np.where(masks[0], fg_level + 0.04 * texture, image)
    if structures == 2:
        image = np.where(masks[1], 0.9 + 0.03 * texture, image)
    return np.clip(image, 0.0, 1.0), np.stack(masks).astype(np.uint8)


@dataclass
class DomainData:
    domain: int
    style: DomainStyle
    train_images: np.ndarray  # (n, 1, H, W) float64
    train_masks: np.ndarray   # (n, S, H, W) uint8
    test_images: np.ndarray
    test_masks: np.ndarray

    @property
    def n_train(self) -> int:
        return int(self.train_images.shape[0])


@dataclass
class FederationDataset:
    domains: List[DomainData]
    styles: List[DomainStyle]
    seed: int
    image_size: int
    structures: int = 1
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.domains)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for d in self.domains:
            for arr in (d.train_images, d.train_masks, d.test_images, d.test_masks):
                h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def export(self, directory) -> Path:
        """Write one directory per domain with raw little-endian arrays and a manifest."""
        root = Path(directory)
        root.mkdir(parents=True, exist_ok=True)
        manifest = {
            "seed": self.seed,
            "image_size": self.image_size,
            "structures": self.structures,
            "styles": [asdict(s) for s in self.styles],
            "checksum": self.checksum(),
            "domains": [],
        }
        for d in self.domains:
            ddir = root / f"domain_{d.domain}"
            ddir.mkdir(exist_ok=True)
            entry = {"domain": d.domain, "files": {}}
            for name in ("train_images", "train_masks", "test_images", "test_masks"):
                arr = getattr(d, name)
                dtype = "<f8" if arr.dtype.kind == "f" else "u1"
                fname = f"{name}.{'f64' if dtype == '<f8' else 'u8'}"
                arr.astype(dtype).tofile(ddir / fname)
                entry["files"][name] = {"path": f"{ddir.name}/{fname}", "dtype": dtype, "shape": list(arr.shape)}
            manifest["domains"].append(entry)
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
        return root


def load_export(directory) -> FederationDataset:
    root = Path(directory)
    manifest = json.loads((root / "manifest.json").read_text())
    styles = [DomainStyle(**s) for s in manifest["styles"]]
    domains = []
    for entry in manifest["domains"]:
        arrays = {}
        for name, info in entry["files"].items():
            arrays[name] = np.fromfile(root / info["path"], dtype=info["dtype"]).reshape(info["shape"])
            if info["dtype"] == "<f8":
                arrays[name] = arrays[name].astype(np.float64)
        domains.append(DomainData(entry["domain"], styles[entry["domain"]], **arrays))
    return FederationDataset(domains, styles, manifest["seed"], manifest["image_size"], manifest["structures"])


def _split_counts(per_domain, n_domains: int) -> List[int]:
    if isinstance(per_domain, (int, np.integer)):
        counts = [int(per_domain)] * n_domains
    else:
        counts = [int(c) for c in per_domain]
        if len(counts) != n_domains:
            raise ValueError(f"{len(counts)} per-domain counts for {n_domains} domains")
    if min(counts) < MIN_PER_DOMAIN:
        raise ValueError(f"need at least {MIN_PER_DOMAIN} samples per domain, got {min(counts)}")
    return counts


def generate(domains: int = 4, per_domain=60, image_size: int = 32, seed: int = 0,
             styles: Optional[Sequence[DomainStyle]] = None, test_fraction: float = 1 / 3,
             structures: int = 1) -> FederationDataset:
    """Build a federation dataset; a pure function of its arguments.

    ``per_domain`` is the total sample count per domain (or one count per
    domain); ``test_fraction`` of each domain is held out as its test split.
    """
    if domains < 3:
        raise ValueError("need at least 3 domains (k seen + 1 unseen, k >= 2)")
    styles = list(styles) if styles is not None else default_styles(domains)
    if len(styles) != domains:
        raise ValueError(f"{len(styles)} styles for {domains} domains")
    counts = _split_counts(per_domain, domains)
    out = []
    for d, (style, n) in enumerate(zip(styles, counts)):
        images = np.empty((n, 1, image_size, image_size))
        masks = np.empty((n, structures, image_size, image_size), dtype=np.uint8)
        for t in range(n):
            content, m = render_content([seed, d, t, 0], image_size, style.texture_freq, structures)
            images[t, 0] = apply_style(content, style, np.random.default_rng([seed, d, t, 1]))
            masks[t] = m
        n_test = max(1, int(round(n * test_fraction)))
        out.append(DomainData(d, style, images[n_test:], masks[n_test:], images[:n_test], masks[:n_test]))
    return FederationDataset(out, styles, seed, image_size, structures,
                             meta={"per_domain": counts, "test_fraction": test_fraction})
