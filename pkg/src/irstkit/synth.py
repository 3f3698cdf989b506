"""Procedural multi-domain infrared scene generator.

Each domain owns a power-law background spectrum (amplitude ~ 1/f^beta) with a
fixed domain-characteristic phase pattern; per-image phase jitter controls how
tightly images of the domain share that structure. Targets are small Gaussian
blobs whose amplitude is solved from a requested local signal-to-clutter
ratio measured on the fully composed background, so re-measuring SCR on the
output recovers the request. Masks are the half-peak discs of the clean target
contribution. Everything is a pure function of (inputs, seed).
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .pgm import save_pgm

log = logging.getLogger(__name__)

SCR_WINDOW = 16           # side of the local-statistics window
EXCLUDE_LEVEL = 0.01      # blob contribution above this fraction of peak is "target"


@dataclass
class DomainStyle:
    domain_id: str
    beta: float = 2.0              # background spectral slope, amplitude ~ 1/f^beta
    mean: float = 0.3              # base intensity in [0,1]
    spread: float = 0.1            # background contrast (std) in [0,1] units
    clutter_density: float = 2.0   # expected clutter blobs per image
    clutter_scale: float = 5.0     # clutter blob sigma in pixels
    noise_sigma: float = 0.01      # additive sensor noise std
    phase_jitter: float = 0.5      # radians of per-image deviation from the domain phase

    def validate(self) -> None:
        if not 0.5 <= self.beta <= 3.0:
            raise ValueError(f"domain {self.domain_id!r}: beta must be in [0.5, 3]")
        if not 0.0 <= self.mean <= 1.0 or not 0.0 <= self.spread <= 0.5:
            raise ValueError(f"domain {self.domain_id!r}: mean/spread out of range")
        if self.clutter_density < 0 or self.clutter_scale <= 0:
            raise ValueError(f"domain {self.domain_id!r}: bad clutter settings")
        if self.noise_sigma < 0 or self.phase_jitter < 0:
            raise ValueError(f"domain {self.domain_id!r}: bad noise/jitter settings")


@dataclass
class SceneSpec:
    size: int = 64
    targets: tuple[int, int] = (1, 3)       # inclusive range per image
    diameter: tuple[float, float] = (2.0, 9.0)
    scr: tuple[float, float] = (2.0, 10.0)

    def validate(self) -> None:
        if self.size < 8 or (self.size & (self.size - 1)) != 0:
            raise ValueError("size must be a power of two >= 8")
        if self.targets[0] < 0 or self.targets[1] < self.targets[0]:
            raise ValueError("bad targets range")
        if self.diameter[1] >= self.size / 4:
            raise ValueError("target diameter must stay below size/4")
        if self.scr[0] <= 1:
            raise ValueError("SCR must exceed 1")


@dataclass
class ManifestEntry:
    image_path: str
    mask_path: str
    domain_id: str
    split: str


@dataclass
class DatasetManifest:
    root: Path
    entries: list[ManifestEntry] = field(default_factory=list)

    def counts(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for e in self.entries:
            out[e.domain_id] = out.get(e.domain_id, 0) + 1
        return out


def _domain_phase(domain_id: str, size: int) -> np.ndarray:
    """Fixed per-domain base phase derived from a stable hash of the id."""
    digest = hashlib.sha256(domain_id.encode("utf-8")).digest()
    seed = int.from_bytes(digest[:8], "little")
    rng = np.random.default_rng(seed)
    return rng.uniform(-np.pi, np.pi, size=(size, size))


def _power_law_amplitude(size: int, beta: float) -> np.ndarray:
    fy = np.fft.fftfreq(size)[:, None]
    fx = np.fft.fftfreq(size)[None, :]
    rho = np.sqrt(fx * fx + fy * fy)
    amp = np.zeros((size, size))
    nz = rho > 0
    amp[nz] = rho[nz] ** (-beta)
    return amp


def render_scene(style: DomainStyle, spec: SceneSpec, seed: int):
    """Render one (image, mask) pair. Same inputs and seed give identical bytes."""
    style.validate()
    spec.validate()
    rng = np.random.default_rng(seed)
    n = spec.size

    # background: shaped spectrum with jittered domain phase
    amp = _power_law_amplitude(n, style.beta)
    phase = _domain_phase(style.domain_id, n) + style.phase_jitter * rng.standard_normal((n, n))
    bg = np.fft.ifft2(amp * np.exp(1j * phase)).real
    bg = (bg - bg.mean()) / max(bg.std(), 1e-12)
    image = style.mean + style.spread * bg

    # clutter blobs
    n_clutter = int(rng.poisson(style.clutter_density))
    yy, xx = np.mgrid[0:n, 0:n]
    for _ in range(n_clutter):
        cy, cx = rng.uniform(0, n, size=2)
        cs = style.clutter_scale * (0.5 + rng.uniform())
        camp = style.spread * (0.5 + rng.uniform()) * (1 if rng.uniform() < 0.5 else -1)
        image += camp * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * cs * cs))

    # sensor noise completes the composite background
    if style.noise_sigma > 0:
        image += style.noise_sigma * rng.standard_normal((n, n))

    # targets on top of the composite
    mask = np.zeros((n, n), dtype=np.uint8)
    count = int(rng.integers(spec.targets[0], spec.targets[1] + 1))
    placed: list[tuple[float, float, float]] = []  # (cy, cx, sigma)
    for _ in range(count):
        d = rng.uniform(*spec.diameter)
        scr = rng.uniform(*spec.scr)
        sigma = d / 4.0
        ok = False
        for _attempt in range(100):
            margin = 3.0 * sigma + 2.0
            cy = rng.uniform(margin, n - margin)
            cx = rng.uniform(margin, n - margin)
            half = 1.1774 * sigma  # half-peak radius of the Gaussian blob
            if all(
                np.hypot(cy - py, cx - px) >= half + 1.1774 * ps + 3.0
                for py, px, ps in placed
            ):
                ok = True
                break
        if not ok:
            log.warning("target placement failed after 100 attempts, rendering fewer")
            continue

        blob_shape = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma * sigma))
        blob_shape[blob_shape < 1e-12] = 0.0  # compact support: far pixels untouched
        cyr, cxr = int(round(cy)), int(round(cx))
        shape_peak = blob_shape[cyr, cxr]     # realized grid peak of the blob profile
        half_w = SCR_WINDOW // 2
        y0, y1 = max(0, cyr - half_w), min(n, cyr + half_w)
        x0, x1 = max(0, cxr - half_w), min(n, cxr + half_w)
        window = image[y0:y1, x0:x1]
        ring = blob_shape[y0:y1, x0:x1] < EXCLUDE_LEVEL * shape_peak
        ring_vals = window[ring]
        ring_shape = blob_shape[y0:y1, x0:x1][ring]
        # solve the peak amplitude against the post-placement ring statistics:
        # the sub-threshold blob tail shifts them, so iterate the fixed point
        ampl = 0.0
        for _ in range(3):
            vals = ring_vals + ampl * ring_shape
            mu_loc = vals.mean()
            sd_loc = max(vals.std(), 1e-4)
            ampl = max((scr * sd_loc + mu_loc - image[cyr, cxr]) / shape_peak, 0.02)

        image = image + ampl * blob_shape
        mask |= (blob_shape >= 0.5 * shape_peak).astype(np.uint8)
        placed.append((cy, cx, sigma))

    return np.clip(image, 0.0, 1.0), mask


def generate_domain_dataset(style: DomainStyle, spec: SceneSpec, n: int, seed: int,
                            out_dir) -> DatasetManifest:
    """Write n image/mask PGM pairs plus a manifest; 80/20 train/val split."""
    if n < 1:
        raise ValueError("n must be >= 1")
    root = Path(out_dir) / f"domain-{style.domain_id}"
    (root / "img").mkdir(parents=True, exist_ok=True)
    (root / "mask").mkdir(parents=True, exist_ok=True)

    sample_seeds = np.random.SeedSequence(seed).generate_state(n)
    order = np.random.default_rng(seed).permutation(n)
    splits = {}
    for pos, idx in enumerate(order):
        splits[int(idx)] = "val" if pos % 5 == 4 else "train"

    manifest = DatasetManifest(root=root)
    for i in range(n):
        image, mask = render_scene(style, spec, int(sample_seeds[i]))
        img_rel = f"img/{i:04d}.pgm"
        mask_rel = f"mask/{i:04d}.pgm"
        save_pgm(image, root / img_rel, depth=16)
        save_pgm(mask.astype(np.float64), root / mask_rel, depth=8)
        manifest.entries.append(
            ManifestEntry(
                image_path=img_rel,
                mask_path=mask_rel,
                domain_id=style.domain_id,
                split=splits[i],
            )
        )

    write_manifest(manifest, root / "manifest.tsv")
    return manifest


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [
        f"{e.image_path}\t{e.mask_path}\t{e.domain_id}\t{e.split}\n"
        for e in manifest.entries
    ]
    with open(path, "w", encoding="utf-8") as f:
        f.writelines(lines)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    manifest = DatasetManifest(root=path.parent)
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ValueError(f"{path}:{lineno}: expected 4 tab-separated fields")
            manifest.entries.append(ManifestEntry(*parts))
    return manifest
