"""Silhouette dataset handling.

Covers four things: loading a CASIA-B-layout directory tree, frame
preprocessing (binarize, crop, height-normalize, center), the stratified
7:3 train/validation split, and a procedural multi-view walker generator
that stands in for the real dataset at desk scale. The generator exports
the same directory layout, so every downstream path is format-agnostic.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    BlankFrameError,
    ConfigError,
    DegenerateStratumError,
    EmptyDatasetError,
    LayoutError,
)
from .view_conversion import VIEW_ANGLES, validate_view

log = logging.getLogger(__name__)

CONDITIONS = ("NM", "BG", "CL")
DEFAULT_RESOLUTION = (64, 64)

IMAGE_SUFFIXES = {".png", ".pgm", ".bmp", ".jpg", ".jpeg"}


@dataclass
class SilhouetteFrame:
    subject: str
    condition: str  # NM | BG | CL
    sequence: int
    view: int
    frame_index: int
    image: np.ndarray  # [H,W], values in {0,1}

    @property
    def key(self):
        return (self.subject, self.condition, self.sequence, self.view, self.frame_index)


@dataclass
class DatasetSplit:
    train: list
    val: list
    split_seed: int


@dataclass
class SynthSpec:
    n_subjects: int = 4
    views: tuple = (0, 54, 90)
    frames_per_sequence: int = 40
    conditions: tuple = ("NM",)
    resolution: tuple = DEFAULT_RESOLUTION
    seed: int = 0
    occlusion_strength: float = 0.8

    def __post_init__(self):
        if self.n_subjects < 1 or self.frames_per_sequence < 1:
            raise ConfigError("subject and frame counts must be positive")
        self.views = tuple(validate_view(v) for v in self.views)
        for c in self.conditions:
            if c not in CONDITIONS:
                raise ConfigError(f"unknown condition {c!r}, expected one of {CONDITIONS}")
        if not (0.0 <= self.occlusion_strength <= 1.0):
            raise ConfigError("occlusion_strength must lie in [0,1]")
        H, W = self.resolution
        if H < 8 or W < 8:
            raise ConfigError(f"resolution {self.resolution} too small")


# ---------------------------------------------------------------------------
# preprocessing
# ---------------------------------------------------------------------------

def _nearest_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = img.shape
    rows = np.minimum((np.arange(out_h) + 0.5) * h / out_h, h - 1).astype(np.intp)
    cols = np.minimum((np.arange(out_w) + 0.5) * w / out_w, w - 1).astype(np.intp)
    return img[rows][:, cols]


def preprocess_frame(raw: np.ndarray, resolution=DEFAULT_RESOLUTION) -> np.ndarray:
    """Binarize, crop to the foreground box, scale to full target height
    (aspect preserved), center horizontally. Output values are {0,1}."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.ndim != 2 or raw.size == 0:
        raise BlankFrameError(f"expected a non-empty grayscale image, got shape {raw.shape}")
    if raw.max() > 1.0:
        raw = raw / 255.0
    fg = raw >= 0.5
    rows = np.flatnonzero(fg.any(axis=1))
    cols = np.flatnonzero(fg.any(axis=0))
    if rows.size == 0:
        raise BlankFrameError("no foreground pixels in frame")
    crop = fg[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].astype(np.float32)

    Ht, Wt = resolution
    h, w = crop.shape
    new_w = max(1, int(round(w * Ht / h)))
    scaled = _nearest_resize(crop, Ht, new_w)
    if new_w > Wt:
        lo = (new_w - Wt) // 2
        scaled = scaled[:, lo:lo + Wt]
        new_w = Wt
    out = np.zeros((Ht, Wt), dtype=np.float32)
    left = (Wt - new_w) // 2
    out[:, left:left + new_w] = scaled
    return out


# ---------------------------------------------------------------------------
# loading
# ---------------------------------------------------------------------------

_CONDSEQ_RE = re.compile(r"^(nm|bg|cl)-(\d+)$", re.IGNORECASE)


def load_casia_b(root, resolution=DEFAULT_RESOLUTION) -> list:
    """Enumerate <root>/<subject>/<cond-seq>/<view>/<frames>, returning
    preprocessed frames sorted by (subject, condition, sequence, view,
    frame index). Blank frames are skipped with a warning."""
    root = Path(root)
    if not root.is_dir():
        raise EmptyDatasetError(f"dataset root {root} is not a directory")
    frames = []
    for subj_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for cs_dir in sorted(p for p in subj_dir.iterdir() if p.is_dir()):
            m = _CONDSEQ_RE.match(cs_dir.name)
            if not m:
                raise LayoutError(f"cannot parse condition-sequence directory {cs_dir}")
            condition = m.group(1).upper()
            sequence = int(m.group(2))
            for view_dir in sorted(p for p in cs_dir.iterdir() if p.is_dir()):
                if not re.fullmatch(r"\d{3}", view_dir.name) or int(view_dir.name) not in VIEW_ANGLES:
                    raise LayoutError(f"cannot parse view directory {view_dir}")
                view = int(view_dir.name)
                files = sorted(p for p in view_dir.iterdir()
                               if p.suffix.lower() in IMAGE_SUFFIXES)
                for order, path in enumerate(files):
                    digits = re.findall(r"\d+", path.stem)
                    frame_index = int(digits[-1]) if digits else order
                    raw = np.asarray(Image.open(path).convert("L"), dtype=np.float64)
                    try:
                        image = preprocess_frame(raw, resolution)
                    except BlankFrameError:
                        log.warning("skipping blank frame %s", path)
                        continue
                    frames.append(SilhouetteFrame(
                        subject=subj_dir.name, condition=condition, sequence=sequence,
                        view=view, frame_index=frame_index, image=image,
                    ))
    if not frames:
        raise EmptyDatasetError(f"no silhouette frames found under {root}")
    frames.sort(key=lambda f: (f.subject, f.condition, f.sequence, f.view, f.frame_index))
    return frames


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def split_7_3(frames, seed: int) -> DatasetSplit:
    """Stratified split within each (subject, view, condition): shuffle by
    seed, train gets round(0.7*n), then both splits are re-scattered."""
    strata = {}
    for fr in frames:
        strata.setdefault((fr.subject, fr.view, fr.condition), []).append(fr)
    rng = np.random.default_rng(seed)
    train, val = [], []
    for key in sorted(strata):
        group = sorted(strata[key], key=lambda f: f.key)
        if len(group) < 2:
            raise DegenerateStratumError(f"stratum {key} has only {len(group)} frame(s)")
        order = rng.permutation(len(group))
        n_train = int(round(0.7 * len(group)))
        train.extend(group[i] for i in order[:n_train])
        val.extend(group[i] for i in order[n_train:])
    # frames are fed to training "scattered at will", not as cycles
    train = [train[i] for i in rng.permutation(len(train))]
    val = [val[i] for i in rng.permutation(len(val))]
    return DatasetSplit(train=train, val=val, split_seed=seed)


# ---------------------------------------------------------------------------
# synthetic walker generator
# ---------------------------------------------------------------------------

def _disk(xx, yy, cx, cy, r, squash_x=1.0):
    return ((xx - cx) / (r * squash_x)) ** 2 + ((yy - cy) / r) ** 2 <= 1.0


def _thick_segment(xx, yy, x0, y0, x1, y1, half_width):
    dx, dy = x1 - x0, y1 - y0
    L2 = dx * dx + dy * dy
    if L2 == 0:
        return _disk(xx, yy, x0, y0, half_width)
    t = np.clip(((xx - x0) * dx + (yy - y0) * dy) / L2, 0.0, 1.0)
    px, py = x0 + t * dx, y0 + t * dy
    return (xx - px) ** 2 + (yy - py) ** 2 <= half_width ** 2


@dataclass
class _WalkerParams:
    height: float
    torso_w: float
    head_r: float
    leg_len: float
    leg_w: float
    swing_amp: float
    phase0: float
    arm_w: float
    arm_swing: float

    @classmethod
    def sample(cls, rng):
        return cls(
            height=rng.uniform(0.80, 0.95),
            torso_w=rng.uniform(0.10, 0.26),
            head_r=rng.uniform(0.045, 0.095),
            leg_len=rng.uniform(0.42, 0.52),
            leg_w=rng.uniform(0.022, 0.045),
            swing_amp=rng.uniform(0.35, 0.60),
            phase0=rng.uniform(0.0, 2 * math.pi),
            arm_w=rng.uniform(0.015, 0.03),
            arm_swing=rng.uniform(0.2, 0.45),
        )


def _render_walker(params: _WalkerParams, phase, view, condition, occlusion, resolution):
    """Draw one silhouette in normalized coordinates (y down, origin top).

    The camera-angle effect is a horizontal compression by the sine of
    the view angle (side view at 90 deg is widest) plus an
    occlusion-scaled damping of the visible limb swing, so views far
    from 90 deg carry measurably less frame-to-frame shape change.
    """
    H, W = resolution
    yy, xx = np.meshgrid(np.linspace(0, 1, H), np.linspace(0, 1, W), indexing="ij")
    sinv = math.sin(math.radians(view))
    squash = 0.40 + 0.60 * sinv
    swing = params.swing_amp * (1.0 - occlusion * (1.0 - sinv))

    cx = 0.5
    top = (1.0 - params.height) / 2
    head_cy = top + params.head_r
    torso_top = head_cy + params.head_r * 0.9
    hip_y = top + params.height * (1.0 - params.leg_len)
    foot_y = top + params.height
    torso_w = params.torso_w * (1.35 if condition == "CL" else 1.0)

    mask = np.zeros((H, W), dtype=bool)
    mask |= _disk(xx, yy, cx, head_cy, params.head_r, squash_x=squash)
    # torso as a squashed ellipse
    tcy = (torso_top + hip_y) / 2
    tr = (hip_y - torso_top) / 2
    mask |= (((xx - cx) / (torso_w * squash)) ** 2 + ((yy - tcy) / tr) ** 2) <= 1.0
    # legs swing in antiphase
    for sign in (1.0, -1.0):
        ang = sign * swing * math.sin(phase)
        fx = cx + math.sin(ang) * params.leg_len * squash
        mask |= _thick_segment(xx, yy, cx, hip_y, fx, foot_y, params.leg_w)
    # arms, half the leg swing
    sh_y = torso_top + 0.05
    for sign in (1.0, -1.0):
        ang = -sign * swing * params.arm_swing * math.sin(phase)
        hx = cx + math.sin(ang) * 0.25 * squash
        mask |= _thick_segment(xx, yy, cx, sh_y, hx, hip_y, params.arm_w)
    if condition == "BG":
        mask |= _disk(xx, yy, cx - torso_w * squash - 0.04 * squash, tcy,
                      0.07, squash_x=squash)
    return mask.astype(np.float32)


def shape_variance_by_view(frames) -> dict:
    """Mean per-pixel temporal variance of the silhouette, per view."""
    groups = {}
    for fr in frames:
        groups.setdefault((fr.view, fr.subject, fr.condition, fr.sequence), []).append(fr)
    per_view = {}
    for (view, *_), group in groups.items():
        stack = np.stack([f.image for f in sorted(group, key=lambda f: f.frame_index)])
        per_view.setdefault(view, []).append(float(stack.var(axis=0).mean()))
    return {v: float(np.mean(vals)) for v, vals in per_view.items()}


def synth_generate(spec: SynthSpec) -> list:
    """Procedurally generate a multi-view walker dataset matching the
    CASIA-B identity structure. Deterministic given spec.seed."""
    frames = []
    for s_idx in range(spec.n_subjects):
        subject = f"{s_idx + 1:03d}"
        params = _WalkerParams.sample(np.random.default_rng([spec.seed, s_idx]))
        for condition in spec.conditions:
            for view in spec.views:
                for frame_index in range(spec.frames_per_sequence):
                    phase = params.phase0 + 2 * math.pi * 2.2 * frame_index / spec.frames_per_sequence
                    raw = _render_walker(params, phase, view, condition,
                                         spec.occlusion_strength, spec.resolution)
                    frames.append(SilhouetteFrame(
                        subject=subject, condition=condition, sequence=1,
                        view=view, frame_index=frame_index,
                        image=preprocess_frame(raw, spec.resolution),
                    ))
    # generator contract: views farther from 90 deg show less shape change
    variances = shape_variance_by_view(frames)
    if len(variances) > 1:
        by_sin = sorted(variances, key=lambda v: math.sin(math.radians(v)))
        lo, hi = by_sin[0], by_sin[-1]
        if math.sin(math.radians(lo)) < math.sin(math.radians(hi)) and not (
            variances[lo] < variances[hi]
        ):
            raise ConfigError(
                f"generator contract violated: shape variance at view {lo} "
                f"({variances[lo]:.5f}) not below view {hi} ({variances[hi]:.5f})"
            )
    frames.sort(key=lambda f: (f.subject, f.condition, f.sequence, f.view, f.frame_index))
    return frames


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def _write_pgm(path: Path, image: np.ndarray):
    data = (np.asarray(image) >= 0.5).astype(np.uint8) * 255
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(data.tobytes())


def export_casia_layout(frames, outdir) -> dict:
    """Write frames as a CASIA-B directory tree of binary PGMs plus a
    manifest of per-(subject, view, condition) counts."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    counts = {}
    for fr in frames:
        d = outdir / fr.subject / f"{fr.condition.lower()}-{fr.sequence:02d}" / f"{fr.view:03d}"
        d.mkdir(parents=True, exist_ok=True)
        _write_pgm(d / f"{fr.frame_index:03d}.pgm", fr.image)
        counts.setdefault(fr.subject, {}).setdefault(str(fr.view), {}).setdefault(fr.condition, 0)
        counts[fr.subject][str(fr.view)][fr.condition] += 1
    manifest = {
        "total_frames": len(frames),
        "n_subjects": len(counts),
        "views": sorted({fr.view for fr in frames}),
        "conditions": sorted({fr.condition for fr in frames}),
        "counts": counts,
    }
    (outdir / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return manifest
