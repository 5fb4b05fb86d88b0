"""Class-label <-> color-encoding mapping for semantic supervision.

Labels are mapped to well-separated RGB colors so a color field can learn
segmentation directly; black (0,0,0) is reserved for unknown labels and is
excluded from the semantic loss.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field

import numpy as np

UNKNOWN_LABEL = -1
_GOLDEN = 0.6180339887498949

# minimum pairwise separation (classes and black) the palette must satisfy
MIN_COLOR_SEPARATION = 0.2


@dataclass(frozen=True)
class PaletteEntry:
    class_id: int
    name: str
    color: tuple[float, float, float]


@dataclass
class Palette:
    """Ordered class palette. Black is the unknown sentinel, never a class."""

    entries: list[PaletteEntry] = field(default_factory=list)

    def __post_init__(self):
        cols = self.colors()
        if len(self.entries) == 0:
            raise ValueError("palette needs at least one class")
        ids = [e.class_id for e in self.entries]
        if ids != list(range(len(ids))):
            raise ValueError("palette class ids must be 0..n-1 in order")
        # pairwise separation, with black included as an implicit member
        pts = np.vstack([np.zeros(3), cols])
        d = np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)
        np.fill_diagonal(d, np.inf)
        if d.min() < MIN_COLOR_SEPARATION:
            raise ValueError(
                f"palette colors too close: min separation {d.min():.3f} < "
                f"{MIN_COLOR_SEPARATION}"
            )

    def __len__(self) -> int:
        return len(self.entries)

    def colors(self) -> np.ndarray:
        """(n, 3) float array of class colors in [0, 1]."""
        return np.array([e.color for e in self.entries], dtype=np.float64)

    def color_of(self, class_id: int) -> np.ndarray:
        return np.asarray(self.entries[class_id].color, dtype=np.float64)

    def to_json(self) -> dict:
        return {
            "version": 1,
            "classes": [
                {
                    "id": e.class_id,
                    "name": e.name,
                    "rgb": [int(round(c * 255)) for c in e.color],
                }
                for e in self.entries
            ],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Palette":
        entries = [
            PaletteEntry(c["id"], c["name"], tuple(v / 255.0 for v in c["rgb"]))
            for c in obj["classes"]
        ]
        return cls(entries)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2)

    @classmethod
    def load(cls, path) -> "Palette":
        with open(path) as f:
            return cls.from_json(json.load(f))


def _candidate_colors() -> np.ndarray:
    """Vivid candidate colors: golden-ratio hue wheel over several S/V tiers."""
    cands = []
    for k in range(64):
        h = (k * _GOLDEN) % 1.0
        for s, v in ((1.0, 1.0), (0.55, 1.0), (1.0, 0.55), (0.35, 0.75), (0.75, 0.35)):
            cands.append(colorsys.hsv_to_rgb(h, s, v))
    cands.append((1.0, 1.0, 1.0))
    # quantize to 8-bit so stored rasters reproduce palette colors exactly
    return np.round(np.array(cands) * 255.0) / 255.0


def build_palette(num_classes: int, names: list[str] | None = None) -> Palette:
    """Deterministic maximally-separated palette via farthest-point selection.

    Candidates are golden-ratio hue steps over a few saturation/value tiers;
    each pick maximizes the distance to all previous picks and to black.
    Raises if num_classes exceeds what the separation invariant allows.
    """
    if not 1 <= num_classes <= 255:
        raise ValueError(f"num_classes must be in [1, 255], got {num_classes}")
    cand = _candidate_colors()
    chosen = np.zeros((1, 3))  # black sentinel seeds the selection
    picks = []
    for _ in range(num_classes):
        d = np.linalg.norm(cand[:, None, :] - chosen[None, :, :], axis=-1).min(axis=1)
        i = int(np.argmax(d))
        if d[i] < MIN_COLOR_SEPARATION:
            raise ValueError(
                f"cannot build {num_classes} colors with separation >= "
                f"{MIN_COLOR_SEPARATION}; supported maximum is {len(picks)}"
            )
        picks.append(tuple(cand[i]))
        chosen = np.vstack([chosen, cand[i]])
    if names is None:
        names = [f"class_{i}" for i in range(num_classes)]
    return Palette([PaletteEntry(i, names[i], picks[i]) for i in range(num_classes)])


def labels_to_colors(labels: np.ndarray, palette: Palette) -> np.ndarray:
    """Per-pixel palette lookup; unknown (-1) maps to black."""
    labels = np.asarray(labels)
    bad = (labels != UNKNOWN_LABEL) & ((labels < 0) | (labels >= len(palette)))
    if np.any(bad):
        raise ValueError(f"labels outside palette: {np.unique(labels[bad])}")
    lut = np.vstack([palette.colors(), np.zeros(3)])  # last row = unknown
    idx = np.where(labels == UNKNOWN_LABEL, len(palette), labels)
    return lut[idx]


def colors_to_labels(colors: np.ndarray, palette: Palette):
    """Nearest-palette-color decode of a rendered semantic image.

    Black competes as the unknown candidate. Ties break toward the lower
    class id (with unknown ordered last). Confidence is 1 - d/sqrt(3).

    Returns (labels, confidence) with unknown pixels labeled -1.
    """
    colors = np.asarray(colors, dtype=np.float64)
    lut = np.vstack([palette.colors(), np.zeros(3)])
    d = np.linalg.norm(colors[..., None, :] - lut, axis=-1)
    idx = np.argmin(d, axis=-1)  # argmin takes the first (lowest id) on ties
    labels = np.where(idx == len(palette), UNKNOWN_LABEL, idx)
    conf = 1.0 - np.take_along_axis(d, idx[..., None], axis=-1)[..., 0] / np.sqrt(3.0)
    return labels.astype(np.int64), conf
