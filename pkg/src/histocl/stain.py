"""Beer-Lambert color model, H&E unmixing/remixing and domain-shift generators.

Stain contributions add linearly in optical density (OD): a pixel's OD vector
is ``c @ M`` where ``M`` stacks one unit OD vector per stain (hematoxylin,
eosin, residual) and ``c`` holds non-negative per-stain concentrations.
Unmixing inverts that linear system per pixel; the five domain generators
re-render patches with scaled concentrations and/or hue- and saturation-
perturbed stain vectors.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, replace

import numpy as np

from .data import Dataset, Patch, partition_near_equal
from .errors import DegenerateStainError, EmptyClassError, SingularMatrixError

WHITE_LEVEL = 255.0
_DET_THRESHOLD = 1e-6
_UNIT_TOL = 1e-6


def rgb_to_od(pixels: np.ndarray, white_level: float = WHITE_LEVEL) -> np.ndarray:
    """Convert 8-bit RGB to optical density, channel-wise.

    ``od = log10(white_level / max(channel, 1))``; the clamp at 1 keeps pure
    black finite. Accepts any (..., 3) array.
    """
    ch = np.maximum(np.asarray(pixels, dtype=np.float64), 1.0)
    return np.log10(white_level / ch)


def od_to_rgb(od: np.ndarray, white_level: float = WHITE_LEVEL) -> np.ndarray:
    """Invert :func:`rgb_to_od`; negative OD clamps to 0 (i.e. white)."""
    od = np.maximum(np.asarray(od, dtype=np.float64), 0.0)
    ch = np.rint(white_level * 10.0 ** (-od))
    return np.clip(ch, 0, 255).astype(np.uint8)


@dataclass(frozen=True)
class StainMatrix:
    """Three unit OD row vectors: hematoxylin, eosin, residual."""

    rows: np.ndarray

    def __post_init__(self) -> None:
        rows = np.asarray(self.rows, dtype=np.float64)
        if rows.shape != (3, 3):
            raise ValueError(f"stain matrix must be 3x3, got {rows.shape}")
        norms = np.linalg.norm(rows, axis=1)
        if np.any(np.abs(norms - 1.0) > _UNIT_TOL):
            raise ValueError(f"stain rows must be unit length, got norms {norms}")
        if abs(np.linalg.det(rows)) <= _DET_THRESHOLD:
            raise SingularMatrixError("stain matrix is singular")
        if np.any(rows[:2] < 0.0):
            raise ValueError("hematoxylin/eosin components must be non-negative")
        object.__setattr__(self, "rows", rows)

    @classmethod
    def from_stains(cls, hematoxylin, eosin) -> "StainMatrix":
        """Build from two stain vectors; residual is their normalized cross product."""
        h = np.asarray(hematoxylin, dtype=np.float64)
        e = np.asarray(eosin, dtype=np.float64)
        h = h / np.linalg.norm(h)
        e = e / np.linalg.norm(e)
        r = np.cross(h, e)
        n = np.linalg.norm(r)
        if n <= _DET_THRESHOLD:
            raise SingularMatrixError("stain vectors are collinear")
        return cls(np.stack([h, e, r / n]))

    @property
    def hematoxylin(self) -> np.ndarray:
        return self.rows[0]

    @property
    def eosin(self) -> np.ndarray:
        return self.rows[1]

    def inverse(self) -> np.ndarray:
        det = np.linalg.det(self.rows)
        if abs(det) <= _DET_THRESHOLD:
            raise SingularMatrixError(f"stain matrix determinant {det} below threshold")
        return np.linalg.inv(self.rows)


# Standard H&E deconvolution basis (Ruifrok-style coefficients); the residual
# row is the normalized cross product of the two stains.
DEFAULT_STAIN_MATRIX = StainMatrix.from_stains((0.650, 0.704, 0.286), (0.072, 0.990, 0.105))


@dataclass(frozen=True)
class ConcentrationMap:
    """Per-pixel non-negative stain concentrations (c_H, c_E, c_residual)."""

    width: int
    height: int
    planes: np.ndarray

    def __post_init__(self) -> None:
        planes = np.asarray(self.planes, dtype=np.float64)
        if planes.shape != (self.height, self.width, 3):
            raise ValueError(
                f"planes shape {planes.shape} != (height, width, 3) = "
                f"({self.height}, {self.width}, 3)"
            )
        if not np.isfinite(planes).all():
            raise ValueError("concentration planes must be finite")
        object.__setattr__(self, "planes", planes)


def unmix(patch: Patch, matrix: StainMatrix = DEFAULT_STAIN_MATRIX) -> ConcentrationMap:
    """Per-pixel solve of ``od = c @ M``; negative concentrations clamp to 0."""
    inv = matrix.inverse()
    od = rgb_to_od(patch.pixels)
    conc = np.maximum(od @ inv, 0.0)
    h, w = patch.pixels.shape[:2]
    return ConcentrationMap(width=w, height=h, planes=conc)


def remix(
    cmap: ConcentrationMap,
    matrix: StainMatrix = DEFAULT_STAIN_MATRIX,
    scales: tuple[float, float, float] = (1.0, 1.0, 1.0),
    like: Patch | None = None,
) -> Patch:
    """Render scaled concentrations back to an RGB patch.

    ``od' = sum_s (scale_s * c_s) * row_s``. When ``like`` is given the
    output patch inherits its labels and provenance.
    """
    s = np.asarray(scales, dtype=np.float64)
    if s.shape != (3,) or np.any(s <= 0.0):
        raise ValueError(f"scales must be 3 positive reals, got {scales}")
    od = (cmap.planes * s) @ matrix.rows
    pixels = od_to_rgb(od)
    if like is not None:
        return replace(like, pixels=pixels)
    return Patch(pixels, class_id=0, source_key="remix")


def perturb_stain_vector(row: np.ndarray, hue_delta: float, sat_scale: float) -> np.ndarray:
    """Shift a stain vector's appearance hue and saturation, in OD space.

    The stain's appearance color ``255 * 10^(-row)`` is moved in HSV (hue is
    additive mod 1, saturation multiplicative and clamped to [0, 1]), then
    mapped back to a unit OD vector.
    """
    row = np.asarray(row, dtype=np.float64)
    if abs(np.linalg.norm(row) - 1.0) > 1e-4:
        raise ValueError("stain row must be unit length")
    rgb = WHITE_LEVEL * 10.0 ** (-row)
    h, s, v = colorsys.rgb_to_hsv(*(rgb / WHITE_LEVEL))
    h = (h + hue_delta) % 1.0
    s = min(max(s * sat_scale, 0.0), 1.0)
    out = np.asarray(colorsys.hsv_to_rgb(h, s, v)) * WHITE_LEVEL
    od = np.log10(WHITE_LEVEL / np.maximum(out, 1.0))
    norm = np.linalg.norm(od)
    if norm < 1e-6:
        raise DegenerateStainError("perturbed stain vector has near-zero optical density")
    return od / norm


_IDENTITY_SCALE = (1.0, 1.0)
_IDENTITY_SHIFT = (0.0, 0.0)


@dataclass(frozen=True)
class DomainSpec:
    """Sampling intervals for one simulated acquisition domain.

    Intensity and saturation intervals are multiplicative scales; hue
    intervals are additive shifts of HSV hue (normalized to [0, 1)). Domain 1
    is reserved for the identity transform.
    """

    domain_id: int
    eosin_intensity_range: tuple[float, float] = _IDENTITY_SCALE
    hema_intensity_range: tuple[float, float] = _IDENTITY_SCALE
    eosin_hue_delta_range: tuple[float, float] = _IDENTITY_SHIFT
    hema_hue_delta_range: tuple[float, float] = _IDENTITY_SHIFT
    eosin_sat_range: tuple[float, float] = _IDENTITY_SCALE
    hema_sat_range: tuple[float, float] = _IDENTITY_SCALE

    def __post_init__(self) -> None:
        if not 1 <= self.domain_id <= 5:
            raise ValueError("domain_id must be in 1..5")
        for name in (
            "eosin_intensity_range",
            "hema_intensity_range",
            "eosin_hue_delta_range",
            "hema_hue_delta_range",
            "eosin_sat_range",
            "hema_sat_range",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} has lower bound above upper bound")
            if name.endswith(("intensity_range", "sat_range")) and lo <= 0.0:
                raise ValueError(f"{name} must be strictly positive")
        if self.domain_id == 1 and not self.is_identity():
            raise ValueError("domain 1 must encode the identity transform")

    def is_identity(self) -> bool:
        return (
            self.eosin_intensity_range == _IDENTITY_SCALE
            and self.hema_intensity_range == _IDENTITY_SCALE
            and self.eosin_hue_delta_range == _IDENTITY_SHIFT
            and self.hema_hue_delta_range == _IDENTITY_SHIFT
            and self.eosin_sat_range == _IDENTITY_SCALE
            and self.hema_sat_range == _IDENTITY_SCALE
        )


def default_domain_specs() -> tuple[DomainSpec, ...]:
    """The five simulated acquisition domains.

    Domain 1 keeps the source images untouched. Domain 2 raises both stain
    intensities, domain 3 varies eosin intensity over a wide interval that
    includes increases (kept verbatim from its published description despite
    the "decreased" label; override via config if needed), domain 4 shifts
    both hues, domain 5 shifts eosin hue and raises both saturations.
    """
    return (
        DomainSpec(domain_id=1),
        DomainSpec(
            domain_id=2,
            eosin_intensity_range=(1.75, 2.75),
            hema_intensity_range=(1.5, 2.0),
        ),
        DomainSpec(domain_id=3, eosin_intensity_range=(0.4, 2.75)),
        DomainSpec(
            domain_id=4,
            eosin_hue_delta_range=(-0.05, -0.03),
            hema_hue_delta_range=(0.05, 0.08),
        ),
        DomainSpec(
            domain_id=5,
            eosin_hue_delta_range=(0.03, 0.05),
            eosin_sat_range=(1.2, 1.4),
            hema_sat_range=(1.1, 1.3),
        ),
    )


def augment(
    patch: Patch,
    spec: DomainSpec,
    rng: np.random.Generator,
    matrix: StainMatrix = DEFAULT_STAIN_MATRIX,
) -> Patch:
    """Apply one domain's transform to a patch.

    Domain 1 returns the input unchanged. Otherwise one factor is drawn per
    interval (one draw per patch, simulating slide-to-slide variation), the
    stain vectors are perturbed, and the patch is unmixed with ``matrix`` and
    remixed with the perturbed basis and intensity scales. Pure in
    (patch, spec, rng state).
    """
    if spec.domain_id == 1 or spec.is_identity():
        return patch
    e_int = rng.uniform(*spec.eosin_intensity_range)
    h_int = rng.uniform(*spec.hema_intensity_range)
    e_hue = rng.uniform(*spec.eosin_hue_delta_range)
    h_hue = rng.uniform(*spec.hema_hue_delta_range)
    e_sat = rng.uniform(*spec.eosin_sat_range)
    h_sat = rng.uniform(*spec.hema_sat_range)

    h_row = perturb_stain_vector(matrix.hematoxylin, h_hue, h_sat)
    e_row = perturb_stain_vector(matrix.eosin, e_hue, e_sat)
    perturbed = StainMatrix.from_stains(h_row, e_row)
    cmap = unmix(patch, matrix)
    return remix(cmap, perturbed, scales=(h_int, e_int, 1.0), like=patch)


def build_augmented_dataset(
    ds: Dataset,
    specs: tuple[DomainSpec, ...] | None = None,
    seed: int = 0,
    matrix: StainMatrix = DEFAULT_STAIN_MATRIX,
) -> Dataset:
    """Partition each class into one near-equal split per domain and transform.

    Split k gets spec k's transform and ``domain_id = k``. The output keeps
    the input's patch order and size; per class the splits are a disjoint
    cover. Deterministic in ``seed``.
    """
    if specs is None:
        specs = default_domain_specs()
    ids = sorted(s.domain_id for s in specs)
    if ids != list(range(1, len(specs) + 1)):
        raise ValueError(f"specs must carry domain ids 1..{len(specs)}, got {ids}")
    by_id = {s.domain_id: s for s in specs}

    assignment: dict[int, int] = {}  # patch index -> domain id
    for cid in range(ds.n_classes):
        indices = ds.class_indices(cid)
        if len(indices) < len(specs):
            raise EmptyClassError(
                f"class {ds.class_names[cid]} has {len(indices)} items, "
                f"needs >= {len(specs)} for a per-domain partition"
            )
        rng = np.random.default_rng((seed, cid))
        for k, part in enumerate(partition_near_equal(len(indices), len(specs), rng)):
            for j in part:
                assignment[indices[j]] = k + 1

    out: list[Patch] = []
    for i, patch in enumerate(ds.patches):
        did = assignment[i]
        spec = by_id[did]
        if spec.domain_id == 1:
            out.append(replace(patch, domain_id=1))
        else:
            rng = np.random.default_rng((seed, did, i))
            out.append(replace(augment(patch, spec, rng, matrix), domain_id=did))
    meta = {**ds.metadata, "augmented": True, "augment_seed": seed}
    return Dataset(out, list(ds.class_names), meta)
