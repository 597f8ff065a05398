"""Synthetic multi-sequence phantom volumes and the on-disk dataset format.

Each phantom patient is a set of co-registered 3D grids, one per sequence,
sharing a ground-truth lesion mask.  Lesions are spheres in mm-space; a
2-voxel dilated shell around each core models edema.  The three T1-like
sequences share one smooth background field so that post-minus-pre
subtraction cancels everywhere except at lesions; FLAIR gets an
independent field and shows only the shell, not the core.
"""

import json
import shutil
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import CANONICAL_SEQUENCES
from .gridio import read_grid, write_grid

N26 = np.ones((3, 3, 3), dtype=bool)  # 26-connectivity structure


class CapacityError(Exception):
    """Lesion placement failed after bounded retries: grid too crowded."""


class DatasetError(Exception):
    """Dataset root refusal, missing manifest, or corrupted grid files."""


@dataclass(frozen=True)
class SequenceProfile:
    """Intensity behaviour of one sequence: offsets inside the lesion core and
    in the dilated shell, plus which shared background field it rides on.

    lesion_visibility < 1 makes a random per-patient subset of cores dark in
    this sequence (conspicuity differs between acquisitions; no single scan
    is guaranteed to show every lesion).  artifact_contrast > 0 adds small
    bright pseudo-enhancing spots to this sequence alone, the way vascular
    enhancement contaminates gradient-echo post-contrast images; telling them
    from lesions requires a second post-contrast view."""

    name: str
    lesion_contrast: float
    halo_contrast: float = 0.0
    correlates_with_gt: bool = False
    background_group: str = "main"
    lesion_visibility: float = 1.0
    artifact_contrast: float = 0.0


@dataclass(frozen=True)
class BackgroundTexture:
    smoothness_vox: float = 3.0
    noise_amplitude: float = 0.05
    smooth_amplitude: float = 0.15


def canonical_profiles(post_contrast=0.50, cube_post_contrast=0.40, flair_halo=0.02,
                       bravo_visibility=1.0, bravo_artifact=0.40):
    """The standard 4-sequence profile set.

    CUBE-pre carries no lesion signal and shares the background of the two
    post-contrast sequences; FLAIR shows a faint shell glow only, on its own
    field.  BRAVO is the strongest lesion channel but also the only one with
    pseudo-enhancing artifact spots, which CUBE-post (artifact-free) can veto."""
    return (
        SequenceProfile("BRAVO-post", lesion_contrast=post_contrast, halo_contrast=0.0,
                        correlates_with_gt=True, background_group="main",
                        lesion_visibility=bravo_visibility,
                        artifact_contrast=bravo_artifact),
        SequenceProfile("CUBE-pre", lesion_contrast=0.0, halo_contrast=0.0,
                        correlates_with_gt=False, background_group="main"),
        SequenceProfile("CUBE-post", lesion_contrast=cube_post_contrast, halo_contrast=0.0,
                        correlates_with_gt=True, background_group="main"),
        SequenceProfile("FLAIR", lesion_contrast=0.0, halo_contrast=flair_halo,
                        correlates_with_gt=False, background_group="flair"),
    )


@dataclass(frozen=True)
class PhantomSpec:
    grid_shape: tuple = (24, 64, 64)
    spacing_mm: tuple = (2.0, 1.0, 1.0)
    n_lesions_range: tuple = (2, 5)
    lesion_radius_range_mm: tuple = (2.5, 5.0)
    sequence_profiles: tuple = field(default_factory=canonical_profiles)
    background: BackgroundTexture = field(default_factory=BackgroundTexture)
    seed: int = 0
    # non-enhancing bright blobs, shared by pre and post sequences: telling them
    # apart from lesions requires comparing against the pre-contrast channel
    n_distractors_range: tuple = (3, 6)
    distractor_contrast: float = 0.30
    # pseudo-enhancing artifact spots (per profile with artifact_contrast > 0)
    n_artifacts_range: tuple = (3, 6)
    artifact_radius_range_mm: tuple = (2.0, 3.0)

    def validate(self):
        if len(self.grid_shape) != 3 or any(int(s) < 8 for s in self.grid_shape):
            raise ValueError(f"grid_shape components must be >= 8, got {self.grid_shape}")
        if any(s <= 0 for s in self.spacing_mm):
            raise ValueError(f"spacing_mm components must be > 0, got {self.spacing_mm}")
        lo, hi = self.n_lesions_range
        if not (0 <= lo <= hi):
            raise ValueError(f"bad n_lesions_range {self.n_lesions_range}")
        dlo, dhi = self.n_distractors_range
        if not (0 <= dlo <= dhi):
            raise ValueError(f"bad n_distractors_range {self.n_distractors_range}")
        rlo, rhi = self.lesion_radius_range_mm
        if not (0 < rlo <= rhi):
            raise ValueError(f"bad lesion_radius_range_mm {self.lesion_radius_range_mm}")
        if any(rlo / s < 1.0 for s in self.spacing_mm):
            raise ValueError(
                f"minimum lesion radius {rlo}mm spans <1 voxel for spacing {self.spacing_mm}")
        if not self.sequence_profiles:
            raise ValueError("sequence_profiles must be non-empty")
        names = [p.name for p in self.sequence_profiles]
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate sequence names: {names}")
        for p in self.sequence_profiles:
            if not 0.0 < p.lesion_visibility <= 1.0:
                raise ValueError(f"{p.name}: lesion_visibility must be in (0,1], "
                                 f"got {p.lesion_visibility}")
        return self

    @property
    def sequence_names(self):
        return tuple(p.name for p in self.sequence_profiles)


@dataclass
class StudyVolume:
    """One patient's co-registered grids plus optional ground truth."""

    patient_id: str
    sequences: dict  # name -> (z,y,x) float32 grid, insertion order = canonical order
    spacing_mm: tuple
    gt_mask: np.ndarray | None = None

    @property
    def grid_shape(self):
        return next(iter(self.sequences.values())).shape

    @property
    def gt_lesion_count(self):
        if self.gt_mask is None:
            return 0
        _, n = ndimage.label(self.gt_mask, structure=N26)
        return int(n)

    def validate(self):
        shapes = {g.shape for g in self.sequences.values()}
        if self.gt_mask is not None:
            shapes.add(self.gt_mask.shape)
        if len(shapes) != 1:
            raise ValueError(f"{self.patient_id}: inconsistent grid shapes {shapes}")
        return self


def _patient_rng(seed, patient_id):
    # crc32 rather than hash(): stable across interpreter runs
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF,
                                zlib.crc32(patient_id.encode("utf-8"))]))


def _smooth_field(rng, shape, texture):
    noise = rng.standard_normal(shape)
    f = ndimage.gaussian_filter(noise, sigma=texture.smoothness_vox)
    sd = f.std()
    if sd > 0:
        f = f / sd
    return f * texture.smooth_amplitude


def _place_spheres(rng, spec, count_range, kind, placed, radius_range=None,
                   max_attempts=200):
    """Sample non-overlapping sphere centers/radii in mm-space, avoiding the
    already placed ones; appends to and returns the new (center, radius) list."""
    n = int(rng.integers(count_range[0], count_range[1] + 1))
    if radius_range is None:
        radius_range = spec.lesion_radius_range_mm
    dims_mm = np.array(spec.grid_shape) * np.array(spec.spacing_mm)
    sep_mm = 2.0 * max(spec.spacing_mm)  # keeps voxelized cores 26-disconnected
    new = []
    for k in range(n):
        for _ in range(max_attempts):
            r = float(rng.uniform(*radius_range))
            margin = r + max(spec.spacing_mm)
            if np.any(dims_mm - 2 * margin <= 0):
                continue
            c = np.array([rng.uniform(margin, d - margin) for d in dims_mm])
            if all(np.linalg.norm(c - pc) >= r + pr + sep_mm for pc, pr in placed + new):
                new.append((c, r))
                break
        else:
            raise CapacityError(
                f"failed to place {kind} {k + 1} of {n} after {max_attempts} attempts; "
                f"grid {spec.grid_shape} at spacing {spec.spacing_mm} is too crowded")
    return new


def generate_phantom(spec: PhantomSpec, patient_id: str) -> StudyVolume:
    """Deterministically generate one patient for a fixed (spec.seed, patient_id)."""
    spec.validate()
    rng = _patient_rng(spec.seed, patient_id)
    lesions = _place_spheres(rng, spec, spec.n_lesions_range, "lesion", [])

    if lesions and not any(p.lesion_contrast > 0 for p in spec.sequence_profiles):
        raise ValueError("no sequence profile gives lesion cores positive contrast")

    zz, yy, xx = np.meshgrid(*[np.arange(s) for s in spec.grid_shape], indexing="ij")
    coords_mm = np.stack([zz * spec.spacing_mm[0],
                          yy * spec.spacing_mm[1],
                          xx * spec.spacing_mm[2]], axis=-1)

    cores = [np.sum((coords_mm - c) ** 2, axis=-1) <= r * r for c, r in lesions]
    core = np.logical_or.reduce(cores) if cores else np.zeros(spec.grid_shape, dtype=bool)
    halo = ndimage.binary_dilation(core, structure=N26, iterations=2)
    # soft edema-like glow: a blurred shell, not a crisp ring tracing the core
    shell = ndimage.gaussian_filter((halo & ~core).astype(np.float64), sigma=1.0)

    # Per-sequence conspicuity: profiles with lesion_visibility < 1 miss a random
    # subset of cores, but every core stays positive in at least one sequence.
    visible = {}
    for p in spec.sequence_profiles:
        if cores and p.lesion_visibility < 1.0:
            visible[p.name] = rng.random(len(cores)) < p.lesion_visibility
        else:
            visible[p.name] = np.ones(len(cores), dtype=bool)
    positive = [p for p in spec.sequence_profiles if p.lesion_contrast > 0]
    if cores and positive:
        fallback = max(positive, key=lambda p: p.lesion_contrast)
        for k in range(len(cores)):
            if not any(visible[p.name][k] for p in positive):
                visible[fallback.name][k] = True

    # One shared smooth field per background group, drawn in group first-appearance
    # order, then one iid fine-noise draw per sequence, in profile order.  Each
    # group also carries its own independently placed set of distractor blobs:
    # in the T1-like group these read as non-enhancing tissue (bright pre and
    # post, rejected only by comparing against the pre-contrast channel); in
    # FLAIR's own group they read as fluid unrelated to any lesion.
    groups = []
    for p in spec.sequence_profiles:
        if p.background_group not in groups:
            groups.append(p.background_group)
    fields = {}
    for g in groups:
        field_g = _smooth_field(rng, spec.grid_shape, spec.background)
        blobs = _place_spheres(rng, spec, spec.n_distractors_range,
                               f"distractor[{g}]", list(lesions))
        for c, r in blobs:
            field_g = field_g + spec.distractor_contrast * (
                np.sum((coords_mm - c) ** 2, axis=-1) <= r * r)
        fields[g] = field_g

    sequences = {}
    for p in spec.sequence_profiles:
        g = 0.5 + fields[p.background_group].copy()
        # bounded iid noise: a post-minus-pre residual can never exceed 2x amplitude
        g += rng.uniform(-spec.background.noise_amplitude,
                         spec.background.noise_amplitude, spec.grid_shape)
        for k, core_k in enumerate(cores):
            if visible[p.name][k]:
                g[core_k] += p.lesion_contrast
        g += p.halo_contrast * shell
        if p.artifact_contrast > 0:
            spots = _place_spheres(rng, spec, spec.n_artifacts_range,
                                   f"artifact[{p.name}]", list(lesions),
                                   radius_range=spec.artifact_radius_range_mm)
            for c, r in spots:
                g[np.sum((coords_mm - c) ** 2, axis=-1) <= r * r] += p.artifact_contrast
        sequences[p.name] = g.astype(np.float32)

    return StudyVolume(patient_id=patient_id, sequences=sequences,
                       spacing_mm=tuple(float(s) for s in spec.spacing_mm),
                       gt_mask=core).validate()


MANIFEST_NAME = "manifest.json"


def write_dataset(volumes, root, overwrite=False):
    """Write one directory per patient plus a root manifest; returns manifest path."""
    root = Path(root)
    ids = [v.patient_id for v in volumes]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate patient ids: {ids}")
    if root.exists() and any(root.iterdir()):
        if not overwrite:
            raise DatasetError(f"refusing to write into non-empty {root} (pass overwrite=True)")
        shutil.rmtree(root)
    root.mkdir(parents=True, exist_ok=True)

    patients = []
    for vol in volumes:
        vol.validate()
        pdir = root / vol.patient_id
        pdir.mkdir()
        for name, grid in vol.sequences.items():
            write_grid(pdir / f"{name}.vol", grid, vol.spacing_mm)
        if vol.gt_mask is not None:
            write_grid(pdir / "gt.vol", vol.gt_mask, vol.spacing_mm)
        patients.append({
            "id": vol.patient_id,
            "shape": [int(s) for s in vol.grid_shape],
            "spacing_mm": [float(s) for s in vol.spacing_mm],
            "sequences": list(vol.sequences.keys()),
            "has_gt": vol.gt_mask is not None,
        })

    manifest = {
        "schema": 1,
        "canonical_sequences": _canonical_order_for(volumes),
        "patients": patients,
    }
    path = root / MANIFEST_NAME
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _canonical_order_for(volumes):
    """Union of sequence names, canonical names first, extras in first-seen order."""
    seen = []
    for v in volumes:
        for name in v.sequences:
            if name not in seen:
                seen.append(name)
    ordered = [s for s in CANONICAL_SEQUENCES if s in seen]
    ordered += [s for s in seen if s not in ordered]
    return ordered


def presence_vector(patient_entry, canonical):
    return tuple(s in patient_entry["sequences"] for s in canonical)


def read_manifest(root):
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise DatasetError(f"no {MANIFEST_NAME} under {root}")
    manifest = json.loads(path.read_text())
    for key in ("schema", "canonical_sequences", "patients"):
        if key not in manifest:
            raise DatasetError(f"{path}: manifest missing key {key!r}")
    return manifest


def read_dataset(root, sequence_filter=None):
    """Load all patients; sequences excluded by the filter stay absent, never zeroed."""
    root = Path(root)
    manifest = read_manifest(root)
    if sequence_filter is not None:
        sequence_filter = set(sequence_filter)
        if not sequence_filter:
            raise ValueError("empty sequence_filter leaves no usable input")

    volumes = []
    for entry in manifest["patients"]:
        pdir = root / entry["id"]
        shape = tuple(entry["shape"])
        sequences = {}
        for name in entry["sequences"]:
            if sequence_filter is not None and name not in sequence_filter:
                continue
            grid, spacing = read_grid(pdir / f"{name}.vol")
            if grid.shape != shape:
                raise DatasetError(
                    f"{entry['id']}/{name}: grid shape {grid.shape} != manifest {shape}")
            sequences[name] = grid
        if not sequences:
            raise ValueError(f"{entry['id']}: sequence_filter excludes every stored sequence")
        gt = None
        if entry["has_gt"]:
            gt_grid, _ = read_grid(pdir / "gt.vol")
            if gt_grid.shape != shape:
                raise DatasetError(
                    f"{entry['id']}/gt: grid shape {gt_grid.shape} != manifest {shape}")
            gt = gt_grid.astype(bool)
        volumes.append(StudyVolume(
            patient_id=entry["id"], sequences=sequences,
            spacing_mm=tuple(entry["spacing_mm"]), gt_mask=gt).validate())
    return volumes
