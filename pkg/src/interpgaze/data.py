"""Synthetic eye-patch rendering, the analytic gaze oracle, dataset loading and pair sampling.

The renderer draws a stylized eye whose iris centroid is an exact affine
function of the gaze angles, so the oracle can invert the geometry and
recover (yaw, pitch) from pixels alone.  Head pose shears the scenery and
shifts the eyeball horizontally, making pose visually distinct from yaw.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import DatasetError, EstimationFailureError, ValidationError

log = logging.getLogger(__name__)

# Label grid of the wide-range capture protocol (pose / yaw / pitch, degrees).
POSE_LABELS = (-30.0, -15.0, 0.0, 15.0, 30.0)
YAW_LABELS = (-45.0, -35.0, -25.0, -15.0, -10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 25.0, 35.0, 45.0)
PITCH_LABELS = (-35.0, -25.0, -15.0, -10.0, 0.0, 10.0, 15.0, 25.0, 35.0)


@dataclass(frozen=True)
class Binning:
    """Discrete label sets used for classification targets."""

    pose: tuple = POSE_LABELS
    yaw: tuple = YAW_LABELS
    pitch: tuple = PITCH_LABELS

    @property
    def sizes(self) -> tuple:
        return (len(self.pose), len(self.yaw), len(self.pitch))


DEFAULT_BINNING = Binning()


@dataclass(frozen=True)
class RenderGeometry:
    """Patch and eye geometry; every pixel quantity is in patch pixels.

    The iris centroid is placed at
        cx = x0 + (W/2 - margin_x) * (yaw/yaw_max) * cos(pose) + shear_px * pose/pose_max
        cy = y0 - (H/2 - margin_y) * (pitch/pitch_max)
    which the oracle inverts exactly.
    """

    height: int = 32
    width: int = 64
    margin_x: float = 13.0
    margin_y: float = 10.0
    shear_px: float = 5.0
    shear_tilt: float = 0.35
    eye_rx: float = 25.5
    eye_ry: float = 12.5
    iris_rx: float = 5.5
    iris_ry: float = 3.5
    pupil_rx: float = 2.0
    pupil_ry: float = 1.6
    # lids deform toward the gaze: the opening center follows the iris by this
    # fraction, keeping the iris inside the opening at corner angle combos
    lid_follow: float = 0.45
    opening_power: float = 2.5
    yaw_max: float = 45.0
    pitch_max: float = 35.0
    pose_max: float = 30.0

    @property
    def center(self) -> tuple:
        return ((self.width - 1) / 2.0, (self.height - 1) / 2.0)

    @property
    def gaze_amp_x(self) -> float:
        return self.width / 2.0 - self.margin_x

    @property
    def gaze_amp_y(self) -> float:
        return self.height / 2.0 - self.margin_y


DEFAULT_GEOMETRY = RenderGeometry()


@dataclass(frozen=True)
class AttributeLabel:
    """Head pose plus gaze direction in degrees, with a subject identity."""

    pose_deg: float
    yaw_deg: float
    pitch_deg: float
    subject_id: str

    def primaries(self) -> tuple:
        return (self.pose_deg, self.yaw_deg, self.pitch_deg)

    def same_primaries(self, other: "AttributeLabel") -> bool:
        return all(
            math.isclose(a, b, abs_tol=1e-9)
            for a, b in zip(self.primaries(), other.primaries())
        )


@dataclass(frozen=True)
class SyntheticEyeParams:
    """Full parameter set for one procedural render.

    Identical params (seed included) always produce bit-identical pixels.
    """

    pose_deg: float = 0.0
    yaw_deg: float = 0.0
    pitch_deg: float = 0.0
    iris_hue: float = 0.6
    skin_tone: float = 0.35
    eyelid_aperture: float = 0.95
    has_glasses: bool = False
    brightness: float = 1.0
    seed: int = 0

    def label(self, subject_id: str = "synthetic") -> AttributeLabel:
        return AttributeLabel(self.pose_deg, self.yaw_deg, self.pitch_deg, subject_id)


@dataclass(frozen=True)
class PairSample:
    source: np.ndarray
    source_attrs: AttributeLabel
    target: np.ndarray
    target_attrs: AttributeLabel


def _validate_params(p: SyntheticEyeParams, g: RenderGeometry) -> None:
    if abs(p.yaw_deg) > g.yaw_max + 1e-9:
        raise ValidationError(f"yaw {p.yaw_deg} outside [-{g.yaw_max}, {g.yaw_max}]")
    if abs(p.pitch_deg) > g.pitch_max + 1e-9:
        raise ValidationError(f"pitch {p.pitch_deg} outside [-{g.pitch_max}, {g.pitch_max}]")
    if abs(p.pose_deg) > g.pose_max + 1e-9:
        raise ValidationError(f"pose {p.pose_deg} outside [-{g.pose_max}, {g.pose_max}]")
    if not (0.0 < p.eyelid_aperture <= 1.0):
        raise ValidationError(f"eyelid_aperture {p.eyelid_aperture} outside (0, 1]")
    if not (0.0 <= p.iris_hue <= 1.0):
        raise ValidationError(f"iris_hue {p.iris_hue} outside [0, 1]")
    if not (0.0 <= p.skin_tone <= 1.0):
        raise ValidationError(f"skin_tone {p.skin_tone} outside [0, 1]")
    if not (0.7 <= p.brightness <= 1.3):
        raise ValidationError(f"brightness {p.brightness} outside [0.7, 1.3]")


def iris_center(params: SyntheticEyeParams, geometry: RenderGeometry = DEFAULT_GEOMETRY) -> tuple:
    """Exact iris centroid (cx, cy) in pixel coordinates for the given params."""
    g = geometry
    x0, y0 = g.center
    pose_rad = math.radians(params.pose_deg)
    shear_off = g.shear_px * params.pose_deg / g.pose_max
    cx = x0 + g.gaze_amp_x * (params.yaw_deg / g.yaw_max) * math.cos(pose_rad) + shear_off
    cy = y0 - g.gaze_amp_y * (params.pitch_deg / g.pitch_max)
    return cx, cy


def _ellipse_mask(xx, yy, cx, cy, rx, ry):
    # Linear ~1px anti-aliased edge along the minor axis; symmetric, so the
    # mask centroid stays exactly at (cx, cy).
    d = np.sqrt(((xx - cx) / rx) ** 2 + ((yy - cy) / ry) ** 2)
    k = min(rx, ry)
    return np.clip((1.0 - d) * k + 0.5, 0.0, 1.0)


def _hsv_to_rgb(h: float, s: float, v):
    """Vectorized HSV->RGB for scalar hue/saturation and array value."""
    h6 = (h % 1.0) * 6.0
    i = int(h6) % 6
    f = h6 - int(h6)
    p, q, t = v * (1 - s), v * (1 - s * f), v * (1 - s * (1 - f))
    table = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    return table[i]


def render_synthetic(
    params: SyntheticEyeParams, geometry: RenderGeometry = DEFAULT_GEOMETRY
) -> np.ndarray:
    """Render one eye patch as float32 [3, H, W] with values in [-1, 1]."""
    g = geometry
    _validate_params(params, g)
    x0, y0 = g.center
    pose_rad = math.radians(params.pose_deg)
    shear_off = g.shear_px * params.pose_deg / g.pose_max
    slope = math.tan(pose_rad) * g.shear_tilt

    yy, xx = np.mgrid[0 : g.height, 0 : g.width].astype(np.float64)
    # Scenery (opening, brow, glasses) lives in sheared coordinates; the iris
    # is drawn afterwards in final coordinates so its centroid is exact.
    u = xx - (shear_off + slope * (yy - y0))

    rng = np.random.default_rng(params.seed)

    # Skin with a little luminance-only texture (keeps chroma flat for the oracle).
    pale = np.array([0.92, 0.85, 0.79])
    deep = np.array([0.46, 0.36, 0.29])
    skin = pale + (deep - pale) * params.skin_tone
    noise = rng.normal(0.0, 1.0, (g.height, g.width))
    # cheap smoothing so the texture is blotchy rather than white
    noise = 0.25 * (noise + np.roll(noise, 1, 0) + np.roll(noise, 1, 1) + np.roll(noise, (1, 1), (0, 1)))
    lum = 1.0 + 0.03 * noise
    img = skin[:, None, None] * lum[None, :, :]

    # Eye opening with near-white sclera, vignetted toward the rim.  A squarer
    # superellipse plus lid-follow keeps the iris inside at extreme angles.
    ry_open = g.eye_ry * params.eyelid_aperture
    dx_gaze = g.gaze_amp_x * (params.yaw_deg / g.yaw_max) * math.cos(pose_rad)
    dy_gaze = -g.gaze_amp_y * (params.pitch_deg / g.pitch_max)
    ox = x0 + g.lid_follow * dx_gaze
    oy = y0 + g.lid_follow * dy_gaze
    d_open = (
        np.abs((u - ox) / g.eye_rx) ** g.opening_power
        + np.abs((yy - oy) / ry_open) ** g.opening_power
    ) ** (1.0 / g.opening_power)
    opening = np.clip((1.0 - d_open) * min(g.eye_rx, ry_open) + 0.5, 0.0, 1.0)
    sclera = np.array([0.97, 0.965, 0.95])[:, None, None] * (1.0 - 0.18 * np.clip(d_open, 0, 1) ** 2)
    img = img * (1 - opening) + sclera * opening

    # Eyelid crease: darkened band hugging the upper opening rim.
    crease = np.exp(-(((d_open - 1.12) / 0.1) ** 2)) * (yy < y0)
    img = img * (1.0 - 0.25 * crease)

    # Brow bar above the opening.
    brow_y = y0 - g.eye_ry - 2.5
    brow = np.clip(1.5 - np.abs(yy - brow_y), 0, 1) * np.clip(1.0 - np.abs(u - x0) / (g.eye_rx * 0.9), 0, 1)
    img = img * (1.0 - 0.45 * brow)

    # Iris: drawn in final coordinates at the exact analytic centroid.
    cx, cy = iris_center(params, g)
    iris_mask = _ellipse_mask(xx, yy, cx, cy, g.iris_rx, g.iris_ry) * opening
    r_iris = np.sqrt(((xx - cx) / g.iris_rx) ** 2 + ((yy - cy) / g.iris_ry) ** 2)
    val = 0.8 * (1.0 - 0.3 * np.clip(r_iris, 0, 1) ** 2)
    iris_rgb = np.stack(_hsv_to_rgb(params.iris_hue, 0.95, val))
    img = img * (1 - iris_mask) + iris_rgb * iris_mask

    pupil = _ellipse_mask(xx, yy, cx, cy, g.pupil_rx, g.pupil_ry) * opening
    img = img * (1 - pupil) + np.array([0.06, 0.06, 0.07])[:, None, None] * pupil

    if params.has_glasses:
        rect = np.maximum(np.abs(u - x0) / (g.eye_rx + 2.5), np.abs(yy - y0) / (g.eye_ry + 2.0))
        ring = np.clip(1.0 - np.abs(rect - 1.0) * 9.0, 0.0, 1.0)
        img = img * (1 - 0.9 * ring) + np.array([0.16, 0.16, 0.18])[:, None, None] * 0.9 * ring

    img = np.clip(img * params.brightness, 0.0, 1.0)
    return (img * 2.0 - 1.0).astype(np.float32)


# Oracle thresholds: skin chroma stays below ~0.23 even at brightness 1.3,
# while a visible iris peaks above ~0.33 even at brightness 0.7.
_CHROMA_FLOOR = 0.28
_CHROMA_REL = 0.55
_CHROMA_ABS = 0.24


def oracle_gaze_from_image(
    img: np.ndarray, pose_deg: float, geometry: RenderGeometry = DEFAULT_GEOMETRY
) -> tuple:
    """Recover (yaw_deg, pitch_deg) from a synthetic-style patch.

    Valid only on procedurally rendered patches (or model outputs imitating
    them): segments the iris as the high-chroma region, takes its weighted
    centroid and inverts the rendering affine.  The commanded pose must be
    supplied to undo the pose shear.
    """
    g = geometry
    arr = np.asarray(img, dtype=np.float64)
    if arr.shape != (3, g.height, g.width):
        raise ValidationError(f"expected image of shape (3, {g.height}, {g.width}), got {arr.shape}")
    x01 = (arr + 1.0) / 2.0
    chroma = x01.max(axis=0) - x01.min(axis=0)
    cmax = float(chroma.max())
    if cmax < _CHROMA_FLOOR:
        raise EstimationFailureError(
            f"no iris region found (peak chroma {cmax:.3f} < {_CHROMA_FLOOR})"
        )
    w = np.clip(chroma - max(_CHROMA_REL * cmax, _CHROMA_ABS), 0.0, None) ** 2
    total = w.sum()
    if total <= 0:
        raise EstimationFailureError("no iris region found (empty chroma support)")
    yy, xx = np.mgrid[0 : g.height, 0 : g.width].astype(np.float64)
    cx = float((w * xx).sum() / total)
    cy = float((w * yy).sum() / total)

    x0, y0 = g.center
    pose_rad = math.radians(pose_deg)
    shear_off = g.shear_px * pose_deg / g.pose_max
    dx = cx - x0 - shear_off
    dy = y0 - cy
    yaw = dx * g.yaw_max / (g.gaze_amp_x * math.cos(pose_rad))
    pitch = dy * g.pitch_max / g.gaze_amp_y
    return float(yaw), float(pitch)


class GazeDataset:
    """Ordered collection of (pixels, label) records with a subject index."""

    def __init__(self, records, skipped: int = 0):
        self.records = list(records)
        self.skipped = skipped
        self._by_subject: dict = {}
        for idx, (_, label) in enumerate(self.records):
            self._by_subject.setdefault(label.subject_id, []).append(idx)

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, idx: int):
        return self.records[idx]

    @property
    def subjects(self) -> list:
        return list(self._by_subject)

    def indices_for_subject(self, subject_id: str) -> list:
        return self._by_subject[subject_id]


_COLUMBIA_RE = re.compile(
    r"^(?P<subject>.+?)_2m_(?P<pose>-?\d+)P_(?P<pitch>-?\d+)V_(?P<yaw>-?\d+)H\.(?P<ext>png|jpe?g|bmp)$",
    re.IGNORECASE,
)


def _load_patch_image(path: Path, geometry: RenderGeometry) -> np.ndarray:
    im = Image.open(path).convert("RGB")
    w, h = im.size
    target_aspect = geometry.width / geometry.height
    if w / h > target_aspect:  # too wide: crop width
        new_w = int(round(h * target_aspect))
        left = (w - new_w) // 2
        im = im.crop((left, 0, left + new_w, h))
    elif w / h < target_aspect:  # too tall: crop height
        new_h = int(round(w / target_aspect))
        top = (h - new_h) // 2
        im = im.crop((0, top, w, top + new_h))
    im = im.resize((geometry.width, geometry.height), Image.BILINEAR)
    arr = np.asarray(im, dtype=np.float32).transpose(2, 0, 1) / 255.0
    return arr * 2.0 - 1.0


def load_columbia_dir(path, geometry: RenderGeometry = DEFAULT_GEOMETRY) -> GazeDataset:
    """Load a directory of `{subject}_2m_{P}P_{V}V_{H}H.{ext}` images.

    Unparsable filenames are skipped with a warning and counted on the
    returned dataset; an empty result raises DatasetError.  Records are
    sorted lexicographically by filename for determinism.
    """
    root = Path(path)
    if not root.is_dir():
        raise DatasetError(f"not a directory: {root}")
    records = []
    skipped = 0
    for fp in sorted(root.iterdir(), key=lambda p: p.name):
        if not fp.is_file():
            continue
        m = _COLUMBIA_RE.match(fp.name)
        if m is None:
            skipped += 1
            log.warning("skipping unparsable filename: %s", fp.name)
            continue
        label = AttributeLabel(
            pose_deg=float(m.group("pose")),
            yaw_deg=float(m.group("yaw")),
            pitch_deg=float(m.group("pitch")),
            subject_id=m.group("subject"),
        )
        records.append((_load_patch_image(fp, geometry), label))
    if not records:
        raise DatasetError(f"no parsable image files in {root} ({skipped} skipped)")
    return GazeDataset(records, skipped=skipped)


def attrs_to_bins(a: AttributeLabel, binning: Binning = DEFAULT_BINNING) -> tuple:
    """Nearest-bin indices (pose, yaw, pitch); ties break toward the lower index."""
    out = []
    for value, centers in ((a.pose_deg, binning.pose), (a.yaw_deg, binning.yaw), (a.pitch_deg, binning.pitch)):
        lo, hi = centers[0], centers[-1]
        if value < lo - 1e-9 or value > hi + 1e-9:
            raise ValidationError(f"angle {value} outside binning range [{lo}, {hi}]")
        dists = np.abs(np.asarray(centers, dtype=np.float64) - value)
        out.append(int(np.argmin(dists)))  # argmin returns the first (lower) index on ties
    return tuple(out)


def sample_pair(dataset: GazeDataset, rng: np.random.Generator, mode: str = "train") -> PairSample:
    """Draw one (source, target) pair.

    train / interp: same subject, attributes differing in at least one primary.
    redirect: cross-subject reference preferred (one-shot setting); falls back
    to same-subject when the dataset holds a single subject.
    """
    if mode not in ("train", "interp", "redirect"):
        raise ValidationError(f"unknown sampling mode: {mode}")
    if len(dataset) == 0:
        raise DatasetError("empty dataset")

    if mode in ("train", "interp"):
        eligible = []
        for subj in dataset.subjects:
            idxs = dataset.indices_for_subject(subj)
            if len(idxs) < 2:
                continue
            first = dataset[idxs[0]][1]
            if any(not dataset[i][1].same_primaries(first) for i in idxs[1:]):
                eligible.append(subj)
        if not eligible:
            raise DatasetError("no subject has two images with differing attributes")
        subj = eligible[rng.integers(len(eligible))]
        idxs = dataset.indices_for_subject(subj)
        i = idxs[rng.integers(len(idxs))]
        src_px, src_lb = dataset[i]
        partners = [j for j in idxs if not dataset[j][1].same_primaries(src_lb)]
        if not partners:
            partners = [
                j
                for j in idxs
                for k in [dataset[j][1]]
                if any(not dataset[m][1].same_primaries(k) for m in idxs if m != j)
            ]
            i = partners[rng.integers(len(partners))]
            src_px, src_lb = dataset[i]
            partners = [j for j in idxs if not dataset[j][1].same_primaries(src_lb)]
        j = partners[rng.integers(len(partners))]
        tgt_px, tgt_lb = dataset[j]
        return PairSample(src_px, src_lb, tgt_px, tgt_lb)

    # redirect mode
    i = int(rng.integers(len(dataset)))
    src_px, src_lb = dataset[i]
    others = [
        j
        for j in range(len(dataset))
        if dataset[j][1].subject_id != src_lb.subject_id
        and not dataset[j][1].same_primaries(src_lb)
    ]
    if not others:
        others = [j for j in range(len(dataset)) if not dataset[j][1].same_primaries(src_lb)]
    if not others:
        raise DatasetError("no valid reference for redirect mode")
    j = others[int(rng.integers(len(others)))]
    tgt_px, tgt_lb = dataset[j]
    return PairSample(src_px, src_lb, tgt_px, tgt_lb)


def generate_synthetic_dataset(
    count: int,
    rng: np.random.Generator,
    images_per_subject: int = 30,
    geometry: RenderGeometry = DEFAULT_GEOMETRY,
    binning: Binning = DEFAULT_BINNING,
    continuous_angles: bool = False,
    aperture_range: tuple = (0.8, 1.0),
):
    """Procedurally generate a dataset of `count` patches.

    Subjects share their appearance (iris hue, skin tone, aperture, glasses,
    brightness); angles vary per image.  By default angles are drawn from the
    discrete label grid without within-subject repeats, mirroring a constrained
    capture protocol; `continuous_angles` draws them uniformly instead.

    Returns (GazeDataset, list[SyntheticEyeParams]) in render order.
    """
    if count <= 0:
        raise ValidationError("count must be positive")
    n_subjects = max(1, count // images_per_subject)
    records = []
    all_params = []
    made = 0
    grid = [(p, y, v) for p in binning.pose for y in binning.yaw for v in binning.pitch]
    for s in range(n_subjects):
        subject_id = f"s{s:04d}"
        hue = float(rng.random())
        skin = float(rng.random())
        aperture = float(rng.uniform(*aperture_range))
        glasses = bool(rng.random() < 0.3)
        brightness = float(rng.uniform(0.85, 1.15))
        n_imgs = images_per_subject if s < n_subjects - 1 else count - made
        if continuous_angles:
            combos = [
                (
                    float(rng.uniform(-geometry.pose_max, geometry.pose_max)),
                    float(rng.uniform(-geometry.yaw_max, geometry.yaw_max)),
                    float(rng.uniform(-geometry.pitch_max, geometry.pitch_max)),
                )
                for _ in range(n_imgs)
            ]
        else:
            pick = rng.choice(len(grid), size=min(n_imgs, len(grid)), replace=False)
            combos = [grid[int(k)] for k in pick]
            while len(combos) < n_imgs:  # only if n_imgs > grid size
                combos.append(grid[int(rng.integers(len(grid)))])
        for pose, yaw, pitch in combos:
            params = SyntheticEyeParams(
                pose_deg=pose,
                yaw_deg=yaw,
                pitch_deg=pitch,
                iris_hue=hue,
                skin_tone=skin,
                eyelid_aperture=aperture,
                has_glasses=glasses,
                brightness=brightness,
                seed=int(rng.integers(2**31 - 1)),
            )
            records.append((render_synthetic(params, geometry), params.label(subject_id)))
            all_params.append(params)
            made += 1
            if made >= count:
                break
        if made >= count:
            break
    return GazeDataset(records), all_params


def patch_to_image(patch: np.ndarray) -> Image.Image:
    """[-1, 1] float CHW -> PIL RGB image."""
    arr = np.clip((np.asarray(patch, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    return Image.fromarray((arr.transpose(1, 2, 0) * 255.0).round().astype(np.uint8))


def save_synthetic_dataset(
    out_dir,
    dataset: GazeDataset,
    params: list,
    geometry: RenderGeometry = DEFAULT_GEOMETRY,
) -> None:
    """Write patches as numbered PNGs plus a manifest.json with per-file params."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for idx, ((pixels, label), p) in enumerate(zip(dataset.records, params)):
        name = f"{idx:06d}.png"
        patch_to_image(pixels).save(out / name)
        entry = {"file": name, "subject_id": label.subject_id}
        entry.update(asdict(p))
        entries.append(entry)
    manifest = {"geometry": asdict(geometry), "files": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_synthetic_dir(path, geometry: RenderGeometry = None) -> GazeDataset:
    """Load a directory produced by save_synthetic_dataset via its manifest."""
    root = Path(path)
    mf = root / "manifest.json"
    if not mf.is_file():
        raise DatasetError(f"missing manifest.json in {root}")
    manifest = json.loads(mf.read_text())
    if geometry is None:
        geometry = RenderGeometry(**manifest.get("geometry", {}))
    records = []
    for entry in manifest["files"]:
        fp = root / entry["file"]
        if not fp.is_file():
            raise DatasetError(f"manifest references missing file {fp}")
        label = AttributeLabel(
            pose_deg=float(entry["pose_deg"]),
            yaw_deg=float(entry["yaw_deg"]),
            pitch_deg=float(entry["pitch_deg"]),
            subject_id=str(entry["subject_id"]),
        )
        records.append((_load_patch_image(fp, geometry), label))
    if not records:
        raise DatasetError(f"manifest lists no files in {root}")
    return GazeDataset(records)
