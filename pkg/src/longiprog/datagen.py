"""Synthetic longitudinal fundus data.

Each eye gets a latent onset time for advanced disease.  Drusen load ramps
up over ``onset_window`` years before onset, so eyes whose onset lies far
beyond the prediction visit look flat while eyes about to progress show
accumulating deposits.  Whether onset falls before the prediction time
depends on how far away that time is, which is the information the
interval scaling hands to the model.

Per-visit nuisance keeps any single visit from being decisive: a random
handful of small transient drusen appears at every visit, exposure varies,
and the odd bright artefact shows up.  Averaging over visits beats the
noise, so more visits help; weighting recent visits more helps too, since
their ramp position says the most about onset.

Images are rendered in left-eye orientation; right eyes are mirrored before
saving so that the preprocessing flip has something to undo.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .manifest import ADVANCED, EARLY, Visit, VisitSequence, write_manifest
from .ppm import write_ppm


class GenConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_eyes: int = 100
    progress_rate: float = 0.092
    seed: int = 0
    image_size: int = 80
    visits_per_eye: int = 4
    gap_min: float = 0.5
    gap_max: float = 3.0
    two_eye_fraction: float = 0.3
    # latent disease course
    onset_window: float = 8.0
    onset_delay_mean: float = 1.0
    load_range: tuple[float, float] = (0.95, 1.0)
    # rendering
    drusen_sites: int = 30
    # cluster spread around the macula, as a fraction of the field radius
    drusen_spread: float = 0.26
    drusen_radius: tuple[float, float] = (1.6, 3.0)
    transient_mean: float = 6.0
    transient_radius: tuple[float, float] = (1.2, 2.2)
    artifact_rate: float = 0.5
    exposure_jitter: float = 0.12

    def __post_init__(self):
        if not 0 < self.progress_rate < 1:
            raise GenConfigError(f"progress_rate must be in (0, 1), got {self.progress_rate}")
        if self.n_eyes < 10:
            raise GenConfigError(f"n_eyes must be >= 10, got {self.n_eyes}")
        if self.visits_per_eye < 2:
            raise GenConfigError("need at least one observed visit plus the prediction visit")
        if not 0 < self.gap_min <= self.gap_max:
            raise GenConfigError(f"bad gap bounds ({self.gap_min}, {self.gap_max})")
        if not 0 <= self.two_eye_fraction <= 1:
            raise GenConfigError(f"two_eye_fraction must be in [0, 1], got {self.two_eye_fraction}")
        if self.image_size < 32:
            raise GenConfigError(f"image_size must be >= 32, got {self.image_size}")


@dataclass
class EyeDraw:
    """Everything rendered for one eye, before it touches the filesystem."""

    record: VisitSequence
    images: list[np.ndarray]  # saved orientation, one per visit incl. the prediction visit
    blobs: list[dict]  # placement log per visit, saved orientation
    onset: float


# -- geometry ---------------------------------------------------------------


def _field(size: int):
    c = (size - 1) / 2.0
    radius = 0.45 * size
    return c, c, radius


def _disc_alpha(yy, xx, cy, cx, r):
    # one-pixel antialiased edge
    d = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    return np.clip(r + 0.5 - d, 0.0, 1.0)


def _blend(img, alpha, color):
    a = alpha[:, :, None]
    img *= 1.0 - a
    img += a * np.asarray(color, dtype=np.float64)


def _sample_sites(rng, n, cy, cx, radius, disc, spread=0.26):
    """Drusen positions clustered on the macula, away from the optic disc."""
    pts = []
    dy_d, dx_d, r_d = disc
    while len(pts) < n:
        y = cy + rng.normal(0, spread * radius)
        x = cx + rng.normal(0, spread * radius)
        if math.hypot(y - cy, x - cx) > 0.7 * radius:
            continue
        if math.hypot(y - dy_d, x - dx_d) < r_d + 3:
            continue
        pts.append((y, x))
    return pts


def render_visit(size, anatomy, drusen, artifacts, gain, noise_rng, atrophy=False):
    """Render one fundus image in left-eye orientation as uint8."""
    cy, cx, radius = _field(size)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    rho = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2) / radius
    base = np.array(anatomy["tint"]) * (1.0 - 0.35 * np.clip(rho, 0, 1) ** 2)[:, :, None]
    img = base * gain
    # macula: slightly darker centre
    mac = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * (0.12 * radius) ** 2)))
    img *= (1.0 - 0.18 * mac)[:, :, None]
    dy, dx, dr = anatomy["disc"]
    _blend(img, _disc_alpha(yy, xx, dy, dx, dr), np.array([250.0, 215.0, 160.0]) * min(gain, 1.0))
    if atrophy:
        _blend(img, 0.9 * _disc_alpha(yy, xx, cy, cx, 0.2 * radius), (245.0, 230.0, 195.0))
    for y, x, r, level in list(drusen) + list(artifacts):
        _blend(img, _disc_alpha(yy, xx, y, x, r), np.array([240.0, 225.0, 150.0]) * level * gain)
    img += noise_rng.normal(0.0, 2.5, img.shape)
    inside = _disc_alpha(yy, xx, cy, cx, radius)[:, :, None]
    background = noise_rng.uniform(0.0, 3.0, img.shape)
    img = img * inside + background * (1.0 - inside)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


# -- one eye ------------------------------------------------------------------


def eye_stream(seed: int, eye_index: int) -> np.random.Generator:
    return np.random.default_rng([seed, 1, eye_index])


def _load(t, onset, window, peak):
    return peak * min(max(1.0 - (onset - t) / window, 0.0), 1.0)


def generate_eye(rng: np.random.Generator, config: GenConfig, patient_id: str, eye: str) -> EyeDraw:
    size = config.image_size
    scale = size / 80.0
    cy, cx, radius = _field(size)
    nv = config.visits_per_eye

    label = int(rng.random() < config.progress_rate)
    gaps = rng.uniform(config.gap_min, config.gap_max, nv - 1)
    times = np.round(np.concatenate([[0.0], np.cumsum(gaps)]), 3)
    last_obs, t_pred = times[-2], times[-1]
    if label:
        onset = float(rng.uniform(last_obs, t_pred))
    else:
        onset = float(t_pred + rng.exponential(config.onset_delay_mean))
    peak = float(rng.uniform(*config.load_range))

    disc = (cy + rng.normal(0, 1.0 * scale), cx - 0.6 * radius + rng.normal(0, 1.0 * scale), 0.13 * radius)
    anatomy = {
        "tint": (rng.uniform(150, 185), rng.uniform(65, 90), rng.uniform(30, 45)),
        "disc": disc,
    }
    sites = _sample_sites(rng, config.drusen_sites, cy, cx, radius, disc, config.drusen_spread)
    # one threshold per equal load bin, so deposit area tracks load closely
    thresholds = (np.arange(config.drusen_sites) + rng.uniform(0.0, 1.0, config.drusen_sites)) / config.drusen_sites
    rmax = rng.uniform(*config.drusen_radius, config.drusen_sites) * scale

    images, blobs = [], []
    for k, t in enumerate(times):
        load = _load(t, onset, config.onset_window, peak)
        grown = [
            (y, x, r * min(max((load - u) / 0.15, 0.35), 1.0), 1.0)
            for (y, x), u, r in zip(sites, thresholds, rmax)
            if load >= u
        ]
        drusen = list(grown)
        n_tr = int(rng.poisson(config.transient_mean))
        transient = _sample_sites(rng, n_tr, cy, cx, radius, disc, config.drusen_spread)
        for (y, x), r in zip(transient, rng.uniform(*config.transient_radius, n_tr) * scale):
            drusen.append((y, x, r, 1.0))
        n_art = int(rng.poisson(config.artifact_rate))
        artifacts = []
        for _ in range(n_art):
            rr = 0.8 * radius * math.sqrt(rng.random())
            th = rng.uniform(0, 2 * math.pi)
            artifacts.append(
                (cy + rr * math.sin(th), cx + rr * math.cos(th), rng.uniform(1.2, 2.4) * scale, rng.uniform(0.8, 1.0))
            )
        gain = 1.0 + rng.uniform(-config.exposure_jitter, config.exposure_jitter)
        advanced = t >= onset
        img = render_visit(size, anatomy, drusen, artifacts, gain, rng, atrophy=advanced)

        def place(y, x):
            return (y, x) if eye == "left" else (y, size - 1 - x)

        if eye == "right":
            img = img[:, ::-1].copy()
        images.append(img)
        blobs.append(
            {
                "time": float(t),
                "load": round(load, 6),
                # area of the load-driven deposits only, transient ones excluded
                "area": round(sum(math.pi * d[2] ** 2 for d in grown), 6),
                "drusen": [[round(v, 4) for v in (*place(y, x), r)] for y, x, r, _ in drusen],
                "artifacts": [[round(v, 4) for v in (*place(y, x), r)] for y, x, r, _ in artifacts],
            }
        )

    eye_id = f"{patient_id}-{eye[0].upper()}"
    names = [f"images/{eye_id}_v{k}.ppm" for k in range(nv)]
    visits = tuple(
        Visit(names[k], float(times[k]), ADVANCED if times[k] >= onset else EARLY) for k in range(nv - 1)
    )
    record = VisitSequence(
        patient_id=patient_id,
        eye=eye,
        visits=visits,
        prediction_time=float(t_pred),
        label=label,
        prediction_image=names[-1],
        eye_id=eye_id,
    )
    return EyeDraw(record, images, blobs, onset)


# -- whole dataset --------------------------------------------------------------


def plan_patients(config: GenConfig) -> list[tuple[str, str]]:
    """(patient_id, eye) for every eye, in generation order."""
    rng = np.random.default_rng([config.seed, 0])
    plan: list[tuple[str, str]] = []
    p = 0
    while len(plan) < config.n_eyes:
        pid = f"P{p:05d}"
        p += 1
        if rng.random() < config.two_eye_fraction and config.n_eyes - len(plan) >= 2:
            plan += [(pid, "left"), (pid, "right")]
        else:
            plan.append((pid, "left" if rng.random() < 0.5 else "right"))
    return plan


def iter_eyes(config: GenConfig):
    for idx, (pid, eye) in enumerate(plan_patients(config)):
        yield generate_eye(eye_stream(config.seed, idx), config, pid, eye)


def generate_dataset(config: GenConfig, out_dir: str | os.PathLike) -> list[VisitSequence]:
    """Write images, ``manifest.jsonl``, ``blobs.jsonl`` and ``generator.json``."""
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = []
    with open(out / "blobs.jsonl", "w", encoding="utf-8", newline="\n") as blob_fh:
        for draw in iter_eyes(config):
            rec = draw.record
            paths = [v.image for v in rec.visits] + [rec.prediction_image]
            for rel, img in zip(paths, draw.images):
                write_ppm(out / rel, img)
            blob_fh.write(
                json.dumps({"eye_id": rec.eye_id, "onset": round(draw.onset, 6), "visits": draw.blobs}, separators=(",", ":"))
                + "\n"
            )
            records.append(rec)
    write_manifest(out / "manifest.jsonl", records)
    with open(out / "generator.json", "w", encoding="utf-8") as fh:
        json.dump(asdict(config), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return records


def read_blobs(path: str | os.PathLike) -> dict[str, dict]:
    with open(path, encoding="utf-8") as fh:
        return {row["eye_id"]: row for row in map(json.loads, fh) if row}


def blob_mask(entry: dict, size: int, include_artifacts: bool = False) -> np.ndarray:
    """Boolean mask of one visit's drusen in saved-image coordinates."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = np.zeros((size, size), dtype=bool)
    items = entry["drusen"] + (entry["artifacts"] if include_artifacts else [])
    for y, x, r in items:
        mask |= (yy - y) ** 2 + (xx - x) ** 2 <= (r + 0.5) ** 2
    return mask


# -- splitting ------------------------------------------------------------------


class SplitError(ValueError):
    pass


def split_dataset(records, fractions=(0.6, 0.2, 0.2), seed: int = 0):
    """Patient-level split; all eyes of a patient land in the same part."""
    fractions = tuple(float(f) for f in fractions)
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError(f"fractions must be non-negative and sum to 1, got {fractions}")
    by_patient: dict[str, list] = {}
    for rec in records:
        by_patient.setdefault(rec.patient_id, []).append(rec)
    patients = sorted(by_patient)
    order = np.random.default_rng(seed).permutation(len(patients))
    n = len(records)
    bounds = np.cumsum(fractions)[:-1] * n
    parts: list[list] = [[] for _ in fractions]
    seen = 0
    for i in order:
        eyes = by_patient[patients[i]]
        part = int(np.searchsorted(bounds, seen + 1e-9, side="right"))
        parts[part].extend(eyes)
        seen += len(eyes)
    for frac, part in zip(fractions, parts):
        if not part:
            raise SplitError(f"split with fraction {frac} received no eyes")
    return tuple(parts)
