"""Synthetic scene generator: labeled events driven by object co-occurrence.

Scenes are 3xHxW float images in [0, 1]. Rigid objects render as sharp
parametric glyphs, non-rigid ones as blurred blobs; clutter shapes appear
in both event classes. The event label is decided purely by which
indicator objects are present, so it is conditionally independent of the
pixel noise given the object layout.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .errors import InputError, IntegrityError

log = logging.getLogger(__name__)

RIGID_CLASSES = ("police", "helmet", "car")
NONRIGID_CLASSES = ("fire", "smoke")
EVENTS = ("benign", "malicious")
# objects whose presence marks a malicious scene (car is neutral)
INDICATORS = ("police", "helmet", "fire", "smoke")


@dataclass(frozen=True)
class DataConfig:
    image_size: int = 64
    # indicator presence probability per event class
    indicator_prob_malicious: float = 0.85
    indicator_prob_benign: float = 0.04
    min_indicators_malicious: int = 2
    max_indicators_benign: int = 1
    car_prob: float = 0.5
    clutter_range: tuple = (2, 5)
    rigid_size_range: tuple = (12, 20)
    nonrigid_size_range: tuple = (24, 40)
    noise: float = 0.05
    # rigid proposal windows: 3 scales x 2 aspects, stride = window/4
    proposal_scales: tuple = (14, 20, 28)
    proposal_aspects: tuple = (1.0, 2.0)
    gt_jitters: int = 3
    nonrigid_window: int = 40
    seed: int = 0

    def config_hash(self):
        return hashlib.sha256(
            json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        ).hexdigest()[:16]


@dataclass
class Scene:
    uid: int
    scene_id: str
    split: str
    event: str  # "malicious" | "benign"
    image: np.ndarray  # (3, H, W) float32
    rigid_boxes: list  # [(class_name, (x1, y1, x2, y2)), ...]
    nonrigid_boxes: list

    @property
    def event_index(self):
        return EVENTS.index(self.event)


# ---------------------------------------------------------------------------
# rendering

_COLORS = {
    "police": (0.10, 0.15, 0.90),
    "helmet": (0.95, 0.85, 0.10),
    "car": (0.90, 0.12, 0.12),
    "fire": (1.00, 0.45, 0.05),
    "smoke": (0.55, 0.55, 0.58),
}
_CLUTTER_COLORS = ((0.1, 0.7, 0.2), (0.65, 0.15, 0.7), (0.1, 0.65, 0.65))


def _jitter_color(rng, color, amount=0.08):
    c = np.asarray(color) + rng.uniform(-amount, amount, size=3)
    return np.clip(c, 0.0, 1.0)


def _draw_rect(img, box, color):
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    img[:, y1:y2, x1:x2] = np.asarray(color, dtype=np.float32)[:, None, None]


def _draw_disk(img, box, color):
    x1, y1, x2, y2 = box
    cx, cy = (x1 + x2) / 2, (y1 + y2) / 2
    r = (x2 - x1) / 2
    h, w = img.shape[1:]
    yy, xx = np.mgrid[0:h, 0:w]
    mask = (xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2 <= r * r
    img[:, mask] = np.asarray(color, dtype=np.float32)[:, None]


def _draw_blob(img, box, color):
    """Soft gaussian blob confined to its box; alpha-blended (blurred edge)."""
    x1, y1, x2, y2 = (int(round(v)) for v in box)
    bw, bh = x2 - x1, y2 - y1
    yy, xx = np.mgrid[0:bh, 0:bw]
    cx, cy = (bw - 1) / 2, (bh - 1) / 2
    alpha = np.exp(-(((xx - cx) / (bw / 3.2)) ** 2 + ((yy - cy) / (bh / 3.2)) ** 2))
    patch = img[:, y1:y2, x1:x2]
    col = np.asarray(color, dtype=np.float32)[:, None, None]
    img[:, y1:y2, x1:x2] = patch * (1 - alpha) + col * alpha


def _place_box(rng, size_w, size_h, image_size):
    x1 = float(rng.integers(0, image_size - size_w + 1))
    y1 = float(rng.integers(0, image_size - size_h + 1))
    return (x1, y1, x1 + size_w, y1 + size_h)


def _render_scene(rng, event, cfg: DataConfig):
    s = cfg.image_size
    img = np.full((3, s, s), 0.0, dtype=np.float32)
    img += rng.uniform(0.05, 0.22)
    img += rng.uniform(-cfg.noise, cfg.noise, size=img.shape).astype(np.float32)

    # which indicator objects appear is the only event-dependent choice
    p = cfg.indicator_prob_malicious if event == "malicious" else cfg.indicator_prob_benign
    while True:
        present = [name for name in INDICATORS if rng.random() < p]
        if event == "malicious" and len(present) < cfg.min_indicators_malicious:
            continue
        break
    if event == "benign" and len(present) > cfg.max_indicators_benign:
        keep = rng.integers(0, len(present))
        present = [present[keep]]
    objects = list(present)
    if rng.random() < cfg.car_prob:
        objects.append("car")

    rigid, nonrigid = [], []
    # blobs first so sharp glyphs stay on top when overlapping
    for name in objects:
        if name in NONRIGID_CLASSES:
            lo, hi = cfg.nonrigid_size_range
            size = int(rng.integers(lo, hi + 1))
            box = _place_box(rng, size, size, s)
            _draw_blob(img, box, _jitter_color(rng, _COLORS[name]))
            nonrigid.append((name, box))
    n_clutter = int(rng.integers(cfg.clutter_range[0], cfg.clutter_range[1] + 1))
    for _ in range(n_clutter):
        size = int(rng.integers(6, 14))
        box = _place_box(rng, size, size, s)
        color = _jitter_color(rng, _CLUTTER_COLORS[rng.integers(0, len(_CLUTTER_COLORS))])
        (_draw_rect if rng.random() < 0.5 else _draw_disk)(img, box, color)
    for name in objects:
        if name in NONRIGID_CLASSES:
            continue
        lo, hi = cfg.rigid_size_range
        size = int(rng.integers(lo, hi + 1))
        if name == "car":
            w, h = int(size * 1.6), size
        else:
            w, h = size, size
        w, h = min(w, s), min(h, s)
        box = _place_box(rng, w, h, s)
        if name == "helmet":
            _draw_disk(img, box, _jitter_color(rng, _COLORS[name]))
        else:
            _draw_rect(img, box, _jitter_color(rng, _COLORS[name]))
        rigid.append((name, box))

    np.clip(img, 0.0, 1.0, out=img)
    return img, rigid, nonrigid


# ---------------------------------------------------------------------------
# dataset generation and storage


def _split_events(count):
    half = count // 2
    return ["malicious"] * (half + count % 2) + ["benign"] * half


def generate_dataset(n: int, seed: int, cfg: DataConfig | None = None, out_dir=None):
    """Generate n scenes (half malicious, half benign), split half train / half test.

    Returns (manifest dict, scenes list); with out_dir set, scene images and
    manifest.json are written there.
    """
    if n % 2 != 0:
        raise InputError(f"dataset size must be even, got {n}")
    cfg = cfg or DataConfig()
    scenes = []
    uid = 0
    for split, count in (("train", n // 2), ("test", n - n // 2)):
        events = _split_events(count)
        for i, event in enumerate(events):
            rng = np.random.default_rng([seed, uid])  # per-scene stream
            img, rigid, nonrigid = _render_scene(rng, event, cfg)
            scenes.append(
                Scene(
                    uid=uid,
                    scene_id=f"{split}_{i:04d}",
                    split=split,
                    event=event,
                    image=img,
                    rigid_boxes=rigid,
                    nonrigid_boxes=nonrigid,
                )
            )
            uid += 1

    records = []
    for sc in scenes:
        rec = {
            "id": sc.scene_id,
            "uid": sc.uid,
            "split": sc.split,
            "file": f"scenes/{sc.scene_id}.rpj",
            "event": sc.event,
            "rigid": [[name, list(box)] for name, box in sc.rigid_boxes],
            "nonrigid": [[name, list(box)] for name, box in sc.nonrigid_boxes],
        }
        records.append(rec)
    manifest = {
        "format": "roiproj-manifest",
        "version": 1,
        "n": n,
        "seed": seed,
        "image_size": cfg.image_size,
        "config_hash": cfg.config_hash(),
        "scenes": records,
    }

    if out_dir is not None:
        scene_dir = os.path.join(out_dir, "scenes")
        os.makedirs(scene_dir, exist_ok=True)
        for sc, rec in zip(scenes, manifest["scenes"]):
            path = os.path.join(out_dir, rec["file"])
            binio.write_arrays(path, {"image": sc.image})
            with open(path, "rb") as fh:
                rec["sha256"] = hashlib.sha256(fh.read()).hexdigest()
        manifest["checksum"] = _manifest_checksum(manifest)
        with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
            json.dump(manifest, fh, indent=1, sort_keys=True)
            fh.write("\n")
    return manifest, scenes


def _manifest_checksum(manifest):
    body = {k: v for k, v in manifest.items() if k != "checksum"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def load_dataset(manifest_path, expected_config: DataConfig | None = None):
    """Load scenes back; every checksum must verify or IntegrityError is raised."""
    try:
        with open(manifest_path) as fh:
            manifest = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != "roiproj-manifest":
        raise IntegrityError(f"{manifest_path}: not a roiproj manifest")
    if manifest.get("checksum") != _manifest_checksum(manifest):
        raise IntegrityError(f"{manifest_path}: manifest checksum mismatch")
    if expected_config is not None and manifest["config_hash"] != expected_config.config_hash():
        log.warning(
            "manifest %s was generated with config hash %s, expected %s",
            manifest_path,
            manifest["config_hash"],
            expected_config.config_hash(),
        )
    root = os.path.dirname(os.path.abspath(manifest_path))
    scenes = []
    for rec in manifest["scenes"]:
        path = os.path.join(root, rec["file"])
        try:
            with open(path, "rb") as fh:
                blob = fh.read()
        except OSError as exc:
            raise IntegrityError(f"missing scene file {path}") from exc
        if hashlib.sha256(blob).hexdigest() != rec["sha256"]:
            raise IntegrityError(f"{path}: scene checksum mismatch")
        image = binio.read_arrays(path)["image"].astype(np.float32)
        scenes.append(
            Scene(
                uid=rec["uid"],
                scene_id=rec["id"],
                split=rec["split"],
                event=rec["event"],
                image=image,
                rigid_boxes=[(name, tuple(box)) for name, box in rec["rigid"]],
                nonrigid_boxes=[(name, tuple(box)) for name, box in rec["nonrigid"]],
            )
        )
    return manifest, scenes


# ---------------------------------------------------------------------------
# proposals


def sliding_window_count(cfg: DataConfig):
    """Closed-form rigid window count for one image (excludes GT jitters)."""
    s = cfg.image_size
    total = 0
    for scale in cfg.proposal_scales:
        for aspect in cfg.proposal_aspects:
            w = int(round(scale * np.sqrt(aspect)))
            h = int(round(scale / np.sqrt(aspect)))
            if w > s or h > s:
                continue
            stride_x = max(1, w // 4)
            stride_y = max(1, h // 4)
            total += ((s - w) // stride_x + 1) * ((s - h) // stride_y + 1)
    return total


def propose_rois(scene: Scene, branch: str, cfg: DataConfig, image_index: int = 0):
    """Candidate boxes for one scene, deterministic under (cfg.seed, scene.uid).

    rigid: multi-scale sliding windows (stride = window/4) plus each ground
    truth box and jittered copies of it, so at least one proposal per GT has
    IoU >= 0.5. non-rigid: 5 fixed multi-scale windows.
    """
    from .roi import RoI  # local import to avoid cycle at module load

    s = cfg.image_size
    boxes = []
    if branch == "rigid":
        for scale in cfg.proposal_scales:
            for aspect in cfg.proposal_aspects:
                w = int(round(scale * np.sqrt(aspect)))
                h = int(round(scale / np.sqrt(aspect)))
                if w > s or h > s:
                    continue
                stride_x = max(1, w // 4)
                stride_y = max(1, h // 4)
                for y in range(0, s - h + 1, stride_y):
                    for x in range(0, s - w + 1, stride_x):
                        boxes.append((float(x), float(y), float(x + w), float(y + h)))
        rng = np.random.default_rng([cfg.seed, scene.uid, 17])
        for _, gt in scene.rigid_boxes:
            boxes.append(tuple(float(v) for v in gt))
            x1, y1, x2, y2 = gt
            w, h = x2 - x1, y2 - y1
            for _ in range(cfg.gt_jitters):
                dx = rng.uniform(-0.06, 0.06) * w
                dy = rng.uniform(-0.06, 0.06) * h
                grow = rng.uniform(0.94, 1.06)
                nw, nh = w * grow, h * grow
                nx1 = min(max(x1 + dx, 0.0), s - nw)
                ny1 = min(max(y1 + dy, 0.0), s - nh)
                boxes.append((nx1, ny1, nx1 + nw, ny1 + nh))
    elif branch == "nonrigid":
        win = cfg.nonrigid_window
        boxes = [
            (0.0, 0.0, float(s), float(s)),
            (0.0, 0.0, float(win), float(win)),
            (float(s - win), 0.0, float(s), float(win)),
            (0.0, float(s - win), float(win), float(s)),
            (float(s - win), float(s - win), float(s), float(s)),
        ]
    else:
        raise InputError(f"unknown branch {branch!r}")
    return [RoI(image_index=image_index, box=b) for b in boxes]
