"""A deterministic synthetic zero-shot detection world.

Classes are shape x color attribute pairs.  Each class's semantic vector
is the concatenation of its shape embedding and color embedding plus a
small fixed per-class perturbation, so unseen classes (novel attribute
combinations whose individual attributes all occur among seen classes)
are reachable from seen ones by construction.  Scenes are small RGB grids
with 1-4 filled shape blobs over a dark background plus Gaussian pixel
noise; annotations record exact boxes.

Dataset generation is a pure function of (config, seed): train scenes draw
only seen classes, the unseen-only split draws only unseen classes, and
the mixed split draws from the full class list.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .episodes import SemanticVocab, VocabEntry
from .geometry import cxcywh_to_xyxy, iou_matrix_xyxy

SHAPE_NAMES = ("square", "circle", "triangle", "diamond", "cross", "ring")
COLOR_NAMES = ("red", "green", "blue", "yellow", "magenta", "cyan", "white", "orange")
COLOR_RGB = {
    "red": (0.95, 0.15, 0.15),
    "green": (0.15, 0.9, 0.2),
    "blue": (0.2, 0.3, 0.95),
    "yellow": (0.95, 0.9, 0.15),
    "magenta": (0.9, 0.2, 0.85),
    "cyan": (0.15, 0.85, 0.9),
    "white": (0.95, 0.95, 0.95),
    "orange": (0.95, 0.55, 0.1),
}
BACKGROUND = 0.1
PIXEL_NOISE_SIGMA = 0.02
MIN_BOX_AREA = 0.01
MAX_GT_IOU = 0.3


class WorldError(ValueError):
    """Unsatisfiable world construction request."""


@dataclass(frozen=True)
class WorldConfig:
    n_shapes: int = 4
    n_colors: int = 5
    d_attr: int = 8
    unseen_fraction: float = 0.2
    scene_size: int = 64
    max_objects: int = 4
    min_side: float = 0.18
    max_side: float = 0.42

    def __post_init__(self):
        if self.n_shapes * self.n_colors < 6:
            raise WorldError("need at least 6 classes (n_shapes * n_colors >= 6)")
        if self.n_shapes > len(SHAPE_NAMES) or self.n_colors > len(COLOR_NAMES):
            raise WorldError(
                f"at most {len(SHAPE_NAMES)} shapes and {len(COLOR_NAMES)} colors available"
            )


def class_name(shape_idx: int, color_idx: int) -> str:
    return f"{COLOR_NAMES[color_idx]}_{SHAPE_NAMES[shape_idx]}"


def build_vocabulary(config: WorldConfig, seed: int) -> SemanticVocab:
    """Attribute-composed embeddings with a covered unseen split.

    Attribute embeddings are indicator vectors (one dimension per shape or
    color) inside a d_attr block, so a class vector is an attribute code
    plus a small fixed perturbation; unseen combinations are then linear
    recombinations of seen attributes.  The unseen set is the configured
    fraction of shape x color pairs, chosen so every shape and every color
    still appears in at least one seen class.
    """
    if config.d_attr < max(config.n_shapes, config.n_colors):
        raise WorldError(
            f"d_attr={config.d_attr} too small for {config.n_shapes} shapes / {config.n_colors} colors"
        )
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    shape_emb = np.zeros((config.n_shapes, config.d_attr))
    shape_emb[np.arange(config.n_shapes), np.arange(config.n_shapes)] = 1.0
    color_emb = np.zeros((config.n_colors, config.d_attr))
    color_emb[np.arange(config.n_colors), np.arange(config.n_colors)] = 1.0

    n_classes = config.n_shapes * config.n_colors
    n_unseen = int(round(config.unseen_fraction * n_classes))
    pairs = [(s, c) for s in range(config.n_shapes) for c in range(config.n_colors)]

    unseen: set[int] = set()
    for _ in range(1000):
        pick = rng.choice(n_classes, size=n_unseen, replace=False)
        seen_pairs = [pairs[i] for i in range(n_classes) if i not in set(pick)]
        seen_shapes = {s for s, _ in seen_pairs}
        seen_colors = {c for _, c in seen_pairs}
        if len(seen_shapes) == config.n_shapes and len(seen_colors) == config.n_colors:
            unseen = set(int(i) for i in pick)
            break
    else:
        raise WorldError(
            f"cannot pick {n_unseen} unseen classes while covering every attribute"
        )

    entries = []
    for cid, (s, c) in enumerate(pairs):
        vec = np.concatenate([shape_emb[s], color_emb[c]])
        vec = vec + rng.normal(0.0, 0.02, size=vec.shape)
        entries.append(
            VocabEntry(
                id=cid,
                name=class_name(s, c),
                seen=cid not in unseen,
                embedding=vec,
            )
        )
    vecs = np.stack([e.embedding for e in entries])
    if len(np.unique(vecs.round(12), axis=0)) != len(entries):
        raise WorldError("semantic vectors are not distinct")
    return SemanticVocab(entries)


def _shape_mask(shape: str, ys: np.ndarray, xs: np.ndarray, box_px: tuple[float, float, float, float]) -> np.ndarray:
    x0, y0, x1, y1 = box_px
    cx, cy = 0.5 * (x0 + x1), 0.5 * (y0 + y1)
    rx, ry = max(0.5 * (x1 - x0), 1e-6), max(0.5 * (y1 - y0), 1e-6)
    dx = (xs - cx) / rx
    dy = (ys - cy) / ry
    inside = (np.abs(dx) <= 1.0) & (np.abs(dy) <= 1.0)
    if shape == "square":
        return inside
    if shape == "circle":
        return dx * dx + dy * dy <= 1.0
    if shape == "triangle":
        t = (dy + 1.0) * 0.5  # 0 at top, 1 at base
        return inside & (np.abs(dx) <= t)
    if shape == "diamond":
        return np.abs(dx) + np.abs(dy) <= 1.0
    if shape == "cross":
        return inside & ((np.abs(dx) <= 1.0 / 3.0) | (np.abs(dy) <= 1.0 / 3.0))
    if shape == "ring":
        r2 = dx * dx + dy * dy
        return (r2 <= 1.0) & (r2 >= 0.25)
    raise WorldError(f"unknown shape {shape!r}")


@dataclass
class Scene:
    pixels: np.ndarray  # (S, S, 3) float32 in [0, 1]
    classes: np.ndarray  # (n,) int64 class ids
    boxes: np.ndarray  # (n, 4) normalized (cx, cy, w, h)


def generate_scene(
    vocab: SemanticVocab,
    allowed: tuple[int, ...],
    config: WorldConfig,
    rng: np.random.Generator,
) -> Scene:
    """Sample 1-4 non-crowded objects from ``allowed`` and render them."""
    if not allowed:
        raise WorldError("allowed class set is empty")
    s = config.scene_size
    n_target = int(rng.integers(1, config.max_objects + 1))
    classes: list[int] = []
    boxes: list[np.ndarray] = []
    for _ in range(n_target):
        cid = int(allowed[int(rng.integers(len(allowed)))])
        placed = None
        for _ in range(30):
            w = float(rng.uniform(config.min_side, config.max_side))
            h = float(rng.uniform(config.min_side, config.max_side))
            cx = float(rng.uniform(0.5 * w + 0.01, 1.0 - 0.5 * w - 0.01))
            cy = float(rng.uniform(0.5 * h + 0.01, 1.0 - 0.5 * h - 0.01))
            cand = np.array([cx, cy, w, h])
            if boxes:
                ious = iou_matrix_xyxy(
                    cxcywh_to_xyxy(cand[None, :]), cxcywh_to_xyxy(np.stack(boxes))
                )
                if ious.max() >= MAX_GT_IOU:
                    continue
            placed = cand
            break
        if placed is None:
            continue  # crowded: this scene simply gets fewer objects
        classes.append(cid)
        boxes.append(placed)
    if not boxes:
        # guaranteed placement for the first box of an empty scene
        w = h = config.min_side
        cand = np.array([0.5, 0.5, w, h])
        classes.append(int(allowed[int(rng.integers(len(allowed)))]))
        boxes.append(cand)

    img = np.full((s, s, 3), BACKGROUND)
    ys, xs = np.mgrid[0:s, 0:s]
    ys = ys + 0.5
    xs = xs + 0.5
    for cid, b in zip(classes, boxes):
        name = vocab.entries[cid].name
        color_name, shape_name = name.split("_", 1)
        x0, y0 = (b[0] - 0.5 * b[2]) * s, (b[1] - 0.5 * b[3]) * s
        x1, y1 = (b[0] + 0.5 * b[2]) * s, (b[1] + 0.5 * b[3]) * s
        mask = _shape_mask(shape_name, ys, xs, (x0, y0, x1, y1))
        img[mask] = COLOR_RGB[color_name]
    img = img + rng.normal(0.0, PIXEL_NOISE_SIGMA, img.shape)
    img = np.clip(img, 0.0, 1.0)

    boxes_arr = np.stack(boxes)
    assert np.all(boxes_arr[:, 2] * boxes_arr[:, 3] >= MIN_BOX_AREA)
    return Scene(
        pixels=img.astype(np.float32),
        classes=np.asarray(classes, dtype=np.int64),
        boxes=boxes_arr,
    )


# ---------------------------------------------------------------------------
# dataset files

_SPLIT_TAGS = {"train": 1, "test_zsd": 2, "test_gzsd": 3}


def _scene_rng(seed: int, split: str, index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence((seed, _SPLIT_TAGS[split], index)))


def _write_scene(dirpath: Path, image_id: int, pixels: np.ndarray) -> str:
    rel = f"scenes/{image_id:05d}.f32"
    fp = dirpath / rel
    fp.write_bytes(pixels.astype("<f4").tobytes())
    sidecar = {"shape": list(pixels.shape)}
    fp.with_suffix(".json").write_text(json.dumps(sidecar, sort_keys=True))
    return rel


def generate_split(
    out_dir: Path,
    split: str,
    vocab: SemanticVocab,
    allowed: tuple[int, ...],
    n_scenes: int,
    config: WorldConfig,
    seed: int,
) -> dict:
    split_dir = out_dir / split
    (split_dir / "scenes").mkdir(parents=True, exist_ok=True)
    images, annotations = [], []
    ann_id = 0
    s = config.scene_size
    for i in range(n_scenes):
        scene = generate_scene(vocab, allowed, config, _scene_rng(seed, split, i))
        rel = _write_scene(split_dir, i, scene.pixels)
        images.append({"id": i, "file": rel, "height": s, "width": s})
        for cid, b in zip(scene.classes, scene.boxes):
            x = (b[0] - 0.5 * b[2]) * s
            y = (b[1] - 0.5 * b[3]) * s
            annotations.append(
                {
                    "id": ann_id,
                    "image_id": i,
                    "category_id": int(cid),
                    "bbox": [float(x), float(y), float(b[2] * s), float(b[3] * s)],
                }
            )
            ann_id += 1
    payload = {
        "images": images,
        "annotations": annotations,
        "categories": vocab.to_json()["classes"],
    }
    (split_dir / "annotations.json").write_text(json.dumps(payload, sort_keys=True))
    n_seen = sum(1 for a in annotations if vocab.is_seen(a["category_id"]))
    return {
        "split": split,
        "scenes": n_scenes,
        "annotations": len(annotations),
        "seen_annotations": n_seen,
        "unseen_annotations": len(annotations) - n_seen,
    }


def generate_dataset(
    out_dir: str | Path,
    config: WorldConfig,
    n_train: int,
    n_test_zsd: int,
    n_test_gzsd: int,
    seed: int,
) -> dict:
    """Write vocabulary plus train / unseen-only / mixed splits."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    vocab = build_vocabulary(config, seed)
    vocab.save(out / "vocabulary.json")
    stats = [
        generate_split(out, "train", vocab, vocab.seen_ids, n_train, config, seed),
        generate_split(out, "test_zsd", vocab, vocab.unseen_ids, n_test_zsd, config, seed),
        generate_split(out, "test_gzsd", vocab, vocab.all_ids, n_test_gzsd, config, seed),
    ]
    summary = {
        "seed": seed,
        "config": asdict(config),
        "n_seen_classes": len(vocab.seen_ids),
        "n_unseen_classes": len(vocab.unseen_ids),
        "splits": stats,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


class SceneDataset:
    """Reader for one split directory: annotations plus lazily-cached pixels."""

    def __init__(self, split_dir: str | Path):
        self.dir = Path(split_dir)
        payload = json.loads((self.dir / "annotations.json").read_text())
        self.images = payload["images"]
        self.categories = payload["categories"]
        self.size = int(self.images[0]["height"]) if self.images else 0
        per_image: dict[int, list[dict]] = {img["id"]: [] for img in self.images}
        for ann in payload["annotations"]:
            per_image[ann["image_id"]].append(ann)
        self._class_arrays: dict[int, np.ndarray] = {}
        self._box_arrays: dict[int, np.ndarray] = {}
        for img in self.images:
            anns = per_image[img["id"]]
            self._class_arrays[img["id"]] = np.array(
                [a["category_id"] for a in anns], dtype=np.int64
            )
            s = float(img["height"])
            boxes = np.array(
                [
                    [
                        (a["bbox"][0] + 0.5 * a["bbox"][2]) / s,
                        (a["bbox"][1] + 0.5 * a["bbox"][3]) / s,
                        a["bbox"][2] / s,
                        a["bbox"][3] / s,
                    ]
                    for a in anns
                ],
                dtype=np.float64,
            ).reshape(len(anns), 4)
            self._box_arrays[img["id"]] = boxes
        self._pixel_cache: dict[int, np.ndarray] = {}
        self._files = {img["id"]: img["file"] for img in self.images}

    def __len__(self) -> int:
        return len(self.images)

    @property
    def image_ids(self) -> list[int]:
        return [img["id"] for img in self.images]

    def classes_of(self, image_id: int) -> np.ndarray:
        return self._class_arrays[image_id]

    def boxes_of(self, image_id: int) -> np.ndarray:
        """Normalized (cx, cy, w, h) ground-truth boxes."""
        return self._box_arrays[image_id]

    def pixels_of(self, image_id: int) -> np.ndarray:
        cached = self._pixel_cache.get(image_id)
        if cached is None:
            fp = self.dir / self._files[image_id]
            shape = tuple(json.loads(fp.with_suffix(".json").read_text())["shape"])
            cached = np.frombuffer(fp.read_bytes(), dtype="<f4").reshape(shape)
            self._pixel_cache[image_id] = cached
        return cached

    def annotation_payload(self) -> dict:
        return json.loads((self.dir / "annotations.json").read_text())
