"""Dataset manifests: image, prompt, per-noun masks or boxes, and one edit task per entry.

A manifest is a JSON file::

    {"name": "...", "entries": [
        {"id": "toy-00", "image_path": "images/toy-00.png", "prompt": "a red square and a circle",
         "nouns": [{"word": "square", "mask_path": "masks/toy-00-square.png"},
                   {"word": "circle", "box": [0.1, 0.5, 0.4, 0.9]}],
         "adjective_pairs": [["red", "square"]],
         "edit_task": {"kind": "word_swap", "source_word": "square", "target_word": "cross"}}]}

Relative paths resolve against the manifest's directory. Boxes are normalized
``(x0, y0, x1, y1)``.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import InputError

log = logging.getLogger(__name__)

DATA_DIR = Path(__file__).parent / "data"


@dataclass(frozen=True)
class NounTarget:
    word: str
    mask_path: Optional[Path] = None
    box: Optional[tuple[float, float, float, float]] = None
    occurrence: Optional[int] = None

    @property
    def key(self) -> str:
        return self.word if self.occurrence is None else f"{self.word}#{self.occurrence}"

    @property
    def source(self):
        return self.box if self.box is not None else self.mask_path


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image_path: Path
    prompt: str
    nouns: tuple[NounTarget, ...]
    adjective_pairs: tuple[tuple[str, str], ...] = ()
    edit_task: Optional[dict] = None

    def prior_sources(self) -> dict:
        out: dict = {}
        for n in self.nouns:
            out.setdefault(n.key, []).append(n.source)
        return out

    def annotation_hint(self) -> dict:
        return {"nouns": [n.word for n in self.nouns if n.key not in _seen_before(self.nouns, n)],
                "pairs": [list(p) for p in self.adjective_pairs]}

    @property
    def prior_kind(self) -> str:
        return "detection" if all(n.box is not None for n in self.nouns) else "segmentation"


def _seen_before(nouns, target):
    # keys of earlier targets; repeated keys are extra instances of the same noun
    out = set()
    for n in nouns:
        if n is target:
            break
        out.add(n.key)
    return out


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    name: str = "manifest"
    root: Path = field(default_factory=Path)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def get(self, entry_id: str) -> ManifestEntry:
        for e in self.entries:
            if e.id == entry_id:
                return e
        raise InputError(f"manifest {self.name!r} has no entry {entry_id!r}")

    def subset(self, ids: Sequence[str]) -> "DatasetManifest":
        return DatasetManifest([self.get(i) for i in ids], self.name, self.root)


def _entry(raw: dict, root: Path, index: int) -> ManifestEntry:
    where = f"entry {raw.get('id', index)!r}"
    for key in ("image_path", "prompt", "nouns"):
        if key not in raw:
            raise InputError(f"{where}: missing {key!r}")
    image = (root / raw["image_path"]).resolve()
    if not image.exists():
        raise InputError(f"{where}: image {image} does not exist")
    if not raw["nouns"]:
        raise InputError(f"{where}: needs at least one noun")
    nouns = []
    for n in raw["nouns"]:
        if ("mask_path" in n) == ("box" in n):
            raise InputError(f"{where}: noun {n.get('word')!r} needs exactly one of mask_path / box")
        mask = None
        if "mask_path" in n:
            mask = (root / n["mask_path"]).resolve()
            if not mask.exists():
                raise InputError(f"{where}: mask {mask} does not exist")
        box = tuple(float(v) for v in n["box"]) if "box" in n else None
        nouns.append(NounTarget(n["word"].lower(), mask, box, n.get("occurrence")))
    pairs = tuple((a.lower(), b.lower()) for a, b in raw.get("adjective_pairs", []))
    task = raw.get("edit_task")
    if task is not None:
        for key in ("source_word", "target_word"):
            if key not in task:
                raise InputError(f"{where}: edit_task missing {key!r}")
        task = {"kind": "word_swap", "blend": True, **task}
    return ManifestEntry(str(raw.get("id", f"entry-{index:03d}")), image, raw["prompt"],
                         tuple(nouns), pairs, task)


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if not path.exists():
        raise InputError(f"manifest {path} does not exist")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise InputError(f"manifest {path} is not valid JSON: {exc}") from exc
    root = path.parent
    entries = [_entry(e, root, i) for i, e in enumerate(raw.get("entries", []))]
    ids = [e.id for e in entries]
    if len(set(ids)) != len(ids):
        raise InputError(f"manifest {path} has duplicate entry ids")
    return DatasetManifest(entries, raw.get("name", path.stem), root)


def load_image(path) -> np.ndarray:
    """RGB image as float32 [3, H, W] in [0, 1]."""
    from PIL import Image

    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"))
    return arr.transpose(2, 0, 1).astype(np.float32) / np.float32(255)


def save_image(image, path) -> Path:
    from PIL import Image

    arr = np.asarray(image, np.float32)
    if arr.ndim == 4:
        arr = arr[0]
    u8 = np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
    Image.fromarray(u8, "RGB").save(path)
    return Path(path)


def save_mask(mask: np.ndarray, path) -> Path:
    from PIL import Image

    Image.fromarray(np.asarray(mask, bool).astype(np.uint8) * 255, "L").save(path)
    return Path(path)


# --- bundled toy split ----------------------------------------------------------

TOY_SEED = 20240
TOY_MANIFEST = DATA_DIR / "toy_manifest" / "manifest.json"


def bundled_toy_manifest() -> Path:
    return TOY_MANIFEST


def _cell_box(mask: np.ndarray) -> list[float]:
    ys, xs = np.nonzero(mask)
    g = mask.shape[0]
    return [float(xs.min()) / g, float(ys.min()) / g, float(xs.max() + 1) / g, float(ys.max() + 1) / g]


def toy_entries(n: int = 6, seed: int = TOY_SEED):
    """Deterministic two-object scenes with a word-swap or attribute edit each."""
    from .adapters.toy_data import COLORS, SHAPES, caption, random_scene

    rng = np.random.default_rng(seed)
    out = []
    while len(out) < n:
        scene = random_scene(rng, n_objects=2)
        if len(scene.objects) != 2:
            continue
        i = len(out)
        colored = [True, i % 2 == 0]
        prompt = caption(scene.objects, colored)
        used = {o.shape for o in scene.objects}
        first = scene.objects[0]
        if i % 3 == 2:
            new_color = next(c for c in COLORS if c not in {o.color for o in scene.objects})
            task = {"kind": "attribute_edit", "source_word": first.color, "target_word": new_color}
        else:
            new_shape = next(s for s in SHAPES if s not in used)
            task = {"kind": "word_swap", "source_word": first.shape, "target_word": new_shape}
        pairs = [[o.color, o.shape] for o, c in zip(scene.objects, colored) if c]
        out.append((f"toy-{i:02d}", scene, prompt, pairs, task, i % 2 == 1))
    return out


def write_toy_manifest(directory, n: int = 6, seed: int = TOY_SEED) -> Path:
    """Render the toy split; odd entries use detection boxes, even ones segmentation masks."""
    from .adapters.toy_data import upsample_cells

    d = Path(directory)
    (d / "images").mkdir(parents=True, exist_ok=True)
    (d / "masks").mkdir(exist_ok=True)
    entries = []
    for entry_id, scene, prompt, pairs, task, boxes in toy_entries(n, seed):
        save_image(scene.image, d / "images" / f"{entry_id}.png")
        nouns = []
        for obj in scene.objects:
            if boxes:
                nouns.append({"word": obj.shape, "box": _cell_box(obj.mask)})
            else:
                rel = f"masks/{entry_id}-{obj.shape}.png"
                save_mask(upsample_cells(obj.mask), d / rel)
                nouns.append({"word": obj.shape, "mask_path": rel})
        entries.append({"id": entry_id, "image_path": f"images/{entry_id}.png", "prompt": prompt,
                        "nouns": nouns, "adjective_pairs": pairs, "edit_task": task})
    path = d / "manifest.json"
    path.write_text(json.dumps({"name": "toy", "entries": entries}, indent=1))
    return path


# --- COCO-edit groups -----------------------------------------------------------

def coco_edit_groups() -> list[dict]:
    """The 13 COCO-edit search groups with image counts and their edit task."""
    return json.loads((DATA_DIR / "coco_edit_groups.json").read_text())["groups"]


def _polygon_mask(segmentation, h: int, w: int) -> np.ndarray:
    from PIL import Image, ImageDraw

    im = Image.new("L", (w, h), 0)
    draw = ImageDraw.Draw(im)
    if isinstance(segmentation, dict):
        raise InputError("RLE segmentations are not supported; convert to polygons first")
    for poly in segmentation:
        draw.polygon([(poly[i], poly[i + 1]) for i in range(0, len(poly) - 1, 2)], fill=255)
    return np.asarray(im) != 0


def build_coco_manifest(instances_json, images_dir, out_dir, groups: Optional[list[dict]] = None,
                        prior: str = "segmentation", limit: Optional[int] = None) -> Path:
    """Select COCO images whose object categories match a group exactly.

    COCO images are never copied or downloaded; the manifest points at
    ``images_dir``. Masks (union over instances of each category) are written
    to ``out_dir/masks``.
    """
    if prior not in ("segmentation", "detection"):
        raise InputError(f"unknown prior kind {prior!r}")
    coco = json.loads(Path(instances_json).read_text())
    groups = groups or coco_edit_groups()
    cats = {c["id"]: c["name"] for c in coco["categories"]}
    images = {im["id"]: im for im in coco["images"]}
    per_image: dict[int, list] = {}
    for ann in coco["annotations"]:
        if not ann.get("iscrowd", 0):
            per_image.setdefault(ann["image_id"], []).append(ann)
    out = Path(out_dir)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for group in groups:
        wanted = set(group["objects"])
        taken = 0
        for image_id in sorted(per_image):
            anns = per_image[image_id]
            if {cats[a["category_id"]] for a in anns} != wanted:
                continue
            if limit is not None and taken >= limit:
                break
            im = images[image_id]
            h, w = im["height"], im["width"]
            entry_id = f"{'-'.join(group['objects'])}-{image_id}"
            nouns = []
            for name in group["objects"]:
                inst = [a for a in anns if cats[a["category_id"]] == name]
                if prior == "detection":
                    for a in inst:
                        x, y, bw, bh = a["bbox"]
                        nouns.append({"word": name, "box": [x / w, y / h, min((x + bw) / w, 1.0),
                                                            min((y + bh) / h, 1.0)]})
                else:
                    m = np.zeros((h, w), bool)
                    for a in inst:
                        m |= _polygon_mask(a["segmentation"], h, w)
                    rel = f"masks/{entry_id}-{name}.png"
                    save_mask(m, out / rel)
                    nouns.append({"word": name, "mask_path": rel})
            src, tgt = group["edit"]
            prompt = " and ".join(f"a {o}" for o in group["objects"])
            image_path = Path(images_dir).resolve() / im["file_name"]
            entries.append({"id": entry_id, "image_path": str(image_path), "prompt": prompt,
                            "nouns": nouns, "adjective_pairs": [],
                            "edit_task": {"kind": "word_swap", "source_word": src,
                                          "target_word": tgt}})
            taken += 1
        if not taken:
            log.warning("no COCO image matches group %s", group["objects"])
    path = out / "manifest.json"
    path.write_text(json.dumps({"name": "coco-edit", "entries": entries}, indent=1))
    return path
