"""Prompt annotation (nouns, adjective-noun pairs) and localization priors."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Protocol, Sequence, Union

import numpy as np

from .errors import InputError

DETERMINERS = {"a", "an", "the", "this", "that", "these", "those", "some", "two", "three", "four",
               "many", "several", "his", "her", "its", "their", "my", "one"}
BREAKERS = {"and", "or", "with", "on", "in", "at", "of", "near", "next", "to", "by", "under",
            "over", "beside", "behind", "above", "below", "from", "is", "are", "sitting",
            "standing", "holding", ","}
ADJECTIVES = {
    "red", "green", "blue", "yellow", "white", "black", "brown", "gray", "grey", "purple",
    "orange", "pink", "cyan", "golden", "silver", "dark", "light", "bright",
    "wooden", "metal", "metallic", "glass", "plastic", "stone", "leather", "marble", "paper",
    "big", "small", "large", "little", "tall", "short", "old", "young", "tiny", "huge",
}
NOUNS = {
    # toy vocabulary
    "square", "circle", "triangle", "cross",
    # COCO categories (single-word forms)
    "person", "man", "woman", "bicycle", "car", "motorcycle", "airplane", "bus", "train", "truck",
    "boat", "bench", "bird", "cat", "dog", "horse", "sheep", "cow", "elephant", "bear", "zebra",
    "giraffe", "backpack", "umbrella", "handbag", "tie", "suitcase", "frisbee", "skis",
    "snowboard", "ball", "kite", "skateboard", "surfboard", "bottle", "cup", "fork", "knife",
    "spoon", "bowl", "banana", "apple", "sandwich", "orange", "broccoli", "carrot", "pizza",
    "donut", "cake", "chair", "couch", "bed", "table", "toilet", "tv", "laptop", "mouse",
    "remote", "keyboard", "phone", "microwave", "oven", "toaster", "sink", "refrigerator",
    "book", "clock", "vase", "scissors", "toothbrush",
    # edit targets
    "seaplane", "panda", "canoe", "cougar", "buffalo", "brachiosaurus", "donkey", "peach",
    "panther", "fox", "raccoon",
}

Box = tuple[float, float, float, float]
MaskSource = Union[str, Path, np.ndarray, Box, Sequence]


class PosTagger(Protocol):
    def tag(self, words: Sequence[str]) -> list[str]:
        """One tag per word: 'NOUN', 'ADJ', or anything else."""


class RuleTagger:
    """Lexicon tagger for short captions of the form ``det adj* noun (conj det adj* noun)*``.

    The last word of each phrase is its head noun; earlier words are tagged as
    adjectives when the lexicon knows them as such.
    """

    def __init__(self, nouns=NOUNS, adjectives=ADJECTIVES):
        self.nouns = set(nouns)
        self.adjectives = set(adjectives)

    def tag(self, words):
        tags = ["X"] * len(words)
        phrase: list[int] = []

        def close():
            if not phrase:
                return
            head = phrase[-1]
            if words[head] in self.nouns or words[head] not in self.adjectives:
                tags[head] = "NOUN"
            for i in phrase[:-1]:
                if words[i] in self.adjectives:
                    tags[i] = "ADJ"
            phrase.clear()

        for i, w in enumerate(words):
            if w in DETERMINERS:
                close()
                tags[i] = "DET"
            elif w in BREAKERS:
                close()
                tags[i] = "CONJ"
            else:
                phrase.append(i)
        close()
        return tags


class SpacyTagger:
    """Tagger backed by a spaCy pipeline (loaded lazily)."""

    def __init__(self, model: str = "en_core_web_sm"):
        import spacy

        self.nlp = spacy.load(model)

    def tag(self, words):
        doc = self.nlp(" ".join(words))
        tags = []
        for tok in doc[:len(words)]:
            tags.append("NOUN" if tok.pos_ in ("NOUN", "PROPN") else "ADJ" if tok.pos_ == "ADJ" else "X")
        return tags


@dataclass(frozen=True)
class PromptAnnotation:
    prompt_text: str
    token_ids: tuple[int, ...]
    noun_positions: tuple[int, ...]
    adjective_pairs: tuple[tuple[int, int], ...] = ()
    words: Mapping[int, str] = field(default_factory=dict)  # position -> word

    def __post_init__(self):
        if not self.noun_positions:
            raise InputError(f"no nouns in prompt {self.prompt_text!r}; nothing to align")
        n = len(self.token_ids)
        for p in self.noun_positions:
            if not 0 < p < n:
                raise InputError(f"noun position {p} outside the token sequence")
        for adj, noun in self.adjective_pairs:
            if noun not in self.noun_positions:
                raise InputError(f"adjective pair ({adj}, {noun}) references a non-noun position")
            if not 0 < adj < n:
                raise InputError(f"adjective position {adj} outside the token sequence")

    @property
    def K(self) -> int:
        return len(self.noun_positions)

    def adjective_positions(self) -> tuple[int, ...]:
        return tuple(a for a, _ in self.adjective_pairs)

    def noun_position(self, word: str, occurrence: Optional[int] = None) -> int:
        hits = [p for p in self.noun_positions if self.words.get(p) == word]
        return _pick(hits, word, occurrence)

    def to_dict(self) -> dict:
        return {"prompt": self.prompt_text, "token_ids": list(self.token_ids),
                "noun_positions": list(self.noun_positions),
                "adjective_pairs": [list(p) for p in self.adjective_pairs],
                "words": {str(k): v for k, v in self.words.items()}}

    @classmethod
    def from_dict(cls, d: dict) -> "PromptAnnotation":
        return cls(d["prompt"], tuple(d["token_ids"]), tuple(d["noun_positions"]),
                   tuple(tuple(p) for p in d["adjective_pairs"]),
                   {int(k): v for k, v in d.get("words", {}).items()})


def _pick(hits, word, occurrence):
    if not hits:
        raise InputError(f"word {word!r} not found")
    if occurrence is None:
        if len(hits) > 1:
            raise InputError(f"word {word!r} occurs {len(hits)} times; give an occurrence index")
        return hits[0]
    if not 0 <= occurrence < len(hits):
        raise InputError(f"occurrence {occurrence} of {word!r} out of range")
    return hits[occurrence]


def annotate(prompt: str, tokenizer, tagger: Optional[PosTagger] = None,
             manual: Optional[Mapping] = None) -> PromptAnnotation:
    """Locate nouns and adjective-noun pairs as context positions.

    ``manual`` follows the JSON annotation format ``{"nouns": [...], "pairs": [[adj, noun], ...]}``;
    when given the tagger is not consulted. Multi-piece words map to their first piece.
    """
    pieces = tokenizer.word_pieces(prompt)
    ids = tuple(tokenizer.encode(prompt))
    words = [w.lower() for w, _ in pieces]
    first = [p[0] for _, p in pieces]
    if manual is not None:
        noun_idx = _indices_for(words, manual.get("nouns", []))
        pairs = []
        for adj, noun in manual.get("pairs", []):
            n = _nearest(words, noun.lower(), noun_idx)
            a = _closest_before(words, adj.lower(), n)
            pairs.append((first[a], first[n]))
    else:
        tags = (tagger or RuleTagger()).tag(words)
        noun_idx = [i for i, t in enumerate(tags) if t == "NOUN"]
        pairs = []
        for i, t in enumerate(tags):
            if t == "ADJ":
                heads = [j for j in noun_idx if j > i]
                if heads:
                    pairs.append((first[i], first[heads[0]]))
    nouns = tuple(first[i] for i in noun_idx)
    word_at = {first[i]: words[i] for i in range(len(words))}
    return PromptAnnotation(prompt, ids, nouns, tuple(pairs), word_at)


def _indices_for(words, wanted):
    out, used = [], set()
    for w in wanted:
        cands = [i for i, x in enumerate(words) if x == w.lower() and i not in used]
        if not cands:
            raise InputError(f"annotated noun {w!r} not in prompt")
        used.add(cands[0])
        out.append(cands[0])
    return sorted(out)


def _nearest(words, noun, noun_idx):
    for i in noun_idx:
        if words[i] == noun:
            return i
    raise InputError(f"pair noun {noun!r} is not an annotated noun")


def _closest_before(words, adj, noun_i):
    cands = [i for i in range(noun_i) if words[i] == adj]
    if not cands:
        cands = [i for i, w in enumerate(words) if w == adj]
    if not cands:
        raise InputError(f"pair adjective {adj!r} not in prompt")
    return cands[-1]


def _read_json(path, what: str):
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise InputError(f"{what} file {path} does not exist") from None
    except json.JSONDecodeError as exc:
        raise InputError(f"{what} file {path} is not valid JSON: {exc}") from None


def load_annotation_file(path) -> dict:
    data = _read_json(path, "annotation")
    if not isinstance(data, dict) or not isinstance(data.get("nouns"), list):
        raise InputError(f"{path}: annotation needs a 'nouns' list")
    return data


# --- localization priors ---------------------------------------------------

@dataclass(frozen=True)
class LocalizationPrior:
    masks: Mapping[int, np.ndarray]  # noun position -> bool [r, r]
    source_kind: str = "segmentation"

    def __post_init__(self):
        if self.source_kind not in ("segmentation", "detection"):
            raise InputError(f"unknown prior kind {self.source_kind!r}")
        shapes = {m.shape for m in self.masks.values()}
        if len(shapes) > 1:
            raise InputError(f"prior masks disagree in shape: {shapes}")
        for pos, m in self.masks.items():
            if not m.any():
                raise InputError(f"prior mask for position {pos} is empty")

    @property
    def resolution(self) -> int:
        return next(iter(self.masks.values())).shape[0]

    def covers(self, ann: PromptAnnotation) -> bool:
        return set(self.masks) == set(ann.noun_positions)

    def union(self, positions: Optional[Sequence[int]] = None) -> np.ndarray:
        keys = self.masks.keys() if positions is None else positions
        out = np.zeros((self.resolution,) * 2, bool)
        for k in keys:
            out |= self.masks[k]
        return out


def resize_nearest(mask: np.ndarray, r: int) -> np.ndarray:
    """Nearest-neighbour resample of a binary grid to r x r (cell-centre sampling)."""
    h, w = mask.shape
    rows = np.minimum(((np.arange(r) + 0.5) * h / r).astype(int), h - 1)
    cols = np.minimum(((np.arange(r) + 0.5) * w / r).astype(int), w - 1)
    return mask[np.ix_(rows, cols)]


def rasterize_box(box: Sequence[float], r: int) -> np.ndarray:
    """Cells whose centres fall inside the half-open normalized box."""
    if len(box) != 4:
        raise InputError(f"box needs 4 coordinates, got {box}")
    x0, y0, x1, y1 = (float(v) for v in box)
    if not (x0 < x1 and y0 < y1) or min(x0, y0) < 0 or max(x1, y1) > 1:
        raise InputError(f"malformed box {box}")
    c = (np.arange(r) + 0.5) / r
    inside_y = (c >= y0) & (c < y1)
    inside_x = (c >= x0) & (c < x1)
    return inside_y[:, None] & inside_x[None, :]


def read_mask(path) -> np.ndarray:
    from PIL import Image

    with Image.open(path) as im:
        if im.mode not in ("1", "L", "I", "I;16", "F", "P"):
            raise InputError(f"{path}: mask must be single-channel, got mode {im.mode}")
        return np.asarray(im) != 0


def _is_box(src) -> bool:
    return (isinstance(src, (tuple, list)) and len(src) == 4
            and all(isinstance(v, (int, float)) for v in src))


def _one_mask(src, r: int) -> tuple[np.ndarray, str]:
    if _is_box(src):
        return rasterize_box(src, r), "detection"
    if isinstance(src, (str, Path)):
        arr = read_mask(src)
    else:
        arr = np.asarray(src)
        if arr.ndim != 2:
            raise InputError(f"mask array must be 2-D, got shape {arr.shape}")
        arr = arr != 0
    return resize_nearest(arr, r), "segmentation"


def load_prior(sources: Mapping[str, Union[MaskSource, list]], resolution: int,
               annotation: PromptAnnotation, kind: Optional[str] = None) -> LocalizationPrior:
    """Build per-noun binary masks at the attention resolution.

    ``sources`` maps each noun word to a mask path, a 2-D array, a normalized
    ``(x0, y0, x1, y1)`` box, or a list of those (instances are unioned). A noun
    that occurs more than once in the prompt may be keyed ``"word#k"``.
    """
    masks, kinds = {}, set()
    for key, src in sources.items():
        word, _, occ = key.partition("#")
        pos = annotation.noun_position(word.lower(), int(occ) if occ else None)
        items = src if isinstance(src, list) and not _is_box(src) else [src]
        grid = np.zeros((resolution, resolution), bool)
        for item in items:
            m, k = _one_mask(item, resolution)
            grid |= m
            kinds.add(k)
        if not grid.any():
            raise InputError(f"prior for noun {word!r} is empty at resolution {resolution}")
        if pos in masks:
            raise InputError(f"noun {word!r} given twice")
        masks[pos] = grid
    missing = set(annotation.noun_positions) - set(masks)
    if missing:
        names = [annotation.words.get(p, str(p)) for p in sorted(missing)]
        raise InputError(f"no prior for noun(s) {names}")
    if kind is None:
        kind = "detection" if kinds == {"detection"} else "segmentation"
    return LocalizationPrior(masks, kind)


def load_boxes_file(path) -> dict[str, list]:
    """JSON list of ``{"noun": str, "box": [x0, y0, x1, y1]}``; repeated nouns are unioned."""
    out: dict[str, list] = {}
    data = _read_json(path, "boxes")
    if not isinstance(data, list):
        raise InputError(f"{path}: expected a list of noun/box objects")
    for item in data:
        if not isinstance(item, dict) or "noun" not in item or "box" not in item:
            raise InputError(f"{path}: every item needs 'noun' and 'box', got {item!r}")
        out.setdefault(item["noun"], []).append(tuple(item["box"]))
    return out


# --- edit requests ---------------------------------------------------------

@dataclass(frozen=True)
class EditSpec:
    kind: str
    source_word: str
    target_word: str
    target_prompt: str
    blend_with_prior: bool = True
    occurrence: Optional[int] = None

    def __post_init__(self):
        if self.kind not in ("word_swap", "attribute_edit"):
            raise InputError(f"unknown edit kind {self.kind!r}")

    @classmethod
    def make(cls, prompt: str, source_word: str, target_word: str, kind: str = "word_swap",
             blend_with_prior: bool = True, occurrence: Optional[int] = None) -> "EditSpec":
        words = prompt.split()
        hits = [i for i, w in enumerate(words) if w.lower() == source_word.lower()]
        i = _pick(hits, source_word, occurrence)
        words[i] = target_word
        return cls(kind, source_word, target_word, " ".join(words), blend_with_prior, occurrence)

    def validate(self, prompt: str):
        src, tgt = prompt.split(), self.target_prompt.split()
        hits = [i for i, w in enumerate(src) if w.lower() == self.source_word.lower()]
        i = _pick(hits, self.source_word, self.occurrence)
        expected = src[:i] + [self.target_word] + src[i + 1:]
        if [w.lower() for w in expected] != [w.lower() for w in tgt]:
            raise InputError(f"target prompt {self.target_prompt!r} must differ from {prompt!r} "
                             f"only by {self.source_word!r} -> {self.target_word!r}")
        return i
