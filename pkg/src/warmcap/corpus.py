"""Synthetic chest-film studies, preprocessing, and the word-level vocabulary.

Every study draws a four-way class for each of the 14 observations. The image
stamps a fixed glyph for each positive (bright) or uncertain (faint)
observation onto a noisy background; the report is produced by a fixed
template grammar with one sentence per mentioned observation.
"""

from __future__ import annotations

import enum
import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

OBSERVATIONS = (
    "enlarged cardiomediastinum",
    "cardiomegaly",
    "lung opacity",
    "lung lesion",
    "edema",
    "consolidation",
    "pneumonia",
    "atelectasis",
    "pneumothorax",
    "pleural effusion",
    "pleural other",
    "fracture",
    "support devices",
    "no finding",
)
NO_FINDING = OBSERVATIONS.index("no finding")


class ObservationClass(enum.IntEnum):
    NO_MENTION = 0
    POSITIVE = 1
    NEGATIVE = 2
    UNCERTAIN = 3


POS, NEG, UNC, NONE = (
    ObservationClass.POSITIVE,
    ObservationClass.NEGATIVE,
    ObservationClass.UNCERTAIN,
    ObservationClass.NO_MENTION,
)


@dataclass(frozen=True)
class ObservationAnnotation:
    classes: Tuple[ObservationClass, ...]

    def __post_init__(self):
        if len(self.classes) != len(OBSERVATIONS):
            raise ValueError(f"annotation needs {len(OBSERVATIONS)} entries, got {len(self.classes)}")
        object.__setattr__(self, "classes", tuple(ObservationClass(int(c)) for c in self.classes))

    @classmethod
    def empty(cls) -> "ObservationAnnotation":
        return cls((NONE,) * len(OBSERVATIONS))

    @classmethod
    def from_dict(cls, mapping: Dict[str, ObservationClass]) -> "ObservationAnnotation":
        unknown = set(mapping) - set(OBSERVATIONS)
        if unknown:
            raise KeyError(f"unknown observations: {sorted(unknown)}")
        return cls(tuple(mapping.get(name, NONE) for name in OBSERVATIONS))

    def codes(self) -> List[int]:
        return [int(c) for c in self.classes]

    def __getitem__(self, name: str) -> ObservationClass:
        return self.classes[OBSERVATIONS.index(name)]


# One sentence per (observation, class). Every sentence has at most four words so
# a fully mentioned report stays within the 60-word cap.
GRAMMAR: Dict[str, Dict[ObservationClass, str]] = {
    "enlarged cardiomediastinum": {
        POS: "the mediastinum is widened .",
        NEG: "the mediastinum is normal .",
        UNC: "possible mediastinal widening .",
    },
    "cardiomegaly": {
        POS: "the heart is enlarged .",
        NEG: "heart size is normal .",
        UNC: "possible mild cardiomegaly .",
    },
    "lung opacity": {
        POS: "there is lung opacity .",
        NEG: "the lungs are clear .",
        UNC: "possible lung opacity .",
    },
    "lung lesion": {
        POS: "lung nodule is seen .",
        NEG: "no lung nodule .",
        UNC: "possible lung nodule .",
    },
    "edema": {
        POS: "there is pulmonary edema .",
        NEG: "no pulmonary edema .",
        UNC: "possible mild edema .",
    },
    "consolidation": {
        POS: "there is focal consolidation .",
        NEG: "no focal consolidation .",
        UNC: "possible focal consolidation .",
    },
    "pneumonia": {
        POS: "findings suggest pneumonia .",
        NEG: "no evidence of pneumonia .",
        UNC: "pneumonia is possible .",
    },
    "atelectasis": {
        POS: "there is basilar atelectasis .",
        NEG: "no atelectasis .",
        UNC: "possible basilar atelectasis .",
    },
    "pneumothorax": {
        POS: "there is a pneumothorax .",
        NEG: "no pneumothorax .",
        UNC: "possible small pneumothorax .",
    },
    "pleural effusion": {
        POS: "there is pleural effusion .",
        NEG: "no pleural effusion .",
        UNC: "possible small effusion .",
    },
    "pleural other": {
        POS: "there is pleural thickening .",
        NEG: "no pleural thickening .",
        UNC: "possible pleural thickening .",
    },
    "fracture": {
        POS: "there is a fracture .",
        NEG: "no acute fracture .",
        UNC: "possible rib fracture .",
    },
    "support devices": {
        POS: "support devices are present .",
        NEG: "no support devices .",
        UNC: "possible support line .",
    },
    "no finding": {
        POS: "no acute cardiopulmonary process .",
        NEG: "the study is abnormal .",
        UNC: "possibly normal study .",
    },
}
NO_ACUTE_FINDINGS = "no acute findings ."


def template(annotation: ObservationAnnotation) -> str:
    """Report text for an annotation, sentences in the fixed observation order."""
    sentences = [GRAMMAR[name][cls] for name, cls in zip(OBSERVATIONS, annotation.classes) if cls != NONE]
    return " ".join(sentences) if sentences else NO_ACUTE_FINDINGS


# Per observation: probabilities of (positive, negative, uncertain); the rest is
# no-mention. "no finding" is positive exactly when no other observation is.
CLINICAL_PROFILE: Dict[str, Tuple[float, float, float]] = {
    "enlarged cardiomediastinum": (0.08, 0.10, 0.04),
    "cardiomegaly": (0.22, 0.20, 0.05),
    "lung opacity": (0.25, 0.08, 0.05),
    "lung lesion": (0.06, 0.04, 0.03),
    "edema": (0.15, 0.15, 0.05),
    "consolidation": (0.08, 0.25, 0.04),
    "pneumonia": (0.07, 0.15, 0.05),
    "atelectasis": (0.20, 0.05, 0.05),
    "pneumothorax": (0.05, 0.40, 0.03),
    "pleural effusion": (0.22, 0.35, 0.05),
    "pleural other": (0.03, 0.03, 0.02),
    "fracture": (0.04, 0.10, 0.02),
    "support devices": (0.30, 0.03, 0.02),
}
PROFILES = ("clinical", "uniform")


def sample_annotation(rng: np.random.Generator, profile: str = "clinical") -> ObservationAnnotation:
    if profile == "uniform":
        return ObservationAnnotation(tuple(ObservationClass(int(c)) for c in rng.integers(0, 4, len(OBSERVATIONS))))
    if profile != "clinical":
        raise ValueError(f"unknown class-imbalance profile {profile!r}; choose from {PROFILES}")
    classes = []
    for name in OBSERVATIONS[:NO_FINDING]:
        p_pos, p_neg, p_unc = CLINICAL_PROFILE[name]
        u = rng.random()
        if u < p_pos:
            classes.append(POS)
        elif u < p_pos + p_neg:
            classes.append(NEG)
        elif u < p_pos + p_neg + p_unc:
            classes.append(UNC)
        else:
            classes.append(NONE)
    classes.append(NONE if POS in classes else POS)
    return ObservationAnnotation(tuple(classes))


# ---------------------------------------------------------------------------
# images

SOURCE_SIZE = 96
GLYPH_SIZE = 11
GLYPH_COPIES = 6
POSITIVE_INTENSITY = 110.0
UNCERTAIN_INTENSITY = 55.0


def _glyphs() -> np.ndarray:
    """One 11x11 geometric shape per observation ("no finding" has none and stays blank)."""
    r = GLYPH_SIZE // 2
    y, x = np.mgrid[-r : r + 1, -r : r + 1]
    dist = np.hypot(x, y)
    shapes = [
        dist <= 4.5,  # disk
        (dist >= 3.0) & (dist <= 5.0),  # ring
        np.maximum(abs(x), abs(y)) >= 4,  # square outline
        np.maximum(abs(x), abs(y)) <= 2,  # small block
        abs(y) <= 1,  # horizontal bar
        abs(x) <= 1,  # vertical bar
        (abs(x) <= 1) | (abs(y) <= 1),  # plus
        (abs(x - y) <= 1) | (abs(x + y) <= 1),  # saltire
        abs(x - y) <= 1,  # falling diagonal
        abs(x + y) <= 1,  # rising diagonal
        2 * abs(x) <= y + r,  # triangle
        ((x + r) // 2 + (y + r) // 2) % 2 == 0,  # checkerboard
        (y + r) % 3 == 0,  # horizontal stripes
    ]
    shapes.append(np.zeros_like(dist, dtype=bool))
    return np.stack(shapes).astype(np.float64)


GLYPHS = _glyphs()


def render_image(annotation: ObservationAnnotation, rng: np.random.Generator, size: int = SOURCE_SIZE) -> np.ndarray:
    """8-bit grayscale film: noisy background plus glyphs for positive/uncertain findings."""
    yy = np.linspace(-1.0, 1.0, size)[:, None]
    xx = np.linspace(-1.0, 1.0, size)[None, :]
    img = 70.0 + 25.0 * np.exp(-(xx**2) * 3.0) - 15.0 * yy + rng.normal(0.0, 10.0, (size, size))
    for k, cls in enumerate(annotation.classes):
        if cls not in (POS, UNC) or k == NO_FINDING:
            continue
        amp = POSITIVE_INTENSITY if cls == POS else UNCERTAIN_INTENSITY
        for _ in range(GLYPH_COPIES):
            r, c = rng.integers(0, size - GLYPH_SIZE + 1, 2)
            img[r : r + GLYPH_SIZE, c : c + GLYPH_SIZE] += amp * GLYPHS[k]
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray) -> None:
    """Binary PGM (P5): ASCII header "P5\\n<w> <h>\\n255\\n" then h*w bytes row-major."""
    image = np.asarray(image, dtype=np.uint8)
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(image.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    m = re.match(rb"P5\s+(\d+)\s+(\d+)\s+(\d+)\s", blob)
    if not m:
        raise ValueError(f"{path}: not a binary PGM file")
    w, h, maxval = (int(x) for x in m.groups())
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    data = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=m.end())
    return data.reshape(h, w).copy()


# ---------------------------------------------------------------------------
# image preprocessing

RESIZE_MARGIN = 64
MAX_ROTATION_DEG = 5.0


def resize_bilinear(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of (..., H, W) with half-pixel centres and edge clamping."""
    img = np.asarray(image, dtype=np.float64)
    in_h, in_w = img.shape[-2:]

    def coords(n_out, n_in):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    y0, y1, fy = coords(out_h, in_h)
    x0, x1, fx = coords(out_w, in_w)
    top = img[..., y0, :][..., :, x0] * (1 - fx) + img[..., y0, :][..., :, x1] * fx
    bottom = img[..., y1, :][..., :, x0] * (1 - fx) + img[..., y1, :][..., :, x1] * fx
    return top * (1 - fy)[:, None] + bottom * fy[:, None]


def resize_smallest_side(image: np.ndarray, side: int) -> np.ndarray:
    h, w = image.shape[-2:]
    scale = side / min(h, w)
    out_h = side if h <= w else int(round(h * scale))
    out_w = side if w <= h else int(round(w * scale))
    if (out_h, out_w) == (h, w):
        return np.asarray(image, dtype=np.float64)
    return resize_bilinear(image, out_h, out_w)


def crop(image: np.ndarray, width: int, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Square crop: random offset when ``rng`` is given, centred otherwise."""
    h, w = image.shape[-2:]
    if rng is None:
        top, left = (h - width) // 2, (w - width) // 2
    else:
        top, left = int(rng.integers(0, h - width + 1)), int(rng.integers(0, w - width + 1))
    return image[..., top : top + width, left : left + width]


def rotate(image: np.ndarray, degrees: float, fill: float) -> np.ndarray:
    """Rotate a 2-D image about its centre, bilinear, constant fill outside."""
    return ndimage.rotate(image, degrees, reshape=False, order=1, mode="constant", cval=fill)


def preprocess_image(
    image: np.ndarray,
    width: int,
    training: bool = False,
    rng: Optional[np.random.Generator] = None,
    mean: Sequence[float] = (0.5, 0.5, 0.5),
    std: Sequence[float] = (0.25, 0.25, 0.25),
    margin: int = RESIZE_MARGIN,
    max_rotation: float = MAX_ROTATION_DEG,
) -> np.ndarray:
    """Source film (H x W grayscale or C x H x W, 8-bit range) -> standardised 3 x width x width.

    Resize so the smallest side is width + margin, crop (random when training,
    centred otherwise), rotate by U[-max_rotation, max_rotation] degrees when
    training, then standardise each channel.
    """
    img = np.asarray(image, dtype=np.float64) / 255.0
    if img.ndim == 2:
        img = img[None]
    if min(img.shape[-2:]) < 8:
        raise ValueError(f"image {img.shape[-2:]} is smaller than 8x8")
    if training and rng is None:
        raise ValueError("training-mode preprocessing needs an rng")
    img = resize_smallest_side(img, width + margin)
    img = crop(img, width, rng if training else None)
    if training:
        angle = float(rng.uniform(-max_rotation, max_rotation))
        img = np.stack([rotate(ch, angle, float(ch.mean())) for ch in img])
    channels = len(mean)
    if img.shape[0] == 1 and channels > 1:
        img = np.repeat(img, channels, axis=0)
    m = np.asarray(mean, dtype=np.float64)[:, None, None]
    s = np.asarray(std, dtype=np.float64)[:, None, None]
    return (img - m) / s


# ---------------------------------------------------------------------------
# report preprocessing and vocabulary

MAX_WORDS = 60
_STRIP = re.compile(r"[^a-z0-9 .]")


def preprocess_report(text: str, max_words: int = MAX_WORDS) -> str:
    """Lowercase, drop characters outside [a-z0-9 space .], split periods into
    their own tokens, collapse whitespace, and keep tokens up to the
    ``max_words``-th word (periods are not counted as words).
    """
    t = _STRIP.sub(" ", text.lower()).replace(".", " . ")
    out, words = [], 0
    for tok in t.split():
        if tok != ".":
            if words == max_words:
                break
            words += 1
        out.append(tok)
    return " ".join(out)


PAD, BOS, EOS, UNK, MASK = "[PAD]", "[BOS]", "[EOS]", "[UNK]", "[MASK]"
SPECIALS = (PAD, BOS, EOS, UNK, MASK)
UNK_TEXT = "<unk>"
MIN_FREQUENCY = 3


class Vocabulary:
    """Word-level vocabulary; words seen fewer than ``min_frequency`` times map to UNK."""

    def __init__(self, words: Sequence[str], frequencies: Optional[Dict[str, int]] = None, min_frequency: int = MIN_FREQUENCY):
        self.itos: List[str] = list(SPECIALS) + [w for w in words if w not in SPECIALS]
        self.stoi: Dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        self.frequencies = dict(frequencies or {})
        self.min_frequency = min_frequency

    pad_id, bos_id, eos_id, unk_id, mask_id = range(5)

    @classmethod
    def build(cls, corpus: Iterable[str], min_frequency: int = MIN_FREQUENCY) -> "Vocabulary":
        counts = Counter(tok for text in corpus for tok in text.split())
        words = sorted((w for w, c in counts.items() if c >= min_frequency), key=lambda w: (-counts[w], w))
        return cls(words, dict(counts), min_frequency)

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi and word not in SPECIALS

    @property
    def words(self) -> List[str]:
        return self.itos[len(SPECIALS) :]

    def tokenize(self, text: str) -> List[int]:
        return [self.stoi.get(tok, self.unk_id) for tok in text.split()]

    def id_to_word(self, i: int) -> str:
        if not 0 <= int(i) < len(self.itos):
            raise KeyError(f"token id {i} is not in the vocabulary of size {len(self.itos)}")
        return self.itos[int(i)]

    def detokenize(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            w = self.id_to_word(i)
            if w in (PAD, BOS, EOS):
                continue
            out.append(UNK_TEXT if w == UNK else w)
        return " ".join(out)

    def to_dict(self) -> dict:
        return {"words": self.words, "min_frequency": self.min_frequency}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["words"], None, d.get("min_frequency", MIN_FREQUENCY))

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self.itos == other.itos


def tokenize(text: str, vocab: Vocabulary) -> List[int]:
    return vocab.tokenize(text)


def detokenize(ids: Iterable[int], vocab: Vocabulary) -> str:
    return vocab.detokenize(ids)


def build_vocab(corpus: Iterable[str], min_frequency: int = MIN_FREQUENCY) -> Vocabulary:
    return Vocabulary.build(corpus, min_frequency)


# ---------------------------------------------------------------------------
# dataset files

DATASET_FORMAT = "warmcap-dataset/1"
SPLITS = ("train", "val", "test")


@dataclass
class StudyRecord:
    id: str
    images: List[str]
    report: str
    annotation: ObservationAnnotation
    split_dir: Optional[Path] = None

    def to_json(self) -> dict:
        return {"id": self.id, "images": self.images, "report": self.report, "annotation": self.annotation.codes()}

    def load_images(self) -> List[np.ndarray]:
        return [read_pgm(self.split_dir / "images" / name) for name in self.images]


def synth_study(study_id: str, rng: np.random.Generator, views: int, profile: str, size: int = SOURCE_SIZE):
    annotation = sample_annotation(rng, profile)
    images = [render_image(annotation, rng, size) for _ in range(views)]
    return annotation, images, preprocess_report(template(annotation))


def synth_dataset(
    out_dir,
    n_train: int = 2000,
    n_val: int = 300,
    n_test: int = 500,
    views_per_example: int = 1,
    seed: int = 0,
    profile: str = "clinical",
    image_size: int = SOURCE_SIZE,
) -> Path:
    """Write a three-split dataset; a pure function of its arguments."""
    sizes = {"train": n_train, "val": n_val, "test": n_test}
    if min(sizes.values()) < 1:
        raise ValueError("every split needs at least one study")
    if views_per_example not in (1, 2):
        raise ValueError("views_per_example must be 1 or 2")
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    for split_index, split in enumerate(SPLITS):
        split_dir = root / split
        (split_dir / "images").mkdir(parents=True, exist_ok=True)
        with open(split_dir / "records.jsonl", "w") as fh:
            for i in range(sizes[split]):
                study_id = f"{split}-{i:06d}"
                rng = np.random.default_rng([seed, split_index, i])
                annotation, images, report = synth_study(study_id, rng, views_per_example, profile, image_size)
                names = []
                for v, img in enumerate(images):
                    name = f"{study_id}_v{v}.pgm"
                    write_pgm(split_dir / "images" / name, img)
                    names.append(name)
                rec = StudyRecord(study_id, names, report, annotation)
                fh.write(json.dumps(rec.to_json(), sort_keys=True) + "\n")
    params = {"splits": sizes, "views": views_per_example, "seed": seed, "profile": profile, "image_size": image_size}
    blob = json.dumps(params, sort_keys=True, separators=(",", ":")).encode()
    meta = {
        "format": DATASET_FORMAT,
        "fingerprint": hashlib.sha256(blob).hexdigest()[:16],
        "seed": seed,
        "views_per_example": views_per_example,
        "profile": profile,
        "image_size": image_size,
        "splits": sizes,
        "observations": list(OBSERVATIONS),
        "class_codes": {c.name.lower(): int(c) for c in ObservationClass},
    }
    (root / "dataset.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return root


def load_split(root, split: str) -> List[StudyRecord]:
    split_dir = Path(root) / split
    path = split_dir / "records.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no records file at {path}")
    records = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            records.append(
                StudyRecord(d["id"], d["images"], d["report"], ObservationAnnotation(tuple(d["annotation"])), split_dir)
            )
    return records
