"""Procedural "glyph-world" dataset of image-caption pairs with manipulation
annotations.

A scene is a 32x32 grayscale grid: a 12x12 glyph stamped at a random position
and a small place motif along the top edge. The paired caption follows the
template "<name> looks <sentiment> at the <place>". A pristine pair is fully
cross-modally consistent:

  * glyph shape        <-> name token        (16 identities)
  * stroke brightness  <-> sentiment polarity (positive a bright solid ring,
                           negative a dimmer dashed one)
  * mouth arc          <-> sentiment polarity (up-arc positive)
  * place motif column <-> place token        (8 places)

Each manipulation plants its own recoverable trace:

  * face swap (FS) redraws the glyph as a different identity and leaves a
    faint paste halo across the in-box background, like a splice seam;
  * face attribute (FA) flips only the mouth arc, so the two emotion cues
    (arc vs. brightness) disagree, and leaves the same halo around the
    redrawn mouth only;
  * text swap (TS) replaces the caption with one for a different identity and
    place, breaking name/shape and place/motif agreement;
  * text attribute (TA) swaps the sentiment word to the opposite polarity,
    breaking sentiment/brightness agreement.

The image manipulations carry local artifacts the way GAN edits do, while the
text manipulations are only detectable by comparing the caption against the
image.

A brute-force consistency check over these cues labels every unperturbed
sample correctly, so the planted signal is recoverable by construction.
"""

from __future__ import annotations

import dataclasses
import json

import numpy as np

from .encoders import TokenVocab

IMAGE_SIZE = 32
GLYPH_SIZE = 12
MAX_TOKENS = 12

NAMES = [
    "ada", "ben", "cleo", "dmitri", "elif", "femi", "goro", "hana",
    "ivan", "juno", "kai", "lena", "milo", "nia", "omar", "pia",
]
POSITIVE_WORDS = [
    "happy", "cheerful", "delighted", "joyful", "pleased",
    "content", "upbeat", "radiant", "merry", "serene",
]
NEGATIVE_WORDS = [
    "sad", "angry", "gloomy", "upset", "bitter",
    "sullen", "anxious", "weary", "furious", "somber",
]
PLACES = ["park", "dock", "plaza", "market", "bridge", "garden", "museum", "station"]
TEMPLATE_WORDS = ["looks", "at", "the"]

NAME_SLOT, SENT_SLOT, PLACE_SLOT = 0, 2, 5
CAPTION_LEN = 6

MANIP_TYPES = ("FS", "FA", "TS", "TA")
FAKE_CLS_NAMES = {
    "FS": "face_swap",
    "FA": "face_attribute",
    "TS": "text_swap",
    "TA": "text_attribute",
}

BRIGHT_POS = 1.0   # stroke intensity for positive emotion
BRIGHT_NEG = 0.55  # and for negative, whose ring is additionally dashed
MOTIF_LEVEL = 0.9
MOTIF_WIDTH = 4
TRACE_LEVEL = 0.2  # halo left behind by an image edit
STROKE_THRESHOLD = 0.3

# identity bits switch four 2x2 interior blocks on or off
_BLOCK_ANCHORS = ((2, 2), (2, 8), (5, 2), (5, 8))
# bold mouth arcs over rows 7..9; smile and frown share only their midpoints
_SMILE = ((7, 2), (7, 9), (8, 3), (8, 8), (9, 4), (9, 5), (9, 6), (9, 7))
_FROWN = ((9, 2), (9, 9), (8, 3), (8, 8), (7, 4), (7, 5), (7, 6), (7, 7))


def glyph_vocab() -> TokenVocab:
    return TokenVocab(NAMES + POSITIVE_WORDS + NEGATIVE_WORDS + PLACES + TEMPLATE_WORDS)


VOCAB = glyph_vocab()


@dataclasses.dataclass(eq=False)
class ManipSample:
    """One image-text pair with the four manipulation annotations."""

    id: str
    image: np.ndarray          # (32, 32) floats in [0, 1]
    tokens: np.ndarray         # (MAX_TOKENS,) content ids, PAD-filled
    pad_mask: np.ndarray       # (MAX_TOKENS,) True at real tokens
    y_bin: int                 # 1 iff any manipulation applied
    y_mul: np.ndarray          # (4,) indicators in FS, FA, TS, TA order
    y_box: tuple               # normalized corners; (0,0,0,0) when image-pristine
    y_tok: np.ndarray          # (MAX_TOKENS,) per-token manipulated indicators
    fake_cls: list             # applied manipulation names
    perturbed: bool = False

    @property
    def has_box(self) -> bool:
        return bool(self.y_mul[0] or self.y_mul[1])


def samples_equal(a: ManipSample, b: ManipSample) -> bool:
    return (
        a.id == b.id
        and np.array_equal(a.image, b.image)
        and np.array_equal(a.tokens, b.tokens)
        and np.array_equal(a.pad_mask, b.pad_mask)
        and a.y_bin == b.y_bin
        and np.array_equal(a.y_mul, b.y_mul)
        and tuple(a.y_box) == tuple(b.y_box)
        and np.array_equal(a.y_tok, b.y_tok)
        and list(a.fake_cls) == list(b.fake_cls)
        and a.perturbed == b.perturbed
    )


# ---------------------------------------------------------------------------
# rendering


def render_glyph(identity: int, arc_positive: bool, bright_positive: bool,
                 trace: str = "none") -> np.ndarray:
    if not 0 <= identity < len(NAMES):
        raise ValueError(f"identity {identity} out of range")
    if trace not in ("none", "full", "mouth"):
        raise ValueError(f"unknown trace kind {trace!r}")
    level = BRIGHT_POS if bright_positive else BRIGHT_NEG
    g = np.zeros((GLYPH_SIZE, GLYPH_SIZE))
    g[0, :] = g[-1, :] = level
    g[:, 0] = g[:, -1] = level
    if not bright_positive:
        # dim emotions read as a dashed outline; the texture keeps the cue
        # visible to scale-normalizing encoders, not just the intensity drop
        rr, cc = np.meshgrid(np.arange(GLYPH_SIZE), np.arange(GLYPH_SIZE), indexing="ij")
        ring = (rr == 0) | (rr == GLYPH_SIZE - 1) | (cc == 0) | (cc == GLYPH_SIZE - 1)
        g[ring & ((rr + cc) % 2 == 1)] = 0.0
    for bit, (r, c) in enumerate(_BLOCK_ANCHORS):
        if identity >> bit & 1:
            g[r:r + 2, c:c + 2] = level
    for r, c in (_SMILE if arc_positive else _FROWN):
        g[r, c] = level
    if trace == "full":
        g[g == 0.0] = TRACE_LEVEL
    elif trace == "mouth":
        mouth = g[7:10, 1:11]
        mouth[mouth == 0.0] = TRACE_LEVEL
    return g


def render_scene(place: int, glyph_row: int, glyph_col: int, identity: int,
                 arc_positive: bool, bright_positive: bool, trace: str = "none") -> np.ndarray:
    img = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    img[0:3, MOTIF_WIDTH * place:MOTIF_WIDTH * (place + 1)] = MOTIF_LEVEL
    img[glyph_row:glyph_row + GLYPH_SIZE, glyph_col:glyph_col + GLYPH_SIZE] = render_glyph(
        identity, arc_positive, bright_positive, trace
    )
    return img


def glyph_box(glyph_row: int, glyph_col: int) -> tuple:
    return (
        glyph_col / IMAGE_SIZE,
        glyph_row / IMAGE_SIZE,
        (glyph_col + GLYPH_SIZE) / IMAGE_SIZE,
        (glyph_row + GLYPH_SIZE) / IMAGE_SIZE,
    )


# ---------------------------------------------------------------------------
# decoding (the brute-force route back from pixels/tokens to scene facts)


def decode_image(image: np.ndarray) -> dict:
    """Recover scene facts from pixels; exact on unperturbed renderings."""
    motif_cols = np.flatnonzero(image[0] > 0.5)
    if motif_cols.size == 0:
        raise ValueError("no place motif found")
    place = int(motif_cols[0]) // MOTIF_WIDTH

    body = image[4:] > 0.04
    rows, cols = np.nonzero(body)
    if rows.size == 0:
        raise ValueError("no glyph found")
    top, left = int(rows.min()) + 4, int(cols.min())
    crop = image[top:top + GLYPH_SIZE, left:left + GLYPH_SIZE]
    if crop.shape != (GLYPH_SIZE, GLYPH_SIZE):
        raise ValueError("glyph crop runs out of bounds")

    strokes = crop > STROKE_THRESHOLD
    identity = 0
    for bit, (r, c) in enumerate(_BLOCK_ANCHORS):
        if strokes[r:r + 2, c:c + 2].all():
            identity |= 1 << bit
    arc_positive = bool(strokes[9, 5])
    # a solid ring keeps its odd-parity pixels; the dashed (dim) ring drops them
    bright_positive = bool(strokes[0, 1])
    interior = crop[1:-1, 1:-1]
    trace = bool(np.any((interior > 0.04) & (interior < STROKE_THRESHOLD)))
    return {
        "place": place,
        "identity": identity,
        "arc_positive": arc_positive,
        "bright_positive": bright_positive,
        "trace": trace,
        "glyph_row": top,
        "glyph_col": left,
        "box": glyph_box(top, left),
    }


def decode_caption(tokens: np.ndarray) -> dict:
    words = VOCAB.detokenize(tokens)
    if len(words) != CAPTION_LEN:
        raise ValueError(f"caption has {len(words)} words, expected {CAPTION_LEN}")
    name, sent, place = words[NAME_SLOT], words[SENT_SLOT], words[PLACE_SLOT]
    if sent in POSITIVE_WORDS:
        sent_positive = True
    elif sent in NEGATIVE_WORDS:
        sent_positive = False
    else:
        raise ValueError(f"{sent!r} is not a sentiment word")
    return {
        "identity": NAMES.index(name),
        "sent_positive": sent_positive,
        "place": PLACES.index(place),
    }


def consistency_rule(sample: ManipSample) -> int:
    """Brute-force cross-modal check; exact on unperturbed samples.

    Fake iff any planted inconsistency shows: shape/name or motif/place
    disagreement, either emotion cue off the sentiment polarity, the two
    emotion cues off each other, or a paste halo.
    """
    scene = decode_image(sample.image)
    caption = decode_caption(sample.tokens)
    fake = (
        scene["identity"] != caption["identity"]
        or scene["place"] != caption["place"]
        or scene["arc_positive"] != scene["bright_positive"]
        or caption["sent_positive"] != scene["bright_positive"]
        or scene["trace"]
    )
    return int(fake)


# ---------------------------------------------------------------------------
# generation


def _caption_tokens(identity: int, sent_word: str, place: int):
    return [NAMES[identity], "looks", sent_word, "at", "the", PLACES[place]]


def _pristine_from_rng(rng: np.random.Generator, sample_id: str) -> ManipSample:
    identity = int(rng.integers(len(NAMES)))
    positive = bool(rng.integers(2))
    lexicon = POSITIVE_WORDS if positive else NEGATIVE_WORDS
    sent_word = lexicon[rng.integers(len(lexicon))]
    place = int(rng.integers(len(PLACES)))
    row = int(rng.integers(4, IMAGE_SIZE - GLYPH_SIZE - 1 + 1))
    col = int(rng.integers(0, IMAGE_SIZE - GLYPH_SIZE - 1 + 1))
    image = render_scene(place, row, col, identity, positive, positive)
    ids, mask = VOCAB.tokenize(_caption_tokens(identity, sent_word, place), MAX_TOKENS)
    return ManipSample(
        id=sample_id,
        image=image,
        tokens=ids,
        pad_mask=mask,
        y_bin=0,
        y_mul=np.zeros(4, dtype=int),
        y_box=(0.0, 0.0, 0.0, 0.0),
        y_tok=np.zeros(MAX_TOKENS, dtype=int),
        fake_cls=[],
    )


def gen_pristine(seed: int) -> ManipSample:
    """Deterministic consistent pair for a seed."""
    rng = np.random.default_rng(np.random.SeedSequence([0x9E3779B9, seed]))
    return _pristine_from_rng(rng, f"pristine-{seed}")


def apply_image_manip(sample: ManipSample, kind: str, seed: int) -> ManipSample:
    """Swap the glyph identity (FS) or flip its mouth arc (FA) inside the box."""
    if kind not in ("FS", "FA"):
        raise ValueError(f"unknown image manipulation {kind!r}")
    if sample.y_mul[0] or sample.y_mul[1]:
        raise ValueError("image modality already manipulated")
    rng = np.random.default_rng(np.random.SeedSequence([0x51ED270A, seed]))
    scene = decode_image(sample.image)
    row, col = scene["glyph_row"], scene["glyph_col"]

    if kind == "FS":
        others = [i for i in range(len(NAMES)) if i != scene["identity"]]
        new_identity = int(others[rng.integers(len(others))])
        glyph = render_glyph(new_identity, scene["arc_positive"],
                             scene["bright_positive"], trace="full")
    else:
        glyph = render_glyph(scene["identity"], not scene["arc_positive"],
                             scene["bright_positive"], trace="mouth")

    image = sample.image.copy()
    image[row:row + GLYPH_SIZE, col:col + GLYPH_SIZE] = glyph
    y_mul = sample.y_mul.copy()
    y_mul[0 if kind == "FS" else 1] = 1
    return dataclasses.replace(
        sample,
        image=image,
        y_bin=1,
        y_mul=y_mul,
        y_box=glyph_box(row, col),
        fake_cls=sample.fake_cls + [FAKE_CLS_NAMES[kind]],
    )


def apply_text_manip(sample: ManipSample, kind: str, seed: int) -> ManipSample:
    """Replace the caption wholesale (TS) or flip its sentiment word (TA)."""
    if kind not in ("TS", "TA"):
        raise ValueError(f"unknown text manipulation {kind!r}")
    if sample.y_mul[2] or sample.y_mul[3]:
        raise ValueError("text modality already manipulated")
    rng = np.random.default_rng(np.random.SeedSequence([0x7F4A7C15, seed]))
    caption = decode_caption(sample.tokens)

    if kind == "TS":
        # a caption for a different identity at a different place; it must not
        # accidentally name the glyph currently drawn in the image
        scene = decode_image(sample.image)
        banned = {caption["identity"], scene["identity"]}
        choices = [i for i in range(len(NAMES)) if i not in banned]
        new_identity = int(choices[rng.integers(len(choices))])
        place_choices = [p for p in range(len(PLACES)) if p != scene["place"]]
        new_place = int(place_choices[rng.integers(len(place_choices))])
        all_words = POSITIVE_WORDS + NEGATIVE_WORDS
        new_sent = all_words[rng.integers(len(all_words))]
        new_tokens = _caption_tokens(new_identity, new_sent, new_place)
    else:
        old_word = VOCAB.detokenize(sample.tokens)[SENT_SLOT]
        lexicon = NEGATIVE_WORDS if caption["sent_positive"] else POSITIVE_WORDS
        new_word = lexicon[rng.integers(len(lexicon))]
        new_tokens = VOCAB.detokenize(sample.tokens)
        new_tokens[SENT_SLOT] = new_word
        assert new_word != old_word  # lexicons are disjoint

    ids, mask = VOCAB.tokenize(new_tokens, MAX_TOKENS)
    y_tok = ((ids != sample.tokens) & mask).astype(int)
    y_mul = sample.y_mul.copy()
    y_mul[2 if kind == "TS" else 3] = 1
    return dataclasses.replace(
        sample,
        tokens=ids,
        pad_mask=mask,
        y_bin=1,
        y_mul=y_mul,
        y_tok=y_tok,
        fake_cls=sample.fake_cls + [FAKE_CLS_NAMES[kind]],
    )


FAKE_COMBOS = (
    ("FS",), ("FA",), ("TS",), ("TA",),
    ("FS", "TS"), ("FS", "TA"), ("FA", "TS"), ("FA", "TA"),
)


def generate_sample(seed: int, index: int, pristine_frac: float = 0.3) -> ManipSample:
    """Pure per (seed, index) generation: pristine or one of 8 fake classes."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, index]))
    sample = _pristine_from_rng(rng, f"{seed}-{index}")
    if rng.random() < pristine_frac:
        return sample
    combo = FAKE_COMBOS[rng.integers(len(FAKE_COMBOS))]
    for kind in combo:
        child_seed = int(rng.integers(2**62))
        if kind in ("FS", "FA"):
            sample = apply_image_manip(sample, kind, child_seed)
        else:
            sample = apply_text_manip(sample, kind, child_seed)
    return sample


def generate_pool(n: int, seed: int, pristine_frac: float = 0.3) -> list[ManipSample]:
    return [generate_sample(seed, i, pristine_frac) for i in range(n)]


def validate_sample(sample: ManipSample) -> None:
    """Check every schema invariant; raises ValueError on the first violation."""
    if sample.image.shape != (IMAGE_SIZE, IMAGE_SIZE):
        raise ValueError(f"bad image shape {sample.image.shape}")
    if not np.all(np.isfinite(sample.image)):
        raise ValueError("non-finite pixels")
    if sample.image.min() < 0.0 or sample.image.max() > 1.0:
        raise ValueError("pixels outside [0, 1]")
    if sample.tokens.shape != (MAX_TOKENS,) or sample.y_tok.shape != (MAX_TOKENS,):
        raise ValueError("token arrays must have fixed length")
    if sample.y_bin != int(bool(sample.y_mul.any())):
        raise ValueError("y_bin must mirror y_mul")
    fs, fa, ts, ta = (int(v) for v in sample.y_mul)
    if fs + fa > 1:
        raise ValueError("at most one image manipulation")
    if ts + ta > 1:
        raise ValueError("at most one text manipulation")
    has_box = tuple(sample.y_box) != (0.0, 0.0, 0.0, 0.0)
    if has_box != bool(fs or fa):
        raise ValueError("y_box must be set exactly for image manipulations")
    x1, y1, x2, y2 = sample.y_box
    if has_box and not (0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1):
        raise ValueError(f"malformed box {sample.y_box}")
    if sample.y_tok.any() and not (ts or ta):
        raise ValueError("token labels require a text manipulation")
    if np.any(sample.y_tok.astype(bool) & ~sample.pad_mask):
        raise ValueError("token labels on padded positions")
    expected = [FAKE_CLS_NAMES[k] for k, f in zip(MANIP_TYPES, (fs, fa, ts, ta)) if f]
    if sorted(sample.fake_cls) != sorted(expected):
        raise ValueError(f"fake_cls {sample.fake_cls} does not match y_mul")


# ---------------------------------------------------------------------------
# file I/O


def _sample_to_record(sample: ManipSample) -> dict:
    return {
        "id": sample.id,
        "image": [float(v) for v in sample.image.reshape(-1)],
        "tokens": [int(v) for v in sample.tokens],
        "pad_mask": [bool(v) for v in sample.pad_mask],
        "fake_cls": list(sample.fake_cls),
        "y_bin": int(sample.y_bin),
        "y_mul": [int(v) for v in sample.y_mul],
        "y_box": [float(v) for v in sample.y_box],
        "y_tok": [int(v) for v in sample.y_tok],
        "perturbed": bool(sample.perturbed),
    }


_RECORD_FIELDS = {"id", "image", "tokens", "pad_mask", "fake_cls",
                  "y_bin", "y_mul", "y_box", "y_tok", "perturbed"}


def _record_to_sample(record: dict) -> ManipSample:
    if set(record) != _RECORD_FIELDS:
        raise ValueError(f"record fields {sorted(record)} do not match schema")
    image = np.asarray(record["image"], dtype=float)
    if image.size != IMAGE_SIZE * IMAGE_SIZE:
        raise ValueError(f"image has {image.size} values")
    return ManipSample(
        id=str(record["id"]),
        image=image.reshape(IMAGE_SIZE, IMAGE_SIZE),
        tokens=np.asarray(record["tokens"], dtype=np.int64),
        pad_mask=np.asarray(record["pad_mask"], dtype=bool),
        y_bin=int(record["y_bin"]),
        y_mul=np.asarray(record["y_mul"], dtype=int),
        y_box=tuple(float(v) for v in record["y_box"]),
        y_tok=np.asarray(record["y_tok"], dtype=int),
        fake_cls=list(record["fake_cls"]),
        perturbed=bool(record["perturbed"]),
    )


def save_pool(pool, path, perturb_fraction: float = 0.5,
              noise_sigma: float = 0.05, seed: int = 0) -> None:
    """Write one JSON record per line, optionally noising a sample fraction.

    The Gaussian pixel noise stands in for real-world degradations that mask
    manipulation traces; noised samples carry the ``perturbed`` flag.
    """
    rng = np.random.default_rng(np.random.SeedSequence([0x5EED10, seed]))
    with open(path, "w") as fh:
        for sample in pool:
            if perturb_fraction > 0 and rng.random() < perturb_fraction:
                noisy = np.clip(
                    sample.image + rng.normal(0.0, noise_sigma, sample.image.shape), 0.0, 1.0
                )
                sample = dataclasses.replace(sample, image=noisy, perturbed=True)
            fh.write(json.dumps(_sample_to_record(sample), sort_keys=True) + "\n")


def load_pool(path) -> list[ManipSample]:
    pool = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                sample = _record_to_sample(record)
                validate_sample(sample)
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}: malformed record on line {lineno}: {exc}") from None
            pool.append(sample)
    return pool


# ---------------------------------------------------------------------------
# batching


def collate(samples) -> dict:
    """Stack a list of samples into the arrays the model consumes."""
    return {
        "images": np.stack([s.image for s in samples]),
        "tokens": np.stack([s.tokens for s in samples]),
        "pad_mask": np.stack([s.pad_mask for s in samples]),
        "y_bin": np.array([s.y_bin for s in samples], dtype=int),
        "y_mul": np.stack([s.y_mul for s in samples]),
        "y_box": np.array([s.y_box for s in samples], dtype=float),
        "has_box": np.array([s.has_box for s in samples], dtype=bool),
        "y_tok": np.stack([s.y_tok for s in samples]),
        "pristine": np.array([s.y_bin == 0 for s in samples], dtype=bool),
        "ids": [s.id for s in samples],
    }
