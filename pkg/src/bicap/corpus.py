"""Text and dataset handling.

Covers the rule-based tokenizer, vocabulary construction with
frequency-based word classes, JSONL dataset ingestion with feature
normalization, and the synthetic captioned-scene generator used for
desk-scale experiments.
"""

import json
import math
import os
import re
from dataclasses import dataclass, field

import numpy as np

EOS = "<eos>"
UNK = "<unk>"

_TOKEN_RE = re.compile(r"\w+|[^\w\s]")


def tokenize(text):
    """Lowercase and split into word tokens and single punctuation tokens.

    Word characters group into runs; every other non-space character
    (including each hyphen) becomes its own token.
    """
    return _TOKEN_RE.findall(text.lower())


def partition_by_mass(masses, class_count):
    """Split a descending-frequency mass list into contiguous groups of
    approximately equal total mass.

    Returns the end index of each group (length ``class_count``, last entry
    ``len(masses)``). Greedy adaptive targets followed by a boundary
    hill-climb that shrinks the max-minus-min group mass.
    """
    masses = np.asarray(masses, dtype=np.float64)
    n = masses.size
    if n == 0:
        raise ValueError("cannot partition an empty mass list")
    k = max(1, min(int(class_count), n))
    prefix = np.concatenate([[0.0], np.cumsum(masses)])
    total = prefix[-1]

    bounds = []
    start = 0
    for j in range(k - 1):
        classes_left = k - j
        target = (total - prefix[start]) / classes_left
        limit = n - (classes_left - 1)  # keep one item per remaining class
        end = start + 1
        while end < limit and (prefix[end] - prefix[start]) < target:
            under = target - (prefix[end] - prefix[start])
            over = (prefix[end + 1] - prefix[start]) - target
            if over >= under:
                break
            end += 1
        bounds.append(end)
        start = end
    bounds.append(n)

    def spread(bs):
        starts = [0] + bs[:-1]
        ms = [prefix[e] - prefix[s] for s, e in zip(starts, bs)]
        return max(ms) - min(ms)

    best = spread(bounds)
    for _ in range(200):
        improved = False
        for bi in range(k - 1):
            for delta in (-1, 1):
                cand = bounds[bi] + delta
                lo = (bounds[bi - 1] if bi > 0 else 0) + 1
                hi = bounds[bi + 1] - 1
                if not lo <= cand <= hi:
                    continue
                trial = list(bounds)
                trial[bi] = cand
                s = spread(trial)
                if s < best - 1e-15:
                    bounds, best, improved = trial, s, True
        if not improved:
            break
    return bounds


class ClassedVocabulary:
    """Token/id maps plus a frequency-based word-class partition.

    Ids are assigned by descending unigram count (ties broken
    lexicographically), so each class is a contiguous id range; the ranges
    are chosen to carry approximately equal probability mass.
    """

    def __init__(self, tokens, counts, class_bounds):
        self.tokens = list(tokens)
        self.counts = np.asarray(counts, dtype=np.int64)
        self.class_bounds = np.asarray(class_bounds, dtype=np.int64)
        self.token_to_id = {t: i for i, t in enumerate(self.tokens)}
        self.eos_id = self.token_to_id[EOS]
        self.unk_id = self.token_to_id[UNK]

    def __len__(self):
        return len(self.tokens)

    @property
    def n_classes(self):
        return len(self.class_bounds)

    def class_of(self, token_id):
        return int(np.searchsorted(self.class_bounds, token_id, side="right"))

    def class_range(self, class_id):
        """Half-open id range [start, end) of a class."""
        start = 0 if class_id == 0 else int(self.class_bounds[class_id - 1])
        return start, int(self.class_bounds[class_id])

    def content_hash(self):
        """Stable hash of tokens, counts and class bounds (checkpoint guard)."""
        import hashlib

        h = hashlib.sha256()
        for t, c in zip(self.tokens, self.counts):
            h.update(t.encode("utf-8"))
            h.update(b"\x00")
            h.update(str(int(c)).encode())
            h.update(b"\x01")
        h.update(",".join(str(int(b)) for b in self.class_bounds).encode())
        return h.hexdigest()

    def to_dict(self):
        return {
            "tokens": self.tokens,
            "counts": [int(c) for c in self.counts],
            "class_bounds": [int(b) for b in self.class_bounds],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d["tokens"], d["counts"], d["class_bounds"])


def build_vocab(sentences, class_count=None, min_count=1):
    """Build a :class:`ClassedVocabulary` from tokenized sentences.

    Tokens occurring fewer than ``min_count`` times fold into ``<unk>``;
    ``<eos>`` is counted once per sentence. ``class_count`` defaults to
    ceil(sqrt(vocabulary size)).
    """
    if class_count is not None and class_count < 1:
        raise ValueError("class_count must be >= 1")
    if min_count < 1:
        raise ValueError("min_count must be >= 1")
    sentences = list(sentences)
    if not sentences:
        raise ValueError("cannot build a vocabulary from an empty corpus")

    raw = {}
    for sent in sentences:
        for tok in sent:
            raw[tok] = raw.get(tok, 0) + 1
    kept = {t: c for t, c in raw.items() if c >= min_count}
    dropped = sum(c for t, c in raw.items() if t not in kept)
    kept[EOS] = len(sentences)
    kept[UNK] = kept.get(UNK, 0) + dropped

    entries = sorted(kept.items(), key=lambda tc: (-tc[1], tc[0]))
    tokens = [t for t, _ in entries]
    counts = [c for _, c in entries]
    if class_count is None:
        class_count = math.ceil(math.sqrt(len(tokens)))
    bounds = partition_by_mass(counts, class_count)
    return ClassedVocabulary(tokens, counts, bounds)


@dataclass
class EncodedSentence:
    """Token ids terminated by the <eos> id, plus the source token strings."""

    ids: list
    tokens: list

    def __len__(self):
        return len(self.ids)


def encode(tokens, vocab):
    """Map tokens to ids (unknowns to <unk>) and append <eos>."""
    ids = [vocab.token_to_id.get(t, vocab.unk_id) for t in tokens]
    ids.append(vocab.eos_id)
    return EncodedSentence(ids=ids, tokens=list(tokens))


def decode(sentence, vocab):
    """Token strings for an encoded sentence, excluding the trailing <eos>."""
    return [vocab.tokens[i] for i in sentence.ids if i != vocab.eos_id]


@dataclass
class CaptionedExample:
    id: str
    features: np.ndarray  # (feature_dim,) in [0, 1]
    captions: list  # list[EncodedSentence], nonempty
    split: str


@dataclass
class Dataset:
    examples: list
    vocab: ClassedVocabulary
    feature_dim: int
    norm_max: np.ndarray  # per-dimension max of raw train features

    def split(self, name):
        return [ex for ex in self.examples if ex.split == name]

    def caption_pairs(self, name):
        """(example, caption) pairs for one split, in file order."""
        return [(ex, cap) for ex in self.split(name) for cap in ex.captions]


SPLITS = ("train", "valid", "test")


def _parse_record(obj, lineno):
    if not isinstance(obj, dict):
        raise ValueError(f"line {lineno}: record is not an object")
    for key in ("id", "features", "captions", "split"):
        if key not in obj:
            raise ValueError(f"line {lineno}: missing field '{key}'")
    if obj["split"] not in SPLITS:
        raise ValueError(f"line {lineno}: split must be one of {SPLITS}")
    feats = np.asarray(obj["features"], dtype=np.float64)
    if feats.ndim != 1 or feats.size == 0:
        raise ValueError(f"line {lineno}: features must be a flat nonempty array")
    if not np.all(np.isfinite(feats)) or np.any(feats < 0):
        raise ValueError(f"line {lineno}: features must be finite and nonnegative")
    caps = obj["captions"]
    if not isinstance(caps, list) or not caps or not all(isinstance(c, str) for c in caps):
        raise ValueError(f"line {lineno}: captions must be a nonempty list of strings")
    return str(obj["id"]), feats, caps, obj["split"]


def manifest_path(path):
    return str(path) + ".manifest.json"


def load_dataset(path, vocab=None, class_count=None):
    """Load a JSONL dataset and normalize features to [0, 1].

    Normalization divides each dimension by its maximum over the training
    split (dimensions that never fire pass through as zero; values above
    the training max clip to 1). A sidecar manifest, when present, supplies
    the statistics instead; otherwise they are computed from the train
    records in the file. When ``vocab`` is not supplied one is built from
    the training captions (``class_count`` passes through to it).
    """
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ValueError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            records.append((_parse_record(obj, lineno), lineno))
    if not records:
        raise ValueError("dataset file contains no records")

    dim = records[0][0][1].size
    for (rid, feats, _, _), lineno in records:
        if feats.size != dim:
            raise ValueError(
                f"line {lineno}: record '{rid}' has feature dim {feats.size}, expected {dim}"
            )

    norm_max = None
    mpath = manifest_path(path)
    if os.path.exists(mpath):
        with open(mpath, "r", encoding="utf-8") as fh:
            manifest = json.load(fh)
        if int(manifest["feature_dim"]) != dim:
            raise ValueError(
                f"manifest feature_dim {manifest['feature_dim']} does not match data dim {dim}"
            )
        norm_max = np.asarray(manifest["per_dim_max"], dtype=np.float64)
    else:
        train_feats = [f for (_, f, _, s), _ in records if s == "train"]
        if not train_feats:
            raise ValueError("no train records and no manifest: cannot derive normalization")
        norm_max = np.max(np.stack(train_feats), axis=0)

    if vocab is None:
        train_caps = [tokenize(c) for (_, _, caps, s), _ in records if s == "train" for c in caps]
        if not train_caps:
            raise ValueError("no train captions to build a vocabulary from")
        vocab = build_vocab(train_caps, class_count=class_count)

    denom = np.where(norm_max > 0, norm_max, 1.0)
    examples = []
    for (rid, feats, caps, split), _ in records:
        normalized = np.clip(feats / denom, 0.0, 1.0)
        encoded = [encode(tokenize(c), vocab) for c in caps]
        examples.append(CaptionedExample(id=rid, features=normalized, captions=encoded, split=split))
    return Dataset(examples=examples, vocab=vocab, feature_dim=dim, norm_max=norm_max)


def write_dataset_file(records, path):
    """Write raw records (dicts with id/features/captions/split) as JSONL
    plus the sidecar manifest with train-split normalization statistics."""
    records = list(records)
    if not records:
        raise ValueError("refusing to write an empty dataset")
    for i, rec in enumerate(records, start=1):
        _parse_record(rec, i)
    dim = len(records[0]["features"])
    train_feats = [np.asarray(r["features"], dtype=np.float64) for r in records if r["split"] == "train"]
    if not train_feats:
        raise ValueError("dataset has no train records")
    per_dim_max = np.max(np.stack(train_feats), axis=0)

    tmp = str(path) + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
    os.replace(tmp, path)
    manifest = {
        "version": 1,
        "feature_dim": dim,
        "per_dim_max": [float(v) for v in per_dim_max],
    }
    mtmp = manifest_path(path) + ".tmp"
    with open(mtmp, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    os.replace(mtmp, manifest_path(path))


ATTRIBUTE_LEXICON = [
    "cat", "dog", "tree", "car", "house", "bird", "boat", "chair",
    "horse", "lamp", "table", "fish", "flower", "truck", "bench", "kite",
    "sheep", "clock", "bottle", "plane", "bridge", "piano", "zebra", "drum",
]

_OPENERS = [("there", "is"), ("this", "shows"), ("you", "can", "see"), ("here", "is")]
_CONNECTORS = [("and",), ("with",), ("and", "also"), ("next", "to")]
_DETERMINERS = ("a", "the")

ATTRIBUTE_PROBABILITY = 0.4


def attribute_names(attr_count):
    if attr_count <= len(ATTRIBUTE_LEXICON):
        return ATTRIBUTE_LEXICON[:attr_count]
    extra = [f"obj{i}" for i in range(attr_count - len(ATTRIBUTE_LEXICON))]
    return ATTRIBUTE_LEXICON + extra


def _synthetic_caption(active_names, rng):
    order = list(active_names)
    rng.shuffle(order)
    words = list(_OPENERS[rng.integers(0, len(_OPENERS))])
    for i, name in enumerate(order):
        if i > 0:
            words.extend(_CONNECTORS[rng.integers(0, len(_CONNECTORS))])
        words.append(_DETERMINERS[rng.integers(0, 2)])
        words.append(name)
    words.append(".")
    return " ".join(words)


def synthetic_records(attr_count, example_count, rng, captions_per_example=2,
                      split_fractions=(0.7, 0.15, 0.15)):
    """Raw records for a synthetic captioned-scene dataset.

    Each scene activates attributes independently (probability 0.4,
    redrawn until at least one is active) and every caption mentions each
    active attribute exactly once, in a fresh random order with filler
    words, so recovering the feature vector from a caption requires
    remembering every attribute mentioned so far.
    """
    if attr_count < 2:
        raise ValueError("attr_count must be >= 2")
    if example_count < 1:
        raise ValueError("example_count must be >= 1")
    names = attribute_names(attr_count)
    n_train = round(split_fractions[0] * example_count)
    n_valid = round(split_fractions[1] * example_count)

    records = []
    for i in range(example_count):
        while True:
            bits = [1 if rng.random() < ATTRIBUTE_PROBABILITY else 0 for _ in range(attr_count)]
            if any(bits):
                break
        active = [names[j] for j, b in enumerate(bits) if b]
        captions = [_synthetic_caption(active, rng) for _ in range(captions_per_example)]
        split = "train" if i < n_train else ("valid" if i < n_train + n_valid else "test")
        records.append({
            "id": f"scene{i:05d}",
            "features": bits,
            "captions": captions,
            "split": split,
        })
    return records


def generate_synthetic(attr_count, example_count, rng, captions_per_example=2,
                       split_fractions=(0.7, 0.15, 0.15)):
    """In-memory synthetic :class:`Dataset` (see :func:`synthetic_records`)."""
    records = synthetic_records(attr_count, example_count, rng,
                                captions_per_example, split_fractions)
    train_caps = [tokenize(c) for r in records if r["split"] == "train" for c in r["captions"]]
    vocab = build_vocab(train_caps)
    train_feats = np.stack([np.asarray(r["features"], dtype=np.float64)
                            for r in records if r["split"] == "train"])
    norm_max = train_feats.max(axis=0)
    denom = np.where(norm_max > 0, norm_max, 1.0)
    examples = []
    for rec in records:
        feats = np.clip(np.asarray(rec["features"], dtype=np.float64) / denom, 0.0, 1.0)
        caps = [encode(tokenize(c), vocab) for c in rec["captions"]]
        examples.append(CaptionedExample(id=rec["id"], features=feats, captions=caps,
                                         split=rec["split"]))
    return Dataset(examples=examples, vocab=vocab, feature_dim=attr_count, norm_max=norm_max)


def caption_length_counts(dataset, split="train"):
    """Histogram of caption lengths (token count before <eos>) in a split."""
    counts = {}
    for _, cap in dataset.caption_pairs(split):
        n = len(cap.ids) - 1
        counts[n] = counts.get(n, 0) + 1
    return counts
