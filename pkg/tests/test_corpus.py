import itertools
import json

import numpy as np
import pytest

from bicap import corpus
from bicap.corpus import (EOS, UNK, build_vocab, decode,
                          encode, generate_synthetic, load_dataset,
                          partition_by_mass, synthetic_records, tokenize,
                          write_dataset_file)
from bicap.numkit import SeededRng


def test_tokenize_empty():
    assert tokenize("") == []


def test_tokenize_sentence():
    assert tokenize("A man riding a horse.") == ["a", "man", "riding", "a", "horse", "."]


def test_tokenize_hyphens_and_punctuation():
    assert tokenize("Black-and-white TV!") == ["black", "-", "and", "-", "white", "tv", "!"]


def _brute_force_best_spread(masses, k):
    """Minimal max-minus-min class mass over all contiguous partitions."""
    n = len(masses)
    best = float("inf")
    for cuts in itertools.combinations(range(1, n), k - 1):
        bounds = list(cuts) + [n]
        starts = [0] + list(cuts)
        sums = [sum(masses[s:e]) for s, e in zip(starts, bounds)]
        best = min(best, max(sums) - min(sums))
    return best


def test_partition_equal_mass_example():
    # counts {a:8, b:4, c:2, d:2} split into two classes of mass 8 | 8
    assert partition_by_mass([8, 4, 2, 2], 2) == [1, 4]


def test_partition_matches_brute_force_on_small_cases():
    rng = SeededRng(5)
    for _ in range(40):
        n = rng.integers(4, 12)
        k = rng.integers(2, min(n, 5) + 1)
        masses = sorted((rng.integers(1, 40) for _ in range(n)), reverse=True)
        bounds = partition_by_mass(masses, k)
        assert bounds[-1] == len(masses)
        assert all(b2 > b1 for b1, b2 in zip(bounds, bounds[1:]))
        starts = [0] + bounds[:-1]
        sums = [sum(masses[s:e]) for s, e in zip(starts, bounds)]
        spread = max(sums) - min(sums)
        # greedy + boundary repair is a heuristic; it must stay close to
        # the exhaustive optimum
        assert spread <= 1.5 * _brute_force_best_spread(masses, k) + 1e-9


def test_build_vocab_partitions_ids_exactly():
    sentences = [tokenize(t) for t in
                 ["a cat sat", "a dog sat on a mat", "the cat and the dog"]]
    vocab = build_vocab(sentences, class_count=3)
    seen = []
    for c in range(vocab.n_classes):
        lo, hi = vocab.class_range(c)
        seen.extend(range(lo, hi))
    assert seen == list(range(len(vocab)))
    for i in range(len(vocab)):
        c = vocab.class_of(i)
        lo, hi = vocab.class_range(c)
        assert lo <= i < hi


def test_build_vocab_single_word_corpus():
    vocab = build_vocab([["hello"], ["hello"]])
    assert sorted(vocab.tokens) == sorted(["hello", EOS, UNK])


def test_build_vocab_min_count_folds_to_unk():
    sentences = [["common", "common", "rare"], ["common"]]
    vocab = build_vocab(sentences, min_count=2)
    assert "rare" not in vocab.token_to_id
    assert vocab.counts[vocab.unk_id] == 1
    enc = encode(["rare"], vocab)
    assert enc.ids[0] == vocab.unk_id


def test_build_vocab_empty_corpus_rejected():
    with pytest.raises(ValueError):
        build_vocab([])


def test_equal_mass_classing_on_zipf_corpora():
    # random Zipf-like corpora; the heaviest class carries at most twice
    # the mass of the lightest
    rng = SeededRng(11)
    for trial in range(6):
        k = 2 + trial % 5
        n_words = 8 * k + rng.integers(0, 4 * k)
        exponent = 0.8 + 0.4 * rng.random()
        counts = [max(1, int(1000 / (i + 1) ** exponent)) for i in range(n_words)]
        stream = [w for i, c in enumerate(counts) for w in [f"w{i}"] * c]
        rng.shuffle(stream)
        sentences = [stream[i:i + 10] for i in range(0, len(stream), 10)]
        vocab = build_vocab(sentences, class_count=k)
        total = vocab.counts.sum()
        masses = []
        for c in range(vocab.n_classes):
            lo, hi = vocab.class_range(c)
            masses.append(vocab.counts[lo:hi].sum() / total)
        assert max(masses) <= 2.0 * min(masses) + 1e-12, (k, n_words, masses)


def test_encode_empty_and_round_trip():
    vocab = build_vocab([["a", "b"], ["b", "c"]])
    assert encode([], vocab).ids == [vocab.eos_id]
    sent = encode(["b", "a", "c"], vocab)
    assert sent.ids[-1] == vocab.eos_id
    assert decode(sent, vocab) == ["b", "a", "c"]


def test_encode_oov_maps_to_unk():
    vocab = build_vocab([["a", "b"]])
    sent = encode(["zzz", "a"], vocab)
    assert sent.ids[0] == vocab.unk_id
    assert sent.ids[1] == vocab.token_to_id["a"]


def _write_jsonl(path, records):
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def _records3():
    return [
        {"id": "r1", "features": [2.0, 0.0, 1.0], "captions": ["a cat here"], "split": "train"},
        {"id": "r2", "features": [4.0, 0.0, 0.5], "captions": ["a dog here", "the dog"], "split": "train"},
        {"id": "r3", "features": [1.0, 0.0, 2.0], "captions": ["a cat again"], "split": "test"},
    ]


def test_load_dataset_fixture(tmp_path):
    path = tmp_path / "data.jsonl"
    _write_jsonl(path, _records3())
    ds = load_dataset(path)
    assert len(ds.examples) == 3
    assert ds.feature_dim == 3
    # per-dim train max = [4, 0, 1]; zero-max dimension passes through as zero
    assert np.allclose(ds.norm_max, [4.0, 0.0, 1.0])
    ex1 = ds.examples[0]
    assert np.allclose(ex1.features, [0.5, 0.0, 1.0])
    # the test record clips at 1 where it exceeds the train max
    assert np.allclose(ds.examples[2].features, [0.25, 0.0, 1.0])
    assert all(0.0 <= f <= 1.0 for ex in ds.examples for f in ex.features)


def test_load_dataset_dim_mismatch_names_line(tmp_path):
    recs = _records3()
    recs[2]["features"] = [1.0, 2.0]
    path = tmp_path / "bad.jsonl"
    _write_jsonl(path, recs)
    with pytest.raises(ValueError, match="line 3"):
        load_dataset(path)


def test_load_dataset_malformed_json_names_line(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "r1", "features": [1], "captions": ["x"], "split": "train"}\n{oops\n')
    with pytest.raises(ValueError, match="line 2"):
        load_dataset(path)


def test_load_dataset_missing_field_and_bad_split(tmp_path):
    path = tmp_path / "bad.jsonl"
    path.write_text('{"id": "r1", "features": [1], "split": "train"}\n')
    with pytest.raises(ValueError, match="captions"):
        load_dataset(path)
    path.write_text('{"id": "r1", "features": [1], "captions": ["x"], "split": "dev"}\n')
    with pytest.raises(ValueError, match="split"):
        load_dataset(path)


def test_normalization_idempotent(tmp_path):
    path = tmp_path / "data.jsonl"
    _write_jsonl(path, _records3())
    ds = load_dataset(path)
    renorm = tmp_path / "renorm.jsonl"
    records = [{"id": ex.id, "features": [float(f) for f in ex.features],
                "captions": [" ".join(c.tokens) for c in ex.captions],
                "split": ex.split} for ex in ds.examples]
    _write_jsonl(renorm, records)
    ds2 = load_dataset(renorm)
    for a, b in zip(ds.examples, ds2.examples):
        assert np.array_equal(a.features, b.features)


def test_write_dataset_file_manifest_round_trip(tmp_path):
    path = tmp_path / "data.jsonl"
    write_dataset_file(_records3(), path)
    manifest = json.loads((tmp_path / "data.jsonl.manifest.json").read_text())
    assert manifest["feature_dim"] == 3
    assert manifest["per_dim_max"] == [4.0, 0.0, 1.0]
    ds = load_dataset(path)
    assert len(ds.examples) == 3


def test_manifest_dim_mismatch_rejected(tmp_path):
    path = tmp_path / "data.jsonl"
    write_dataset_file(_records3(), path)
    manifest_file = tmp_path / "data.jsonl.manifest.json"
    manifest = json.loads(manifest_file.read_text())
    manifest["feature_dim"] = 7
    manifest_file.write_text(json.dumps(manifest))
    with pytest.raises(ValueError, match="feature_dim"):
        load_dataset(path)


def test_synthetic_deterministic():
    a = synthetic_records(8, 40, SeededRng(3))
    b = synthetic_records(8, 40, SeededRng(3))
    assert a == b
    c = synthetic_records(8, 40, SeededRng(4))
    assert a != c


def test_synthetic_shapes():
    ds = generate_synthetic(8, 100, SeededRng(1))
    assert len(ds.examples) == 100
    assert ds.feature_dim == 8
    assert len(ds.split("train")) + len(ds.split("valid")) + len(ds.split("test")) == 100
    assert all(len(ex.captions) == 2 for ex in ds.examples)


def test_synthetic_captions_match_feature_support():
    ds = generate_synthetic(8, 60, SeededRng(2))
    names = corpus.attribute_names(8)
    for ex in ds.examples:
        active = {names[i] for i, bit in enumerate(ex.features) if bit == 1.0}
        assert active, "at least one attribute is always active"
        for cap in ex.captions:
            mentioned = [t for t in cap.tokens if t in set(names)]
            assert sorted(mentioned) == sorted(active)
            assert len(mentioned) == len(set(mentioned))


def test_synthetic_rejects_tiny_attr_count():
    with pytest.raises(ValueError):
        synthetic_records(1, 10, SeededRng(0))


def test_caption_length_counts(tiny_dataset):
    counts = corpus.caption_length_counts(tiny_dataset, "train")
    pairs = tiny_dataset.caption_pairs("train")
    assert sum(counts.values()) == len(pairs)
    assert all(n >= 1 for n in counts)
