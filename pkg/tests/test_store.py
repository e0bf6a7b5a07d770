import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fairpair.errors import DomainError, FormatError, ValidationError
from fairpair.store import (
    EmbeddingSet,
    LabelTable,
    load_csv,
    load_dataset,
    mean_vectors,
    normalize,
    save_csv,
    save_dataset,
)

from conftest import random_dataset


def test_roundtrip_bit_exact(tmp_path, small_set):
    p = tmp_path / "a.ffeb"
    save_dataset(p, small_set)
    back = load_dataset(p)
    assert back.vectors.tobytes() == small_set.vectors.tobytes()
    assert np.array_equal(back.identity, small_set.identity)
    assert np.array_equal(back.attribute, small_set.attribute)
    assert back.labels == small_set.labels
    assert back.content_hash() == small_set.content_hash()


def test_roundtrip_preserves_nonfinite_free_payload(tmp_path, small_set):
    # a second save of the loaded set writes identical bytes
    p1, p2 = tmp_path / "a.ffeb", tmp_path / "b.ffeb"
    save_dataset(p1, small_set)
    save_dataset(p2, load_dataset(p1))
    assert p1.read_bytes() == p2.read_bytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**31 - 1))
def test_roundtrip_random(tmp_path_factory, seed):
    ds = random_dataset(np.random.default_rng(seed))
    p = tmp_path_factory.mktemp("rt") / "x.ffeb"
    save_dataset(p, ds)
    back = load_dataset(p)
    assert back.content_hash() == ds.content_hash()
    assert back.labels == ds.labels


def test_unicode_labels_survive(tmp_path):
    labels = LabelTable(identities=("Angélique", "李明"), attributes=("group α",))
    ds = EmbeddingSet(
        vectors=np.eye(2, 3, dtype=np.float32) + 0.5,
        identity=np.array([0, 1]),
        attribute=np.array([0, 0]),
        labels=labels,
    )
    p = tmp_path / "u.ffeb"
    save_dataset(p, ds)
    assert load_dataset(p).labels == labels


def test_bad_magic_rejected(tmp_path, small_set):
    p = tmp_path / "a.ffeb"
    save_dataset(p, small_set)
    raw = bytearray(p.read_bytes())
    raw[:4] = b"NOPE"
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="magic"):
        load_dataset(p)


def test_truncated_file_names_offset(tmp_path, small_set):
    p = tmp_path / "a.ffeb"
    save_dataset(p, small_set)
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) - 7])
    with pytest.raises(FormatError, match="byte"):
        load_dataset(p)


def test_trailing_garbage_rejected(tmp_path, small_set):
    p = tmp_path / "a.ffeb"
    save_dataset(p, small_set)
    p.write_bytes(p.read_bytes() + b"\x00")
    with pytest.raises(FormatError):
        load_dataset(p)


def test_unknown_version_rejected(tmp_path, small_set):
    p = tmp_path / "a.ffeb"
    save_dataset(p, small_set)
    raw = bytearray(p.read_bytes())
    raw[4:8] = struct.pack("<I", 9)
    p.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version"):
        load_dataset(p)


def test_label_count_mismatch_rejected(tmp_path, small_set):
    p = tmp_path / "a.ffeb"
    save_dataset(p, small_set)
    raw = p.read_bytes()
    # rewrite the trailer with one identity name dropped
    body_len = 24 + small_set.n * small_set.dim * 4 + small_set.n * 4 + small_set.n * 2
    trailer = json.loads(raw[body_len + 4 :].decode("utf-8"))
    trailer["identities"] = trailer["identities"][:-1]
    enc = json.dumps(trailer).encode("utf-8")
    p.write_bytes(raw[:body_len] + struct.pack("<I", len(enc)) + enc)
    with pytest.raises((FormatError, ValidationError)):
        load_dataset(p)


def test_csv_roundtrip(tmp_path, small_set):
    # indices renumber by first appearance, but names and payload survive
    p = tmp_path / "a.csv"
    save_csv(p, small_set)
    back = load_csv(p)
    orig_id = [small_set.labels.identities[k] for k in small_set.identity]
    back_id = [back.labels.identities[k] for k in back.identity]
    assert back_id == orig_id
    orig_at = [small_set.labels.attributes[k] for k in small_set.attribute]
    back_at = [back.labels.attributes[k] for k in back.attribute]
    assert back_at == orig_at
    assert back.vectors.tobytes() == small_set.vectors.tobytes()


def test_csv_is_stable_after_one_conversion(tmp_path, small_set):
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    save_csv(p1, small_set)
    save_csv(p2, load_csv(p1))
    assert p1.read_bytes() == p2.read_bytes()


# --- validation ------------------------------------------------------------

def _base_kwargs():
    return dict(
        vectors=np.ones((4, 3), dtype=np.float32),
        identity=np.array([0, 0, 1, 1]),
        attribute=np.array([0, 0, 1, 1]),
        labels=LabelTable.default(2, 2),
    )


def test_rejects_nonfinite_vector():
    kw = _base_kwargs()
    v = kw["vectors"].copy()
    v[2, 1] = np.nan
    kw["vectors"] = v
    with pytest.raises(ValidationError, match="record 2"):
        EmbeddingSet(**kw)


def test_rejects_zero_vector():
    kw = _base_kwargs()
    v = kw["vectors"].copy()
    v[3] = 0.0
    kw["vectors"] = v
    with pytest.raises(ValidationError, match="all-zero"):
        EmbeddingSet(**kw)


def test_rejects_sparse_identity_indexing():
    kw = _base_kwargs()
    kw["identity"] = np.array([0, 0, 3, 3])
    kw["labels"] = LabelTable.default(4, 2)
    with pytest.raises(ValidationError, match="dense"):
        EmbeddingSet(**kw)


def test_rejects_identity_spanning_attributes():
    kw = _base_kwargs()
    kw["attribute"] = np.array([0, 1, 1, 1])
    with pytest.raises(ValidationError, match="spans"):
        EmbeddingSet(**kw)


def test_rejects_duplicate_label_names():
    with pytest.raises(ValidationError, match="unique"):
        LabelTable(identities=("a", "a"), attributes=("x",))


def test_arrays_are_read_only(small_set):
    with pytest.raises(ValueError):
        small_set.vectors[0, 0] = 1.0
    with pytest.raises(ValueError):
        small_set.identity[0] = 1


def test_identity_attribute_map(small_set):
    id_attr = small_set.identity_attribute()
    assert np.array_equal(id_attr[small_set.identity], small_set.attribute)


# --- means and normalization ------------------------------------------------

def test_mean_vectors_match_loop(small_set):
    mv = mean_vectors(small_set)
    for k in range(small_set.n_identities):
        rows = small_set.vectors[small_set.identity == k].astype(np.float64)
        np.testing.assert_allclose(mv.means[k], rows.mean(axis=0), rtol=1e-13)
        assert mv.counts[k] == len(rows)


def test_normalize_unit_norm(rng):
    v = rng.normal(size=17)
    u = normalize(v)
    assert abs(np.linalg.norm(u) - 1.0) < 1e-12


def test_normalize_zero_rejected():
    with pytest.raises(DomainError):
        normalize(np.zeros(4))


def test_content_hash_tracks_payload(small_set):
    h1 = small_set.content_hash()
    moved = EmbeddingSet(
        vectors=np.asarray(small_set.vectors) + np.float32(1e-3),
        identity=small_set.identity,
        attribute=small_set.attribute,
        labels=small_set.labels,
    )
    assert moved.content_hash() != h1
