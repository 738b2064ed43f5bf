import json

import numpy as np
import pytest

from alignadapt.errors import ContractError, IntegrityError, ParameterError
from alignadapt.synthetic import (DatasetSpec, MOTIONS, alignment_precision, gen_dataset, generate,
                                  in_memory_dataset, load_dataset, majority_entity, parse_sample,
                                  sample_bytes)

from conftest import tiny_spec


@pytest.fixture(scope="module")
def default_data():
    return in_memory_dataset(DatasetSpec())


@pytest.fixture(scope="module")
def written(tmp_path_factory):
    out = tmp_path_factory.mktemp("ds")
    gen_dataset(tiny_spec(), out)
    return out


def tree_bytes(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_default_counts(default_data):
    ds = default_data
    assert len(ds.ids("train")) + len(ds.ids("test")) == 160
    assert len(ds.ids("unseen")) == 40
    assert len(ds.seen_labels()) == 8 and len(ds.unseen_labels()) == 2
    s = ds.sample(ds.ids()[0])
    assert s.frames.shape == (8, 32, 32, 3) and s.frames.dtype == np.float32
    assert s.masks.shape == (8, 4, 4)
    assert 0 <= s.frames.min() and s.frames.max() <= 1


def test_splits_partition(default_data):
    ds = default_data
    parts = [set(ds.ids(k)) for k in ("train", "test", "unseen")]
    assert sum(map(len, parts)) == len(ds.ids()) == len(set().union(*parts))
    unseen = set(ds.unseen_labels())
    assert not {ds.label_of(i) for i in ds.ids("train")} & unseen
    assert {ds.label_of(i) for i in ds.ids("unseen")} == unseen


def test_action_names_and_compositional_novelty(default_data):
    acts = default_data.manifest.actions
    units = {v["id"]: v["unit"] for v in default_data.manifest.vocabulary}
    for a in acts:
        assert a["name"] == f"{a['motion']} {units[a['entity_a']]} with {units[a['entity_b']]}"
    seen = [a for a in acts if not a["unseen"]]
    ents = {e for a in seen for e in (a["entity_a"], a["entity_b"])}
    for a in acts:
        if a["unseen"]:
            assert a["entity_a"] in ents and a["entity_b"] in ents
            assert a["motion"] in {s["motion"] for s in seen}
    assert len({(a["entity_a"], a["entity_b"], a["motion"]) for a in acts}) == len(acts)


def test_vocabulary_glyphs_unique(default_data):
    vocab = default_data.manifest.vocabulary
    assert len({(v["color"], v["shape"]) for v in vocab}) == len(vocab)


def test_masks_agree_with_pixels(default_data):
    ds = default_data
    rgb = {v["id"]: np.array(v["rgb"], dtype=np.float32) for v in ds.manifest.vocabulary}
    p = ds.patch
    for sid in ds.ids()[::7]:
        s = ds.sample(sid)
        action = next(a for a in ds.manifest.actions if a["name"] == s.label)
        assert set(np.unique(s.masks)) <= {0, action["entity_a"], action["entity_b"]}
        for t, i, j in zip(*np.nonzero(s.masks)):
            cell = s.frames[t, i * p:(i + 1) * p, j * p:(j + 1) * p]
            hit = np.all(np.isclose(cell, rgb[s.masks[t, i, j]]), axis=-1).sum()
            assert 2 * hit >= p * p


def test_generation_is_pure():
    a_manifest, a = generate(tiny_spec())
    b_manifest, b = generate(tiny_spec())
    assert a_manifest.to_json() == b_manifest.to_json()
    for sid in a:
        np.testing.assert_array_equal(a[sid].frames, b[sid].frames)


def test_same_seed_byte_identical_tree(tmp_path, written):
    gen_dataset(tiny_spec(), tmp_path / "again")
    assert tree_bytes(written) == tree_bytes(tmp_path / "again")
    gen_dataset(tiny_spec(seed=4), tmp_path / "other")
    assert tree_bytes(written) != tree_bytes(tmp_path / "other")


def test_refuses_non_empty_dir(tmp_path, written):
    with pytest.raises(FileExistsError):
        gen_dataset(tiny_spec(), written)


@pytest.mark.parametrize("bad", [dict(n_unseen=4, n_actions=4), dict(n_entities=1),
                                 dict(n_entities=2, n_actions=9, n_unseen=0), dict(H=15),
                                 dict(samples_per_action=1), dict(test_fraction=1.0)])
def test_bad_specs(bad):
    with pytest.raises(ParameterError):
        generate(tiny_spec(**bad))


def test_round_trip_equals_memory(written):
    disk = load_dataset(written)
    mem = in_memory_dataset(tiny_spec())
    assert disk.ids() == mem.ids()
    for sid in disk.ids():
        np.testing.assert_array_equal(disk.sample(sid).frames, mem.sample(sid).frames)
        np.testing.assert_array_equal(disk.sample(sid).masks, mem.sample(sid).masks)
        assert disk.sample(sid).split == mem.sample(sid).split


def test_container_layout(written):
    rec = json.loads((written / "manifest.json").read_text())["samples"][0]
    blob = (written / rec["file"]).read_bytes()
    spec = tiny_spec()
    assert blob[:4] == b"ALTV"
    assert len(blob) == 24 + 4 * spec.T * spec.H * spec.W * 3 + spec.T * (spec.H // 4) * (spec.W // 4)
    frames, masks = parse_sample(blob, 4)
    assert sample_bytes(frames, masks) == blob
    with pytest.raises(IntegrityError):
        parse_sample(blob[:-1], 4)
    with pytest.raises(IntegrityError):
        parse_sample(b"XXXX" + blob[4:], 4)


def test_missing_file_named(tmp_path):
    gen_dataset(tiny_spec(), tmp_path)
    victim = sorted((tmp_path / "samples").iterdir())[2]
    victim.unlink()
    with pytest.raises(IntegrityError, match=victim.name):
        load_dataset(tmp_path)


def test_tampered_file_detected(tmp_path):
    gen_dataset(tiny_spec(), tmp_path)
    victim = sorted((tmp_path / "samples").iterdir())[0]
    blob = bytearray(victim.read_bytes())
    blob[40] ^= 1
    victim.write_bytes(bytes(blob))
    ds = load_dataset(tmp_path)
    with pytest.raises(IntegrityError, match="hash mismatch"):
        ds.sample(ds.ids()[0])


def test_lexicon_covers_entities_and_motions(written):
    lex = json.loads((written / "lexicon.json").read_text())
    ds = load_dataset(written)
    for unit in ds.entity_units().values():
        assert lex[unit]["category"] == "object"
    for m in MOTIONS:
        assert lex[m]["category"] == "motion"
    assert ds.lexicon() == lex


# -- alignment precision ---------------------------------------------------------
def patch_dump(ds, ids, choose):
    """One single-patch region per grid cell; ``choose(true_id) -> unit``."""
    out = []
    for sid in ids:
        masks = ds.sample(sid).masks
        for t in range(masks.shape[0]):
            flat = masks[t].reshape(-1)
            rows = [{"patches": [], "entity_index": 0, "entity_unit": "cls"}]
            rows += [{"patches": [i + 1], "entity_index": 0, "entity_unit": choose(int(e))}
                     for i, e in enumerate(flat)]
            out.append({"sample_id": sid, "frame_index": t, "rows": rows})
    return out


def test_oracle_dump_is_perfect(default_data):
    units = default_data.entity_units()
    dump = patch_dump(default_data, default_data.ids("test"), lambda e: units.get(e, "background"))
    prec, hits, total = alignment_precision(dump, default_data, return_counts=True)
    assert prec == 1.0 and hits == total > 0


def test_random_dump_near_chance(default_data):
    units = list(default_data.entity_units().values()) + ["approach", "orbit", "cross", "bounce"]
    K = len(units)
    rng = np.random.default_rng(0)
    dump = patch_dump(default_data, default_data.ids(), lambda e: units[rng.integers(K)])
    prec, _, total = alignment_precision(dump, default_data, return_counts=True)
    # binomial standard error around 1/K
    assert abs(prec - 1 / K) < 4 * np.sqrt((1 / K) * (1 - 1 / K) / total)


def test_merged_regions_use_majority():
    assert majority_entity([2, 2, 0, 0, 3]) == 0
    assert majority_entity([3, 3, 0]) == 3
    assert majority_entity([0, 0, 1]) == 0


def test_background_only_raises(default_data):
    sid = default_data.ids()[0]
    masks = default_data.sample(sid).masks
    bg = [i + 1 for i, e in enumerate(masks[0].reshape(-1)) if e == 0]
    dump = [{"sample_id": sid, "frame_index": 0,
             "rows": [{"patches": [b], "entity_index": 0, "entity_unit": "x"} for b in bg]}]
    with pytest.raises(ContractError):
        alignment_precision(dump, default_data)
    with pytest.raises(ContractError):
        alignment_precision([], default_data)


def test_dump_mismatch_errors(default_data):
    with pytest.raises(ContractError):
        alignment_precision([{"sample_id": "nope", "frame_index": 0, "rows": []}], default_data)
    sid = default_data.ids()[0]
    with pytest.raises(ContractError):
        alignment_precision([{"sample_id": sid, "frame_index": 99, "rows": []}], default_data)
    with pytest.raises(ContractError):
        alignment_precision([{"sample_id": sid, "frame_index": 0,
                              "rows": [{"patches": [999], "entity_unit": "x"}]}], default_data)
