import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from rnavq.structure import (ATOM_SETS, PdbParseError, RnaStructure, atom_set, load_corpus, mean_center,
                             pairwise_distances, parse_pdb, random_rotation, random_rotation_matrix, rotate,
                             save_corpus, split_dataset, synth_helix, synthetic_corpus, to_pdb)


def test_atom_sets():
    assert ATOM_SETS["A1"].names == ("C4'",)
    assert ATOM_SETS["A10"].names == ("P", "C5'", "C4'", "C3'", "C2'", "C1'", "O5'", "O4'", "O3'", "O2'")
    assert ATOM_SETS["A11"].names[:10] == ATOM_SETS["A10"].names
    assert ATOM_SETS["A11"].resolve("G")[-1] == "N9"
    assert ATOM_SETS["A11"].resolve("U")[-1] == "N1"
    assert ATOM_SETS["B6"].names == ("P", "C5'", "C4'", "C3'", "O5'", "O3'")
    with pytest.raises(ValueError):
        atom_set("A12")


def test_fixture_parses_to_three_residues(fixture_pdb_text):
    (s,) = parse_pdb(fixture_pdb_text, "A10", name="fx")
    assert len(s) == 3 and s.sequence == "GAC"
    assert s.mask.all()
    assert s.id == "fx_A"
    assert s.coords[0, 0] == pytest.approx([19.3, -7.3, 5.7])


def test_deleted_atom_is_masked_at_that_slot(fixture_pdb_text):
    lines = [ln for ln in fixture_pdb_text.splitlines() if not (" O2'" in ln and "   2  " in ln[20:30])]
    (s,) = parse_pdb("\n".join(lines), "A10")
    slot = s.atom_set.index("O2'")
    expected = np.ones_like(s.mask)
    expected[1, slot] = False
    assert np.array_equal(s.mask, expected)
    assert np.array_equal(s.coords[1, slot], np.zeros(3))


def test_star_names_accepted(fixture_pdb_text):
    (s,) = parse_pdb(fixture_pdb_text.replace("C4'", "C4*"), "A10")
    assert s.mask.all()


def test_empty_input_has_no_rna_chains():
    with pytest.raises(PdbParseError, match="no RNA chains"):
        parse_pdb("", "A10")


def test_protein_and_water_only_has_no_rna_chains():
    text = ("ATOM      1  CA  ALA A   1       0.000   0.000   0.000  1.00  0.00           C\n"
            "HETATM    2  O   HOH A   2       1.000   0.000   0.000  1.00  0.00           O\n")
    with pytest.raises(PdbParseError):
        parse_pdb(text)


def test_duplicate_atom_rejected(fixture_pdb_text):
    first = next(ln for ln in fixture_pdb_text.splitlines() if ln.startswith("ATOM"))
    with pytest.raises(PdbParseError, match="duplicate"):
        parse_pdb(fixture_pdb_text.replace(first, first + "\n" + first))


def test_malformed_coordinate_reports_line(fixture_pdb_text):
    lines = fixture_pdb_text.splitlines()
    lines[3] = lines[3][:30] + "   abcde" + lines[3][38:]
    with pytest.raises(PdbParseError, match="line 4"):
        parse_pdb("\n".join(lines))


def test_unknown_base_dropped_with_warning(fixture_pdb_text):
    text = fixture_pdb_text.replace("  C A   3", "PSU A   3")
    with pytest.warns(UserWarning, match="unknown bases"):
        (s,) = parse_pdb(text)
    assert s.sequence == "GA"


def test_altloc_b_ignored(fixture_pdb_text):
    first = next(ln for ln in fixture_pdb_text.splitlines() if ln.startswith("ATOM"))
    alt = first[:16] + "B" + first[17:30] + "  99.000  99.000  99.000" + first[54:]
    (s,) = parse_pdb(fixture_pdb_text.replace(first, first + "\n" + alt))
    assert s.coords[0, 0, 0] == pytest.approx(19.3)


def test_multi_model_yields_one_structure_per_model():
    h = synth_helix(5)
    text = to_pdb([h, h.with_coords(h.coords + 1.0)], models=True)
    out = parse_pdb(text, "A10", name="ens")
    assert [s.id for s in out] == ["ens_m1_A", "ens_m2_A"]
    assert np.allclose(out[1].coords - out[0].coords, 1.0, atol=2e-3)


@given(st.integers(4, 12), st.integers(0, 1000))
def test_pdb_round_trip(length, seed):
    h = synth_helix(length, rng=np.random.default_rng(seed), tag="A11")
    h.mask[1, 3] = False
    h.coords[1, 3] = 0.0
    (back,) = parse_pdb(to_pdb(h), "A11")
    assert back.sequence == h.sequence
    assert np.array_equal(back.mask, h.mask)
    assert np.abs(back.coords - h.coords).max() <= 5e-4 + 1e-9


def test_bfactor_column_carries_values():
    h = synth_helix(4)
    text = to_pdb(h, bfactors=[np.array([0.1, 0.2, 0.3, 0.4])])
    atom_lines = [ln for ln in text.splitlines() if ln.startswith("ATOM")]
    assert atom_lines[0][54:60] == "  1.00" and atom_lines[0][60:66] == "  0.10"


def test_mean_center_examples():
    s = RnaStructure("x", "AU", atom_set("A1"), np.full((2, 1, 3), 5.0), np.ones((2, 1), bool))
    assert np.array_equal(mean_center(s).coords, np.zeros((2, 1, 3)))
    c = np.array([[[1.0, 0, 0]], [[-1.0, 0, 0]]])
    s = RnaStructure("y", "AU", atom_set("A1"), c, np.ones((2, 1), bool))
    assert np.array_equal(mean_center(s).coords, c)


@given(st.integers(0, 10_000))
def test_mean_center_masked_aware_and_idempotent(seed):
    rng = np.random.default_rng(seed)
    h = synth_helix(6, rng=rng)
    h = h.with_coords(h.coords + rng.normal(0, 30, 3))
    h.mask[rng.random(h.mask.shape) < 0.3] = False
    h.mask[0, 0] = True
    h.coords[~h.mask] = 0.0
    c = mean_center(h)
    assert np.abs(c.coords[c.mask].mean(0)).max() < 1e-9
    assert np.allclose(mean_center(c).coords, c.coords, atol=1e-12)
    assert np.all(c.coords[~c.mask] == 0.0)


def test_mean_center_all_masked_errors():
    s = RnaStructure("z", "A", atom_set("A1"), np.zeros((1, 1, 3)), np.zeros((1, 1), bool))
    with pytest.raises(ValueError):
        mean_center(s)


def test_rotations_are_proper_and_orthonormal():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        R = random_rotation_matrix(rng)
        assert abs(np.linalg.det(R) - 1.0) < 1e-12
        assert np.abs(R.T @ R - np.eye(3)).max() < 1e-12


def test_rotation_uniformity_smoke():
    rng = np.random.default_rng(7)
    mean = np.mean([random_rotation_matrix(rng) for _ in range(10_000)], axis=0)
    assert np.abs(mean).max() < 0.05


@given(st.integers(0, 10_000))
def test_rigid_motion_preserves_distances(seed):
    rng = np.random.default_rng(seed)
    h = mean_center(synth_helix(7, rng=rng))
    moved = random_rotation(h, rng)
    moved = moved.with_coords(moved.coords + rng.normal(0, 10, 3))
    assert np.abs(pairwise_distances(moved) - pairwise_distances(h)).max() < 1e-9


def test_helix_constant_bond_length():
    h = synth_helix(10, rise=2.81)
    c4 = h.representative()
    d = np.linalg.norm(np.diff(c4, axis=0), axis=1)
    assert np.ptp(d) < 1e-9


def test_helix_zero_twist_is_a_line():
    c4 = synth_helix(6, twist_deg=0.0).representative()
    assert np.abs(c4[:, :2] - c4[0, :2]).max() < 1e-9
    assert np.allclose(np.diff(c4[:, 2]), 2.81)


@pytest.mark.parametrize("k", [4, 6, 11])
def test_helix_periodicity(k):
    c4 = synth_helix(k + 1, twist_deg=360.0 / k).representative()
    assert np.abs(c4[k, :2] - c4[0, :2]).max() < 1e-9


def test_helix_too_short():
    with pytest.raises(ValueError):
        synth_helix(3)


def test_helix_deterministic_given_seed():
    a = synth_helix(8, rng=np.random.default_rng(5))
    b = synth_helix(8, rng=np.random.default_rng(5))
    assert a.sequence == b.sequence and np.array_equal(a.coords, b.coords)


def test_select_subset():
    h = synth_helix(5, tag="A11")
    b = h.select("B6")
    assert b.atom_set.tag == "B6"
    assert np.array_equal(b.atom("C4'")[0], h.atom("C4'")[0])
    with pytest.raises(ValueError):
        synth_helix(5, tag="B6").select("A10")


def test_split_examples():
    corpus = synthetic_corpus(100, 5, 8, seed=0)
    everything = split_dataset(corpus, (1.0, 0.0, 0.0), seed=3)
    assert len(everything["train"]) == 100
    a = split_dataset(corpus, (0.8, 0.1, 0.1), seed=3)
    b = split_dataset(corpus, (0.8, 0.1, 0.1), seed=3)
    assert {k: [s.id for s in v] for k, v in a.items()} == {k: [s.id for s in v] for k, v in b.items()}
    assert abs(len(a["train"]) - 80) <= 3 and abs(len(a["val"]) - 10) <= 3 and abs(len(a["test"]) - 10) <= 3
    ids = [s.id for part in a.values() for s in part]
    assert sorted(ids) == sorted(s.id for s in corpus)


def test_split_depends_only_on_id_and_seed():
    corpus = synthetic_corpus(30, 5, 8, seed=0)
    a = split_dataset(corpus, seed=1)
    b = split_dataset(list(reversed(corpus)), seed=1)
    assert {s.id for s in a["val"]} == {s.id for s in b["val"]}


def test_split_errors():
    with pytest.raises(ValueError):
        split_dataset([], seed=0)
    with pytest.raises(ValueError):
        split_dataset(synthetic_corpus(3, 5, 6, 0), (0.5, 0.2, 0.2))


def test_corpus_round_trip_is_lossless(tmp_path):
    corpus = synthetic_corpus(3, 5, 9, seed=2, tag="A11")
    corpus[0].mask[2, 4] = False
    corpus[0].coords[2, 4] = 0.0
    save_corpus(tmp_path / "c.bin", corpus)
    back = load_corpus(tmp_path / "c.bin")
    for a, b in zip(corpus, back):
        assert a.id == b.id and a.sequence == b.sequence and a.atom_set == b.atom_set
        assert np.array_equal(a.coords, b.coords) and np.array_equal(a.mask, b.mask)


def test_rotate_keeps_masked_at_zero():
    h = synth_helix(5)
    h.mask[0, 0] = False
    h.coords[0, 0] = 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        r = rotate(h, random_rotation_matrix(np.random.default_rng(0)))
    assert np.array_equal(r.coords[0, 0], np.zeros(3))
