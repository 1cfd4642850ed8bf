"""SVD factor transplantation: decomposition, transfer, template banks."""

import numpy as np
import pytest

from ghostvec import svd_transfer as sv
from ghostvec.attack import AttackConfig, GhostBundle, GhostVec


def _rel_frob(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), 1e-300)


def _ghost(pooled, succeeded=True, variant=0):
    pooled = np.asarray(pooled, dtype=np.float64)
    return GhostVec(
        target_speaker="spk00",
        variant=variant,
        embedding=pooled[None, :],
        pooled=pooled,
        iterations=1,
        final_loss=0.1,
        succeeded=succeeded,
        max_abs_delta=0.05,
    )


# ---------------------------------------------------------------------------
# decomposition


def test_identity_matrix_has_unit_spectrum():
    f = sv.svd(np.eye(3))
    assert f.s == pytest.approx([1.0, 1.0, 1.0], abs=1e-12)


def test_rank_one_spectrum_hand_computed():
    # gram matrix [[9,12],[12,16]] has eigenvalues 25 and 0
    f = sv.svd(np.array([[3.0, 0.0], [4.0, 0.0]]))
    assert f.s == pytest.approx([5.0, 0.0], abs=1e-12)


def test_singular_values_match_gram_eigenvalues():
    rng = np.random.default_rng(30)
    x = rng.normal(size=(9, 5))
    f = sv.svd(x)
    gram_eig = np.sort(np.linalg.eigvalsh(x.T @ x))[::-1]
    assert f.s**2 == pytest.approx(gram_eig, rel=1e-9, abs=1e-9)


def test_factors_are_orthogonal_and_spectrum_sorted():
    rng = np.random.default_rng(31)
    for shape in [(6, 4), (4, 6), (1, 5), (5, 1), (3, 3)]:
        f = sv.svd(rng.normal(size=shape))
        n, d = f.shape
        assert np.allclose(f.u @ f.u.T, np.eye(n), atol=1e-10)
        assert np.allclose(f.vt @ f.vt.T, np.eye(d), atol=1e-10)
        assert np.all(np.diff(f.s) <= 1e-15)
        assert np.all(f.s >= 0.0)


def test_reconstruction_round_trip():
    rng = np.random.default_rng(32)
    for shape in [(8, 3), (3, 8), (1, 6), (5, 5)]:
        x = rng.normal(size=shape)
        assert _rel_frob(x, sv.reconstruct(sv.svd(x))) <= 1e-10


def test_rank_deficient_reconstruction():
    rng = np.random.default_rng(33)
    base = rng.normal(size=(2, 6))
    x = np.vstack([base, base[0] + base[1], 2.0 * base[0]])  # rank 2
    f = sv.svd(x)
    assert _rel_frob(x, sv.reconstruct(f)) <= 1e-10
    assert f.s[2] == pytest.approx(0.0, abs=1e-9)


def test_spectrum_is_row_permutation_invariant():
    rng = np.random.default_rng(34)
    x = rng.normal(size=(7, 4))
    perm = rng.permutation(7)
    assert sv.svd(x).s == pytest.approx(sv.svd(x[perm]).s, abs=1e-10)


def test_svd_input_validation():
    with pytest.raises(sv.FactorShapeError):
        sv.svd(np.zeros(4))
    with pytest.raises(sv.FactorShapeError):
        sv.svd(np.array([[1.0, np.inf]]))


def test_factor_shape_validation():
    ok = sv.svd(np.eye(2))
    with pytest.raises(sv.FactorShapeError):
        sv.SVDFactors(u=ok.u[:1], s=ok.s, vt=ok.vt)
    with pytest.raises(sv.FactorShapeError):
        sv.SVDFactors(u=ok.u, s=ok.s[:1], vt=ok.vt)


# ---------------------------------------------------------------------------
# factor transplantation


def test_transfer_with_own_factors_is_identity():
    rng = np.random.default_rng(35)
    x = rng.normal(size=(6, 4))
    f = sv.svd(x)
    assert _rel_frob(x, sv.transfer(f, f)) <= 1e-10


def test_transfer_preserves_ghost_spectrum_exactly():
    rng = np.random.default_rng(36)
    ghost = sv.svd(rng.normal(size=(5, 7)))
    template = sv.svd(rng.normal(size=(5, 7)))
    moved = sv.transfer(ghost, template)
    assert sv.svd(moved).s == pytest.approx(ghost.s, rel=1e-9, abs=1e-12)


def test_transfer_lives_in_template_subspaces():
    # the recombined stack must be expressible in the template's row space
    rng = np.random.default_rng(37)
    ghost = sv.svd(rng.normal(size=(8, 3)))
    t_x = rng.normal(size=(8, 3))
    template = sv.svd(t_x)
    moved = sv.transfer(ghost, template)
    # project each row of `moved` onto the template right-singular basis:
    # coordinates beyond the template rank must vanish only if ghost.s does;
    # here both are full rank, so check the column space of u instead
    coeff = template.u.T @ moved
    assert np.allclose(coeff[3:], 0.0, atol=1e-9)  # only top-3 left factors used


def test_transfer_zero_spectrum_gives_zero_matrix():
    template = sv.svd(np.random.default_rng(38).normal(size=(4, 4)))
    ghost = sv.SVDFactors(u=np.eye(4), s=np.zeros(4), vt=np.eye(4))
    assert np.all(sv.transfer(ghost, template) == 0.0)


def test_transfer_shape_mismatch_raises():
    a = sv.svd(np.eye(3))
    b = sv.svd(np.ones((2, 3)))
    with pytest.raises(sv.FactorShapeError):
        sv.transfer(a, b)


# ---------------------------------------------------------------------------
# ghost stacking


def test_stack_takes_first_n_converged_in_order():
    ghosts = [
        _ghost([1.0, 0.0], variant=0),
        _ghost([9.0, 9.0], succeeded=False, variant=1),
        _ghost([0.0, 2.0], variant=2),
        _ghost([3.0, 3.0], variant=3),
    ]
    x = sv.stack_ghostvecs(ghosts, 2)
    assert x.tolist() == [[1.0, 0.0], [0.0, 2.0]]  # failure skipped, order kept


def test_stack_counts_shortfall():
    ghosts = [_ghost([1.0, 0.0]), _ghost([0.0, 1.0], succeeded=False)]
    with pytest.raises(sv.InsufficientGhostsError, match="2 short"):
        sv.stack_ghostvecs(ghosts, 3)


def test_stack_rejects_nonpositive_size():
    with pytest.raises(sv.FactorShapeError):
        sv.stack_ghostvecs([], 0)


def test_stack_accepts_bundle():
    pooled = np.arange(6, dtype=np.float64).reshape(3, 2)
    bundle = GhostBundle(
        target_speaker="spk00",
        config=AttackConfig(),
        variants=(0, 2, 5),
        iterations=(1, 4, 9),
        pooled=pooled,
    )
    assert np.array_equal(sv.stack_ghostvecs(bundle, 3), pooled)


# ---------------------------------------------------------------------------
# cosine distance and pooling


def test_cosine_distance_reference_points():
    e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert sv.cosine_distance(e1, e1) == pytest.approx(0.0, abs=1e-15)
    assert sv.cosine_distance(e1, e2) == pytest.approx(1.0, abs=1e-15)
    assert sv.cosine_distance(e1, -e1) == pytest.approx(2.0, abs=1e-15)
    assert sv.cosine_distance(e1, np.zeros(2)) == 2.0


def test_cosine_distance_scale_invariance():
    rng = np.random.default_rng(39)
    a, b = rng.normal(size=4), rng.normal(size=4)
    assert sv.cosine_distance(3.0 * a, b) == pytest.approx(sv.cosine_distance(a, b), abs=1e-12)


def test_pooling_is_the_row_mean():
    x = np.array([[1.0, 2.0], [3.0, 4.0], [5.0, 0.0]])
    assert sv.pool_speaker_embedding(x) == pytest.approx(x.mean(axis=0), abs=0)


def test_pooling_opposite_rows_cancel():
    v = np.array([2.0, -1.0, 0.5])
    assert sv.pool_speaker_embedding(np.stack([v, -v])) == pytest.approx(np.zeros(3), abs=0)


def test_pooling_rejects_bad_shapes():
    with pytest.raises(sv.FactorShapeError):
        sv.pool_speaker_embedding(np.zeros(3))
    with pytest.raises(sv.FactorShapeError):
        sv.pool_speaker_embedding(np.zeros((0, 3)))


# ---------------------------------------------------------------------------
# template bank and nearest-template selection


def _bank(**mats):
    return sv.TemplateBank(
        templates=tuple(
            sv.SpeakerTemplate(speaker_id=sid, matrix=np.asarray(m, dtype=np.float64))
            for sid, m in sorted(mats.items())
        )
    )


def test_bank_rejects_duplicates_and_shape_mismatch():
    t = sv.SpeakerTemplate(speaker_id="a", matrix=np.eye(2))
    with pytest.raises(sv.TemplateBankError):
        sv.TemplateBank(templates=(t, sv.SpeakerTemplate("a", np.eye(2))))
    with pytest.raises(sv.TemplateBankError):
        sv.TemplateBank(templates=(t, sv.SpeakerTemplate("b", np.eye(3))))


def test_bank_lookup():
    bank = _bank(a=np.eye(2), b=2 * np.eye(2))
    assert bank.speaker_ids == ["a", "b"]
    assert bank.get("b").matrix[0, 0] == 2.0
    with pytest.raises(sv.TemplateBankError):
        bank.get("zz")


def test_nearest_template_picks_cosine_closest_mean():
    bank = _bank(
        north=[[0.0, 1.0], [0.0, 3.0]],
        east=[[1.0, 0.0], [3.0, 0.0]],
    )
    ghost = np.array([[0.1, 2.0], [-0.1, 1.0]])
    sid, mat = sv.nearest_template(ghost, bank)
    assert sid == "north"
    assert np.array_equal(mat, bank.get("north").matrix)


def test_nearest_template_scale_invariance():
    bank = _bank(
        north=[[0.0, 1.0], [0.0, 3.0]],
        east=[[1.0, 0.0], [3.0, 0.0]],
    )
    ghost = np.array([[0.1, 2.0], [-0.1, 1.0]])
    assert sv.nearest_template(100.0 * ghost, bank)[0] == sv.nearest_template(ghost, bank)[0]


def test_nearest_template_tie_breaks_lexicographically():
    same = [[1.0, 1.0], [1.0, 1.0]]
    bank = _bank(zeta=same, alpha=same)
    sid, _ = sv.nearest_template(np.array([[2.0, 2.0]]), bank)
    assert sid == "alpha"


def test_nearest_template_empty_bank_raises():
    with pytest.raises(sv.TemplateBankError):
        sv.nearest_template(np.ones((1, 2)), sv.TemplateBank(templates=()))


def test_resample_rows_truncates_and_cycles():
    assert sv._resample_rows([1, 2, 3], 2) == [1, 2]
    assert sv._resample_rows([1, 2], 5) == [1, 2, 1, 2, 1]


# ---------------------------------------------------------------------------
# bank IO


def test_template_bank_round_trip(tmp_path):
    # matrices travel as float32, so float32-representable values are exact
    rng = np.random.default_rng(40)
    mats = {
        sid: rng.normal(size=(4, 3)).astype(np.float32).astype(np.float64)
        for sid in ("spk07", "spk21")
    }
    bank = _bank(**mats)
    sv.save_template_bank(bank, tmp_path / "bank")
    back = sv.load_template_bank(tmp_path / "bank")
    assert back.speaker_ids == bank.speaker_ids
    for sid in bank.speaker_ids:
        assert np.array_equal(back.get(sid).matrix, bank.get(sid).matrix)


def test_load_bank_requires_index(tmp_path):
    with pytest.raises(sv.TemplateBankError):
        sv.load_template_bank(tmp_path)


def test_load_bank_detects_row_count_drift(tmp_path):
    bank = _bank(a=np.ones((3, 2)))
    sv.save_template_bank(bank, tmp_path / "bank")
    index = tmp_path / "bank" / sv.INDEX_NAME
    index.write_text(index.read_text().replace("\t3", "\t4"))
    with pytest.raises(sv.TemplateBankError):
        sv.load_template_bank(tmp_path / "bank")
