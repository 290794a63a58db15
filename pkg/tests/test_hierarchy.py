"""Taxonomy parsing, transition matrices, projection oracles, and the
combined training loss."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import hcrnet.tensor as T
from hcrnet.errors import (ConfigError, InputError, ParseError, ShapeError,
                           TaxonomyError, UsageError)
from hcrnet.gradcheck import finite_difference_check
from hcrnet.hierarchy import (LossWeights, Taxonomy, TransitionMatrix,
                              Transitions, aggregate_labels, build_transition,
                              flat_taxonomy, parse_taxonomy, penalty_nll,
                              project_probabilities, reproject_logits,
                              save_taxonomy, load_taxonomy, total_loss)
from hcrnet.rasters import NODATA

# z = [1, 2, 3] with micro classes {0, 1} under coarse 0 and {2} under coarse 1
_Z = np.array([1.0, 2.0, 3.0])
_SOFTMAX_Z = np.array([0.09003057, 0.24472847, 0.66524096])
_PROJECTED = np.array([0.33475904, 0.66524096])
_REPROJECTED = np.array([-1.09434427, -0.40760596])


def _three_two_taxonomy():
    return Taxonomy(["a", "b"], ["a", "b"], ["a1", "a2", "b1"], [0, 0, 1], [0, 1])


# --- parsing -----------------------------------------------------------------

def test_parse_roundtrip(amazon_taxonomy, tmp_path):
    path = tmp_path / "tax.hcsv"
    save_taxonomy(amazon_taxonomy, str(path))
    again = load_taxonomy(str(path))
    assert again == amazon_taxonomy
    assert again.digest() == amazon_taxonomy.digest()


def test_parse_counts(amazon_taxonomy):
    assert amazon_taxonomy.n_classes("micro") == 10
    assert amazon_taxonomy.n_classes("intermediate") == 5
    assert amazon_taxonomy.n_classes("macro") == 4


def test_parse_skips_comments_and_blanks():
    tax = parse_taxonomy("# header\n\n0,x,0,i,0,m\n1,y,0,i,0,m\n")
    assert tax.names("micro") == ("x", "y")


def test_parse_reports_line_numbers():
    with pytest.raises(ParseError) as exc:
        parse_taxonomy("0,x,0,i,0,m\n1,y,0,i\n")
    assert exc.value.line == 2
    assert "6 fields" in str(exc.value)


def test_parse_rejects_duplicate_micro_id():
    with pytest.raises(ParseError, match="duplicate micro id"):
        parse_taxonomy("0,x,0,i,0,m\n0,y,0,i,0,m\n")


def test_parse_rejects_conflicting_names():
    with pytest.raises(ParseError, match="conflicting name"):
        parse_taxonomy("0,x,0,i,0,m\n1,y,0,j,0,m\n")


def test_parse_rejects_non_tree():
    text = "0,x,0,i,0,m\n1,y,0,i,1,n\n"
    with pytest.raises(ParseError, match="tree"):
        parse_taxonomy(text)


def test_parse_rejects_empty_and_garbage():
    with pytest.raises(ParseError):
        parse_taxonomy("")
    with pytest.raises(ParseError):
        parse_taxonomy("0,x,zero,i,0,m\n")
    with pytest.raises(ParseError):
        parse_taxonomy("0,,0,i,0,m\n")


def test_parse_densifies_sparse_ids():
    tax = parse_taxonomy("5,x,7,i,3,m\n9,y,8,j,3,m\n")
    assert tax.names("micro") == ("x", "y")
    np.testing.assert_array_equal(tax.parent_map("micro", "intermediate"), [0, 1])


# --- taxonomy structure --------------------------------------------------------

def test_taxonomy_rejects_childless_levels():
    with pytest.raises(TaxonomyError, match="no micro children"):
        Taxonomy(["m"], ["i", "j"], ["x"], [0], [0, 0])
    with pytest.raises(TaxonomyError, match="no intermediate children"):
        Taxonomy(["m", "n"], ["i"], ["x"], [0], [0])


def test_taxonomy_rejects_duplicate_names():
    with pytest.raises(TaxonomyError, match="duplicate"):
        Taxonomy(["m"], ["i"], ["x", "x"], [0, 0], [0])


def test_parent_map_composes(tiny_taxonomy):
    np.testing.assert_array_equal(
        tiny_taxonomy.parent_map("micro", "macro"), [0, 0, 1, 1])
    np.testing.assert_array_equal(
        tiny_taxonomy.parent_map("micro", "micro"), [0, 1, 2, 3])
    with pytest.raises(UsageError):
        tiny_taxonomy.parent_map("macro", "micro")
    with pytest.raises(UsageError):
        tiny_taxonomy.parent_map("micro", "nope")


def test_digest_tracks_structure(tiny_taxonomy):
    renamed = Taxonomy(["veg", "water"], ["trees", "wet"],
                       ["oak", "pine", "lake", "creek"], [0, 0, 1, 1], [0, 1])
    assert renamed.digest() != tiny_taxonomy.digest()


def test_drop_micro_redensifies(amazon_taxonomy):
    smaller = amazon_taxonomy.drop_micro(["Shrub cover"])
    assert smaller.n_classes("micro") == 9
    assert smaller.n_classes("intermediate") == 5
    assert smaller.n_classes("macro") == 4
    assert "Shrub cover" not in smaller.names("micro")
    assert smaller.embeds_into(amazon_taxonomy)


def test_drop_micro_prunes_childless_ancestors(tiny_taxonomy):
    land_only = tiny_taxonomy.drop_micro(["lake", "river"])
    assert land_only.names("macro") == ("veg",)
    assert land_only.names("intermediate") == ("trees",)


def test_drop_micro_errors(tiny_taxonomy):
    with pytest.raises(TaxonomyError):
        tiny_taxonomy.drop_micro(["nope"])
    with pytest.raises(TaxonomyError):
        tiny_taxonomy.drop_micro(["oak", "pine", "lake", "river"])


def test_embeds_into_requires_same_parents(tiny_taxonomy):
    moved = Taxonomy(["veg", "water"], ["trees", "wet"],
                     ["oak", "pine", "lake", "river"], [0, 0, 1, 0], [0, 1])
    assert not moved.embeds_into(tiny_taxonomy)
    assert not tiny_taxonomy.embeds_into(moved)
    assert tiny_taxonomy.embeds_into(tiny_taxonomy)


def test_flat_taxonomy_mirrors_micro():
    tax = flat_taxonomy(["a", "b", "c"])
    for level in ("macro", "intermediate", "micro"):
        assert tax.n_classes(level) == 3
    np.testing.assert_array_equal(tax.parent_map("micro", "macro"), [0, 1, 2])


# --- transition matrices --------------------------------------------------------

def test_indicator_rows_are_normalized():
    tm = TransitionMatrix.from_indicator(np.array([[1.0, 1.0], [0.0, 2.0]]))
    np.testing.assert_allclose(tm.matrix.sum(axis=1), [1.0, 1.0])
    np.testing.assert_allclose(tm.matrix[0], [0.5, 0.5])


def test_indicator_rejects_degenerate_shapes():
    with pytest.raises(TaxonomyError, match="no fine children"):
        TransitionMatrix.from_indicator(np.array([[1.0, 0.0], [1.0, 0.0]]))
    with pytest.raises(TaxonomyError, match="no coarse class"):
        TransitionMatrix.from_indicator(np.array([[1.0, 1.0], [0.0, 0.0]]))
    with pytest.raises(InputError):
        TransitionMatrix.from_indicator(np.array([[1.0, -1.0], [0.0, 1.0]]))
    with pytest.raises(ShapeError):
        TransitionMatrix.from_indicator(np.ones(3))


def test_build_transition_is_one_hot(amazon_taxonomy):
    tm = build_transition(amazon_taxonomy, "micro", "macro")
    assert tm.matrix.shape == (10, 4)
    np.testing.assert_array_equal(tm.matrix.sum(axis=1), np.ones(10))
    assert set(np.unique(tm.matrix)) == {0.0, 1.0}
    # column sums count each macro class's micro children
    children = np.bincount(amazon_taxonomy.parent_map("micro", "macro"))
    np.testing.assert_array_equal(tm.matrix.sum(axis=0), children)
    with pytest.raises(UsageError):
        build_transition(amazon_taxonomy, "macro", "micro")
    with pytest.raises(UsageError):
        build_transition(amazon_taxonomy, "micro", "micro")


# --- projection oracles ----------------------------------------------------------

def test_project_probabilities_oracle():
    tm = build_transition(_three_two_taxonomy(), "micro", "macro")
    out = project_probabilities(_SOFTMAX_Z, tm)
    np.testing.assert_allclose(out, _PROJECTED, atol=1e-7)
    assert out.sum() == pytest.approx(1.0, abs=1e-12)


def test_project_probabilities_validates():
    tm = build_transition(_three_two_taxonomy(), "micro", "macro")
    with pytest.raises(InputError):
        project_probabilities(np.array([0.5, 0.2, 0.2]), tm)
    with pytest.raises(ShapeError):
        project_probabilities(np.array([0.5, 0.5]), tm)


def test_reproject_logits_oracle():
    tm = build_transition(_three_two_taxonomy(), "micro", "macro")
    out = reproject_logits(T.Tensor(_Z), tm)
    np.testing.assert_allclose(out.data, _REPROJECTED, atol=1e-7)
    # consistency: softmax of the reprojection equals the projected softmax
    np.testing.assert_allclose(np.exp(out.data), _PROJECTED, atol=1e-7)


def test_reproject_identity_reduces_to_log_softmax():
    tax = flat_taxonomy(["a", "b", "c"])
    tm = build_transition(tax, "micro", "macro")
    z = np.array([0.3, -1.2, 2.0])
    out = reproject_logits(T.Tensor(z), tm)
    np.testing.assert_allclose(out.data, T.log_softmax(T.Tensor(z), axis=0).data,
                               atol=1e-12)


def test_reproject_handles_extra_axes():
    tm = build_transition(_three_two_taxonomy(), "micro", "macro")
    rng = np.random.default_rng(0)
    z = rng.normal(size=(2, 3, 4))
    out = reproject_logits(T.Tensor(z), tm, axis=1)
    assert out.shape == (2, 2, 4)
    for b in range(2):
        for c in range(4):
            single = reproject_logits(T.Tensor(z[b, :, c]), tm).data
            np.testing.assert_allclose(out.data[b, :, c], single, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=2, max_value=12), st.integers(min_value=0, max_value=10_000))
def test_reproject_matches_probability_projection(n_fine, seed):
    rng = np.random.default_rng(seed)
    n_coarse = int(rng.integers(1, n_fine + 1))
    parents = np.concatenate([np.arange(n_coarse),
                              rng.integers(0, n_coarse, size=n_fine - n_coarse)])
    rng.shuffle(parents)
    ind = np.zeros((n_fine, n_coarse))
    ind[np.arange(n_fine), parents] = 1.0
    tm = TransitionMatrix.from_indicator(ind)
    z = rng.normal(scale=3.0, size=n_fine)
    probs = np.exp(T.log_softmax(T.Tensor(z), axis=0).data)
    np.testing.assert_allclose(np.exp(reproject_logits(T.Tensor(z), tm).data),
                               project_probabilities(probs, tm), atol=1e-9)


def test_reproject_gradient():
    tm = build_transition(_three_two_taxonomy(), "micro", "macro")
    p = T.Parameter(np.array([0.5, -0.3, 1.2]), "z")
    w = np.array([0.7, -1.1])

    def fn():
        return T.tsum(T.mul(reproject_logits(p, tm), T.Tensor(w)))

    err = finite_difference_check(fn, [p], rng=np.random.default_rng(0))
    assert err < 1e-7


def test_penalty_nll_oracle():
    tm = build_transition(_three_two_taxonomy(), "micro", "macro")
    loss = penalty_nll(T.Tensor(_Z), tm, np.array(1))
    assert loss.item() == pytest.approx(0.40760596, abs=1e-7)


# --- label aggregation ------------------------------------------------------------

def test_aggregate_labels_maps_and_passes_nodata(tiny_taxonomy):
    labels = np.array([[0, 1], [3, NODATA]], dtype=np.uint16)
    out = aggregate_labels(labels, tiny_taxonomy, "macro")
    np.testing.assert_array_equal(out, [[0, 0], [1, NODATA]])
    assert out.dtype == np.uint16


def test_aggregate_labels_validates(tiny_taxonomy):
    with pytest.raises(InputError):
        aggregate_labels(np.array([[0.5]]), tiny_taxonomy, "macro")
    with pytest.raises(InputError):
        aggregate_labels(np.array([[7]]), tiny_taxonomy, "macro")


# --- loss weights and total loss ----------------------------------------------------

def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        LossWeights(cce_micro=-1.0)
    with pytest.raises(ConfigError):
        LossWeights(penalty_micro_macro=float("nan"))
    assert LossWeights.micro_only().cce_micro == 1.0
    assert LossWeights.micro_only().cce_macro == 0.0
    assert LossWeights().with_penalties(2.0).penalty_micro_macro == 2.0


def test_total_loss_matches_manual_sum(tiny_taxonomy):
    rng = np.random.default_rng(3)
    logits = {level: T.Tensor(rng.normal(size=(1, tiny_taxonomy.n_classes(level), 2, 2)))
              for level in ("macro", "intermediate", "micro")}
    targets = rng.integers(0, 4, size=(1, 2, 2)).astype(np.uint16)
    weights = LossWeights(0.5, 0.25, 1.0, 2.0, 0.0, 0.5)
    loss, breakdown = total_loss(logits, targets, weights, tiny_taxonomy)
    assert set(breakdown) == {"cce_macro", "cce_intermediate", "cce_micro",
                              "penalty_micro_intermediate", "penalty_micro_macro"}
    assert loss.item() == pytest.approx(sum(breakdown.values()), rel=1e-6)

    trans = Transitions.build(tiny_taxonomy)
    manual = (0.5 * T.cross_entropy(logits["macro"],
                                    aggregate_labels(targets, tiny_taxonomy, "macro"),
                                    axis=1, ignore_index=NODATA).item()
              + 0.25 * T.cross_entropy(logits["intermediate"],
                                       aggregate_labels(targets, tiny_taxonomy, "intermediate"),
                                       axis=1, ignore_index=NODATA).item()
              + 1.0 * T.cross_entropy(logits["micro"], targets, axis=1,
                                      ignore_index=NODATA).item()
              + 2.0 * penalty_nll(logits["micro"], trans.micro_intermediate,
                                  aggregate_labels(targets, tiny_taxonomy, "intermediate"),
                                  axis=1).item()
              + 0.5 * penalty_nll(logits["micro"], trans.micro_macro,
                                  aggregate_labels(targets, tiny_taxonomy, "macro"),
                                  axis=1).item())
    assert loss.item() == pytest.approx(manual, rel=1e-6)


def test_total_loss_requires_logits_for_enabled_terms(tiny_taxonomy):
    micro = T.Tensor(np.zeros((1, 4, 2, 2)))
    with pytest.raises(ConfigError, match="macro"):
        total_loss({"micro": micro}, np.zeros((1, 2, 2), dtype=np.uint16),
                   LossWeights(), tiny_taxonomy)
    loss, _ = total_loss({"micro": micro}, np.zeros((1, 2, 2), dtype=np.uint16),
                         LossWeights.micro_only(), tiny_taxonomy)
    assert np.isfinite(loss.item())


def test_total_loss_all_zero_weights(tiny_taxonomy):
    loss, breakdown = total_loss({}, np.zeros((1, 2, 2), dtype=np.uint16),
                                 LossWeights(0, 0, 0, 0, 0, 0), tiny_taxonomy)
    assert loss.item() == 0.0
    assert breakdown == {}
    assert not loss.has_graph


def test_total_loss_class_weights_go_to_micro_only(tiny_taxonomy):
    rng = np.random.default_rng(4)
    logits = {"micro": T.Tensor(rng.normal(size=(1, 4, 2, 2)))}
    targets = rng.integers(0, 4, size=(1, 2, 2)).astype(np.uint16)
    cw = np.array([1.0, 2.0, 3.0, 4.0])
    loss, _ = total_loss(logits, targets, LossWeights.micro_only(),
                         tiny_taxonomy, micro_class_weights=cw)
    manual = T.cross_entropy(logits["micro"], targets, axis=1,
                             ignore_index=NODATA, class_weights=cw).item()
    assert loss.item() == pytest.approx(manual, rel=1e-6)
