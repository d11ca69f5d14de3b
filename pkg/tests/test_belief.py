import numpy as np
import pytest

from src.core.belief import (
    BeliefSet,
    ImpossibleObservationError,
    WeightCache,
    approx_transition,
    bayes_update,
    distance,
    interpolation_weights,
    one_step_posteriors,
    posterior_matrix,
)
from src.core.model import InadmissibleActionError, transition_prob

# ============================================================================
# Bayes updates
# ============================================================================


def test_bayes_update_reweights_by_likelihood(random_instance):
    mu = np.array([0.5, 0.5])
    post = bayes_update(mu, 1, random_instance)
    f = random_instance.likelihood[0, 1]
    assert post == pytest.approx(f / f.sum())


def test_bayes_updates_commute(random_instance, rng):
    """Conditioning on xi1 then xi2 gives the same posterior as xi2 then xi1."""
    n_xi = random_instance.likelihood.shape[1]
    for _ in range(50):
        mu = rng.dirichlet(np.ones(random_instance.n_thetas))
        for x1 in range(n_xi):
            for x2 in range(n_xi):
                forward = bayes_update(bayes_update(mu, x1, random_instance), x2, random_instance)
                backward = bayes_update(bayes_update(mu, x2, random_instance), x1, random_instance)
                assert forward == pytest.approx(backward, abs=1e-12)


def test_bayes_update_on_impossible_outcome(revealing_toy):
    """Outcome 1 never happens under theta 0."""
    with pytest.raises(ImpossibleObservationError):
        bayes_update(np.array([1.0, 0.0]), 1, revealing_toy)


def test_revealing_outcomes_collapse_to_corners(revealing_toy):
    posts = one_step_posteriors(np.array([0.5, 0.5]), 0, 0, revealing_toy)
    assert [p.xi for p in posts] == [0, 1]
    assert posts[0].belief.tolist() == [1.0, 0.0]
    assert posts[1].belief.tolist() == [0.0, 1.0]
    assert [p.prob for p in posts] == [0.5, 0.5]


def test_corner_is_fixed_point(random_instance):
    """A degenerate belief stays degenerate after any outcome."""
    mu = np.array([0.0, 1.0])
    for post in one_step_posteriors(mu, 0, 1, random_instance):
        assert post.belief == pytest.approx(mu)


def test_posterior_matrix_keeps_prior_on_zero_probability_rows():
    likelihood = np.array([[1.0, 0.0], [0.0, 1.0]])
    posts, probs = posterior_matrix(np.array([1.0, 0.0]), likelihood)
    assert probs.tolist() == [1.0, 0.0]
    assert posts[1].tolist() == [1.0, 0.0]


def test_one_step_posteriors_rejects_inadmissible(chain):
    with pytest.raises(InadmissibleActionError):
        one_step_posteriors(np.array([1.0]), 1, 1, chain)


def test_posteriors_average_back_to_prior(random_instance, rng):
    """Martingale property: the outcome-weighted posteriors average to mu."""
    mu = rng.dirichlet(np.ones(2))
    posts = one_step_posteriors(mu, 2, 0, random_instance)
    mean = sum(p.prob * p.belief for p in posts)
    assert mean == pytest.approx(mu)


# ============================================================================
# Belief sets
# ============================================================================


def test_initial_set_is_corners_then_start():
    bset = BeliefSet.initial(np.array([0.3, 0.7]))
    assert bset.size == 3
    assert bset.members[:2].tolist() == [[1.0, 0.0], [0.0, 1.0]]
    assert bset.members[2].tolist() == [0.3, 0.7]
    assert bset.version == 0


def test_initial_set_skips_degenerate_start():
    bset = BeliefSet.initial(np.array([0.0, 1.0]))
    assert bset.size == 2


def test_extend_drops_duplicates_and_bumps_version():
    bset = BeliefSet.initial(np.array([0.5, 0.5]))
    grown = bset.extend([np.array([0.5, 0.5 + 1e-12]), np.array([0.2, 0.8])])
    assert grown.size == 4
    assert grown.version == 1
    assert bset.size == 3


def test_members_are_read_only():
    bset = BeliefSet.initial(np.array([0.5, 0.5]))
    with pytest.raises(ValueError):
        bset.members[0, 0] = 0.5


def test_fingerprint_tracks_contents():
    a = BeliefSet.initial(np.array([0.5, 0.5]))
    b = BeliefSet.initial(np.array([0.5, 0.5]))
    assert a.fingerprint == b.fingerprint
    assert a.extend([np.array([0.1, 0.9])]).fingerprint != a.fingerprint


def test_index_of_and_distance():
    bset = BeliefSet.initial(np.array([0.5, 0.5]))
    assert bset.index_of(np.array([0.5, 0.5])) == 2
    assert bset.index_of(np.array([0.4, 0.6])) is None
    assert distance(np.array([0.4, 0.6]), bset) == pytest.approx(np.sqrt(0.02))
    extra = np.array([[0.4, 0.6]])
    assert distance(np.array([0.4, 0.6]), bset, extra) == 0.0


def test_dict_round_trip():
    bset = BeliefSet.initial(np.array([0.25, 0.75])).extend([np.array([0.6, 0.4])])
    again = BeliefSet.from_dict(bset.to_dict())
    assert np.array_equal(again.members, bset.members)
    assert again.version == bset.version
    assert again.fingerprint == bset.fingerprint


# ============================================================================
# Interpolation weights
# ============================================================================


def test_member_target_gets_unit_weight():
    bset = BeliefSet.initial(np.array([0.5, 0.5]))
    w = interpolation_weights(np.array([0.5, 0.5]), bset)
    assert w.indices.tolist() == [2]
    assert w.weights.tolist() == [1.0]
    assert w.objective == 0.0


def test_weights_prefer_the_nearest_members():
    """(0.4, 0.6) lies between the corner (0, 1) and the member (0.5, 0.5)."""
    bset = BeliefSet.initial(np.array([0.5, 0.5]))
    w = interpolation_weights(np.array([0.4, 0.6]), bset)
    dense = w.dense(bset.size)
    assert dense == pytest.approx([0.0, 0.2, 0.8], abs=1e-9)
    assert w.objective == pytest.approx(0.2 * 0.32 + 0.8 * 0.02)


def test_weights_reproduce_target(rng):
    """Weights are convex, rebuild the target, and beat the corner decomposition."""
    bset = BeliefSet.initial(rng.dirichlet(np.ones(3))).extend(rng.dirichlet(np.ones(3), size=4))
    corners = np.eye(3)
    for _ in range(1000):
        target = rng.dirichlet(np.ones(3))
        w = interpolation_weights(target, bset)
        assert np.all(w.weights >= 0.0)
        assert w.weights.sum() == pytest.approx(1.0)
        assert w.weights @ bset.members[w.indices] == pytest.approx(target, abs=1e-7)
        spread = ((bset.members[w.indices] - target) ** 2).sum(axis=1)
        assert w.objective == pytest.approx(w.weights @ spread, abs=1e-9)
        via_corners = target @ ((corners - target) ** 2).sum(axis=1)
        assert w.objective <= via_corners + 1e-9


def test_every_member_interpolates_to_itself(rng):
    bset = BeliefSet.initial(rng.dirichlet(np.ones(3))).extend(rng.dirichlet(np.ones(3), size=6))
    for i, member in enumerate(bset.members):
        w = interpolation_weights(member.copy(), bset)
        assert w.indices.tolist() == [i]
        assert w.weights.tolist() == [1.0]
        assert w.objective == 0.0


def test_weight_cache_hits_on_repeat():
    bset = BeliefSet.initial(np.array([0.5, 0.5]))
    cache = WeightCache()
    first = cache.get(np.array([0.3, 0.7]), bset)
    second = cache.get(np.array([0.3, 0.7]), bset)
    assert first is second
    assert (cache.hits, cache.misses) == (1, 1)
    assert len(cache) == 1


def test_weight_cache_keys_on_set_contents():
    cache = WeightCache()
    target = np.array([0.3, 0.7])
    cache.get(target, BeliefSet.initial(np.array([0.5, 0.5])))
    cache.get(target, BeliefSet.initial(np.array([0.2, 0.8])))
    assert cache.misses == 2


def test_weight_cache_drops_entries_of_an_old_set():
    cache = WeightCache()
    first = BeliefSet.initial(np.array([0.5, 0.5]))
    second = BeliefSet.initial(np.array([0.2, 0.8]))
    for target in ([0.3, 0.7], [0.6, 0.4], [0.9, 0.1]):
        cache.get(np.array(target), first)
    assert len(cache) == 3
    cache.get(np.array([0.3, 0.7]), second)
    assert len(cache) == 1
    cache.get(np.array([0.3, 0.7]), first)
    assert (cache.hits, cache.misses) == (0, 5)
    assert len(cache) == 1


# ============================================================================
# Approximate transitions
# ============================================================================


def test_approx_transition_is_stochastic(random_instance, rng):
    bset = BeliefSet.initial(np.array([0.5, 0.5])).extend(rng.dirichlet(np.ones(2), size=3))
    for theta in range(2):
        table = approx_transition(0, 1, np.array([0.5, 0.5]), theta, bset, random_instance)
        assert table.shape == (3, bset.size)
        assert table.sum() == pytest.approx(1.0)
        assert table.sum(axis=1) == pytest.approx(transition_prob(random_instance, 0, 1, theta))


def test_approx_transition_on_closed_set(revealing_toy):
    """Posteriors that are members keep all their mass on that member."""
    bset = BeliefSet.initial(np.array([0.5, 0.5]))
    table = approx_transition(0, 0, np.array([0.5, 0.5]), 0, bset, revealing_toy)
    assert table.tolist() == [[1.0, 0.0, 0.0]]
