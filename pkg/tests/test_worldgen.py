import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from sklearn.metrics import adjusted_rand_score

from hclsm import worldgen
from hclsm.worldgen import (BACKGROUND, Body, WorldConfig, ari, episode_from_bodies, event_f1, gen_episode,
                            jacobi_eigh, load_episode, load_split, pca_project, save_episode, simulate,
                            write_dataset)

SMALL = WorldConfig(size=32, T=8)


# ------------------------------------------------------------ episodes


def test_static_scene_identical_frames_no_collisions():
    bodies = [Body("circle", np.array([8.0, 8.0]), np.zeros(2), 4.0, (0.9, 0.2, 0.2)),
              Body("square", np.array([22.0, 20.0]), np.zeros(2), 4.0, (0.2, 0.9, 0.2))]
    ep = episode_from_bodies(bodies, None, 6, 32)
    assert all(np.array_equal(ep.frames[0], f) for f in ep.frames)
    assert ep.collisions == []


def test_same_seed_bit_identical():
    a, b = gen_episode(SMALL, 5), gen_episode(SMALL, 5)
    assert np.array_equal(a.frames, b.frames) and np.array_equal(a.masks, b.masks)
    assert a.collisions == b.collisions and np.array_equal(a.actions, b.actions)


def test_distinct_seeds_differ():
    assert not np.array_equal(gen_episode(SMALL, 1).frames, gen_episode(SMALL, 2).frames)


def test_head_on_collision_at_closed_form_frame():
    # centres 40 px apart, radii 5, closing speed 4 px/step:
    # contact when 40 - 4t <= 10, i.e. first at t = ceil(7.5) = 8
    bodies = [Body("circle", np.array([10.0, 32.0]), np.array([2.0, 0.0]), 5.0, (0.9, 0.2, 0.2)),
              Body("circle", np.array([50.0, 32.0]), np.array([-2.0, 0.0]), 5.0, (0.2, 0.9, 0.2))]
    ep = episode_from_bodies(bodies, None, 12, 64, pusher=None)
    assert ep.collisions == [math.ceil((40 - 10) / 4)]


def test_wall_bounce_is_elastic():
    # x = 4 - 2 = 2 lands 1 px past the wall at x = radius = 3 and is mirrored to 4
    b = Body("circle", np.array([4.0, 16.0]), np.array([-2.0, 0.0]), 3.0, (0.9, 0.2, 0.2))
    snaps, coll = simulate([b], None, 4, 32, pusher=None)
    assert coll == [1]
    assert snaps[1][0].vel.tolist() == [2.0, 0.0]
    assert snaps[1][0].pos[0] == pytest.approx(4.0)


@given(st.integers(0, 10_000))
def test_episode_invariants(seed):
    ep = gen_episode(SMALL, seed)
    T, H = ep.T, SMALL.size
    assert ep.frames.shape == (T, 3, H, H) and ep.masks.shape == (T, H, H)
    assert ep.frames.min() >= 0.0 and ep.frames.max() <= 1.0
    assert all(1 <= c <= T - 1 for c in ep.collisions)
    n = ep.meta["n_objects"]
    assert 2 <= n <= 4 and ep.masks.max() <= n
    fg = ep.masks > 0
    bg = np.array(BACKGROUND, np.float32)[:, None]
    pix = ep.frames.transpose(1, 0, 2, 3).reshape(3, -1)
    assert np.all(np.any(pix[:, fg.reshape(-1)] != bg, axis=0))
    assert np.all(pix[:, ~fg.reshape(-1)] == bg)


@given(st.integers(0, 10_000))
def test_bodies_stay_inside_frame(seed):
    rng = np.random.default_rng(seed)
    bodies = worldgen._place(rng, 3, SMALL)
    acts = worldgen._pusher_actions(bodies, 20, 2.0, rng)
    snaps, _ = simulate(bodies, acts, 20, SMALL.size)
    for frame in snaps:
        for b in frame:
            assert np.all(b.pos >= b.radius - 1e-9) and np.all(b.pos <= SMALL.size - 1 - b.radius + 1e-9)


def test_pusher_follows_actions():
    bodies = [Body("circle", np.array([10.0, 10.0]), np.zeros(2), 3.0, (0.9, 0.2, 0.2))]
    acts = np.tile([1.0, 0.5], (5, 1))
    snaps, _ = simulate(bodies, acts, 5, 32)
    assert snaps[-1][0].pos.tolist() == [14.0, 12.0]


def test_save_load_round_trip(tmp_path):
    ep = gen_episode(SMALL, 3)
    back = load_episode(save_episode(ep, tmp_path / "ep", SMALL))
    assert np.array_equal(back.frames, ep.frames) and np.array_equal(back.masks, ep.masks)
    assert back.collisions == ep.collisions and back.seed == 3
    assert (tmp_path / "ep" / "frames.hct").read_bytes()[:4] == b"HCT1"


def test_dataset_split_by_seed_range(tmp_path):
    root = write_dataset(tmp_path / "ds", 5, SMALL, seed0=10)
    assert [e.seed for e in load_split(root, "train")] == [10, 11, 12, 13]
    assert [e.seed for e in load_split(root, "eval")] == [14]


# ------------------------------------------------------------ ARI


def test_ari_identical_and_relabelled(rng):
    y = rng.integers(0, 5, 200)
    assert ari(y, y) == 1.0
    assert ari(rng.permutation(5)[y] + 10, y) == pytest.approx(1.0)


def test_ari_random_labelings_near_zero(rng):
    a, b = rng.integers(0, 4, 10_000), rng.integers(0, 4, 10_000)
    assert abs(ari(a, b)) < 0.02


@given(st.integers(0, 2**31), st.integers(2, 300), st.integers(1, 6), st.integers(1, 6))
def test_ari_matches_sklearn_and_is_symmetric(seed, n, ka, kb):
    r = np.random.default_rng(seed)
    a, b = r.integers(0, ka, n), r.integers(0, kb, n)
    ours = ari(a, b)
    assert ours == pytest.approx(adjusted_rand_score(b, a), abs=1e-12)
    assert ours == pytest.approx(ari(b, a), abs=1e-12)
    assert ours <= 1.0 + 1e-12


def test_foreground_ari_ignores_background():
    true = np.array([0, 0, 0, 1, 1, 2, 2])
    pred = np.array([5, 3, 3, 1, 1, 2, 2])
    assert ari(pred, true) < 1.0
    assert ari(pred, true, ignore_background=True) == 1.0
    assert math.isnan(ari(pred[:3], true[:3], ignore_background=True))


def test_ari_shape_mismatch():
    with pytest.raises(ValueError):
        ari(np.zeros(3), np.zeros(4))


# ------------------------------------------------------------ event F1


def test_event_f1_exact():
    assert event_f1([2, 7], [2, 7])["f1"] == 1.0


def test_event_f1_empty_prediction():
    r = event_f1([], [3, 5])
    assert r["recall"] == 0.0 and r["f1"] == 0.0


def test_event_f1_one_frame_offset():
    assert event_f1([3, 8], [2, 9], tol=1)["f1"] == 1.0
    assert event_f1([3, 8], [2, 9], tol=0)["f1"] == 0.0


def test_event_f1_one_to_one_matching():
    r = event_f1([4, 5], [5])
    assert r == {"precision": 0.5, "recall": 1.0, "f1": pytest.approx(2 / 3)}


# ------------------------------------------------------------ PCA


def charpoly_roots_3x3(S):
    c2 = S[0, 0] * S[1, 1] + S[0, 0] * S[2, 2] + S[1, 1] * S[2, 2] - S[0, 1] ** 2 - S[0, 2] ** 2 - S[1, 2] ** 2
    coeffs = [1.0, -np.trace(S), c2, -np.linalg.det(S)]
    return np.sort(np.roots(coeffs).real)[::-1]


@given(st.integers(0, 2**31))
def test_jacobi_matches_characteristic_roots(seed):
    r = np.random.default_rng(seed)
    S = r.normal(size=(3, 3))
    S = S + S.T
    w, V = jacobi_eigh(S)
    assert np.abs(w - charpoly_roots_3x3(S)).max() <= 1e-10 * max(1.0, np.abs(w).max())
    assert np.allclose(V.T @ V, np.eye(3), atol=1e-12)


@given(st.integers(0, 2**31), st.integers(2, 9))
def test_jacobi_matches_eigvalsh(seed, n):
    r = np.random.default_rng(seed)
    S = r.normal(size=(n, n))
    S = S + S.T
    w, V = jacobi_eigh(S)
    assert np.allclose(w, np.linalg.eigvalsh(S)[::-1], atol=1e-11)
    assert np.allclose(V @ np.diag(w) @ V.T, S, atol=1e-11)


def test_jacobi_huge_theta_no_overflow():
    S = np.array([[1e200, 1e-150], [1e-150, -1e200]])
    w, _ = jacobi_eigh(S)
    assert np.all(np.isfinite(w))


def test_pca_points_on_line(rng):
    t = rng.normal(size=100)
    X = np.outer(t, [1.0, 2.0, -1.0]) + 3.0
    _, ratio, _ = pca_project(X)
    assert ratio[0] == pytest.approx(1.0, abs=1e-12)


def test_pca_isotropic_gaussian(rng):
    _, ratio, _ = pca_project(rng.normal(size=(10_000, 2)))
    assert np.all(np.abs(ratio - 0.5) <= 0.03)


def test_pca_full_reconstruction_exact(rng):
    X = rng.normal(size=(30, 5))
    coords, _, comps = pca_project(X, k=5)
    assert np.allclose(coords @ comps.T + X.mean(axis=0), X, atol=1e-12)


def test_pca_sign_convention_and_rank_deficiency(rng):
    X = np.c_[rng.normal(size=50), np.zeros(50), np.zeros(50)]
    _, ratio, comps = pca_project(-X, k=3)
    for j in range(3):
        assert comps[np.argmax(np.abs(comps[:, j])), j] > 0
    assert ratio.tolist()[1:] == [0.0, 0.0]


def test_pca_rejects_single_sample():
    with pytest.raises(ValueError):
        pca_project(np.zeros((1, 3)))
