import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from handctx.attention import (
    SIGMA_MIN,
    AttentionParams,
    attention_forward,
    attention_insert,
    build_distance_table,
    project_constraints,
    semantic_weights,
    similarity_weights,
)
from handctx.errors import ConstraintError, DimensionError
from handctx.gradcheck import check_gradients
from handctx.tensor import Tensor


def random_params(rng, m, K, alpha_scale=1.0):
    return AttentionParams.from_arrays(
        w_theta=rng.uniform(-1, 1, (m, m)),
        w_phi=rng.uniform(-1, 1, (m, m)),
        w_g=rng.uniform(-1, 1, (m, m)),
        w_p=rng.uniform(-1, 1, (K, m)),
        alpha=rng.uniform(0, 1.0 / K, K) * alpha_scale,
        mu=rng.uniform(0, 2, K),
        sigma=rng.uniform(0.5, 2, K),
    )


# independent pure-python reference: no matrix algebra, explicit loops over (i, j, k)

def naive_similarity(X, P):
    h, w, m = X.shape
    xs = [X[r, c] for r in range(h) for c in range(w)]
    Wt, Wf = P.w_theta.data, P.w_phi.data

    def apply(W, v):
        return [sum(W[a][b] * v[b] for b in range(m)) for a in range(m)]

    th = [apply(Wt, v) for v in xs]
    ph = [apply(Wf, v) for v in xs]
    S = []
    for i in range(len(xs)):
        f = [math.exp(sum(th[i][a] * ph[j][a] for a in range(m))) for j in range(len(xs))]
        C = sum(f)
        S.append([fj / C for fj in f])
    return S


def naive_semantic(X, P):
    h, w, m = X.shape
    pos = [(r, c) for r in range(h) for c in range(w)]
    xs = [X[r, c] for r, c in pos]
    K = P.K
    Wp = P.w_p.data
    probs = []
    for v in xs:
        z = [sum(Wp[k][b] * v[b] for b in range(m)) for k in range(K)]
        e = [math.exp(zk) for zk in z]
        probs.append([ek / sum(e) for ek in e])
    Tm = []
    for i, (ri, ci) in enumerate(pos):
        row = []
        for j, (rj, cj) in enumerate(pos):
            d = math.sqrt((ri - rj) ** 2 + (ci - cj) ** 2)
            row.append(sum(
                P.alpha.data[k] * probs[j][k] * math.exp(-((d - P.mu.data[k]) ** 2) / P.sigma.data[k] ** 2)
                for k in range(K)
            ))
        Tm.append(row)
    return Tm


def naive_forward(X, P):
    h, w, m = X.shape
    xs = [X[r, c] for r in range(h) for c in range(w)]
    S, Tm = naive_similarity(X, P), naive_semantic(X, P)
    Wg = P.w_g.data
    g = [[sum(Wg[a][b] * v[b] for b in range(m)) for a in range(m)] for v in xs]
    Y = np.zeros((h, w, m))
    for i in range(len(xs)):
        for a in range(m):
            Y[i // w, i % w, a] = sum((S[i][j] + Tm[i][j]) * g[j][a] for j in range(len(xs)))
    return Y


def test_distance_table_cases():
    assert np.all(np.diag(build_distance_table(3, 4)) == 0)
    assert build_distance_table(1, 2)[0, 1] == 1.0
    assert build_distance_table(2, 2)[0, 3] == pytest.approx(math.sqrt(2), abs=1e-15)


@pytest.mark.parametrize("h,w", [(1, 1), (2, 3), (4, 4)])
def test_distance_table_is_metric(h, w):
    D = build_distance_table(h, w)
    np.testing.assert_array_equal(D, D.T)
    n = h * w
    for i in range(n):
        for j in range(n):
            assert np.all(D[i, j] <= D[i, :] + D[:, j] + 1e-12)


def test_similarity_zero_projection_is_uniform():
    rng = np.random.default_rng(0)
    P = random_params(rng, 3, 2)
    P.w_theta.data[:] = 0
    S = similarity_weights(rng.normal(size=(2, 3, 3)), P).data
    np.testing.assert_array_equal(S, np.full((6, 6), 1 / 6))


def test_similarity_single_position():
    rng = np.random.default_rng(1)
    P = random_params(rng, 3, 2)
    assert similarity_weights(rng.normal(size=(1, 1, 3)), P).data.tolist() == [[1.0]]


def test_similarity_matches_double_loop():
    rng = np.random.default_rng(2)
    P = random_params(rng, 3, 2)
    X = rng.uniform(-1, 1, (2, 2, 3))
    np.testing.assert_allclose(similarity_weights(X, P).data, naive_similarity(X, P), rtol=0, atol=1e-12)


def test_semantic_alpha_zero():
    rng = np.random.default_rng(3)
    P = random_params(rng, 3, 2, alpha_scale=0.0)
    assert not np.any(semantic_weights(rng.normal(size=(2, 2, 3)), None, P).data)


def test_semantic_single_category_wide_prior():
    rng = np.random.default_rng(4)
    P = random_params(rng, 3, 1)
    P.alpha.data[:] = 1.0
    P.mu.data[:] = 0.0
    P.sigma.data[:] = 1e6
    Tm = semantic_weights(rng.normal(size=(2, 3, 3)), None, P).data
    np.testing.assert_allclose(Tm, 1.0, atol=1e-11)


def test_semantic_matches_triple_loop():
    rng = np.random.default_rng(5)
    P = random_params(rng, 3, 2)
    X = rng.uniform(-1, 1, (2, 2, 3))
    np.testing.assert_allclose(semantic_weights(X, None, P).data, naive_semantic(X, P), rtol=0, atol=1e-12)


def test_semantic_rejects_nonpositive_sigma():
    rng = np.random.default_rng(6)
    P = random_params(rng, 3, 2)
    P.sigma.data[0] = 0.0
    with pytest.raises(ConstraintError):
        semantic_weights(rng.normal(size=(2, 2, 3)), None, P)


def test_forward_single_position_closed_form():
    rng = np.random.default_rng(7)
    P = random_params(rng, 4, 3)
    x = rng.normal(size=4)
    z = P.w_p.data @ x
    p = np.exp(z - z.max()) / np.exp(z - z.max()).sum()
    prior = np.exp(-(P.mu.data ** 2) / P.sigma.data ** 2)
    expect = (1 + np.sum(P.alpha.data * p * prior)) * (P.w_g.data @ x)
    np.testing.assert_allclose(attention_forward(x.reshape(1, 1, 4), P).data[0, 0], expect, atol=1e-14)


def test_forward_zero_value_path():
    rng = np.random.default_rng(8)
    P = random_params(rng, 4, 3)
    P.w_g.data[:] = 0
    assert not np.any(attention_forward(rng.normal(size=(3, 2, 4)), P).data)


def test_forward_matches_naive_3x3x4():
    rng = np.random.default_rng(9)
    P = random_params(rng, 4, 3)
    X = rng.uniform(-1, 1, (3, 3, 4))
    np.testing.assert_allclose(attention_forward(X, P).data, naive_forward(X, P), rtol=0, atol=1e-10)


def test_forward_batched_equals_per_item():
    rng = np.random.default_rng(10)
    P = random_params(rng, 3, 2)
    X = rng.normal(size=(4, 2, 3, 3))
    batched = attention_forward(X, P).data
    for n in range(4):
        np.testing.assert_allclose(batched[n], attention_forward(X[n], P).data, atol=1e-13)


def test_channel_mismatch():
    rng = np.random.default_rng(11)
    P = random_params(rng, 3, 2)
    with pytest.raises(DimensionError):
        attention_forward(np.zeros((2, 2, 4)), P)


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 3), st.integers(0, 10**6))
def test_oracle_equivalence_property(h, w, m, K, seed):
    rng = np.random.default_rng(seed)
    P = random_params(rng, m, K)
    X = rng.uniform(-1, 1, (h, w, m))
    np.testing.assert_allclose(attention_forward(X, P).data, naive_forward(X, P), rtol=0, atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 10**6))
def test_row_stochastic_and_bounded(h, w, seed):
    rng = np.random.default_rng(seed)
    P = random_params(rng, 3, 3)
    P.alpha.data[:] = 1.0 / 3  # extreme feasible value
    X = rng.normal(0, 2, (h, w, 3))
    S = similarity_weights(X, P).data
    np.testing.assert_allclose(S.sum(axis=1), 1.0, rtol=0, atol=1e-12)
    Tm = semantic_weights(X, None, P).data
    assert Tm.min() >= 0.0 and Tm.max() <= 1.0


def test_gradients_all_parameter_groups():
    rng = np.random.default_rng(12)
    P = random_params(rng, 3, 2)
    X = Tensor(rng.uniform(-1, 1, (3, 2, 3)), requires_grad=True)
    probe = rng.normal(size=(3, 2, 3))
    groups = dict(P.tensors(), X=X)
    errs = check_gradients(lambda: (attention_forward(X, P) * probe).sum(), groups)
    assert set(errs) == {"w_theta", "w_phi", "w_g", "w_p", "alpha", "mu", "sigma", "X"}
    assert max(errs.values()) <= 1e-5, errs


def test_insert_gradients():
    rng = np.random.default_rng(13)
    P = random_params(rng, 2, 2)
    X = Tensor(rng.uniform(-1, 1, (2, 2, 2)), requires_grad=True)
    errs = check_gradients(lambda: attention_insert(X, P).sum(), dict(P.tensors(), X=X))
    assert max(errs.values()) <= 1e-5, errs


def test_insert_identity_configuration():
    rng = np.random.default_rng(14)
    P = random_params(rng, 4, 3)
    P.w_g.data[:] = 0
    P.alpha.data[:] = 0
    X = rng.normal(size=(3, 3, 4))
    assert attention_insert(X, P).data.tobytes() == X.tobytes()


def test_insert_is_residual():
    rng = np.random.default_rng(15)
    P = random_params(rng, 4, 3)
    X = rng.normal(size=(3, 3, 4))
    np.testing.assert_allclose(attention_insert(X, P).data - X, attention_forward(X, P).data, rtol=0, atol=1e-14)


def test_similarity_path_permutation_equivariance():
    rng = np.random.default_rng(16)
    P = random_params(rng, 3, 2, alpha_scale=0.0)
    X = rng.normal(size=(3, 3, 3))
    perm = rng.permutation(9)
    Xp = X.reshape(9, 3)[perm].reshape(3, 3, 3)
    Y = attention_forward(X, P).data.reshape(9, 3)
    Yp = attention_forward(Xp, P).data.reshape(9, 3)
    np.testing.assert_allclose(Yp, Y[perm], atol=1e-12)
    # the semantic path depends on positions, so equivariance must break
    P.alpha.data[:] = 0.5
    Y = attention_forward(X, P).data.reshape(9, 3)
    Yp = attention_forward(Xp, P).data.reshape(9, 3)
    assert not np.allclose(Yp, Y[perm], atol=1e-6)


def test_project_constraints():
    rng = np.random.default_rng(17)
    P = random_params(rng, 2, 4)
    P.alpha.data[:] = [0.9, -0.1, 0.1, 0.25]
    P.sigma.data[:] = [-1.0, 0.0, 1e-4, 2.0]
    before = {k: t.data.copy() for k, t in P.tensors().items()}
    project_constraints(P)
    np.testing.assert_array_equal(P.alpha.data, [0.25, 0.0, 0.1, 0.25])
    np.testing.assert_array_equal(P.sigma.data, [SIGMA_MIN, SIGMA_MIN, SIGMA_MIN, 2.0])
    for k in ("w_theta", "w_phi", "w_g", "w_p", "mu"):
        np.testing.assert_array_equal(P.tensors()[k].data, before[k])
    snapshot = P.to_bytes()
    project_constraints(P)
    assert P.to_bytes() == snapshot


def test_init_defaults():
    P = AttentionParams.init(m=8, K=6, h=12, w=12, rng=0)
    diag = math.hypot(11, 11)
    np.testing.assert_allclose(P.alpha.data, 1 / 12)
    np.testing.assert_allclose(P.mu.data, np.linspace(0, diag / 2, 6))
    np.testing.assert_allclose(P.sigma.data, diag / 4)
    assert P.w_p.shape == (6, 8)
    assert AttentionParams.init(m=2, K=1).sigma.data[0] > 0


def test_serialization_roundtrip(tmp_path):
    rng = np.random.default_rng(18)
    P = random_params(rng, 3, 2)
    path = tmp_path / "attn.bin"
    P.save(path)
    blob = path.read_bytes()
    assert blob[:8] == b"HCTXATTN" and len(blob) == 20 + 8 * (3 * 9 + 6 + 6)
    Q = AttentionParams.load(path)
    for k, t in P.tensors().items():
        np.testing.assert_array_equal(Q.tensors()[k].data, t.data)
    assert "m=3 K=2" in P.summary()
    with pytest.raises(ValueError):
        AttentionParams.from_bytes(b"XXXXXXXX" + blob[8:])
