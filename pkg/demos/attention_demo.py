"""Run the contextual attention module on a small feature map and print its pieces."""

import numpy as np

from handctx.attention import AttentionParams, attention_forward, build_distance_table, semantic_weights, \
    similarity_weights

rng = np.random.default_rng(0)
h, w, m, K = 4, 4, 3, 3
P = AttentionParams.init(m, K, h, w, rng)
X = rng.uniform(-1, 1, (h, w, m))

S = similarity_weights(X, P).data
Tm = semantic_weights(X, build_distance_table(h, w), P).data
print(P.summary())
print("similarity rows sum to", np.round(S.sum(axis=1)[:4], 12))
print("semantic weights of cell 0 over the grid:")
print(np.round(Tm[0].reshape(h, w), 4))
Y = attention_forward(X, P).data
print("|Y| mean", np.abs(Y).mean().round(4), "|X| mean", np.abs(X).mean().round(4))
