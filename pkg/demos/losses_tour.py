"""A short tour of the five training losses and their gradients.

Run: python demos/losses_tour.py
"""

import math

import numpy as np

from srctrace import (
    BalancedBatch,
    CosineParams,
    HeadParams,
    MarginConfig,
    aam_softmax_loss,
    am_softmax_loss,
    angular_proto_loss,
    ge2e_loss,
    softmax_loss,
)

rng = np.random.default_rng(0)

# Classification losses take embeddings, integer labels and a linear head.
x = rng.standard_normal((6, 4))
y = np.array([0, 1, 2, 0, 1, 2])
head = HeadParams.init(4, 3, seed=0)
margin = MarginConfig(m=0.3, s=30.0)

print("softmax    ", softmax_loss(x, y, head).loss)
print("am-softmax ", am_softmax_loss(x, y, head, margin).loss)
print("aam-softmax", aam_softmax_loss(x, y, head, margin).loss)

# With no margin both cosine-margin losses collapse to the same scaled softmax.
zero = MarginConfig(m=0.0, s=30.0)
print("m=0 gap    ", abs(am_softmax_loss(x, y, head, zero).loss - aam_softmax_loss(x, y, head, zero).loss))

# Metric losses take a class-contiguous batch: N classes times M rows each.
N, M = 3, 4
batch = BalancedBatch(rng.standard_normal((N * M, 4)), N, M)
params = CosineParams(w=10.0, b=-5.0)
print("ge2e       ", ge2e_loss(batch, params).loss)
print("angleproto ", angular_proto_loss(batch, params).loss)

# If every row is identical all cosines are 1, so each query is a uniform guess.
flat = BalancedBatch(np.ones((N * M, 4)), N, M)
print("ge2e flat  ", ge2e_loss(flat, params).loss, "vs M ln N =", M * math.log(N))

# Every loss returns analytic gradients; check one against central differences.
out = ge2e_loss(batch, params)
emb = batch.embeddings.copy()
h = 1e-4
i, j = 5, 2
emb[i, j] += h
up = ge2e_loss(BalancedBatch(emb, N, M), params).loss
emb[i, j] -= 2 * h
down = ge2e_loss(BalancedBatch(emb, N, M), params).loss
print("d/dx[5,2]   analytic", out.grad_embeddings[i, j], "numeric", (up - down) / (2 * h))
print("d/dw, d/db ", out.grad_params["w"], out.grad_params["b"])
