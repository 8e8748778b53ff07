"""Walk through the exact identities the model satisfies.

Each block sets parameters to a value whose output can be written down by
hand, then prints the model's answer next to the hand-derived one.

    python demos/closed_forms.py
"""

import math

import numpy as np

from malipnet import tensor as T
from malipnet.attention import AttentionTrace, separate_st_attention, to_sequence
from malipnet.decoding import beam_search, greedy_decode
from malipnet.model import MALipNet, ModelConfig
from malipnet.seq2seq import EOS, run_decoder, nll_loss

cfg = ModelConfig(
    vocab_size=8, height=16, width=32, frontend_channels=(8, 16, 24), reduction_ratio=4,
    n_subbranches=3, enc_hidden=16, dec_hidden=24, embed=8, attn_dim=16,
)
rng = np.random.default_rng(0)
clip = rng.random((2, 3, 6, 16, 32), dtype=np.float32)
targets = np.array([[3, 4, 5, EOS], [6, 7, 3, EOS]])

# Zero attention parameters: every sigmoid sees 0, so every map is 0.5.
model = MALipNet(cfg, seed=0)
for name, p in model.store.items():
    if name.startswith("attention."):
        p.data[:] = 0.0
_, trace = model.trace(clip)
values = np.unique(np.concatenate([m.ravel() for m in trace.maps()]))
print(f"zero attention parameters -> distinct map values {values}")

# Saturated separate attention: both gates are 1, so each sub-branch
# returns the frame direction and N of them add up to N * X'/|X'|.
X = T.Tensor(rng.normal(size=(2, 24, 6, 2, 4)).astype(np.float32))
store = MALipNet(cfg, seed=1).store
for name, p in store.items():
    if ".ssta." in name:
        p.data[:] = 100.0 if name.endswith("bias") else 0.0
out = separate_st_attention(X, store.view("attention.ssta"), 3).data
seq = to_sequence(X).data.astype(np.float64)
expected = 3 * seq / np.linalg.norm(seq, axis=-1, keepdims=True)
print(f"saturated SSTA -> max |out - 3 X'/|X'|| = {np.max(np.abs(out - expected)):.2e}")
print(f"                  frame norms {np.round(np.linalg.norm(out, axis=-1)[0], 6)}")

# A zero output layer makes every step uniform over V symbols, so the
# summed loss over an L-step target is L ln V.
model = MALipNet(cfg, seed=2)
model.store["out.weight"].data[:] = 0.0
model.store["out.bias"].data[:] = 0.0
with T.no_grad():
    enc = model.encode(clip)
    loss = nll_loss(run_decoder(enc, model.store, targets)[0], targets).item()
print(f"uniform decoder -> loss {loss:.6f}, L ln V = {4 * math.log(8):.6f}")

# Beam search with one hypothesis is greedy decoding.
model = MALipNet(cfg, seed=3)
with T.no_grad():
    enc = model.encode(clip[:1])
g = greedy_decode(enc, model.store)[0]
b = beam_search(enc, model.store, K=1)
print(f"greedy {g.tokens} ({g.log_prob:.4f})  beam K=1 {b.tokens} ({b.log_prob:.4f})")
for k in (2, 4, 6):
    h = beam_search(enc, model.store, K=k)
    print(f"beam K={k} {h.tokens} normalised score {h.score():.4f}")
