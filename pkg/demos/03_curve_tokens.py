"""
Curve tokenization
------------------

Turns waveforms into discrete tokens: quantize amplitudes to 64 levels,
slide an 8-sample window, rank the observed curves by frequency, and keep
the most common as the vocabulary. The relative variant shifts each window
so its minimum is zero, which merges offset-duplicates and lifts coverage
at the same vocabulary size - the effect this demo measures.
"""

import numpy as np

from tinysound import tokenizer
from tinysound.audio_io import AudioClip

SR = 44100
rng = np.random.default_rng(11)

# A corpus of smooth random walks stands in for real audio: gentle local
# slopes mean many windows repeat up to a vertical offset.
corpus = []
for _ in range(24):
    steps = rng.normal(0.0, 0.01, size=4000)
    corpus.append(AudioClip(np.clip(np.cumsum(steps), -1, 1), SR))

for mode in (tokenizer.ABSOLUTE, tokenizer.RELATIVE):
    spec = tokenizer.CurveSpec(curve_len=8, resolution=64, top_k=2000, mode=mode)
    vocab, stats = tokenizer.build_curve_vocab(corpus, spec)
    print(f"{mode:9s} distinct curves {stats.distinct_curves:6d}  "
          f"vocab {len(vocab):5d}  "
          f"window coverage {stats.vocab_coverage:.2%}  "
          f"token coverage {stats.token_coverage:.2%}")

# Tokenize one clip with the relative vocabulary.
spec = tokenizer.CurveSpec(curve_len=8, resolution=64, top_k=2000,
                           mode=tokenizer.RELATIVE)
vocab, _ = tokenizer.build_curve_vocab(corpus, spec)
ids = tokenizer.tokenize(corpus[0], vocab)
unk = int(np.count_nonzero(ids == tokenizer.UNK_ID))
print(f"\nclip 0: {ids.size} tokens (CLS + {ids.size - 1} windows), "
      f"{unk} unknown ({unk / (ids.size - 1):.1%})")
print(f"first tokens: {ids[:12].tolist()}")
