"""
Translation variants
====================

The unit translator is a small encoder-decoder trained on (source, canonical
target) pairs. Continuing training with all four references per source
(the canonical target and three paraphrases) gives the "updated" model; a
second variant trains only on the paraphrase whose length is closest to the
source.
"""
import numpy as np

from avdub.corpus import build_language_pair, generate_corpus
from avdub.translator import (TranslatorConfig, finetune_on_targets, finetune_paraphrase,
                              matches_any_reference, select_length_match, train_translator, translate,
                              unit_accuracy)

pair = build_language_pair(40, 0)
corpus = generate_corpus(pair, n_train=600, n_test=40)
config = TranslatorConfig(steps=400, finetune_steps=100)

base = train_translator(corpus.train, pair.vocab_size, config, seed=0)
print(f"exact-match accuracy after {config.steps} steps: {unit_accuracy(base, corpus.test):.2f}")

s = corpus.test[0]
out = translate(base, s.source)
print("source   ", s.source.units[:12])
print("expected ", s.target.units[:12])
print("decoded  ", out.sequence.units[:12])

updated = finetune_paraphrase(base, corpus.train, config, seed=0)
pairs = [(x.source, x.paraphrases[select_length_match(x.paraphrases, x.source)]) for x in corpus.train]
length_match = finetune_on_targets(base, pairs, config, seed=0)
for name, model in (("base", base), ("updated", updated), ("length match", length_match)):
    lens = [len(translate(model, x.source).sequence) - len(x.source) for x in corpus.test[:20]]
    print(f"{name:12s} matches any reference: {matches_any_reference(model, corpus.test):.2f}  "
          f"mean length gap {np.mean(lens):+.2f} units")
