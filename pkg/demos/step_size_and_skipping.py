"""
Step size, smoothness and skipping iterations
=============================================

Two tiny character language models share one parameter set across all eight
iterations and differ only in the step size ``s`` used in ``h <- h + s f(h)``.
After short training we:

1. measure how similar consecutive derivatives ``f(h_i)`` are (cosine);
2. search for a schedule of larger steps that uses 6 or 4 iterations instead
   of 8, and report the perplexity change and the drift of the hidden states.

Training is deliberately short (300 steps, width 32, about 15 seconds) and
only one seed is used.  At this length the smaller step tends to give smoother
derivatives and to tolerate skipping better.  The acceptance suite repeats the
comparison over three seeds with 1000 steps at width 64, and there the
direction reverses: the s=0.1 models reach lower full-depth perplexity but
degrade more when iterations are skipped.  Treat either run as an anecdote.

Run:  python demos/step_size_and_skipping.py
"""
import numpy as np

from eulerformer import data as D
from eulerformer import diagnostics as G
from eulerformer import model as M
from eulerformer import numerics as nm
from eulerformer import search as S
from eulerformer import training as T

corpus = D.synthetic_corpus(60_000, seed=0)
ev = T.LMEvalSet.from_corpus(corpus, 32, 32)
tokens = ev.windows[:, :-1]
print(f"corpus: {len(corpus.tokens)} tokens, vocabulary {corpus.vocab_size}")

for s in (1.0, 0.1):
    cfg = M.ModelConfig(L=8, s=s, n=1, d_model=32, n_heads=4, d_ff=64,
                        vocab_size=corpus.vocab_size, max_seq_len=32)
    ck = T.pretrain(cfg, corpus, T.TrainConfig(steps=300, batch=8, seq_len=32, seed=0))
    full_ppl = T.evaluate(ck, cfg.unit_schedule(), ev)
    with nm.no_grad():
        _, full = M.run_backbone(ck.bank, tokens, cfg.unit_schedule(), cfg)
    prof = G.cosine_profile(full)
    print(f"\ns={s}: full-depth perplexity {full_ppl:.3f}")
    print("  consecutive-derivative cosine:", np.round(prof.values, 3), f"mean {prof.mean:.3f}")

    for iters in (6, 4):
        space = S.SearchSpace(iters, cfg.total_time, s)
        res = S.search_schedule(lambda sch: T.evaluate(ck, sch, ev), space, budget=40,
                                seed=0, maximize=False)
        with nm.no_grad():
            _, red = M.run_backbone(ck.bank, tokens, res.schedule, cfg)
        print(f"  {iters} iterations, scales {res.schedule.scales}: perplexity "
              f"{res.metric:.3f} ({G.relative_change(res.metric, full_ppl):+.2f}%, uniform "
              f"{res.trials[0].metric:.3f}), relative hidden drift {G.hidden_diff(full, red).relative:.4f}")
