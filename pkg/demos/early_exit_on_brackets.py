"""
Early exit on a toy classification task
=======================================

A causal model with four parameter sets interpolated over eight unit steps is
fine-tuned to decide whether a bracket string is balanced.  We then

1. search a 6-iteration schedule that keeps accuracy;
2. attach a small classifier after every iteration (the backbone is frozen);
3. stop as soon as a classifier is confident (prediction entropy below a
   threshold) and trace the compute/accuracy trade-off.

Run:  python demos/early_exit_on_brackets.py      (about a minute)
"""
from eulerformer import checkpoint as C
from eulerformer import data as D
from eulerformer import early_exit as X
from eulerformer import model as M
from eulerformer import search as S
from eulerformer import training as T

cfg = M.ModelConfig(L=8, s=1.0, n=4, d_model=32, n_heads=4, d_ff=64, vocab_size=4, max_seq_len=33)
train, valid = D.brackets_task(2000, seed=1), D.brackets_task(500, seed=2)
print("example input ids:", train.X[0][:16], "label", train.y[0])

ck, acc = T.finetune_classifier(C.Checkpoint(cfg, M.init_bank(cfg, 0)), train, valid,
                                T.TrainConfig(steps=800, batch=16, seed=0))
print(f"8 unit steps: validation accuracy {acc:.3f}")

res = S.search_schedule(lambda sch: T.evaluate(ck, sch, valid),
                        S.SearchSpace(6, cfg.total_time, cfg.s), budget=40, seed=0)
print(f"6 iterations, scales {res.schedule.scales}: accuracy {res.metric:.3f} "
      f"(uniform start {res.trials[0].metric:.3f})")

heads = X.train_exit_heads(ck, res.schedule, train, T.TrainConfig(steps=400, batch=32, seed=0))
print("\nthreshold  avg iterations  accuracy")
for st in X.sweep(ck, heads, [0, 0.01, 0.05, 0.07, 0.1, 0.2, 0.3, 0.4, 0.5], valid):
    print(f"{st.threshold:9.2f}  {st.avg_iterations:14.2f}  {st.accuracy:8.3f}")
