"""Dry run of the seeded stability study used by the acceptance suite.

Prints per-seed fluctuation, entropy ratio, attacked PPL and load KL for all
three combiners so the default configuration can be judged before freezing it
into the tests.
"""

import argparse
import time

import numpy as np

from smoelab import data, metrics, trainer


def lm_study(seeds, lr, epochs=20, train_tokens=16384, eval_tokens=1024,
             tau=1.0, sigma=1.0):
    corpus = data.load_char_corpus(data.default_corpus_path())
    results = {}
    for combiner in ("baseline", "similarity_aware", "attention_aware"):
        for seed in seeds:
            t0 = time.time()
            cfg = trainer.ModelConfig(layers=2, dim=64, heads=4, d_qk=16, experts=8,
                                      top_k=2, d_ff=64, combiner=combiner,
                                      vocab_size=corpus.vocab_size, max_seq_len=64,
                                      mask_mode="causal", tau=tau, sigma=sigma)
            tcfg = trainer.TrainConfig(epochs=epochs, batch_size=16, seq_len=64,
                                       learning_rate=lr, seed=seed,
                                       eval_tokens=eval_tokens,
                                       max_train_tokens=train_tokens)
            model = trainer.build_model(cfg, seed)
            cks = trainer.train(model, corpus, tcfg)
            fluct = metrics.fluctuation_rate(cks[-2].record, cks[-1].record)
            ent = metrics.mean_decision_entropy(cks[-2].record)
            clean = trainer.evaluate_ppl(model, corpus.test_ids[:20000])
            attacked_ids = data.token_swap_attack(corpus.test_ids[:20000], 0.2, seed=seed)
            attacked = trainer.evaluate_ppl(model, attacked_ids)
            results[(combiner, seed)] = dict(
                fluct=float(fluct["top1"].mean()), entropy=ent,
                clean=clean, attacked=attacked,
                valid_ppl=cks[-1].scalars["valid_ppl"],
                secs=time.time() - t0)
            r = results[(combiner, seed)]
            print(f"{combiner:18s} seed={seed} fluct={r['fluct']:.4f} "
                  f"entropy={np.mean(ent):.4f} valid_ppl={r['valid_ppl']:.3f} "
                  f"clean={clean:.3f} attacked={attacked:.3f} ({r['secs']:.0f}s)", flush=True)
    return results


def synthetic_study(seeds, lr=3e-3, epochs=10):
    results = {}
    for combiner in ("baseline", "similarity_aware", "attention_aware"):
        for seed in seeds:
            task = data.make_synthetic_clusters(4, 256, 16, radius=1.0, seed=100 + seed)
            cfg = trainer.ModelConfig(layers=1, dim=16, heads=2, d_qk=8, experts=4,
                                      top_k=1, d_ff=16, combiner=combiner,
                                      mask_mode="full", task="synthetic", n_classes=4,
                                      max_seq_len=16)
            tcfg = trainer.TrainConfig(epochs=epochs, batch_size=8, seq_len=16,
                                       learning_rate=lr, seed=seed, eval_tokens=256)
            model = trainer.build_model(cfg, seed)
            cks = trainer.train(model, task, tcfg)
            load = metrics.load_distribution(cks[-1].record)
            kl = float(load["kl_from_uniform"].mean())
            results[(combiner, seed)] = kl
            print(f"synthetic {combiner:18s} seed={seed} load_kl={kl:.4f} "
                  f"acc_loss={cks[-1].scalars['valid_loss']:.4f}", flush=True)
    return results


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--seeds", default="0,1,2")
    ap.add_argument("--epochs", type=int, default=20)
    ap.add_argument("--skip-synthetic", action="store_true")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    t0 = time.time()
    res = lm_study(seeds, lr=args.lr, epochs=args.epochs)
    print(f"\nLM study took {time.time()-t0:.0f}s")

    print("\n=== A9/A10 verdicts ===")
    for aware in ("similarity_aware", "attention_aware"):
        fl_wins = sum(res[(aware, s)]["fluct"] < res[("baseline", s)]["fluct"] for s in seeds)
        er_wins = 0
        for s in seeds:
            ratio = np.mean(np.array(res[(aware, s)]["entropy"]) /
                            np.array(res[("baseline", s)]["entropy"]))
            er_wins += ratio < 1.0
            print(f"{aware} seed={s} mean entropy ratio = {ratio:.4f}")
        ppl_wins = sum(res[(aware, s)]["attacked"] <= res[("baseline", s)]["attacked"]
                       for s in seeds)
        print(f"{aware}: fluct wins {fl_wins}/3, entropy-ratio wins {er_wins}/3, "
              f"attacked-ppl wins {ppl_wins}/3")

    if not args.skip_synthetic:
        syn = synthetic_study(seeds)
        print("\n=== A11 verdicts ===")
        for aware in ("similarity_aware", "attention_aware"):
            wins = sum(syn[(aware, s)] <= syn[("baseline", s)] for s in seeds)
            print(f"{aware}: load-KL wins {wins}/3")


if __name__ == "__main__":
    main()
