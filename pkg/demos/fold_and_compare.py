"""Train a small ADMIN model, fold its omegas into a plain post-LN model,
and check the two decode identically; then test it against an untrained
model with paired bootstrap BLEU.

    python3 demos/fold_and_compare.py
"""

import argparse

from deepformer import experiment as ex
from deepformer.admin import fold_omega
from deepformer.config import load_config, packaged_config
from deepformer.evalmetrics import bleu_bootstrap


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--epochs", type=int, default=10)
    ap.add_argument("--samples", type=int, default=1000)
    args = ap.parse_args()

    cfg = load_config(packaged_config("depth_sweep.ini"))
    cfg.model.n_enc_layers, cfg.model.n_dec_layers = 4, 2
    cfg.run.epochs = args.epochs
    corpus = ex.corpus_for(cfg)
    trained = ex.train_run(cfg, corpus=corpus)
    folded = fold_omega(trained.model)
    print(trained.result_line())

    batch = corpus.test[:32]
    src = [s for s, _ in batch]
    a = trained.model.greedy_decode(src, 16)
    b = folded.greedy_decode(src, 16)
    eps = sorted(set(folded.ln_eps.values()))
    print(f"folded model: block_mode={folded.config.block_mode}, per-block LN eps from {eps[0]:.2e} to {eps[-1]:.2e}")
    print(f"greedy decodes identical on {len(src)} test sentences: {a == b}")

    report, hyps, refs = ex.evaluate_model(folded, corpus)
    print(report.table())

    cfg.run.epochs = 0
    untrained = ex.train_run(cfg, corpus=corpus)
    base_hyps, _ = ex.decode_split(untrained.model, corpus.test, corpus.vocab)
    bs = bleu_bootstrap(hyps, base_hyps, refs, n_samples=args.samples)
    print(f"trained vs untrained: BLEU {bs.score_a:.2f} vs {bs.score_b:.2f}, "
          f"bootstrap p = {bs.p_value:.4f} ({bs.n_samples} samples)")


if __name__ == "__main__":
    main()
