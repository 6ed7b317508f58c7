"""Train the same deep post-LN model twice, once with default initialisation
and once with ADMIN, and print the omega profile and both learning curves.

    python3 demos/admin_vs_default.py --enc 12 --dec 3 --epochs 6
"""

import argparse

from deepformer import experiment as ex
from deepformer.config import load_config, packaged_config


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--enc", type=int, default=12)
    ap.add_argument("--dec", type=int, default=3)
    ap.add_argument("--epochs", type=int, default=6)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    cfg = load_config(packaged_config("acceptance.ini"))
    cfg.model.n_enc_layers, cfg.model.n_dec_layers = args.enc, args.dec
    cfg.run.epochs, cfg.run.seed = args.epochs, args.seed
    corpus = ex.corpus_for(cfg)

    curves = {}
    for init in ("default", "admin"):
        cfg.run.init_mode = init
        cfg.model.block_mode = "admin" if init == "admin" else "postln"
        res = ex.train_run(cfg.validate(), corpus=corpus)
        if res.profile is not None:
            print("omega per residual branch (encoder chain, then decoder chain):")
            print("  " + " ".join(f"{w:.2f}" for w in res.profile.omegas))
        curves[init] = [e.dev_ppl for e in res.record.epochs]
        acc = ex.held_out_sequence_accuracy(res.model, corpus)
        print(f"{init:>7}: {res.result_line()}  test sequence accuracy {acc:.3f}  ({res.seconds:.0f}s)")

    print(f"\n{'epoch':>5} {'default':>10} {'admin':>10}   dev perplexity")
    for i in range(max(len(c) for c in curves.values())):
        row = [c[i] if i < len(c) else float("nan") for c in (curves["default"], curves["admin"])]
        print(f"{i + 1:>5} {row[0]:>10.4f} {row[1]:>10.4f}")


if __name__ == "__main__":
    main()
