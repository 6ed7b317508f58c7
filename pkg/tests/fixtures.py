"""Frozen oracle data shared by the unit and acceptance suites."""

import numpy as np

REFS = ["the cat sat on the mat today",
        "a quick brown fox jumps over the lazy dog",
        "there is no place like home",
        "we will meet again tomorrow at noon",
        "it is raining cats and dogs in the city"]
HYPS = ["the cat sat on a mat",
        "a fast brown fox jumped over the lazy dog",
        "there is no place like home",
        "we meet again at noon tomorrow",
        "it rains cats and dogs in city"]

# computed offline with sacrebleu 2.6.0 (tokenize="none", smooth_method="none"),
# which follows multi-bleu.perl counting on pre-tokenised text
FIXTURE = [
    (HYPS, 45.40738050936575, [88.23529411764706, 58.62068965517241, 41.666666666666664, 31.57894736842105],
     0.8890097654027757, 34, 38),
    (HYPS[:3] + REFS[3:], 76.27305722270279, [91.89189189189189, 81.25, 74.07407407407408, 68.18181818181819],
     0.9733349348192527, 37, 38),
    ([h + " extra words" for h in HYPS], 36.67176450117763,
     [68.18181818181819, 43.58974358974359, 29.41176470588235, 20.689655172413794], 1.0, 44, 38),
]


def noisy_corpus(n=200, seed=2024):
    """References plus two substitution-only systems of similar quality."""
    rng = np.random.default_rng(seed)
    vocab = [f"w{i}" for i in range(30)]
    refs, a, b = [], [], []
    for _ in range(n):
        ref = list(rng.choice(vocab, size=rng.integers(5, 16)))
        refs.append(" ".join(ref))
        for out, rate in ((a, 0.25), (b, 0.265)):
            out.append(" ".join(w if rng.random() > rate else str(rng.choice(vocab)) for w in ref))
    return a, b, refs


def oracle_bootstrap_p(stats_a, stats_b, n_samples, seed):
    """Independent reference: multinomial resampling counts and explicit BLEU."""
    rng = np.random.default_rng(seed)
    n = len(stats_a)
    worse = 0
    for chunk in range(0, n_samples, 10000):
        k = min(10000, n_samples - chunk)
        counts = rng.multinomial(n, np.full(n, 1.0 / n), size=k)
        scores = []
        for st_ in (stats_a, stats_b):
            tot = counts @ st_
            p = tot[:, :4] / tot[:, 4:8]
            c, r = tot[:, 8], tot[:, 9]
            bp = np.minimum(1.0, np.exp(1 - r / c))
            scores.append(bp * np.prod(p, axis=1) ** 0.25)
        worse += int(np.sum(scores[1] >= scores[0]))
    return worse / n_samples


# p-value of the fixture from oracle_bootstrap_p(..., 100000, seed=7)
FIXTURE_P = 0.31162
