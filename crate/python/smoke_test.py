"""Smoke test for the `mwer` extension module.

Build and run from the workspace root:
    cargo build -p mwer-py --release --features extension-module
    cp target/release/libmwer.so python/mwer.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import mwer  # noqa: E402


def main():
    stats = mwer.word_errors(["a", "x", "c"], ["a", "b", "c", "d"])
    assert stats["total"] == 2 and stats["reference_words"] == 4, stats
    assert mwer.corpus_wer([(["a"], ["a", "b"])]) == 50.0

    symbols, utts = mwer.generate_data(4, seed=3)
    uid, words, feats = utts[0]
    graphemes = [s for s in symbols if not s.startswith("<")]
    model = mwer.Model(graphemes, feature_dim=len(feats[0]), seed=1)
    assert model.num_parameters == len(model.parameters())

    nbest = model.beam_search(feats, beam_size=4)
    assert 1 <= len(nbest) <= 4
    scores = [lp for _, lp, _ in nbest]
    assert scores == sorted(scores, reverse=True)

    samples = model.sample(feats, 3, seed=7)
    assert samples == model.sample(feats, 3, seed=7)

    lp = model.sequence_logprob(feats, words)
    ce, grad = model.loss(feats, words, variant="ce")
    assert math.isclose(ce["total_loss"], -lp, rel_tol=1e-12)
    assert len(grad) == model.num_parameters

    report, _ = model.loss(feats, words, variant="mwer_nbest", n=4, lam=0.01)
    mix = report["werr_term"] + 0.01 * report["ce_term"]
    assert math.isclose(report["total_loss"], mix, abs_tol=1e-12)

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.ckpt")
        model.save(path)
        assert mwer.Model.load(path).parameters() == model.parameters()

    try:
        model.loss(feats, words, variant="bogus")
    except ValueError:
        pass
    else:
        raise AssertionError("bad variant accepted")

    print(f"ok: {uid} {' '.join(words)!r}, top hypothesis {' '.join(nbest[0][0])!r}")


if __name__ == "__main__":
    main()
