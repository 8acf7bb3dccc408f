"""Joint training against a two-model question-then-answer pipeline.

Both sides train on the same synthetic slice with the same seeds. The
pipeline uses one model trained only on questions and a second trained only
on spans; the joint model runs the full staged schedule. Scores are on a
held-out slice. Run with ``python demos/onestop_vs_pipeline.py`` (about
half a minute for three seeds).
"""

import argparse
import statistics

from onestop.data import Vocabulary, record_to_example
from onestop.inference import compare_systems
from onestop.synthetic import make_corpus
from onestop.training import TrainConfig, build_model, run_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, default=3)
    ap.add_argument("--train", type=int, default=100)
    ap.add_argument("--valid", type=int, default=50)
    ap.add_argument("--test", type=int, default=100)
    ap.add_argument("--epochs", type=int, default=8, help="epochs per joint-schedule stage")
    args = ap.parse_args()

    examples = [record_to_example(r) for r in make_corpus(args.train + args.valid + args.test, seed=123)]
    train = examples[:args.train]
    valid = examples[args.train:args.train + args.valid]
    test = examples[args.train + args.valid:]
    vocab = Vocabulary.build([ex.document + ex.question for ex in train])

    rows = []
    for seed in range(args.seeds):
        base = dict(lam=0.2, batch_size=16, base_lr=1e-3, dropout=0.1, patience=3, seed=seed, epochs=args.epochs)
        solo = dict(base, epochs=3 * args.epochs)
        joint, _ = run_schedule(train, TrainConfig(**base), valid, build_model(train, seed=seed, vocab=vocab))
        qg, _ = run_schedule(train, TrainConfig(**solo, stages=("qg",)), valid,
                             build_model(train, seed=seed, vocab=vocab))
        span, _ = run_schedule(train, TrainConfig(**solo, stages=("span",)), valid,
                               build_model(train, seed=seed, vocab=vocab))
        one, pipe, delta = compare_systems(test, joint, qg, span)
        rows.append((one.span_em, pipe.span_em, delta["bleu2"]))
        print(f"seed {seed}: span EM joint {one.span_em:.2f}  pipeline {pipe.span_em:.2f}  "
              f"bleu2 joint {one.bleu2:.3f}  pipeline {pipe.bleu2:.3f}")

    a = statistics.median(r[0] for r in rows)
    b = statistics.median(r[1] for r in rows)
    print(f"median span EM: joint {a:.2f}, pipeline {b:.2f}, margin {a - b:+.2f}")
    print(f"median bleu2 delta (joint - pipeline): {statistics.median(r[2] for r in rows):+.3f}")


if __name__ == "__main__":
    main()
