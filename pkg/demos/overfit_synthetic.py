"""Memorise a small synthetic corpus, then print what the model generates.

Run with ``python demos/overfit_synthetic.py``. Takes about 15 seconds on
one core. Each stage prints its last validation record; at the end a few
documents are shown with the generated question and extracted answer.
"""

import argparse
import time

from onestop.data import record_to_example
from onestop.inference import onestop_qa
from onestop.synthetic import make_corpus
from onestop.training import TrainConfig, evaluate_loss, run_schedule


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--examples", type=int, default=50)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--joint-steps", type=int, default=300)
    ap.add_argument("--show", type=int, default=5)
    args = ap.parse_args()

    examples = [record_to_example(r) for r in make_corpus(args.examples, seed=args.seed)]
    cfg = TrainConfig(lam=0.2, batch_size=16, base_lr=1e-3, dropout=0.0, patience=100, seed=args.seed,
                      stage_epochs={"qg": 30, "span": 30, "joint": 75}, max_steps=args.joint_steps)
    t0 = time.time()
    model, reports = run_schedule(examples, cfg)
    for stage, rep in reports.items():
        last = rep.epochs[-1]
        print(f"{stage:>5}: {len(rep.steps):4d} steps, phi_total {last['phi_total']:.4f}, span EM {last['span_em']:.2f}")
    print(f"trained in {time.time() - t0:.1f}s; training-set metrics {evaluate_loss(model, examples, cfg.lam)}")

    for ex in examples[:args.show]:
        pair = onestop_qa(ex.document, model)
        print()
        print("document :", " ".join(ex.document))
        print("gold     :", " ".join(ex.question), "->", " ".join(ex.answer_tokens))
        print("generated:", " ".join(pair.question), "->", " ".join(pair.answer), f"(log score {pair.score:.3f})")


if __name__ == "__main__":
    main()
