"""Walk through one BadNets campaign end to end.

Trains an infected mlp on the synthetic 10-class task, a self-trained
reference on 30% of the clean data, scans every label, then unlearns the
flagged label and re-measures the attack success rate.

    python3 demos/detect_and_patch.py [--seed 0] [--target 7]
"""

import argparse
import time

from poisonprobe.config import parse_text, resolve
from poisonprobe.detection import DetectionConfig, detect_model
from poisonprobe.mitigation import iterate_until_clean
from poisonprobe.pipeline import (attack_spec, load_datasets, metrics, poisoned_training_set,
                                  self_trained_reference, train_suspect)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--target", type=int, default=7)
    ap.add_argument("--probes", type=int, default=10, help="probes per label (100 for the full scan)")
    args = ap.parse_args()

    cfg = resolve(parse_text(f"seed={args.seed}\ntrain.epochs=20\nmodel.architecture=mlp\n"
                             f"attack.technique=badnets\nattack.targets={args.target}\n"))
    spec = attack_spec(cfg)
    train_ds, test_ds = load_datasets(cfg)
    poisoned, idx = poisoned_training_set(cfg, train_ds)
    print(f"{len(idx)} of {len(poisoned)} training samples carry the 4x4 patch and label {args.target}")

    t0 = time.perf_counter()
    suspect = train_suspect(cfg, poisoned, "infected")
    ref = self_trained_reference(cfg, train_ds)
    m = metrics(suspect, test_ds, spec)
    print(f"trained in {time.perf_counter() - t0:.1f} s: clean accuracy {m['clean_accuracy']:.3f}, "
          f"ASR {max(m['attack_success_rate'].values()):.3f}")

    dcfg = DetectionConfig(**{**cfg.detection_config().as_dict(), "num_samples": args.probes})
    t0 = time.perf_counter()
    report = detect_model(suspect, ref, dcfg, ground_truth=[args.target])
    print(f"scan took {time.perf_counter() - t0:.1f} s")
    for v in report.verdicts:
        mark = "  <- flagged" if v.infected else ""
        print(f"  label {v.label}: Prob {v.prob:.2f}  gamma {v.gammas[0]:.2f}  lambda {v.lambdas[0]:.2f}{mark}")

    res = iterate_until_clean(suspect, ref, dcfg, cfg.mitigation_config(), train_ds,
                              cfg["mitigate.max_rounds"], cfg.train_config(), ground_truth=[args.target])
    after = metrics(res.model, test_ds, spec)
    print(f"after {res.rounds} round(s), resolved={res.resolved}: clean accuracy {after['clean_accuracy']:.3f}, "
          f"ASR {max(after['attack_success_rate'].values()):.3f}")


if __name__ == "__main__":
    main()
