"""Why mislabel poisoning slips past the probe search.

For a mislabel-poisoned mlp this prints, for the target label, where the
poisoned source-class inputs sit (suspect loss, reference loss) next to the
threshold gamma and the points the two-phase probe search actually reaches.
The natural poisoned region usually has a reference loss below gamma, and the
probes settle in adversarial-noise regions instead.

    python3 demos/mislabel_losses.py [--seed 0]
"""

import argparse

import numpy as np

from poisonprobe.autodiff import batch_losses
from poisonprobe.config import parse_text, resolve
from poisonprobe.detection import DetectionConfig, detect_label
from poisonprobe.pipeline import (adversarial_sets, attack_spec, load_datasets, poisoned_training_set,
                                  self_trained_reference, train_suspect)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()
    target = (3 * args.seed + 7) % 10
    source = (target + 3) % 10

    cfg = resolve(parse_text(f"seed={args.seed}\ntrain.epochs=20\nmodel.architecture=mlp\n"
                             f"attack.technique=mislabel\nattack.targets={target}\nattack.sources={source}\n"))
    train_ds, test_ds = load_datasets(cfg)
    poisoned, _ = poisoned_training_set(cfg, train_ds)
    suspect = train_suspect(cfg, poisoned, "infected")
    ref = self_trained_reference(cfg, train_ds)

    (_, adv), = adversarial_sets(test_ds, attack_spec(cfg)).values()
    lt, lr = batch_losses(suspect, adv.images, target), batch_losses(ref, adv.images, target)
    print(f"poisoned class {source} -> {target}: {len(adv)} test inputs")
    print(f"  suspect loss median {np.median(lt):.3f}, reference loss median {np.median(lr):.2f} "
          f"(10th-90th pct {np.percentile(lr, 10):.2f}-{np.percentile(lr, 90):.2f})")

    v = detect_label(suspect, ref, target, DetectionConfig(**{**cfg.detection_config().as_dict(), "num_samples": 20}),
                     keep_outcomes=True)
    print(f"  gamma {v.gammas[0]:.2f}, Prob {v.prob:.2f}")
    ends = np.array([(o.loss_suspect, o.loss_refs[0]) for o in v.outcomes if o.escaped])
    if len(ends):
        print(f"  probe end points: suspect loss median {np.median(ends[:, 0]):.3f}, "
              f"reference loss median {np.median(ends[:, 1]):.2f}")
        near = [float(np.min(np.abs(adv.images - o.x).reshape(len(adv), -1).max(axis=1))) for o in v.outcomes]
        print(f"  closest poisoned input to each probe (max-abs pixel distance): median {np.median(near):.2f}")


if __name__ == "__main__":
    main()
