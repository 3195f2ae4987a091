"""Sweep synthetic-world constants against the desk-scale acceptance targets.

For each candidate config this reports:
  * min per-class text AP@50 under exact search on the full world (> 0.9)
  * per-class fold counts where greedy > texts > random_pairs > random_bboxes
  * greedy mAP minus random_pairs mAP (>= 0.2)
"""

from __future__ import annotations

import sys
import time

from instructmine.evaluate import EvalConfig, compare_methods
from instructmine.index import build_index, search_exact
from instructmine.metrics import ap_at_k
from instructmine.synth import SynthConfig, synth_generate


def text_ap_check(ds, bundle):
    idx = build_index(list(bundle.patch_records()), seed=0)
    aps = {}
    for cid, cls in sorted(ds.classes.items()):
        res = search_exact(idx, bundle.texts[f"a photo of {cls.name}"], k=50)
        aps[cid] = ap_at_k(res.ranked, ds.images_with_class(cid), k=50)
    return aps


def ordering_check(outcomes, ds, n_folds):
    order = ["greedy_pairs", "original_texts", "random_pairs", "random_bboxes"]
    per_class = {}
    for cid in ds.class_ids():
        ok = 0
        for fold in range(n_folds):
            aps = []
            for m in order:
                res = outcomes[m].fold_results.get((fold, cid))
                aps.append(None if res is None else res.ap)
            if all(a is not None for a in aps) and all(
                a > b for a, b in zip(aps, aps[1:])
            ):
                ok += 1
        per_class[cid] = ok
    return per_class


def evaluate_config(cfg: SynthConfig, eval_cfg: EvalConfig):
    t0 = time.time()
    ds, bundle, _ = synth_generate(cfg)
    text_aps = text_ap_check(ds, bundle)
    outcomes = compare_methods(
        ds, bundle, eval_cfg,
        methods=("greedy_pairs", "original_texts", "random_pairs", "random_bboxes"),
    )
    orderings = ordering_check(outcomes, ds, eval_cfg.n_folds)
    maps = {m: oc.report.map_score for m, oc in outcomes.items()}
    gap = maps["greedy_pairs"] - maps["random_pairs"]
    print(
        f"  text AP@50 min={min(text_aps.values()):.3f} {dict((k, round(v,3)) for k,v in text_aps.items())}"
    )
    print(f"  mAP: " + " ".join(f"{m}={v:.3f}" for m, v in maps.items()))
    print(f"  ordering folds per class (of {eval_cfg.n_folds}): {orderings}")
    print(f"  greedy - random_pairs = {gap:.3f}   [{time.time()-t0:.0f}s]")
    ok = (
        min(text_aps.values()) > 0.9
        and all(v >= 4 for v in orderings.values())
        and gap >= 0.2
    )
    print(f"  => {'PASS' if ok else 'FAIL'}")
    return ok


def main():
    eval_cfg = EvalConfig(n_folds=5, seed=0)
    candidates = {
        "A sm=1.2 ds=0.70 cf=0.12 bn=0.5": dict(
            submode_scale=1.2, distractor_strength=0.70, confuser_fraction=0.12,
            bbox_noise=0.5, text_jitter=0.05,
        ),
        "B sm=1.2 ds=0.75 cf=0.15 bn=0.5": dict(
            submode_scale=1.2, distractor_strength=0.75, confuser_fraction=0.15,
            bbox_noise=0.5, text_jitter=0.05,
        ),
        "C sm=1.0 ds=0.75 cf=0.15 bn=0.5": dict(
            submode_scale=1.0, distractor_strength=0.75, confuser_fraction=0.15,
            bbox_noise=0.5, text_jitter=0.05,
        ),
        "D sm=1.5 ds=0.65 cf=0.12 bn=0.5": dict(
            submode_scale=1.5, distractor_strength=0.65, confuser_fraction=0.12,
            bbox_noise=0.5, text_jitter=0.05,
        ),
        "E sm=1.0 ds=0.80 cf=0.10 bn=0.4": dict(
            submode_scale=1.0, distractor_strength=0.80, confuser_fraction=0.10,
            bbox_noise=0.4, text_jitter=0.05,
        ),
    }
    names = sys.argv[1:] or list(candidates)
    for name in names:
        print(f"== {name}")
        cfg = SynthConfig(
            n_classes=4, images_per_class=50, dim=64, noise_sigma=0.1, seed=0,
            **candidates[name],
        )
        evaluate_config(cfg, eval_cfg)


if __name__ == "__main__":
    main()
