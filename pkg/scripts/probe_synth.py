"""Fast score-distribution probe for tuning the synthetic world.

Reports, per class under the Original-Texts ensemble (max-merged word
queries): the positive per-image score band, the top negative scores, and
the global text AP@50, without running the fold pipeline.
"""

from __future__ import annotations

import sys

import numpy as np

from instructmine.fusion import merge_results
from instructmine.index import build_index, search_exact
from instructmine.metrics import ap_at_k
from instructmine.synth import SynthConfig, synth_generate


def probe(cfg: SynthConfig):
    ds, bundle, _ = synth_generate(cfg)
    idx = build_index(list(bundle.patch_records()), seed=0)
    n_img = len(ds.images)
    for cid, cls in sorted(ds.classes.items()):
        lists = []
        for word in cls.words:
            res = search_exact(idx, bundle.texts[f"a photo of {word}"], k=n_img)
            lists.append(res.ranked)
        merged = merge_results(lists, "max", n_img)
        pos = ds.images_with_class(cid)
        pos_scores = sorted(
            (it.score for it in merged if it.item_id in pos), reverse=True
        )
        neg_scores = sorted(
            (it.score for it in merged if it.item_id not in pos), reverse=True
        )
        ap = ap_at_k(merged, pos, k=50)
        p = np.asarray(pos_scores)
        n_top = np.asarray(neg_scores[:15])
        n_above_floor = int(np.sum(np.asarray(neg_scores) > p[-1]))
        print(
            f"{cid}: AP@50={ap:.3f} pos[q5,q50,q95]="
            f"[{np.quantile(p,0.05):.3f},{np.quantile(p,0.5):.3f},{np.quantile(p,0.95):.3f}]"
            f" pos_min={p[-1]:.3f} neg_top5={np.round(n_top[:5],3).tolist()}"
            f" negs_above_pos_min={n_above_floor}"
        )


if __name__ == "__main__":
    overrides = {}
    for arg in sys.argv[1:]:
        k, v = arg.split("=")
        overrides[k] = float(v) if "." in v or "e" in v else int(v)
    cfg = SynthConfig(
        n_classes=4, images_per_class=50, dim=64, noise_sigma=0.1, seed=0, **overrides
    )
    print(cfg)
    probe(cfg)
