"""Command-line pipeline: synth-gen, build-index, select-pairs, baseline,
evaluate.

Every run writes a manifest with its resolved configuration; every output
file embeds the semantic parts of that configuration (never paths or
timestamps), so a run is reproducible from its outputs and two runs with one
seed produce byte-identical reports.

Option precedence: command-line flags > config file (``key = value`` lines,
``#`` comments) > built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

from . import baselines as baselines_mod
from . import dataset as dataset_mod
from . import evaluate as evaluate_mod
from . import index as index_mod
from . import synth as synth_mod
from .errors import EngineError
from .fusion import RankedList
from .queries import ALL_POLICIES, MERGE_MODES, Query
from .selection import InstructionSet

BASELINE_KINDS = ("original-texts", "original-pairs", "random-bboxes", "random-pairs", "mean-shift")


def read_config_file(path: str | Path) -> dict[str, str]:
    """Parse the simple ``key = value`` config format."""
    out: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise EngineError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _resolve(args: argparse.Namespace, names: list[str]) -> None:
    """Fill None-valued options from the config file, keeping flag precedence."""
    file_cfg = read_config_file(args.config) if getattr(args, "config", None) else {}
    for name in names:
        if getattr(args, name, None) is None and name in file_cfg:
            setattr(args, name, file_cfg[name])


def _write_json(path: Path, doc: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _load_world(annotations: str, embeddings: str, fmt: str):
    ds = dataset_mod.load_annotations(annotations, fmt)
    bundle = dataset_mod.load_embeddings(embeddings)
    dataset_mod.validate_bundle(bundle, ds)
    return ds, bundle


def _eval_config(args, jobs_default: int = 1) -> evaluate_mod.EvalConfig:
    return evaluate_mod.EvalConfig(
        k=int(args.k),
        nprobe=int(args.nprobe),
        fusion_policy=args.fusion,
        merge_mode=args.merge,
        n_folds=int(args.n_folds),
        seed=int(args.seed),
        max_pairs=int(args.max_pairs),
        jobs=int(args.jobs) if args.jobs is not None else jobs_default,
    )


def _pair_row(ds, pair_or_query, trace_value=None) -> dict:
    p = pair_or_query
    bbox = ds.bboxes.get(p.bbox_id) if p.bbox_id else None
    row = {
        "word": p.word,
        "prompt": p.prompt,
        "image_id": p.image_id,
        "bbox_id": p.bbox_id,
        "bbox_xywh": list(bbox.xywh) if bbox is not None else None,
    }
    if trace_value is not None:
        row["train_auc_after"] = trace_value
    return row


def write_fold_instructions(
    out_dir: Path,
    method: str,
    fold: int,
    config: evaluate_mod.EvalConfig,
    classes: list[dict],
) -> Path:
    doc = {
        "schema": "instruction-run/v1",
        "method": method,
        "fold": fold,
        "config": config.as_dict(),
        "classes": classes,
    }
    path = out_dir / f"pairs_fold{fold}.json"
    _write_json(path, doc)
    return path


def cmd_synth_gen(args) -> int:
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    overrides = {}
    if args.mode_b:
        cfg = synth_mod.mode_b_config(
            n_classes=int(args.n_classes),
            images_per_class=int(args.images_per_class),
            dim=int(args.dim),
            noise_sigma=float(args.noise_sigma),
            seed=int(args.seed),
        )
    else:
        cfg = synth_mod.SynthConfig(
            n_classes=int(args.n_classes),
            images_per_class=int(args.images_per_class),
            dim=int(args.dim),
            noise_sigma=float(args.noise_sigma),
            seed=int(args.seed),
        )
    ds, bundle, centers = synth_mod.synth_generate(cfg)
    dataset_mod.save_annotations(ds, out_dir / "annotations.json")
    dataset_mod.save_embeddings(bundle, out_dir / "embeddings.bin")
    _write_json(
        out_dir / "centers.json",
        {cid: [float(x) for x in vec] for cid, vec in centers.items()},
    )
    _write_json(
        out_dir / "manifest.json",
        {"command": "synth-gen", "config": asdict(cfg), "outputs": [
            "annotations.json", "embeddings.bin", "centers.json"]},
    )
    print(f"config: {json.dumps(asdict(cfg), sort_keys=True)}")
    print(
        f"synthetic world: {len(ds.images)} images, {len(ds.classes)} classes, "
        f"{len(bundle.patches)} patch embeddings, dim {bundle.dim}"
    )
    return 0


def cmd_build_index(args) -> int:
    ds, bundle = _load_world(args.annotations, args.embeddings, args.format)
    records = list(bundle.patch_records())
    num_clusters = int(args.num_clusters) if args.num_clusters is not None else None
    idx = index_mod.build_index(records, num_clusters=num_clusters, seed=int(args.seed))
    index_mod.persist(idx, args.out)
    print(f"config: {json.dumps(idx.config, sort_keys=True)}")
    print(
        f"index: {idx.num_records} records over {idx.num_images} images, "
        f"{idx.num_clusters} clusters, dim {idx.dim} -> {args.out}"
    )
    return 0


def cmd_select_pairs(args) -> int:
    ds, bundle = _load_world(args.annotations, args.embeddings, args.format)
    config = _eval_config(args, jobs_default=os.cpu_count() or 1)
    ds = dataset_mod.split_folds(ds, config.n_folds, config.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    print(f"config: {json.dumps(config.as_dict(), sort_keys=True)}")
    index_cache: dict = {}
    outputs = []
    error_count = 0
    for fold in range(config.n_folds):
        results, artifacts = evaluate_mod.run_fold(
            ds, bundle, fold, evaluate_mod.greedy_method(), config, index_cache
        )
        classes = []
        for class_id in ds.class_ids():
            entry: dict = {"class_id": class_id, "class_name": ds.classes[class_id].name}
            artifact = artifacts.get(class_id)
            if isinstance(artifact, InstructionSet):
                entry["pairs"] = [
                    _pair_row(ds, p, t) for p, t in zip(artifact.pairs, artifact.auc_trace)
                ]
                entry["auc_trace"] = artifact.auc_trace
                entry["error"] = None
            else:
                res = results.get(class_id)
                entry["pairs"] = []
                entry["auc_trace"] = []
                entry["error"] = res.flag if res is not None else "unknown"
                error_count += 1
            classes.append(entry)
        outputs.append(
            str(write_fold_instructions(out_dir, "greedy_pairs", fold, config, classes).name)
        )
        print(f"fold {fold}: wrote {outputs[-1]}")
    _write_json(
        out_dir / "manifest.json",
        {"command": "select-pairs", "method": "greedy_pairs",
         "config": config.as_dict(), "outputs": outputs},
    )
    if error_count:
        print(f"{error_count} class/fold combinations failed; see per-class errors")
    return 0


def cmd_baseline(args) -> int:
    ds, bundle = _load_world(args.annotations, args.embeddings, args.format)
    config = _eval_config(args)
    ds = dataset_mod.split_folds(ds, config.n_folds, config.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kind = args.kind
    method_name = kind.replace("-", "_")
    print(f"config: {json.dumps(config.as_dict(), sort_keys=True)}")

    n_examples: int | None = int(args.n_examples) if args.n_examples is not None else None
    match_counts: dict[tuple[int, str], int] = {}
    if args.match_dir is not None:
        for fold in range(config.n_folds):
            doc = json.loads((Path(args.match_dir) / f"pairs_fold{fold}.json").read_text())
            for cls in doc["classes"]:
                match_counts[(fold, cls["class_id"])] = max(1, len(cls.get("pairs", [])))

    def n_for(fold: int, class_id: str) -> int:
        if match_counts:
            return match_counts.get((fold, class_id), config.max_pairs)
        return n_examples if n_examples is not None else config.max_pairs

    entries = None
    if kind == "original-pairs":
        if not args.instructions_file:
            raise EngineError("original-pairs requires --instructions-file")
        entries = baselines_mod.load_instruction_entries(args.instructions_file)

    outputs = []
    error_count = 0
    for fold in range(config.n_folds):
        train_ids, _ = ds.fold_split(fold)
        classes = []
        for class_id in ds.class_ids():
            entry: dict = {"class_id": class_id, "class_name": ds.classes[class_id].name}
            try:
                bandwidth = float(args.bandwidth) if args.bandwidth is not None else None
                queries = _baseline_queries(
                    kind, ds, bundle, class_id, train_ids, config, fold, n_for,
                    entries, bandwidth,
                )
                entry["pairs"] = [_pair_row(ds, q) for q in queries]
                entry["error"] = None
            except EngineError as exc:
                entry["pairs"] = []
                entry["error"] = f"{type(exc).__name__}: {exc}"
                error_count += 1
            classes.append(entry)
        outputs.append(
            str(write_fold_instructions(out_dir, method_name, fold, config, classes).name)
        )
    _write_json(
        out_dir / "manifest.json",
        {"command": "baseline", "method": method_name,
         "config": config.as_dict(), "outputs": outputs},
    )
    print(f"baseline {kind}: wrote {len(outputs)} fold files to {out_dir}")
    if error_count:
        print(f"{error_count} class/fold combinations failed; see per-class errors")
    return 0


def _baseline_queries(kind, ds, bundle, class_id, train_ids, config, fold, n_for, entries, bandwidth=None):
    if kind == "original-pairs":
        queries = baselines_mod.original_pairs(
            entries, ds, bundle, class_id, config.prompt_template
        )
        if not queries:
            raise EngineError(f"no original instructions for class {class_id!r}")
        return queries
    pool = dataset_mod.build_candidate_pool(
        ds, bundle, class_id, train_ids, config.prompt_template
    )
    if kind == "original-texts":
        return baselines_mod.original_texts(pool)
    if kind == "mean-shift":
        return baselines_mod.mean_shift_examples(pool, bandwidth)
    n = min(n_for(fold, class_id), len(pool.visuals))
    seed = evaluate_mod.derive_seed(config.seed, fold, f"bbox:{class_id}")
    if kind == "random-bboxes":
        return baselines_mod.random_bboxes(pool, n, seed)
    return baselines_mod.random_pairs(pool, n, seed)


def queries_from_rows(
    rows: list[dict],
    ds,
    bundle,
    prompt_template: str,
    mask: str | None,
) -> list[Query]:
    """Instruction rows -> queries, applying the optional modality mask."""
    queries = []
    for row in rows:
        word = row.get("word")
        text_vec = None
        prompt = row.get("prompt")
        if word is not None and mask != "bboxes":
            prompt = prompt or prompt_template.format(word)
            if prompt not in bundle.texts:
                raise EngineError(f"no text embedding for prompt {prompt!r}")
            text_vec = bundle.texts[prompt]
        visual_vec = None
        bbox_id = row.get("bbox_id")
        if bbox_id is not None and mask != "texts":
            if bbox_id not in bundle.bboxes:
                raise EngineError(f"no bbox embedding for {bbox_id!r}")
            visual_vec = bundle.bboxes[bbox_id]
        if text_vec is None and visual_vec is None:
            continue
        queries.append(
            Query(
                text=text_vec,
                visual=visual_vec,
                word=word,
                prompt=prompt,
                image_id=row.get("image_id"),
                bbox_id=bbox_id,
            )
        )
    return queries


def cmd_evaluate(args) -> int:
    ds, bundle = _load_world(args.annotations, args.embeddings, args.format)
    run_dir = Path(args.run_dir)
    manifest = json.loads((run_dir / "manifest.json").read_text(encoding="utf-8"))
    run_config = manifest["config"]
    config = evaluate_mod.EvalConfig(
        k=int(args.k) if args.k is not None else int(run_config["k"]),
        nprobe=int(args.nprobe) if args.nprobe is not None else int(run_config["nprobe"]),
        fusion_policy=args.fusion or run_config["fusion_policy"],
        merge_mode=args.merge or run_config["merge_mode"],
        n_folds=int(run_config["n_folds"]),
        seed=int(run_config["seed"]),
        max_pairs=int(run_config["max_pairs"]),
    )
    mask = "texts" if args.texts_only else ("bboxes" if args.bboxes_only else None)
    ds = dataset_mod.split_folds(ds, config.n_folds, config.seed)

    per_fold = []
    for fold in range(config.n_folds):
        doc = json.loads((run_dir / f"pairs_fold{fold}.json").read_text(encoding="utf-8"))
        queries_per_class = {}
        method_flags = {}
        for cls in doc["classes"]:
            cid = cls["class_id"]
            if cls.get("error"):
                method_flags[cid] = cls["error"]
                continue
            queries = queries_from_rows(
                cls["pairs"], ds, bundle, config.prompt_template, mask
            )
            if queries:
                queries_per_class[cid] = queries
            else:
                method_flags[cid] = "no_usable_queries_after_mask"
        _, test_ids = ds.fold_split(fold)
        test_index = index_mod.build_index(
            bundle.patch_records(test_ids),
            num_clusters=config.num_clusters,
            seed=evaluate_mod.derive_seed(config.seed, fold, "test-index"),
        )
        results = evaluate_mod.evaluate_method(
            queries_per_class, test_index, ds,
            k=config.k, nprobe=config.nprobe,
            fusion_policy=config.fusion_policy, merge_mode=config.merge_mode,
        )
        for cid, msg in method_flags.items():
            results[cid] = evaluate_mod.ClassFoldResult(
                ranked=RankedList(()), curve=None, ap=None, n_positives=0, flag=msg
            )
        per_fold.append(results)
        print(f"fold {fold}: evaluated {len(results)} classes")

    method = manifest.get("method", "unknown")
    if mask:
        method = f"{method}[{mask}-only]"
    report = evaluate_mod.aggregate_folds(ds, per_fold, config, method)
    written = evaluate_mod.emit_report(report, args.out_dir, formats=tuple(args.formats))
    _write_json(
        Path(args.out_dir) / "manifest.json",
        {"command": "evaluate", "method": method, "mask": mask,
         "config": config.as_dict(), "outputs": [p.name for p in written]},
    )
    print(f"config: {json.dumps(config.as_dict(), sort_keys=True)}")
    map_str = "n/a" if report.map_score is None else f"{report.map_score:.4f}"
    print(f"mAP = {map_str}; wrote {', '.join(p.name for p in written)}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="instructmine",
        description="Mine and evaluate multimodal labeling-instruction pairs",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--annotations", required=True)
        p.add_argument("--embeddings", required=True)
        p.add_argument("--format", default="simple_json", choices=["simple_json", "coco_json"])

    def add_run_options(p):
        # defaults stay None here so a config file can fill them; the real
        # defaults are applied in main() after merging
        p.add_argument("--k", default=None, help="retrieval depth (default 1000)")
        p.add_argument("--nprobe", default=None, help="clusters probed per query (default 300)")
        p.add_argument("--fusion", default=None, choices=list(ALL_POLICIES))
        p.add_argument("--merge", default=None, choices=list(MERGE_MODES))
        p.add_argument("--n-folds", default=None, help="default 5")
        p.add_argument("--seed", default=None, help="default 0")
        p.add_argument("--max-pairs", default=None, help="default 4")
        p.add_argument("--jobs", default=None, help="default: available cores")

    p = sub.add_parser("synth-gen", help="generate a synthetic annotated world")
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-classes", default=None)
    p.add_argument("--images-per-class", default=None)
    p.add_argument("--dim", default=None)
    p.add_argument("--noise-sigma", default=None)
    p.add_argument("--seed", default=None)
    p.add_argument("--mode-b", action="store_true",
                   help="ambiguous texts, clean crops")
    p.set_defaults(fn=cmd_synth_gen)

    p = sub.add_parser("build-index", help="build and persist a patch index")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--num-clusters", default=None)
    p.add_argument("--seed", default=0)
    p.set_defaults(fn=cmd_build_index)

    p = sub.add_parser("select-pairs", help="greedy instruction-pair mining per fold")
    add_common(p)
    p.add_argument("--out-dir", required=True)
    add_run_options(p)
    p.set_defaults(fn=cmd_select_pairs)

    p = sub.add_parser("baseline", help="produce baseline instruction sets per fold")
    add_common(p)
    p.add_argument("--kind", required=True, choices=list(BASELINE_KINDS))
    p.add_argument("--out-dir", required=True)
    p.add_argument("--n-examples", default=None)
    p.add_argument("--match-dir", default=None,
                   help="select-pairs output dir to size-match against")
    p.add_argument("--instructions-file", default=None,
                   help="original instruction file for --kind original-pairs")
    p.add_argument("--bandwidth", default=None, help="mean-shift bandwidth override")
    add_run_options(p)
    p.set_defaults(fn=cmd_baseline)

    p = sub.add_parser("evaluate", help="held-out evaluation of an instruction run")
    add_common(p)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--k", default=None)
    p.add_argument("--nprobe", default=None)
    p.add_argument("--fusion", default=None, choices=list(ALL_POLICIES))
    p.add_argument("--merge", default=None, choices=list(MERGE_MODES))
    p.add_argument("--formats", nargs="+", default=["json", "csv", "markdown"],
                   choices=["json", "csv", "markdown"])
    group = p.add_mutually_exclusive_group()
    group.add_argument("--texts-only", action="store_true")
    group.add_argument("--bboxes-only", action="store_true")
    p.set_defaults(fn=cmd_evaluate)

    return parser


RUN_DEFAULTS = {
    "k": 1000, "nprobe": 300, "fusion": "sum", "merge": "max",
    "n_folds": 5, "seed": 0, "max_pairs": 4,
}
SYNTH_DEFAULTS = {
    "n_classes": 4, "images_per_class": 50, "dim": 64, "noise_sigma": 0.1, "seed": 0,
}


def _fill_defaults(args: argparse.Namespace) -> None:
    if args.command == "synth-gen":
        defaults = SYNTH_DEFAULTS
    elif args.command in ("select-pairs", "baseline"):
        defaults = RUN_DEFAULTS
    else:
        # build-index carries its own defaults; evaluate inherits unset
        # options from the run manifest instead
        return
    for key, value in defaults.items():
        if getattr(args, key, None) is None and hasattr(args, key):
            setattr(args, key, value)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "config", None):
        _resolve(args, [k for k in vars(args) if k not in ("fn", "command", "config")])
    _fill_defaults(args)
    try:
        return args.fn(args)
    except EngineError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
