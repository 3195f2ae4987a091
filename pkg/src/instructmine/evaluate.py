"""Held-out evaluation: per-class top-k retrieval, PR/AP, cross-fold means.

Every method (greedy selection and all baselines) is evaluated through the
same path: its per-class queries are run against a test-fold index, merged,
truncated to the top k unique images, and scored against the images that
actually contain the class. Folds are evaluated independently; per-class AP
is averaged across folds and the report carries mean PR curves on an aligned
k grid.
"""

from __future__ import annotations

import csv
import json
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import baselines as _baselines
from .dataset import (
    DEFAULT_PROMPT_TEMPLATE,
    AnnotatedDataset,
    EmbeddingBundle,
    build_candidate_pool,
    split_folds,
)
from .errors import EngineError, InvalidConfigError
from .fusion import RankedList
from .index import VectorIndex, build_index
from .metrics import PRCurve, ap_at_k, pr_curve
from .queries import Query, run_query_set
from .selection import InstructionSet, SelectionConfig, greedy_select


@dataclass(frozen=True)
class EvalConfig:
    k: int = 1000
    nprobe: int = 300
    fusion_policy: str = "sum"
    merge_mode: str = "max"
    n_folds: int = 5
    seed: int = 0
    max_pairs: int = 4
    num_clusters: int | None = None
    prompt_template: str = DEFAULT_PROMPT_TEMPLATE
    jobs: int = 1

    def as_dict(self) -> dict:
        return {
            "k": self.k,
            "nprobe": self.nprobe,
            "fusion_policy": self.fusion_policy,
            "merge_mode": self.merge_mode,
            "n_folds": self.n_folds,
            "seed": self.seed,
            "max_pairs": self.max_pairs,
            "num_clusters": self.num_clusters,
            "prompt_template": self.prompt_template,
        }


@dataclass
class FoldContext:
    """Everything a method needs to produce queries for one training fold."""

    ds: AnnotatedDataset
    bundle: EmbeddingBundle
    fold: int
    train_ids: list[str]
    test_ids: list[str]
    train_index: VectorIndex
    config: EvalConfig


# A method maps (fold context, class id) to queries, optionally with an
# artifact (e.g. the selected instruction set) for callers that save outputs.
MethodFn = Callable[[FoldContext, str], "MethodOutput"]


@dataclass
class MethodOutput:
    queries: list[Query]
    artifact: object | None = None


@dataclass
class ClassFoldResult:
    ranked: RankedList
    curve: PRCurve | None
    ap: float | None
    n_positives: int
    flag: str | None = None


@dataclass
class ClassEval:
    class_id: str
    class_name: str
    ap_folds: list[float | None]
    flags: list[str | None]
    ap_mean: float | None
    ap_std: float | None
    curve: PRCurve | None


@dataclass
class EvalReport:
    method: str
    config: dict
    per_class: dict[str, ClassEval]
    map_score: float | None

    def validate(self) -> None:
        valid = [ce.ap_mean for ce in self.per_class.values() if ce.ap_mean is not None]
        if valid:
            expected = float(np.mean(valid))
            if self.map_score is None or abs(self.map_score - expected) > 1e-12:
                raise ValueError("mAP must equal the mean of per-class AP means")
        elif self.map_score is not None:
            raise ValueError("mAP must be None when no class has a valid AP")
        for ce in self.per_class.values():
            if ce.curve is not None:
                ce.curve.validate()


def derive_seed(seed: int, fold: int, label: str = "") -> int:
    """Stable per-(seed, fold, label) RNG seed."""
    return zlib.crc32(f"{seed}:{fold}:{label}".encode("utf-8"))


def evaluate_method(
    queries_per_class: Mapping[str, Sequence[Query]],
    test_index: VectorIndex,
    ds: AnnotatedDataset,
    k: int,
    nprobe: int = 300,
    fusion_policy: str = "sum",
    merge_mode: str = "max",
) -> dict[str, ClassFoldResult]:
    """Score one method's queries against a test index, class by class.

    A class with no positive image in the test split is flagged and carries
    no AP rather than being silently dropped.
    """
    test_images = set(test_index.image_ids)
    out: dict[str, ClassFoldResult] = {}
    for class_id in sorted(queries_per_class):
        queries = list(queries_per_class[class_id])
        positives = ds.images_with_class(class_id, within=test_images)
        if not positives:
            out[class_id] = ClassFoldResult(
                ranked=RankedList(()),
                curve=None,
                ap=None,
                n_positives=0,
                flag="absent_from_test_split",
            )
            continue
        ranked = run_query_set(test_index, queries, fusion_policy, merge_mode, k, nprobe)
        out[class_id] = ClassFoldResult(
            ranked=ranked,
            curve=pr_curve(ranked, positives, k),
            ap=ap_at_k(ranked, positives, k),
            n_positives=len(positives),
        )
    return out


def _fold_index(
    bundle: EmbeddingBundle,
    image_ids: Sequence[str],
    config: EvalConfig,
    fold: int,
    side: str,
    cache: dict | None,
) -> VectorIndex:
    """Build (or fetch) the index for one side of one fold.

    The cache lets several methods evaluated on identical folds share the
    same seeded k-means build instead of redoing it.
    """
    key = (fold, side, config.num_clusters, config.seed)
    if cache is not None and key in cache:
        return cache[key]
    idx = build_index(
        bundle.patch_records(image_ids),
        num_clusters=config.num_clusters,
        seed=derive_seed(config.seed, fold, f"{side}-index"),
    )
    if cache is not None:
        cache[key] = idx
    return idx


def run_fold(
    ds: AnnotatedDataset,
    bundle: EmbeddingBundle,
    fold: int,
    method: MethodFn,
    config: EvalConfig,
    index_cache: dict | None = None,
) -> tuple[dict[str, ClassFoldResult], dict[str, object]]:
    """Train the method on one fold's training split, evaluate on its test split."""
    train_ids, test_ids = ds.fold_split(fold)
    if set(train_ids) & set(test_ids):
        raise EngineError(f"fold {fold}: train/test splits overlap")
    train_index = _fold_index(bundle, train_ids, config, fold, "train", index_cache)
    if set(k.image_id for k in train_index.keys) & set(test_ids):
        raise EngineError(f"fold {fold}: test image leaked into the train index")
    ctx = FoldContext(
        ds=ds,
        bundle=bundle,
        fold=fold,
        train_ids=train_ids,
        test_ids=test_ids,
        train_index=train_index,
        config=config,
    )
    class_ids = ds.class_ids()

    def produce(class_id: str):
        try:
            return method(ctx, class_id), None
        except EngineError as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if config.jobs > 1:
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            produced = list(pool.map(produce, class_ids))
    else:
        produced = [produce(c) for c in class_ids]

    queries_per_class: dict[str, list[Query]] = {}
    artifacts: dict[str, object] = {}
    method_flags: dict[str, str] = {}
    for class_id, (output, err) in zip(class_ids, produced):
        if err is not None:
            method_flags[class_id] = err
            continue
        queries_per_class[class_id] = output.queries
        if output.artifact is not None:
            artifacts[class_id] = output.artifact

    test_index = _fold_index(bundle, test_ids, config, fold, "test", index_cache)
    results = evaluate_method(
        queries_per_class,
        test_index,
        ds,
        k=config.k,
        nprobe=config.nprobe,
        fusion_policy=config.fusion_policy,
        merge_mode=config.merge_mode,
    )
    for class_id, msg in method_flags.items():
        results[class_id] = ClassFoldResult(
            ranked=RankedList(()), curve=None, ap=None, n_positives=0, flag=msg
        )
    return results, artifacts


@dataclass
class CrossFoldOutcome:
    report: EvalReport
    artifacts: dict[tuple[int, str], object] = field(default_factory=dict)
    fold_results: dict[tuple[int, str], ClassFoldResult] = field(default_factory=dict)


def run_cross_fold(
    ds: AnnotatedDataset,
    bundle: EmbeddingBundle,
    method: MethodFn,
    config: EvalConfig,
    method_name: str = "method",
    index_cache: dict | None = None,
) -> CrossFoldOutcome:
    """Full protocol: per fold, train the method and evaluate held-out.

    The dataset is split here if it does not already carry fold assignments.
    A failure inside a fold aborts the run and names the fold; per-class
    method errors only flag that class.
    """
    if ds.split_assignments is None:
        ds = split_folds(ds, config.n_folds, config.seed)
    n_folds = ds.n_folds()
    per_fold: list[dict[str, ClassFoldResult]] = []
    artifacts: dict[tuple[int, str], object] = {}
    for fold in range(n_folds):
        try:
            results, fold_artifacts = run_fold(
                ds, bundle, fold, method, config, index_cache
            )
        except EngineError:
            raise
        except Exception as exc:  # noqa: BLE001 - annotate fold id and re-raise
            raise EngineError(f"fold {fold} failed: {exc}") from exc
        per_fold.append(results)
        for class_id, artifact in fold_artifacts.items():
            artifacts[(fold, class_id)] = artifact

    report = aggregate_folds(ds, per_fold, config, method_name)
    fold_results = {
        (fold, cid): res
        for fold, results in enumerate(per_fold)
        for cid, res in results.items()
    }
    return CrossFoldOutcome(report=report, artifacts=artifacts, fold_results=fold_results)


def cross_fold(
    ds: AnnotatedDataset,
    bundle: EmbeddingBundle,
    method: MethodFn,
    config: EvalConfig,
    method_name: str = "method",
) -> EvalReport:
    return run_cross_fold(ds, bundle, method, config, method_name).report


def aggregate_folds(
    ds: AnnotatedDataset,
    per_fold: Sequence[Mapping[str, ClassFoldResult]],
    config: EvalConfig,
    method_name: str,
) -> EvalReport:
    """Mean/std AP per class over folds, pointwise-mean PR curves, mAP."""
    per_class: dict[str, ClassEval] = {}
    for class_id in ds.class_ids():
        aps: list[float | None] = []
        flags: list[str | None] = []
        curves: list[PRCurve] = []
        for results in per_fold:
            res = results.get(class_id)
            if res is None:
                aps.append(None)
                flags.append("not_evaluated")
                continue
            aps.append(res.ap)
            flags.append(res.flag)
            if res.curve is not None:
                curves.append(res.curve)
        valid = [a for a in aps if a is not None]
        mean_curve = None
        if curves:
            mean_curve = PRCurve(
                ks=curves[0].ks.copy(),
                precision=np.mean([c.precision for c in curves], axis=0),
                recall=np.mean([c.recall for c in curves], axis=0),
            )
        per_class[class_id] = ClassEval(
            class_id=class_id,
            class_name=ds.classes[class_id].name,
            ap_folds=aps,
            flags=flags,
            ap_mean=float(np.mean(valid)) if valid else None,
            ap_std=float(np.std(valid)) if valid else None,
            curve=mean_curve,
        )
    valid_means = [ce.ap_mean for ce in per_class.values() if ce.ap_mean is not None]
    report = EvalReport(
        method=method_name,
        config=config.as_dict(),
        per_class=per_class,
        map_score=float(np.mean(valid_means)) if valid_means else None,
    )
    report.validate()
    return report


# ---------------------------------------------------------------------------
# Method factories
# ---------------------------------------------------------------------------


def greedy_method(selection: SelectionConfig | None = None) -> MethodFn:
    """Greedy instruction-pair selection as a cross-fold method."""

    def run(ctx: FoldContext, class_id: str) -> MethodOutput:
        sel = selection or SelectionConfig(
            k=ctx.config.k,
            max_pairs=ctx.config.max_pairs,
            fusion_policy=ctx.config.fusion_policy,
            merge_mode=ctx.config.merge_mode,
            nprobe=ctx.config.nprobe,
        )
        pool = build_candidate_pool(
            ctx.ds, ctx.bundle, class_id, ctx.train_ids, ctx.config.prompt_template
        )
        positives = ctx.ds.images_with_class(class_id, within=ctx.train_ids)
        instruction_set = greedy_select(pool, ctx.train_index, positives, sel)
        queries = [p.as_query() for p in instruction_set.pairs]
        return MethodOutput(queries=queries, artifact=instruction_set)

    return run


def _n_examples(n: int | Callable[[int, str], int], ctx: FoldContext, class_id: str) -> int:
    return n(ctx.fold, class_id) if callable(n) else n


def original_texts_method() -> MethodFn:
    def run(ctx: FoldContext, class_id: str) -> MethodOutput:
        pool = build_candidate_pool(
            ctx.ds, ctx.bundle, class_id, ctx.train_ids, ctx.config.prompt_template
        )
        return MethodOutput(queries=_baselines.original_texts(pool))

    return run


def random_bboxes_method(n: int | Callable[[int, str], int]) -> MethodFn:
    def run(ctx: FoldContext, class_id: str) -> MethodOutput:
        pool = build_candidate_pool(
            ctx.ds, ctx.bundle, class_id, ctx.train_ids, ctx.config.prompt_template
        )
        count = min(_n_examples(n, ctx, class_id), len(pool.visuals))
        seed = derive_seed(ctx.config.seed, ctx.fold, f"bbox:{class_id}")
        return MethodOutput(queries=_baselines.random_bboxes(pool, count, seed))

    return run


def random_pairs_method(n: int | Callable[[int, str], int]) -> MethodFn:
    def run(ctx: FoldContext, class_id: str) -> MethodOutput:
        pool = build_candidate_pool(
            ctx.ds, ctx.bundle, class_id, ctx.train_ids, ctx.config.prompt_template
        )
        count = min(_n_examples(n, ctx, class_id), len(pool.visuals))
        seed = derive_seed(ctx.config.seed, ctx.fold, f"bbox:{class_id}")
        return MethodOutput(queries=_baselines.random_pairs(pool, count, seed))

    return run


def mean_shift_method(bandwidth: float | None = None) -> MethodFn:
    def run(ctx: FoldContext, class_id: str) -> MethodOutput:
        pool = build_candidate_pool(
            ctx.ds, ctx.bundle, class_id, ctx.train_ids, ctx.config.prompt_template
        )
        return MethodOutput(queries=_baselines.mean_shift_examples(pool, bandwidth))

    return run


def original_pairs_method(entries: list[dict]) -> MethodFn:
    def run(ctx: FoldContext, class_id: str) -> MethodOutput:
        queries = _baselines.original_pairs(
            entries, ctx.ds, ctx.bundle, class_id, ctx.config.prompt_template
        )
        if not queries:
            raise EngineError(f"no original instructions for class {class_id!r}")
        return MethodOutput(queries=queries)

    return run


def compare_methods(
    ds: AnnotatedDataset,
    bundle: EmbeddingBundle,
    config: EvalConfig,
    methods: Sequence[str] = (
        "greedy_pairs",
        "original_texts",
        "random_pairs",
        "random_bboxes",
        "mean_shift",
    ),
) -> dict[str, CrossFoldOutcome]:
    """Run several methods on identical folds, size-matching random baselines.

    The greedy method runs first; random baselines then draw exactly as many
    examples per (fold, class) as greedy selected, so the comparison is not
    confounded by instruction-set size.
    """
    if ds.split_assignments is None:
        ds = split_folds(ds, config.n_folds, config.seed)
    index_cache: dict = {}
    outcomes: dict[str, CrossFoldOutcome] = {}
    greedy_outcome = None
    if "greedy_pairs" in methods:
        greedy_outcome = run_cross_fold(
            ds, bundle, greedy_method(), config, "greedy_pairs", index_cache
        )
        outcomes["greedy_pairs"] = greedy_outcome

    def matched_n(fold: int, class_id: str) -> int:
        if greedy_outcome is None:
            return config.max_pairs
        artifact = greedy_outcome.artifacts.get((fold, class_id))
        if isinstance(artifact, InstructionSet):
            return len(artifact.pairs)
        return config.max_pairs

    factories: dict[str, Callable[[], MethodFn]] = {
        "original_texts": original_texts_method,
        "random_bboxes": lambda: random_bboxes_method(matched_n),
        "random_pairs": lambda: random_pairs_method(matched_n),
        "mean_shift": mean_shift_method,
    }
    for name in methods:
        if name == "greedy_pairs":
            continue
        if name not in factories:
            raise InvalidConfigError(f"unknown method {name!r}")
        outcomes[name] = run_cross_fold(
            ds, bundle, factories[name](), config, name, index_cache
        )
    return outcomes


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def report_to_dict(report: EvalReport) -> dict:
    doc: dict = {
        "method": report.method,
        "config": report.config,
        "map": report.map_score,
        "per_class": {},
    }
    for cid, ce in sorted(report.per_class.items()):
        entry = {
            "name": ce.class_name,
            "ap_mean": ce.ap_mean,
            "ap_std": ce.ap_std,
            "ap_folds": ce.ap_folds,
            "flags": ce.flags,
        }
        if ce.curve is not None:
            entry["pr_curve"] = {
                "k": ce.curve.ks.tolist(),
                "precision": ce.curve.precision.tolist(),
                "recall": ce.curve.recall.tolist(),
            }
        doc["per_class"][cid] = entry
    return doc


def report_from_dict(doc: Mapping) -> EvalReport:
    per_class = {}
    for cid, entry in doc["per_class"].items():
        curve = None
        if "pr_curve" in entry:
            curve = PRCurve(
                ks=np.asarray(entry["pr_curve"]["k"]),
                precision=np.asarray(entry["pr_curve"]["precision"]),
                recall=np.asarray(entry["pr_curve"]["recall"]),
            )
        per_class[cid] = ClassEval(
            class_id=cid,
            class_name=entry["name"],
            ap_folds=entry["ap_folds"],
            flags=entry["flags"],
            ap_mean=entry["ap_mean"],
            ap_std=entry["ap_std"],
            curve=curve,
        )
    return EvalReport(
        method=doc["method"],
        config=dict(doc["config"]),
        per_class=per_class,
        map_score=doc["map"],
    )


def emit_report(
    report: EvalReport,
    out_dir: str | Path,
    formats: Sequence[str] = ("json", "csv", "markdown"),
    curve_points: int = 25,
) -> list[Path]:
    """Write the report files; JSON is lossless, markdown downsamples curves."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    if "json" in formats:
        path = out_dir / "report.json"
        path.write_text(
            json.dumps(report_to_dict(report), indent=2, sort_keys=True) + "\n",
            encoding="utf-8",
        )
        written.append(path)
    if "csv" in formats:
        path = out_dir / "report.csv"
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class_id", "class_name", "fold", "ap", "flag"])
            for cid, ce in sorted(report.per_class.items()):
                for fold, (ap, flag) in enumerate(zip(ce.ap_folds, ce.flags)):
                    writer.writerow(
                        [cid, ce.class_name, fold, "" if ap is None else repr(ap), flag or ""]
                    )
        written.append(path)
    if "markdown" in formats:
        path = out_dir / "report.md"
        path.write_text(render_markdown(report, curve_points), encoding="utf-8")
        written.append(path)
    return written


def render_markdown(report: EvalReport, curve_points: int = 25) -> str:
    lines = [
        f"# Evaluation report: {report.method}",
        "",
        f"Config: `{json.dumps(report.config, sort_keys=True)}`",
        "",
        "| class | AP mean | AP std |",
        "|---|---|---|",
    ]
    for cid, ce in sorted(report.per_class.items()):
        mean = "n/a" if ce.ap_mean is None else f"{ce.ap_mean:.4f}"
        std = "n/a" if ce.ap_std is None else f"{ce.ap_std:.4f}"
        lines.append(f"| {ce.class_name} ({cid}) | {mean} | {std} |")
    map_str = "n/a" if report.map_score is None else f"{report.map_score:.4f}"
    lines.append(f"| **mAP** | **{map_str}** | |")
    lines.append("")
    lines.append("## PR points (fold-averaged, downsampled)")
    for cid, ce in sorted(report.per_class.items()):
        if ce.curve is None:
            continue
        lines.append("")
        lines.append(f"### {ce.class_name} ({cid})")
        lines.append("")
        lines.append("| k | precision | recall |")
        lines.append("|---|---|---|")
        n = len(ce.curve.ks)
        step = max(1, n // curve_points)
        idx = list(range(0, n, step))
        if idx[-1] != n - 1:
            idx.append(n - 1)
        for i in idx:
            lines.append(
                f"| {int(ce.curve.ks[i])} | {ce.curve.precision[i]:.4f} | {ce.curve.recall[i]:.4f} |"
            )
    lines.append("")
    return "\n".join(lines)


def render_comparison(reports: Sequence[EvalReport]) -> str:
    """Side-by-side per-class AP table for several methods on the same data."""
    if not reports:
        return ""
    class_ids = sorted({cid for r in reports for cid in r.per_class})
    header = "| class | " + " | ".join(r.method for r in reports) + " |"
    sep = "|---" * (len(reports) + 1) + "|"
    lines = [header, sep]
    for cid in class_ids:
        cells = []
        name = cid
        for r in reports:
            ce = r.per_class.get(cid)
            if ce is None or ce.ap_mean is None:
                cells.append("n/a")
            else:
                name = ce.class_name
                cells.append(f"{ce.ap_mean:.4f} ±{ce.ap_std:.4f}")
        lines.append(f"| {name} | " + " | ".join(cells) + " |")
    map_cells = [
        "n/a" if r.map_score is None else f"**{r.map_score:.4f}**" for r in reports
    ]
    lines.append("| **mAP** | " + " | ".join(map_cells) + " |")
    return "\n".join(lines) + "\n"
