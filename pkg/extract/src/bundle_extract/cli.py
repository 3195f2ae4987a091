"""Command-line wrapper around :func:`bundle_extract.extract.run_extract`."""

from __future__ import annotations

import argparse
import sys

from .encoders import DEFAULT_MODEL, EncoderUnavailableError
from .extract import DEFAULT_GRIDS, DEFAULT_PROMPT_TEMPLATE, ExtractJob, run_extract


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="bundle-extract",
        description="Encode grid patches, bbox crops and class prompts into an embedding bundle",
    )
    parser.add_argument("--annotations", required=True)
    parser.add_argument("--format", default="simple_json", choices=["simple_json", "coco_json"])
    parser.add_argument("--image-root", required=True)
    parser.add_argument("--out", required=True, help="bundle output path")
    parser.add_argument("--model", default=DEFAULT_MODEL,
                        help="clip-<checkpoint> or hash-<dim>")
    parser.add_argument("--grids", default=",".join(str(g) for g in DEFAULT_GRIDS),
                        help="comma-separated odd grid sizes")
    parser.add_argument("--prompt-template", default=DEFAULT_PROMPT_TEMPLATE)
    parser.add_argument("--batch-size", type=int, default=32)
    parser.add_argument("--device", default="cpu")
    args = parser.parse_args(argv)

    job = ExtractJob(
        annotations=args.annotations,
        image_root=args.image_root,
        output=args.out,
        model=args.model,
        grids=tuple(int(g) for g in args.grids.split(",")),
        prompt_template=args.prompt_template,
        batch_size=args.batch_size,
        device=args.device,
        annotation_format=args.format,
    )
    try:
        result = run_extract(job)
    except (EncoderUnavailableError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(
        f"encoded {result.n_images} images -> {result.n_patches} patches, "
        f"{result.n_bboxes} bbox crops, {result.n_texts} prompts -> {result.bundle_path}"
    )
    if result.failures:
        print(f"{len(result.failures)} unreadable image(s); bundle marked incomplete "
              f"(see {result.report_path})", file=sys.stderr)
    return 0


if __name__ == "__main__":
    sys.exit(main())
