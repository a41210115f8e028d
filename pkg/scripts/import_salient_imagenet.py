#!/usr/bin/env python3
"""Convert Salient ImageNet crowd annotations to the annotation CSV
(class_id,class_name,feature_index,label,animacy) used by ``prompt-explainer agreement``.

    python scripts/import_salient_imagenet.py answers.csv annotations.csv \
        --class-names imagenet_class_index.json --label-column answer

Rows holding one worker answer each are reduced by majority vote; ties are
dropped with a warning. ImageNet classes 0..397 are tagged animate unless
--no-animacy is given.
"""
import argparse
import logging
import sys

from prompt_explainer.discovery import write_annotations
from prompt_explainer.salient import IMAGENET_ANIMATE, ImportConfig, convert_file, load_class_names


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("source", help="CSV with one judgement per row")
    p.add_argument("output", help="annotation CSV to write")
    p.add_argument("--class-names", help="JSON list or index->name map (Keras imagenet_class_index.json works)")
    p.add_argument("--class-column", default="class_index")
    p.add_argument("--feature-column", default="feature_index")
    p.add_argument("--label-column", default="label")
    p.add_argument("--no-animacy", action="store_true", help="tag every class 'unknown'")
    args = p.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    cfg = ImportConfig(args.class_column, args.feature_column, args.label_column,
                       load_class_names(args.class_names) if args.class_names else None,
                       None if args.no_animacy else frozenset(IMAGENET_ANIMATE))
    try:
        rows = convert_file(args.source, cfg)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 6
    write_annotations(args.output, rows)
    print(f"wrote {len(rows)} annotations to {args.output}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
