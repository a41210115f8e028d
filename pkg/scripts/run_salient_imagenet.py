#!/usr/bin/env python3
"""Full-scale discovery with a latent consistency generator, an ImageNet
ResNet-50 and a grounded detector + mask model.

Needs the ``ldm`` extra, the model weights (downloaded on first use) and,
for a useful runtime, a GPU. Pass a robust checkpoint with --checkpoint to
audit a robust classifier as Salient ImageNet does.

    python scripts/run_salient_imagenet.py runs/salient --classes 1,2,3 \
        --annotations annotations.csv --checkpoint robust_resnet50.pt
"""
import argparse
import json
import sys
from pathlib import Path

from prompt_explainer.cli import main as cli


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description="full-scale core/spurious discovery")
    p.add_argument("out")
    p.add_argument("--classes", required=True, help="comma list of ImageNet class indices")
    p.add_argument("--annotations", help="annotation CSV from import_salient_imagenet.py")
    p.add_argument("--model-id", default="SimianLuo/LCM_Dreamshaper_v7")
    p.add_argument("--checkpoint", help="classifier state dict (e.g. an adversarially trained ResNet-50)")
    p.add_argument("--state-dict-key", help="nested entry of the checkpoint holding the weights")
    p.add_argument("--strip-prefix", default="", help="prefix removed from checkpoint keys")
    p.add_argument("--dtype", default="float32", choices=["float32", "float16", "bfloat16"])
    p.add_argument("--prefix", default="a photo of")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    args = p.parse_args(argv)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    classifier = {"arch": "resnet50", "weights": None if args.checkpoint else "IMAGENET1K_V2"}
    if args.checkpoint:
        from torchvision.models import ResNet50_Weights

        # the segmenter is prompted with class names, so keep the ImageNet ones
        names = out / "class_names.txt"
        names.write_text("\n".join(ResNet50_Weights.IMAGENET1K_V2.meta["categories"]) + "\n")
        classifier.update(checkpoint=args.checkpoint, class_names=str(names), strip_prefix=args.strip_prefix,
                          state_dict_key=args.state_dict_key)
    config = {
        "backend": {"id": "ldm-consistency", "model_id": args.model_id, "dtype": args.dtype,
                    "classifier": classifier},
        "segmentation": {"backend": "grounded-sam"},
    }
    cfg_path = out / "config.json"
    cfg_path.write_text(json.dumps(config, indent=2))
    code = cli(["discover", "--config", str(cfg_path), "--classes", args.classes, "--prefix", args.prefix,
                "--seed", str(args.seed), "--jobs", str(args.jobs), "--out", str(out / "discover")])
    if code or not args.annotations:
        return code
    return cli(["agreement", "--verdicts", str(out / "discover"), "--annotations", args.annotations,
                "--out", str(out / "agreement"), "--seed", str(args.seed)])


if __name__ == "__main__":
    sys.exit(main())
