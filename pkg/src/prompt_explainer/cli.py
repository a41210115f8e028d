"""Command-line entry point: ``prompt-explainer <subcommand> ...``.

Exit codes are listed in ``docs/cli.md``; on failure a single JSON object
``{"error": <name>, "exit_code": <n>, "message": <text>}`` goes to stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import shutil
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from . import __version__
from .discovery import (DiscoveryConfig, FeatureAudit, agreement, audit_feature, rank_features,
                        read_annotations)
from .hard_prompt import GumbelConfig, optimize_hard
from .pipeline import (BackendUnavailable, ClassTarget, FeatureTarget, PromptTemplate,
                       UnknownTokenError, load_backend)
from .runs import (SchemaViolation, load_report, load_run, prepare_run_dir, rel, timestamped,
                   write_json, write_mask, write_record, write_report, write_sample_set)
from .sampler import sample, score
from .segmentation import SegmentationConfig, SegmentationError, load_segmenter
from .soft_prompt import (AllRestartsDiverged, Objective, OptimizerConfig, class_ce, combined,
                          feature_max, optimize)

log = logging.getLogger("prompt_explainer")

EXIT_CODES = {
    "ok": 0,
    "internal": 1,
    "usage": 2,
    "invalid-argument": 3,
    "backend-unavailable": 4,
    "schema-violation": 5,
    "input-error": 6,
    "diverged": 7,
    "segmentation-failed": 8,
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind
        self.code = EXIT_CODES[kind]


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # noqa: D401 - argparse hook
        raise CliError("usage", f"{self.prog}: {message}")


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def _load_config(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise CliError("input-error", f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CliError("invalid-argument", f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(cfg, dict):
        raise CliError("invalid-argument", "config file must hold a JSON object")
    unknown = set(cfg) - {"backend", "optimizer", "gumbel", "discovery", "segmentation"}
    if unknown:
        raise CliError("invalid-argument", f"unknown config sections: {sorted(unknown)}")
    return cfg


def _dataclass_from(cls, data: dict, **overrides):
    names = {f.name for f in fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise CliError("invalid-argument", f"unknown {cls.__name__} keys: {sorted(unknown)}")
    merged = {**data, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return cls(**merged)
    except (TypeError, ValueError) as exc:
        raise CliError("invalid-argument", f"{cls.__name__}: {exc}") from None


def _resolve_seed(seed: int | None) -> int:
    if seed is not None:
        if seed < 0:
            raise CliError("invalid-argument", "--seed must be non-negative")
        return seed
    drawn = int(np.random.SeedSequence().entropy % (2 ** 32))
    log.info("no --seed given; drew %d from system entropy", drawn)
    return drawn


def _backend(args, cfg: dict):
    bcfg = dict(cfg.get("backend", {}))
    name = args.backend or bcfg.pop("id", None) or "toy"
    bcfg.pop("id", None)
    try:
        gen, probe = load_backend(name, bcfg)
    except BackendUnavailable as exc:
        raise CliError("backend-unavailable", str(exc)) from None
    return name, bcfg, gen, probe


def _template(prefix: str | None, n: int = 1) -> PromptTemplate:
    return PromptTemplate.with_prefix(prefix or "", n)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _objective(args) -> Objective:
    if args.command == "optimize-class":
        return class_ce(args.cls)
    if args.command == "optimize-feature":
        if args.cls is None:
            return feature_max(args.feature)
        return combined(args.cls, args.feature, 1.0 if args.lam is None else args.lam)
    # optimize-hard
    if args.feature is None:
        if args.cls is None:
            raise CliError("invalid-argument", "optimize-hard needs --class and/or --feature")
        return class_ce(args.cls)
    if args.cls is None:
        return feature_max(args.feature)
    return combined(args.cls, args.feature, 1.0 if args.lam is None else args.lam)


def cmd_optimize(args, cfg: dict, seed: int) -> dict:
    name, bcfg, gen, probe = _backend(args, cfg)
    opt = _dataclass_from(OptimizerConfig, cfg.get("optimizer", {}), seed=seed, steps=args.steps,
                          restarts=args.restarts)
    objective = _objective(args)
    try:
        objective.validate(probe)
    except ValueError as exc:
        raise CliError("invalid-argument", str(exc)) from None
    template = _template(args.prefix, args.tokens)
    out = prepare_run_dir(args.out)
    resolved = {"command": args.command, "seed": seed, "backend": {"id": name, **bcfg},
                "optimizer": asdict(opt), "prefix": args.prefix or "", "tokens": args.tokens}
    if args.command == "optimize-hard":
        gumbel = _dataclass_from(GumbelConfig, cfg.get("gumbel", {}), seed=seed)
        resolved["gumbel"] = asdict(gumbel)
        record, text = optimize_hard(template, objective, gen, probe, opt, gumbel)
        print(text)
    else:
        record = optimize(template, objective, gen, probe, opt)
    write_json(out / "config.json", resolved)
    entry = write_record(record, out, out, "run")
    report = {"command": args.command, "seed": seed, "backend": {"id": name, "config": bcfg},
              "artifacts": {"config": "config.json"}, "runs": [entry]}
    if args.samples:
        targets = _targets(objective)
        samples = sample(record, gen, args.samples, args.seed_base, probe=probe)
        report["samples"] = [write_sample_set(samples, out / "samples", out, "run", args.seed_base, targets,
                                              score(samples, probe, targets))]
    write_report(out, report)
    return {"out": str(out), "heldout_loss": record.heldout_loss, "text": record.text}


def _targets(objective: Objective):
    t = []
    if objective.cls is not None:
        t.append(ClassTarget(objective.cls))
    if objective.feature is not None:
        t.append(FeatureTarget(objective.feature))
    return t


def _run_entry(run_dir: Path) -> tuple[dict, dict]:
    try:
        report = load_report(run_dir)
    except FileNotFoundError:
        raise CliError("input-error", f"no report.json in {run_dir}") from None
    runs = report.get("runs", [])
    if not runs:
        raise CliError("input-error", f"{run_dir} holds no optimization run")
    return report, runs[0]


def cmd_sample(args, cfg: dict, seed: int) -> dict:
    run_dir = Path(args.run)
    src_report, entry = _run_entry(run_dir)
    src_cfg = json.loads((run_dir / "config.json").read_text()) if (run_dir / "config.json").exists() else {}
    if not cfg.get("backend") and not args.backend:
        cfg = {**cfg, "backend": dict(src_cfg.get("backend", {"id": src_report["backend"]["id"]}))}
    name, bcfg, gen, probe = _backend(args, cfg)
    run_json, emb = load_run(run_dir / Path(entry["artifacts"]["embeddings"]).parent)
    steps = run_json["optimizer"].get("inference_steps", 4)
    obj = run_json["objective"]
    targets = []
    if obj.get("class") is not None:
        targets.append(ClassTarget(obj["class"]))
    if obj.get("feature") is not None:
        targets.append(FeatureTarget(obj["feature"]))
    seed_base = args.seed_base if args.seed_base is not None else seed
    try:
        samples = sample(emb, gen, args.n, seed_base, probe=probe, steps=steps)
    except ValueError as exc:
        raise CliError("invalid-argument", str(exc)) from None
    out = prepare_run_dir(args.out)
    write_json(out / "config.json", {"command": "sample", "seed": seed, "seed_base": seed_base, "n": args.n,
                                     "source": entry["name"], "backend": {"id": name, **bcfg},
                                     "inference_steps": steps})
    sset = write_sample_set(samples, out / "samples", out, "samples", seed_base, targets,
                            score(samples, probe, targets))
    write_report(out, {"command": "sample", "seed": seed, "backend": {"id": name, "config": bcfg},
                       "artifacts": {"config": "config.json"}, "samples": [sset]})
    return {"out": str(out), "n": args.n}


def _parse_classes(text: str, n_classes: int) -> list[int]:
    if text == "all":
        return list(range(n_classes))
    try:
        out = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError("invalid-argument", f"--classes must be 'all' or a comma list, got {text!r}") from None
    bad = [c for c in out if not 0 <= c < n_classes]
    if bad or not out:
        raise CliError("invalid-argument", f"class indices out of range 0..{n_classes - 1}: {bad}")
    return out


def cmd_discover(args, cfg: dict, seed: int) -> dict:
    name, bcfg, gen, probe = _backend(args, cfg)
    opt = _dataclass_from(OptimizerConfig, cfg.get("optimizer", {}), seed=seed, steps=args.steps,
                          restarts=args.restarts)
    dcfg_raw = dict(cfg.get("discovery", {}))
    dcfg_raw.pop("optimizer", None)
    dcfg = _dataclass_from(DiscoveryConfig, dcfg_raw, delta=args.delta, lam=args.lam, n_samples=args.samples,
                           prefix=args.prefix, k=args.k, optimizer=opt)
    scfg = _dataclass_from(SegmentationConfig, cfg.get("segmentation", {}), backend=args.segmenter)
    try:
        segmenter = load_segmenter(scfg)
    except BackendUnavailable as exc:
        raise CliError("backend-unavailable", str(exc)) from None
    classes = _parse_classes(args.classes, probe.n_classes)
    jobs = []
    methods = set()
    for c in classes:
        images = gen.probe_images(c) if getattr(gen, "probe_images", None) else None
        ranking = rank_features(probe, c, dcfg.k, images)
        methods.add(ranking.method)
        jobs += [(c, j, i, s) for i, (j, s) in enumerate(zip(ranking.indices, ranking.scores))]

    def run(job):
        c, j, i, s = job
        return audit_feature(c, j, gen, probe, segmenter, dcfg, rank=i, importance=s)

    try:
        if args.jobs > 1:
            with ThreadPoolExecutor(max_workers=args.jobs) as pool:
                audits = list(pool.map(run, jobs))
        else:
            audits = [run(j) for j in jobs]
    except SegmentationError as exc:
        raise CliError("segmentation-failed", str(exc)) from None

    out = prepare_run_dir(args.out)
    write_json(out / "config.json", {"command": "discover", "seed": seed, "backend": {"id": name, **bcfg},
                                     "classes": classes, "discovery": asdict(dcfg), "segmentation": asdict(scfg)})
    entries = [_write_audit(a, out) for a in audits]
    _write_verdicts(out / "verdicts.csv", audits)
    report = {"command": "discover", "seed": seed, "backend": {"id": name, "config": bcfg},
              "artifacts": {"config": "config.json", "verdicts": "verdicts.csv"},
              "discovery": {"delta": dcfg.delta, "n_samples": dcfg.n_samples, "lambda": dcfg.lam, "k": dcfg.k,
                            "prefix": dcfg.prefix, "ranking_method": ",".join(sorted(methods)),
                            "audits": entries}}
    write_report(out, report)
    for a in audits:
        print(f"class {a.cls} ({a.class_name}) feature {a.feature}: {a.verdict} (mean r {a.mean_r:.4f})")
    return {"out": str(out), "verdicts": {f"{a.cls}:{a.feature}": a.verdict for a in audits}}


def _write_audit(a: FeatureAudit, root: Path) -> dict:
    d = root / "features" / f"c{a.cls}_f{a.feature}"
    arts = {}
    if a.record is not None:
        entry = write_record(a.record, d, root, f"c{a.cls}_f{a.feature}")
        arts.update(entry["artifacts"])
    if a.samples is not None:
        s = write_sample_set(a.samples, d / "samples", root, "samples", a.seeds[0] if a.seeds else 0)
        arts["manifest"] = s["artifacts"]["manifest"]
        arts["images"] = s["artifacts"]["images"]
        (d / "masks").mkdir(parents=True, exist_ok=True)
        paths = []
        for seed, m in zip(a.seeds, a.masks):
            p = d / "masks" / f"mask_{seed:08d}.png"
            write_mask(p, m.mask)
            paths.append(rel(p, root))
        arts["masks"] = paths
    j = a.to_json()
    return {"class": j["cls"], "class_name": j["class_name"], "feature": j["feature"], "rank": j["rank"],
            "importance": j["importance"], "r_samples": j["r_samples"], "mean_r": j["mean_r"],
            "delta": j["delta"], "verdict": j["verdict"], "seeds": j["seeds"], "heldout_loss": j["heldout_loss"],
            "error": j["error"], "artifacts": arts}


VERDICT_FIELDS = ("class_id", "class_name", "feature_index", "verdict", "mean_r", "delta")


def _write_verdicts(path: Path, audits) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(VERDICT_FIELDS)
        for a in audits:
            w.writerow([a.cls, a.class_name, a.feature, a.verdict, repr(a.mean_r), repr(a.delta)])


def read_verdicts(path: str | Path) -> dict[tuple[int, int], str]:
    """Verdicts from a discover run directory, its report.json or verdicts.csv."""
    path = Path(path)
    if path.is_dir():
        path = path / "report.json"
    if not path.exists():
        raise CliError("input-error", f"verdict source not found: {path}")
    if path.suffix == ".json":
        report = load_report(path)
        if "discovery" not in report:
            raise CliError("input-error", f"{path} is not a discover report")
        return {(a["class"], a["feature"]): a["verdict"] for a in report["discovery"]["audits"]}
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    try:
        return {(int(r["class_id"]), int(r["feature_index"])): r["verdict"].strip().lower() for r in rows}
    except (KeyError, ValueError) as exc:
        raise CliError("input-error", f"malformed verdict file {path}: {exc}") from None


def cmd_agreement(args, cfg: dict, seed: int) -> dict:
    verdicts = read_verdicts(args.verdicts)
    try:
        annotations = read_annotations(args.annotations)
    except FileNotFoundError:
        raise CliError("input-error", f"annotation file not found: {args.annotations}") from None
    except (KeyError, ValueError) as exc:
        raise CliError("input-error", f"bad annotation file: {exc}") from None
    result = agreement(verdicts, annotations).to_json()
    print(json.dumps(result, sort_keys=True))
    if args.out:
        out = prepare_run_dir(args.out)
        shutil.copyfile(args.annotations, out / "annotations.csv")
        with open(out / "verdicts.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class_id", "feature_index", "verdict"])
            for (c, j), v in sorted(verdicts.items()):
                w.writerow([c, j, v])
        write_json(out / "config.json", {"command": "agreement", "seed": seed})
        write_report(out, {"command": "agreement", "seed": seed, "backend": {"id": "none"},
                           "artifacts": {"config": "config.json", "annotations": "annotations.csv",
                                         "verdicts": "verdicts.csv"},
                           "agreement": result})
    return result


def cmd_report(args, cfg: dict, seed: int) -> dict:
    from .gallery import render_gallery

    run_dir = Path(args.run)
    if not (run_dir / "report.json").exists():
        raise CliError("input-error", f"no report.json in {run_dir}")
    page = render_gallery(run_dir)
    target = Path(args.output) if args.output else timestamped(run_dir / "gallery.html")
    target.write_text(page)
    print(target)
    return {"gallery": str(target)}


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="prompt-explainer", description="Explain image classifiers by optimizing generator prompts.")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, out_required=True):
        sp.add_argument("--backend", help="backend id (default: toy, or the config file's backend.id)")
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--seed", type=int, help="run seed; drawn from entropy and recorded when omitted")
        sp.add_argument("--out", required=out_required, help="output run directory")
        sp.add_argument("--jobs", type=int, default=1, help="max concurrent jobs")

    def optim(sp):
        sp.add_argument("--prefix", default="", help='fixed words before the learnable token, e.g. "the shape of"')
        sp.add_argument("--tokens", type=int, default=1, help="number of learnable tokens")
        sp.add_argument("--steps", type=int)
        sp.add_argument("--restarts", type=int)
        sp.add_argument("--samples", type=int, default=0, help="also draw this many samples")
        sp.add_argument("--seed-base", type=int, default=0)

    sp = sub.add_parser("optimize-class", help="maximize a class output")
    common(sp)
    optim(sp)
    sp.add_argument("--class", dest="cls", type=int, required=True)

    sp = sub.add_parser("optimize-feature", help="maximize a hidden feature (optionally combined with a class)")
    common(sp)
    optim(sp)
    sp.add_argument("--feature", type=int, required=True)
    sp.add_argument("--class", dest="cls", type=int)
    sp.add_argument("--lambda", dest="lam", type=float)

    sp = sub.add_parser("optimize-hard", help="search for a vocabulary word")
    common(sp)
    optim(sp)
    sp.add_argument("--class", dest="cls", type=int)
    sp.add_argument("--feature", type=int)
    sp.add_argument("--lambda", dest="lam", type=float)

    sp = sub.add_parser("sample", help="draw explanation images from a finished run")
    common(sp)
    sp.add_argument("--run", required=True, help="run directory written by optimize-*")
    sp.add_argument("--n", type=int, default=10)
    sp.add_argument("--seed-base", type=int)

    sp = sub.add_parser("discover", help="label the top features of classes as core or spurious")
    common(sp)
    sp.add_argument("--classes", default="all", help="'all' or a comma list of class indices")
    sp.add_argument("--delta", type=float)
    sp.add_argument("--lambda", dest="lam", type=float)
    sp.add_argument("--samples", type=int)
    sp.add_argument("--k", type=int)
    sp.add_argument("--prefix")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--restarts", type=int)
    sp.add_argument("--segmenter", help="segmentation backend id (default: oracle)")

    sp = sub.add_parser("agreement", help="compare verdicts with annotations")
    common(sp, out_required=False)
    sp.add_argument("--verdicts", required=True, help="discover run dir, its report.json, or a verdicts.csv")
    sp.add_argument("--annotations", required=True, help="annotation CSV")

    sp = sub.add_parser("report", help="render a static HTML gallery of a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--output", help="HTML path (default: <run>/gallery.html, timestamped if taken)")
    return p


COMMANDS = {
    "optimize-class": cmd_optimize, "optimize-feature": cmd_optimize, "optimize-hard": cmd_optimize,
    "sample": cmd_sample, "discover": cmd_discover, "agreement": cmd_agreement, "report": cmd_report,
}


def _fail(err: CliError) -> int:
    sys.stderr.write(json.dumps({"error": err.kind, "exit_code": err.code, "message": str(err)}) + "\n")
    return err.code


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except CliError as err:
        return _fail(err)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "jobs", 1) < 1:
            raise CliError("invalid-argument", "--jobs must be >= 1")
        cfg = _load_config(getattr(args, "config", None))
        seed = _resolve_seed(getattr(args, "seed", None)) if args.command != "report" else 0
        COMMANDS[args.command](args, cfg, seed)
        return 0
    except CliError as err:
        return _fail(err)
    except AllRestartsDiverged as exc:
        return _fail(CliError("diverged", str(exc)))
    except BackendUnavailable as exc:
        return _fail(CliError("backend-unavailable", str(exc)))
    except SchemaViolation as exc:
        return _fail(CliError("schema-violation", str(exc)))
    except SegmentationError as exc:
        return _fail(CliError("segmentation-failed", str(exc)))
    except UnknownTokenError as exc:
        return _fail(CliError("invalid-argument", str(exc)))
    except (FileNotFoundError, NotADirectoryError) as exc:
        return _fail(CliError("input-error", str(exc)))
    except ValueError as exc:
        return _fail(CliError("invalid-argument", str(exc)))
    except Exception as exc:  # pragma: no cover - last resort
        log.debug("internal error", exc_info=True)
        return _fail(CliError("internal", f"{type(exc).__name__}: {exc}"))


if __name__ == "__main__":
    sys.exit(main())
