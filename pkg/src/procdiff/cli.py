"""procdiff command-line interface.

Exit codes: 0 success, 2 configuration, 3 I/O, 4 integrity or compatibility,
5 numeric failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .config import INFERENCE_MODES, ExperimentConfig, dump_config, load_config
from .core import DivergenceError, IntegrityError, InvalidConfigError, InvalidInputError
from .corpus import by_split, corpus_files, generate_corpus, read_corpus
from .evaluation import activity_report, classify_report, forecast_report
from .report import render_reports
from .training import (
    ModelBundle,
    clip_dataset,
    finetune_activity,
    finetune_forecaster,
    fit_linear_probe,
    pretrain,
)

log = logging.getLogger("procdiff")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_INTEGRITY, EXIT_NUMERIC = 0, 2, 3, 4, 5
MANIFEST = "manifest.json"
CHECKPOINT = "checkpoint.bin"


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _text(doc) -> bytes:
    return (json.dumps(doc, sort_keys=True, indent=2) + "\n").encode()


def write_outputs(out_dir: Path, files: dict[str, bytes], manifest: dict,
                  merge: bool = False) -> dict:
    """Write each file atomically, then the manifest listing their hashes.

    With ``merge`` the entries of an existing manifest are kept, so several
    evaluations can share one output directory.
    """
    out_dir.mkdir(parents=True, exist_ok=True)
    hashes, sources = {}, {}
    if merge and (out_dir / MANIFEST).exists():
        old = json.loads((out_dir / MANIFEST).read_text())
        hashes, sources = old.get("files", {}), old.get("sources", {})
    for name, data in files.items():
        ckpt.atomic_write(out_dir / name, data)
        hashes[name] = hashlib.sha256(data).hexdigest()
        if merge:
            sources[name] = manifest.get("inputs", {})
    manifest = {**manifest, "files": hashes, **({"sources": sources} if merge else {})}
    ckpt.atomic_write(out_dir / MANIFEST, _text(manifest))
    return manifest


def verify_manifest(directory: Path, names: list[str] | None = None) -> dict:
    """Check listed files against their recorded hashes (stale-input guard)."""
    path = directory / MANIFEST
    if not path.exists():
        raise IntegrityError(f"{directory} has no {MANIFEST}")
    manifest = json.loads(path.read_text())
    for name, digest in manifest["files"].items():
        if names is not None and name not in names:
            continue
        if sha256_file(directory / name) != digest:
            raise IntegrityError(f"{directory / name} does not match its manifest hash")
    return manifest


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _corpus(args):
    directory = Path(args.corpus)
    manifest = verify_manifest(directory)
    seqs, table = read_corpus(directory)
    return seqs, table, manifest["files"]["corpus.jsonl"]


def _load_checkpoint(path: Path) -> tuple[ModelBundle, dict, str]:
    path = Path(path)
    if (path.parent / MANIFEST).exists():
        verify_manifest(path.parent, [path.name])
    bundle, header = ckpt.load(path)
    return bundle, header, sha256_file(path)


def _check_compatible(bundle: ModelBundle, table) -> None:
    if bundle.table.digest() != table.digest():
        raise IntegrityError("checkpoint and corpus use different phrase tables")


def _max_steps(train_cfg, args):
    return replace(train_cfg, max_steps=args.max_steps) if getattr(args, "max_steps", None) else train_cfg


def _log_lines(history) -> bytes:
    rows = [{"kind": "step", **r} for r in history.steps]
    rows += [{"kind": "epoch", **r} for r in history.epochs]
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows).encode()


def _save_run(args, command: str, cfg: ExperimentConfig, bundle: ModelBundle, history,
              inputs: dict[str, str], corpus_hash: str) -> int:
    meta = {"command": command, "corpus_sha256": corpus_hash}
    data = ckpt.to_bytes(bundle, cfg.digest(), meta)
    files = {CHECKPOINT: data, "train_log.jsonl": _log_lines(history)}
    manifest = write_outputs(Path(args.out), files, {"command": command, "config_hash": cfg.digest(),
                                                     "seed": cfg.seed, "inputs": inputs})
    print(f"{command}: wrote {Path(args.out) / CHECKPOINT} ({manifest['files'][CHECKPOINT][:12]})")
    return EXIT_OK


def cmd_gen_corpus(args) -> int:
    cfg = _config(args)
    cfg.corpus.validate()
    seqs, table = generate_corpus(cfg.corpus)
    files = {**corpus_files(seqs, table), "config.yaml": dump_config(cfg).encode()}
    manifest = write_outputs(Path(args.out), files, {"command": "gen-corpus",
                                                     "config_hash": cfg.digest(), "seed": cfg.seed})
    print(f"gen-corpus: {len(seqs)} sequences, K={table.K} -> {args.out}")
    for name, digest in manifest["files"].items():
        print(f"  {name}  {digest}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    seqs, table, corpus_hash = _corpus(args)
    inputs = {"corpus.jsonl": corpus_hash}
    resume = None
    if args.checkpoint:
        resume, header, inputs["checkpoint"] = _load_checkpoint(args.checkpoint)
        _check_compatible(resume, table)
        if header["config_hash"] != cfg.digest():
            raise IntegrityError("resume checkpoint was produced with a different config")
    train_cfg = _max_steps(cfg.pretrain, args)
    bundle, history = pretrain(by_split(seqs, "train"), table, train_cfg, cfg.model,
                               val=by_split(seqs, "val"), resume=resume)
    bundle.provenance["corpus_sha256"] = corpus_hash
    return _save_run(args, "pretrain", cfg, bundle, history, inputs, corpus_hash)


def _finetune(args, command: str, fn) -> int:
    cfg = _config(args)
    if not args.checkpoint:
        raise InvalidConfigError(f"{command} needs --checkpoint")
    seqs, table, corpus_hash = _corpus(args)
    bundle, _, ckpt_hash = _load_checkpoint(args.checkpoint)
    _check_compatible(bundle, table)
    bundle.optimizer_state = None
    out, history = fn(cfg, bundle, by_split(seqs, "train"))
    out.provenance[f"{command}_parent_checkpoint"] = ckpt_hash
    return _save_run(args, command, cfg, out, history,
                     {"corpus.jsonl": corpus_hash, "checkpoint": ckpt_hash}, corpus_hash)


def cmd_probe(args) -> int:
    def fn(cfg, bundle, train):
        obs, labels = clip_dataset(train)
        return fit_linear_probe(bundle, obs, labels, _max_steps(cfg.probe, args))
    return _finetune(args, "probe", fn)


def cmd_finetune_forecast(args) -> int:
    return _finetune(args, "finetune-forecast", lambda cfg, b, train: finetune_forecaster(
        b, train, _max_steps(cfg.forecast, args)))


def cmd_finetune_activity(args) -> int:
    return _finetune(args, "finetune-activity", lambda cfg, b, train: finetune_activity(
        b, train, _max_steps(cfg.activity, args)))


def cmd_eval(args) -> int:
    cfg = _config(args)
    seqs, table, corpus_hash = _corpus(args)
    bundle, header, ckpt_hash = _load_checkpoint(args.checkpoint)
    _check_compatible(bundle, table)
    split = by_split(seqs, args.split)
    if not split:
        raise InvalidInputError(f"corpus has no {args.split!r} sequences")
    before = bundle.checksums()
    mode = args.mode or cfg.inference.mode
    k = args.k or cfg.inference.k
    samples = args.samples or cfg.inference.samples
    prov = {"checkpoint_sha256": ckpt_hash, "corpus_sha256": corpus_hash,
            "config_hash": cfg.digest(), "checkpoint_config_hash": header["config_hash"]}
    if args.task == "classify":
        train_texts = sorted({bundle.table.texts()[i] for s in by_split(seqs, "train")
                              for i in s.phrase_ids})
        report = classify_report(bundle, split, args.split, train_phrases=train_texts,
                                 provenance=prov)
    elif args.task == "forecast":
        report = forecast_report(bundle, split, mode, k=k, samples=samples, seed=cfg.seed,
                                 split=args.split, provenance=prov)
    else:
        report = activity_report(bundle, split, args.split, provenance=prov)
    if bundle.checksums() != before:
        raise IntegrityError("evaluation modified the model")
    name = f"{args.task}_{mode}" if args.task == "forecast" else args.task
    write_outputs(Path(args.out), {f"{name}.json": report.to_json().encode(),
                                   f"{name}.per_category.csv": report.per_category_csv().encode()},
                  {"command": "eval", "config_hash": cfg.digest(), "seed": cfg.seed,
                   "inputs": {"checkpoint": ckpt_hash, "corpus.jsonl": corpus_hash}}, merge=True)
    print(f"{'task':<10} {'split':<6} {'mode':<12} {'top1':>8}")
    print(f"{report.task:<10} {report.split:<6} {report.provenance.get('mode', '-'):<12} "
          f"{report.top1:>8.4f}")
    return EXIT_OK


def cmd_report(args) -> int:
    files = render_reports(args.reports)
    out = Path(args.out)
    write_outputs(out, {n: c.encode() for n, c in files.items()},
                  {"command": "report",
                   "inputs": {str(p): sha256_file(Path(p)) for p in args.reports}})
    print(f"report: {len(args.reports)} reports -> {out / 'comparison.csv'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="procdiff", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, corpus=True, checkpoint=False):
        p.add_argument("--config", type=Path)
        p.add_argument("--out", type=Path, required=True)
        p.add_argument("--seed", type=int)
        if corpus:
            p.add_argument("--corpus", type=Path, required=True)
        if checkpoint:
            p.add_argument("--checkpoint", type=Path)
        return p

    common(sub.add_parser("gen-corpus", help="synthesise a corpus"), corpus=False)
    for verb, text in (("pretrain", "pre-train encoder and denoiser"),
                       ("probe", "fit a linear step probe on the frozen encoder"),
                       ("finetune-forecast", "fine-tune next-step forecasting"),
                       ("finetune-activity", "fine-tune task classification")):
        p = common(sub.add_parser(verb, help=text), checkpoint=True)
        p.add_argument("--max-steps", type=int, help="stop after this many optimizer steps")
    p = common(sub.add_parser("eval", help="evaluate a checkpoint"), checkpoint=True)
    p.add_argument("--task", choices=("classify", "forecast", "activity"), default="classify")
    p.add_argument("--mode", choices=INFERENCE_MODES)
    p.add_argument("--k", type=int)
    p.add_argument("--samples", type=int)
    p.add_argument("--split", default="val", choices=("train", "val", "test"))
    p = sub.add_parser("report", help="tabulate and chart evaluation reports")
    p.add_argument("reports", nargs="+", type=Path)
    p.add_argument("--out", type=Path, required=True)
    return parser


COMMANDS = {"gen-corpus": cmd_gen_corpus, "pretrain": cmd_pretrain, "probe": cmd_probe,
            "finetune-forecast": cmd_finetune_forecast, "finetune-activity": cmd_finetune_activity,
            "eval": cmd_eval, "report": cmd_report}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    threads = os.environ.get("PROCDIFF_THREADS")
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    if args.command == "eval" and not args.checkpoint:
        print("error: eval needs --checkpoint", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return COMMANDS[args.command](args)
    except InvalidConfigError as exc:
        for v in exc.violations:
            print(f"config error: {v}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrityError as exc:
        print(f"integrity error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except InvalidInputError as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INTEGRITY
    except DivergenceError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        print(json.dumps(exc.record, sort_keys=True, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
