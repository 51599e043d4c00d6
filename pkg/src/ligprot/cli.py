"""Command-line entry point: ``ligprot <command> [options]``.

Commands: curate, build-vocab, train, generate, evaluate, inspect.

Exit codes are 0 on success, 2 for usage or configuration errors (including
missing inputs), 3 for data or integrity errors (malformed records,
checkpoint/vocabulary mismatch) and 4 for anything else. Failures print one
JSON object to stderr. Log verbosity is read from ``LIGPROT_LOG_LEVEL``.
"""

from __future__ import annotations

import argparse
import datetime as dt
import hashlib
import json
import logging
import os
import shutil
import sys
import tempfile
from pathlib import Path
from typing import Sequence

from . import __version__
from .checkpoint import MAGIC, CheckpointError, load_checkpoint
from .datakit import DEFAULT_QUOTAS, DEFAULT_STRATA, SCHEMA, curate, ingest, read_triples, write_curation
from .generation import GenerationRequest, ModelBundle, generate_batch
from .metrics import diversity, emit_eval_manifest, format_fasta, novelty, read_fasta
from .model import ConfigError, count_parameters, init_state, preset
from .tokenizers import SmilesError, VocabCaps, VocabConfigError, build_vocab, encode_triple, load_vocab
from .training import Adam, TrainConfig, train, train_preset

logger = logging.getLogger("ligprot")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 2, 3, 4
CONFIG_VERSION = 1
TEXT_VOCAB, SMILES_VOCAB = "text.vocab", "smiles.vocab"


class UsageError(Exception):
    """Bad invocation: missing input, conflicting flags."""


class DataError(Exception):
    """Input data that cannot be used."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---------------------------------------------------------------------------
# helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def _require_file(path: str | None, flag: str) -> Path:
    if path is None:
        raise UsageError(f"{flag} is required")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{flag}: no such file {path}")
    return p


def _write_json(path: Path, data) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    with os.fdopen(fd, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(data, indent=2, sort_keys=True) + "\n")
    os.replace(tmp, path)


class Run:
    """Run manifest plus a staging directory published only on success.

    The manifest is written to the output directory before work starts and
    rewritten with output hashes at the end. All other outputs are produced
    in a hidden staging directory and moved into place by rename once the
    command has succeeded, so a failed command leaves no partial outputs.
    """

    def __init__(self, command: str, out_dir: str | Path, config: dict, seeds: dict, inputs: dict[str, Path]):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.manifest_path = self.out / "run_manifest.json"
        self.manifest = {
            "command": command,
            "argv": sys.argv[1:],
            "version": __version__,
            "config": config,
            "seeds": seeds,
            "inputs": {k: {"path": str(p), "sha256": _sha256(p)} for k, p in sorted(inputs.items())},
            "outputs": {},
            "started_at": _now(),
            "finished_at": None,
            "status": "running",
        }
        _write_json(self.manifest_path, self.manifest)
        self.staging = Path(tempfile.mkdtemp(dir=self.out, prefix=".staging-"))

    def __enter__(self) -> Run:
        return self

    def __exit__(self, exc_type, exc, tb):
        if exc_type is None:
            for path in sorted(self.staging.rglob("*")):
                if path.is_file():
                    rel = path.relative_to(self.staging)
                    self.manifest["outputs"][str(rel)] = _sha256(path)
            for child in sorted(self.staging.iterdir()):
                target = self.out / child.name
                if target.is_dir() and child.is_dir():
                    shutil.rmtree(target)
                os.replace(child, target)
            self.manifest["status"] = "complete"
        else:
            self.manifest["status"] = "failed"
            self.manifest["error"] = f"{exc_type.__name__}: {exc}"
        self.manifest["finished_at"] = _now()
        shutil.rmtree(self.staging, ignore_errors=True)
        _write_json(self.manifest_path, self.manifest)
        return False


def load_config(path: str | None) -> dict:
    """Read a versioned JSON run configuration (empty if no path)."""
    if path is None:
        return {}
    p = _require_file(path, "--config")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError("config", f"not valid JSON ({exc.msg})") from None
    if not isinstance(data, dict):
        raise ConfigError("config", "top level must be an object")
    if data.get("version") != CONFIG_VERSION:
        raise ConfigError("version", f"expected {CONFIG_VERSION}, got {data.get('version')!r}")
    unknown = sorted(set(data) - {"version", "model", "train", "vocab"})
    if unknown:
        raise ConfigError(unknown[0], "unknown config section")
    return data


def _vocab_caps(config: dict, args) -> VocabCaps:
    section = dict(config.get("vocab", {}))
    unknown = sorted(set(section) - {"text_cap", "smiles_cap"})
    if unknown:
        raise ConfigError(f"vocab.{unknown[0]}", "unknown vocab field")
    text = getattr(args, "text_cap", None) or section.get("text_cap")
    smiles = getattr(args, "smiles_cap", None) or section.get("smiles_cap")
    return VocabCaps(text=text, smiles=smiles)


def _train_config(config: dict, seed: int | None) -> TrainConfig:
    section = dict(config.get("train", {}))
    name = section.pop("preset", "toy")
    if seed is not None:
        section["seed"] = seed
    known = set(TrainConfig.__dataclass_fields__)
    unknown = sorted(set(section) - known)
    if unknown:
        raise ConfigError(f"train.{unknown[0]}", "unknown training config field")
    return train_preset(name, **section)


def _model_overrides(config: dict) -> tuple[str, dict]:
    section = dict(config.get("model", {}))
    unknown = sorted(set(section) - {"preset", "overrides"})
    if unknown:
        raise ConfigError(f"model.{unknown[0]}", "unknown model config field")
    return section.get("preset", "toy"), dict(section.get("overrides", {}))


def _read_triples(path: Path):
    try:
        return read_triples(path)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _load_vocabs(vocab_dir: Path):
    for name in (TEXT_VOCAB, SMILES_VOCAB):
        _require_file(str(vocab_dir / name), "--vocab-dir")
    try:
        return load_vocab(vocab_dir / TEXT_VOCAB), load_vocab(vocab_dir / SMILES_VOCAB)
    except ValueError as exc:
        raise DataError(str(exc)) from exc


def _parse_strata(text: str) -> tuple[tuple[int, int | None], ...]:
    strata = []
    for part in text.split(","):
        lo, _, hi = part.partition("-")
        try:
            strata.append((int(lo), int(hi) if hi else None))
        except ValueError:
            raise ConfigError("strata", f"cannot parse {part!r}; use LO-HI or LO-") from None
    return tuple(strata)


def _parse_quotas(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(q) for q in text.split(","))
    except ValueError:
        raise ConfigError("quotas", f"cannot parse {text!r}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_curate(args) -> int:
    """Ingest, cluster and split a triples file."""
    src = _require_file(args.input, "--in")
    strata = _parse_strata(args.strata) if args.strata else DEFAULT_STRATA
    quotas = _parse_quotas(args.quotas) if args.quotas else DEFAULT_QUOTAS
    if len(strata) != len(quotas):
        raise ConfigError("quotas", f"{len(quotas)} quotas for {len(strata)} strata")
    if not 0.0 < args.threshold <= 1.0:
        raise ConfigError("threshold", "must lie in (0, 1]")
    resolved = {"threshold": args.threshold, "strata": [list(s) for s in strata], "quotas": list(quotas)}
    with Run("curate", args.out, resolved, {"seed": args.seed}, {"input": src}) as run:
        result = ingest(src)
        if not result.triples:
            raise DataError(f"{src}: no valid records ({len(result.rejects)} rejected)")
        curation = curate(result.triples, args.threshold, args.seed, strata, quotas)
        write_curation(curation, run.staging, result)
    return EXIT_OK


def cmd_build_vocab(args) -> int:
    data = _require_file(args.data, "--data")
    config = load_config(args.config)
    caps = _vocab_caps(config, args)
    with Run("build-vocab", args.out, {"vocab": caps.__dict__}, {}, {"data": data}) as run:
        text, smiles = build_vocab(_read_triples(data), caps)
        text.save(run.staging / TEXT_VOCAB)
        smiles.save(run.staging / SMILES_VOCAB)
    return EXIT_OK


def cmd_train(args) -> int:
    data = _require_file(args.data, "--data")
    config = load_config(args.config)
    train_cfg = _train_config(config, args.seed)
    if args.steps is not None:
        train_cfg = TrainConfig(**{**train_cfg.to_dict(), "total_steps": args.steps})
    inputs = {"data": data}
    resume = None
    if args.resume:
        inputs["resume"] = _require_file(args.resume, "--resume")
    triples = _read_triples(data)
    if args.vocab_dir:
        text_vocab, smiles_vocab = _load_vocabs(Path(args.vocab_dir))
        inputs["text_vocab"] = Path(args.vocab_dir) / TEXT_VOCAB
        inputs["smiles_vocab"] = Path(args.vocab_dir) / SMILES_VOCAB
    else:
        text_vocab, smiles_vocab = build_vocab(triples, _vocab_caps(config, args))
    hashes = {"text": text_vocab.content_hash, "smiles": smiles_vocab.content_hash}
    if args.resume:
        resume = load_checkpoint(inputs["resume"], hashes)
        state, start = resume.state, resume.step
    else:
        name, overrides = _model_overrides(config)
        overrides.update(text_vocab_size=len(text_vocab), smiles_vocab_size=len(smiles_vocab))
        state, start = init_state(preset(name, **overrides), seed=train_cfg.seed), 0
    resolved = {"model": state.config.to_dict(), "train": train_cfg.to_dict(), "start_step": start,
                "vocab_hashes": hashes}
    examples = [encode_triple(t, text_vocab, smiles_vocab) for t in triples]
    with Run("train", args.out, resolved, {"seed": train_cfg.seed}, inputs) as run:
        optimizer = Adam(state, train_cfg)
        if resume is not None and resume.optimizer:
            optimizer.load_moments(resume.optimizer)
        text_vocab.save(run.staging / TEXT_VOCAB)
        smiles_vocab.save(run.staging / SMILES_VOCAB)
        report = train(examples, state, train_cfg, optimizer=optimizer, start_step=start,
                       vocab_hashes=hashes, checkpoint_dir=run.staging,
                       log_path=run.staging / "train_log.jsonl")
        summary = {"final_loss": report.final_loss, "steps_run": len(report.steps),
                   "start_step": start, "total_steps": train_cfg.total_steps, "skipped_examples": report.skipped}
        _write_json(run.staging / "train_summary.json", summary)
    return EXIT_OK


def _read_requests(path: Path, args) -> list[GenerationRequest]:
    mode = args.mode
    n = args.num_samples if args.num_samples is not None else (5 if mode == "nucleus" else 1)
    defaults = dict(mode=mode, nucleus_p=args.nucleus_p if mode == "nucleus" else None,
                    num_samples=n if mode == "nucleus" else 1, max_length=args.max_length, seed=args.seed)
    requests = []
    for line_no, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}: line {line_no}: malformed json ({exc.msg})") from None
        if record == SCHEMA:
            continue
        if not isinstance(record, dict) or "description" not in record or "smiles" not in record:
            raise DataError(f"{path}: line {line_no}: request needs description and smiles")
        record = {k: v for k, v in record.items() if k in ("id", "description", "smiles", "instruction")}
        try:
            requests.append(GenerationRequest.from_dict(record, **defaults))
        except ValueError as exc:
            raise ConfigError("mode", str(exc)) from None
    if not requests:
        raise DataError(f"{path}: no requests")
    return requests


def cmd_generate(args) -> int:
    ckpt_path = _require_file(args.checkpoint, "--checkpoint")
    req_path = _require_file(args.requests, "--requests")
    vocab_dir = Path(args.vocab_dir) if args.vocab_dir else ckpt_path.parent
    text_vocab, smiles_vocab = _load_vocabs(vocab_dir)
    requests = _read_requests(req_path, args)
    bundle_hashes = {"text": text_vocab.content_hash, "smiles": smiles_vocab.content_hash}
    ckpt = load_checkpoint(ckpt_path, bundle_hashes)
    bundle = ModelBundle(ckpt.state, text_vocab, smiles_vocab)
    resolved = {"mode": args.mode, "nucleus_p": args.nucleus_p, "num_samples": requests[0].num_samples,
                "max_length": args.max_length, "vocab_hashes": bundle_hashes}
    inputs = {"checkpoint": ckpt_path, "requests": req_path,
              "text_vocab": vocab_dir / TEXT_VOCAB, "smiles_vocab": vocab_dir / SMILES_VOCAB}
    with Run("generate", args.out, resolved, {"seed": args.seed}, inputs) as run:
        results = generate_batch(requests, bundle)
        fasta, jsonl = [], []
        for result in results:
            jsonl.append(result.to_jsonl())
            for k, s in enumerate(result.samples):
                seed = "none" if s.seed is None else s.seed
                fasta.append((f"{result.request.request_id}|{result.request.mode}|seed={seed}|sample={k}",
                              s.sequence))
            if result.error:
                logger.warning("request %s failed: %s", result.request.request_id, result.error)
        (run.staging / "generated.fasta").write_text(format_fasta(fasta), encoding="utf-8")
        (run.staging / "generated.jsonl").write_text("".join(jsonl), encoding="utf-8")
    return EXIT_OK


def _read_generated(path: Path) -> list[tuple[str, int, str]]:
    """(request id, sample index, sequence) from generate's FASTA or JSONL output."""
    out = []
    if path.suffix == ".jsonl":
        for line in path.read_text(encoding="utf-8").splitlines():
            if line.strip():
                r = json.loads(line)
                if "sequence" in r:
                    out.append((str(r["request_id"]), int(r["sample"]), r["sequence"]))
        return out
    for header, seq in read_fasta(path):
        fields = header.split("|")
        sample = next((int(f[7:]) for f in fields if f.startswith("sample=")), 0)
        out.append((fields[0], sample, seq))
    return out


def _read_references(path: Path) -> tuple[dict[str, str], dict[str, str]]:
    """Reference proteins (and ligands when available) keyed by id."""
    text = path.read_text(encoding="utf-8")
    if text.lstrip().startswith(">"):
        return {h.split("|")[0]: s for h, s in read_fasta(path)}, {}
    triples = _read_triples(path)
    return {t.record_id: t.protein for t in triples}, {t.record_id: t.smiles for t in triples}


def cmd_evaluate(args) -> int:
    gen_path = _require_file(args.generated, "--generated")
    ref_path = _require_file(args.references, "--references")
    try:
        generated = _read_generated(gen_path)
    except (ValueError, KeyError) as exc:
        raise DataError(f"{gen_path}: {exc}") from exc
    references, ligands = _read_references(ref_path)
    missing = sorted({rid for rid, _, _ in generated} - set(references))
    if missing:
        raise DataError(f"no reference for request ids {missing[:5]}")
    if args.emit_manifests and not ligands:
        raise UsageError("--emit-manifests needs references in triples format (to supply ligands)")
    resolved = {"emit_manifests": bool(args.emit_manifests)}
    with Run("evaluate", args.out, resolved, {}, {"generated": gen_path, "references": ref_path}) as run:
        rows = ["request_id\tsample\tmetric\tvalue"]
        by_request: dict[str, list[str]] = {}
        novelties = []
        for rid, k, seq in generated:
            value = novelty(seq, references[rid])
            novelties.append(value)
            rows.append(f"{rid}\t{k}\tnovelty\t{value:.6f}")
            by_request.setdefault(rid, []).append(seq)
        diversities = []
        for rid, seqs in by_request.items():
            if len(seqs) >= 2:
                value = diversity(seqs)
                diversities.append(value)
                rows.append(f"{rid}\t*\tdiversity\t{value:.6f}")
        (run.staging / "metrics.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
        summary = {"n_sequences": len(generated), "n_requests": len(by_request),
                   "mean_novelty": sum(novelties) / len(novelties) if novelties else None,
                   "mean_diversity": sum(diversities) / len(diversities) if diversities else None}
        _write_json(run.staging / "summary.json", summary)
        if args.emit_manifests:
            cases = [(f"{rid}-{k}", seq) for rid, k, seq in generated]
            emit_eval_manifest(cases, {f"{rid}-{k}": ligands[rid] for rid, k, _ in generated},
                               run.staging / "manifests")
    return EXIT_OK


def cmd_inspect(args) -> int:
    """Print a JSON summary of a checkpoint, vocabulary or triples file."""
    path = _require_file(args.path, "PATH")
    head = path.read_bytes()[:4]
    if head == MAGIC:
        ckpt = load_checkpoint(path)
        info = {"kind": "checkpoint", "step": ckpt.step, "config": ckpt.state.config.to_dict(),
                "vocab_hashes": ckpt.vocab_hashes, "parameters": count_parameters(ckpt.state),
                "has_optimizer_state": bool(ckpt.optimizer), "train_config": ckpt.train_config}
    elif head == b"#voc":
        try:
            vocab = load_vocab(path)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        info = {"kind": "vocab", "vocab_kind": vocab.kind, "size": len(vocab), "hash": vocab.content_hash}
    else:
        result = ingest(path)
        info = {"kind": "triples", "records": result.n_records, "unique_triples": len(result.triples),
                "duplicates": result.duplicates, "rejected": len(result.rejects),
                "rejects": [{"line": r.line, "reason": r.reason} for r in result.rejects[:20]]}
    print(json.dumps(info, indent=2, sort_keys=True))
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ligprot", description="Ligand- and text-conditioned protein design pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("curate", help="ingest, cluster and split a triples file")
    p.add_argument("--in", dest="input", required=True, help="triples JSONL")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threshold", type=float, default=0.30, help="identity threshold (default 0.30)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--strata", help="cluster-size strata, e.g. '1-500,501-1000,1001-2500,2501-'")
    p.add_argument("--quotas", help="clusters per stratum for each of val and test, e.g. '20,10,5,1'")
    p.set_defaults(func=cmd_curate)

    p = sub.add_parser("build-vocab", help="build text and SMILES vocabularies")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--text-cap", type=int)
    p.add_argument("--smiles-cap", type=int)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("train", help="train a model on a triples file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override total_steps")
    p.add_argument("--vocab-dir", help="directory with text.vocab and smiles.vocab (built from data if omitted)")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("generate", help="design proteins for a requests file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--requests", required=True, help="JSONL with id, description, smiles[, instruction]")
    p.add_argument("--out", required=True)
    p.add_argument("--vocab-dir", help="defaults to the checkpoint's directory")
    p.add_argument("--mode", choices=("greedy", "nucleus"), default="greedy")
    p.add_argument("--nucleus-p", type=float, default=0.4)
    p.add_argument("--num-samples", type=int, help="default 5 for nucleus, 1 for greedy")
    p.add_argument("--max-length", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("evaluate", help="novelty and diversity of generated sequences")
    p.add_argument("--generated", required=True, help="generated.fasta or generated.jsonl")
    p.add_argument("--references", required=True, help="FASTA or triples JSONL keyed by request id")
    p.add_argument("--out", required=True)
    p.add_argument("--emit-manifests", action="store_true",
                   help="write per-case folding/docking job directories")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("inspect", help="summarise a checkpoint, vocabulary or triples file")
    p.add_argument("path")
    p.set_defaults(func=cmd_inspect)
    return parser


def _fail(code: int, kind: str, message: str, **extra) -> int:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code, **extra},
                                sort_keys=True) + "\n")
    return code


def main(argv: Sequence[str] | None = None) -> int:
    level = os.environ.get("LIGPROT_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", str(exc))
    except ConfigError as exc:
        return _fail(EXIT_USAGE, "config", str(exc), field=exc.field)
    except VocabConfigError as exc:
        return _fail(EXIT_USAGE, "config", str(exc))
    except (CheckpointError, DataError, SmilesError) as exc:
        return _fail(EXIT_DATA, "data", str(exc))
    except Exception as exc:  # noqa: BLE001 - last-resort classification
        logger.debug("unhandled error", exc_info=True)
        return _fail(EXIT_RUNTIME, "runtime", f"{type(exc).__name__}: {exc}")


if __name__ == "__main__":
    sys.exit(main())
