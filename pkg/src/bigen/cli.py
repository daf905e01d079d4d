"""Command-line entry point: ``bigen <subcommand> ...``.

Every subcommand writes its outputs and a ``manifest.json`` into ``--out``.
Exit codes: 0 ok, 1 usage error, 2 data or contract error, 3 numerical fault.
Failures print one ``error kind=... type=... message=...`` line to stderr.
Log verbosity comes from ``BIGEN_LOG_LEVEL`` (default WARNING).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .bank import SentenceEmbedder, build_bank, load_bank, save_bank
from .corpus import (
    ENTITY_TERMS, Vocab, build_vocab, corpus_hash, generate_corpus, load_corpus, load_split_manifest, save_corpus,
    save_split_manifest, split_dataset,
)
from .encoder import ABLATION_ROWS
from .experiments import seeded_ablation, seeded_sweep
from .metrics import evaluate
from .trainer import (
    SWEEP_PARAMS, TrainConfig, ablation_table, generate_reports, load_checkpoint, save_checkpoint, train,
)

log = logging.getLogger("bigen")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


@dataclass
class RunManifest:
    subcommand: str
    argv: list[str]
    config: dict
    seed: int | None
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    hashes: dict[str, str] = field(default_factory=dict)

    def write(self, out_dir: Path) -> Path:
        for name, path in self.outputs.items():
            self.hashes[name] = file_hash(path)
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _HelpFormatter(argparse.ArgumentDefaultsHelpFormatter):
    def _get_help_string(self, action):
        if action.default is None or action.default is False:
            return action.help
        return super()._get_help_string(action)


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _prepare_out(out: str, force: bool, names: Sequence[str]) -> Path:
    d = Path(out)
    clash = [n for n in (*names, "manifest.json") if (d / n).exists()]
    if clash and not force:
        raise FileExistsError(f"{d / clash[0]} exists (use --force to overwrite)")
    d.mkdir(parents=True, exist_ok=True)
    return d


def _load_cases(corpus_path: str, split_path: str | None):
    world, cases = load_corpus(corpus_path)
    split_file = Path(split_path) if split_path else Path(corpus_path).with_name("split.json")
    manifest = load_split_manifest(split_file)
    by_id = {c.case_id: c for c in cases}
    try:
        parts = {name: [by_id[i] for i in ids] for name, ids in manifest.items()}
    except KeyError as exc:
        raise ValueError(f"split manifest {split_file} names unknown case {exc}") from None
    return world, parts, split_file


def _save_vocab(path: Path, vocab: Vocab) -> None:
    path.write_text(json.dumps(vocab.itos) + "\n")


def _load_vocab(path: Path) -> Vocab:
    return Vocab(json.loads(path.read_text()))


# -- subcommands ---------------------------------------------------------------------
def cmd_gen_corpus(a, argv) -> int:
    out = _prepare_out(a.out, a.force, ["corpus.jsonl", "split.json"])
    world, cases = generate_corpus(a.seed, a.cases, a.tissues, (a.patches_min, a.patches_max), a.dim,
                                   a.multi_case_rate)
    tr, va, te = split_dataset(cases, a.seed)
    save_corpus(out / "corpus.jsonl", world, cases)
    save_split_manifest(out / "split.json", tr, va, te)
    man = RunManifest("gen-corpus", argv, {k: v for k, v in vars(a).items() if k not in ("func", "force")},
                      a.seed, outputs={"corpus": str(out / "corpus.jsonl"), "split": str(out / "split.json")})
    man.write(out)
    print(f"cases={len(cases)} train={len(tr)} val={len(va)} test={len(te)} corpus_hash={corpus_hash(cases)}")
    return EXIT_OK


def cmd_build_bank(a, argv) -> int:
    out = _prepare_out(a.out, a.force, ["bank.bgkb"])
    world, parts, split_file = _load_cases(a.corpus, a.split_manifest)
    if a.split not in parts:
        raise ValueError(f"split '{a.split}' not in {split_file}")
    bank = build_bank(parts[a.split], SentenceEmbedder(world), split=a.split)
    save_bank(out / "bank.bgkb", bank)
    RunManifest("build-bank", argv, {"split": a.split}, world.seed,
                inputs={"corpus": a.corpus, "split_manifest": str(split_file)},
                outputs={"bank": str(out / "bank.bgkb")}).write(out)
    print(f"T={bank.T} d={bank.d}")
    return EXIT_OK


def _resolve_config(a) -> TrainConfig:
    text = Path(a.config).read_text() if a.config else ""
    overrides = {f.name: getattr(a, f.name, None) for f in fields(TrainConfig)}
    return TrainConfig.from_text(text, **overrides)


def cmd_train(a, argv) -> int:
    out = _prepare_out(a.out, a.force, ["model.bgck", "config.cfg", "train_log.jsonl", "vocab.json"])
    cfg = _resolve_config(a)
    world, parts, split_file = _load_cases(a.corpus, a.split_manifest)
    bank = load_bank(a.bank, expected_d=world.d) if cfg.kr else None
    if bank is not None:
        bank.check_disjoint(parts["val"] + parts["test"])
    vocab = build_vocab([c.report for c in parts["train"]], a.min_freq)
    res = train(cfg, parts["train"], parts["val"], vocab, bank, out / "train_log.jsonl")
    save_checkpoint(out / "model.bgck", res.model)
    (out / "config.cfg").write_text(cfg.to_text())
    _save_vocab(out / "vocab.json", vocab)
    RunManifest("train", argv, asdict(cfg), cfg.seed,
                inputs={"corpus": a.corpus, "split_manifest": str(split_file), "bank": a.bank or ""},
                outputs={n: str(out / n) for n in ("model.bgck", "config.cfg", "train_log.jsonl", "vocab.json")}
                ).write(out)
    print(f"best_epoch={res.best_epoch} best_val_bleu4={res.best_val_bleu4:.6f}")
    return EXIT_OK


def _load_run(run_dir: str, corpus: str, split_manifest: str | None, bank_path: str | None):
    run = Path(run_dir)
    cfg = TrainConfig.from_text((run / "config.cfg").read_text())
    vocab = _load_vocab(run / "vocab.json")
    world, parts, split_file = _load_cases(corpus, split_manifest)
    bank = None
    if cfg.kr:
        if not bank_path:
            raise ValueError("this model uses knowledge retrieval; pass --bank")
        bank = load_bank(bank_path, expected_d=world.d)
    model = load_checkpoint(run / "model.bgck", cfg, vocab, world.d, bank.d if bank else world.d)
    return cfg, vocab, world, parts, bank, model


def cmd_generate(a, argv) -> int:
    out = _prepare_out(a.out, a.force, ["generations.jsonl"])
    cfg, vocab, _, parts, bank, model = _load_run(a.run, a.corpus, a.split_manifest, a.bank)
    cases = parts[a.split]
    if bank is not None:
        bank.check_disjoint(cases if a.split != "train" else [])
    beam = a.beam if a.beam is not None else cfg.beam
    max_len = a.max_len if a.max_len is not None else cfg.max_len
    texts, hyps = generate_reports(model, cases, vocab, bank, beam, max_len)
    path = out / "generations.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for c, text, h in zip(cases, texts, hyps):
            fh.write(json.dumps({"case_id": c.case_id, "text": text, "tokens": [vocab.itos[t] for t in h.tokens],
                                 "logprobs": [round(lp, 6) for lp in h.logprobs]}) + "\n")
    RunManifest("generate", argv, {"beam": beam, "max_len": max_len, "split": a.split}, cfg.seed,
                inputs={"run": a.run, "corpus": a.corpus, "bank": a.bank or ""},
                outputs={"generations": str(path)}).write(out)
    print(f"generated={len(cases)}")
    return EXIT_OK


def cmd_evaluate(a, argv) -> int:
    out = _prepare_out(a.out, a.force, ["metrics.txt"])
    _, cases = load_corpus(a.corpus)
    refs = {c.case_id: c.report for c in cases}
    gens = [json.loads(line) for line in Path(a.generations).read_text().splitlines() if line.strip()]
    missing = [g["case_id"] for g in gens if g["case_id"] not in refs]
    if missing:
        raise ValueError(f"generations name cases absent from the corpus: {missing[:3]}")
    rep = evaluate([g["text"] for g in gens], [refs[g["case_id"]] for g in gens], ENTITY_TERMS)
    (out / "metrics.txt").write_text(rep.to_kv())
    RunManifest("evaluate", argv, {}, None, inputs={"generations": a.generations, "corpus": a.corpus},
                outputs={"metrics": str(out / "metrics.txt")}).write(out)
    print(rep.to_table())
    print(rep.to_kv(), end="")
    return EXIT_OK


def cmd_ablate(a, argv) -> int:
    out = _prepare_out(a.out, a.force, ["ablation.txt", "ablation.json"])
    cfg = _resolve_config(a)
    res = seeded_ablation(cfg, a.seeds, a.cases, ABLATION_ROWS, corpus_d=a.dim)
    table = ablation_table(res)
    (out / "ablation.txt").write_text(table + "\n")
    (out / "ablation.json").write_text(json.dumps(res, indent=1) + "\n")
    RunManifest("ablate", argv, {**asdict(cfg), "seeds": a.seeds, "cases": a.cases}, cfg.seed,
                outputs={"table": str(out / "ablation.txt"), "json": str(out / "ablation.json")}).write(out)
    print(table)
    return EXIT_OK


def cmd_sweep(a, argv) -> int:
    out = _prepare_out(a.out, a.force, ["sweep.json"])
    cfg = _resolve_config(a)
    try:
        values = [float(v) if a.param == "k" else int(v) for v in a.values.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--values must be a comma-separated list of numbers, got '{a.values}'") from None
    if not values:
        raise UsageError("--values is empty")
    res = seeded_sweep(cfg, a.param, values, a.seeds, a.cases, corpus_d=a.dim)
    (out / "sweep.json").write_text(json.dumps(res, indent=1) + "\n")
    RunManifest("sweep", argv, {**asdict(cfg), "param": a.param, "values": values, "seeds": a.seeds},
                cfg.seed, outputs={"sweep": str(out / "sweep.json")}).write(out)
    print(f"{a.param:>6} {'bleu4':>8} {'rouge_l':>8}")
    for p in res:
        print(f"{p['value']:>6} {p['metrics']['bleu4']:8.4f} {p['metrics']['rouge_l']:8.4f}")
    return EXIT_OK


def write_pgm(path, image: np.ndarray) -> None:
    """8-bit binary PGM, scaled so the image maximum maps to 255."""
    img = np.asarray(image, dtype=np.float64)
    top = img.max()
    scaled = np.zeros_like(img) if top <= 0 else img / top * 255
    data = np.clip(np.rint(scaled), 0, 255).astype(np.uint8)
    rows, cols = data.shape
    Path(path).write_bytes(f"P5\n{cols} {rows}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, body = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    cols, rows = map(int, dims.split())
    return np.frombuffer(body, dtype=np.uint8).reshape(rows, cols)


def attention_grid(attention: np.ndarray, grid: tuple[int, int]) -> np.ndarray:
    rows, cols = grid
    if rows * cols != len(attention):
        raise ValueError(f"attention of length {len(attention)} does not fit grid {grid}")
    return np.asarray(attention).reshape(rows, cols)


def cmd_heatmap(a, argv) -> int:
    cfg, _, _, parts, bank, model = _load_run(a.run, a.corpus, a.split_manifest, a.bank)
    if not cfg.vtca:
        raise ValueError("heatmaps need layer-1 visual-token attention; this model has vtca off")
    by_id = {c.case_id: c for part in parts.values() for c in part}
    ids = [i for i in a.cases.split(",") if i]
    unknown = [i for i in ids if i not in by_id]
    if unknown:
        raise ValueError(f"unknown case ids: {unknown}")
    names = [f"{i}.pgm" for i in ids]
    out = _prepare_out(a.out, a.force, names)
    outputs = {}
    for cid, name in zip(ids, names):
        c = by_id[cid]
        with ad.no_grad():
            enc = model.encode([c.visual], [c.retrieval], bank)
        write_pgm(out / name, attention_grid(enc.layer1_attention[0], c.grid))
        outputs[cid] = str(out / name)
    RunManifest("heatmap", argv, {"cases": ids}, cfg.seed,
                inputs={"run": a.run, "corpus": a.corpus, "bank": a.bank or ""}, outputs=outputs).write(out)
    print(f"heatmaps={len(ids)}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------
def _add_train_flags(p: argparse.ArgumentParser) -> None:
    d = TrainConfig()
    p.add_argument("--config", help="flat key=value config file; explicit flags override it")
    for name, kind in (("epochs", int), ("batch_size", int), ("lr", float), ("weight_decay", float),
                       ("seed", int), ("patience", int), ("d", int), ("L", int), ("heads", int),
                       ("k", float), ("m", int), ("v", int), ("beam", int), ("max_len", int),
                       ("val_every", int)):
        flag = "--" + name.replace("_", "-")
        p.add_argument(flag, dest=name, type=kind, default=None, help=f"overrides the config file (default: {getattr(d, name)})")
    for name in ("ws", "wsl", "vtca", "kr", "ttca"):
        p.add_argument(f"--{name}", dest=name, action=argparse.BooleanOptionalAction, default=None,
                       help=f"encoder flag (default: {'on' if getattr(d, name) else 'off'})")


def _add_data_flags(p, bank=True):
    p.add_argument("--corpus", required=True, help="corpus.jsonl from gen-corpus")
    p.add_argument("--split-manifest", default=None, help="(default: split.json next to the corpus)")
    if bank:
        p.add_argument("--bank", default=None, help="bank.bgkb from build-bank")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="bigen", description="Knowledge-retrieval report generation on synthetic slides.")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)
    fmt = _HelpFormatter

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_, description=help_, formatter_class=fmt)
        p.set_defaults(func=func)
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        return p

    p = add("gen-corpus", cmd_gen_corpus, "generate a synthetic corpus and its patient-disjoint split")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--cases", type=int, default=977, help="number of cases")
    p.add_argument("--tissues", type=int, default=8, help="number of tissue types")
    p.add_argument("--patches-min", type=int, default=64, help="fewest patches per case")
    p.add_argument("--patches-max", type=int, default=256, help="most patches per case")
    p.add_argument("--dim", type=int, default=32, help="latent width of features and sentence embeddings")
    p.add_argument("--multi-case-rate", type=float, default=0.0, help="chance a case reuses the previous patient")

    p = add("build-bank", cmd_build_bank, "build the sentence knowledge bank from training reports")
    _add_data_flags(p, bank=False)
    p.add_argument("--split", default="train", help="split to read; anything but train is refused")

    p = add("train", cmd_train, "train a model and keep the best-validation checkpoint")
    _add_data_flags(p)
    p.add_argument("--min-freq", type=int, default=1, help="vocabulary frequency cut-off")
    _add_train_flags(p)

    p = add("generate", cmd_generate, "generate reports with a trained model")
    _add_data_flags(p)
    p.add_argument("--run", required=True, help="output directory of a train run")
    p.add_argument("--split", default="test", choices=("train", "val", "test"), help="cases to generate for")
    p.add_argument("--beam", type=int, default=None, help="(default: the run's beam, 3)")
    p.add_argument("--max-len", type=int, default=None, help="(default: the run's max_len)")

    p = add("evaluate", cmd_evaluate, "score generations against reference reports")
    p.add_argument("--corpus", required=True, help="corpus.jsonl holding the references")
    p.add_argument("--generations", required=True, help="generations.jsonl from generate")

    for name, func, help_ in (("ablate", cmd_ablate, "run the six-row component ablation over seeds"),
                              ("sweep", cmd_sweep, "sweep one retrieval parameter over seeds")):
        p = add(name, func, help_)
        p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2], help="corpus and model seeds")
        p.add_argument("--cases", type=int, default=256, help="synthetic cases per seed")
        p.add_argument("--dim", type=int, default=32, help="corpus latent width")
        if name == "sweep":
            p.add_argument("--param", required=True, choices=SWEEP_PARAMS)
            p.add_argument("--values", required=True, help="comma-separated, e.g. 0.2,0.4,0.6,0.8,1.0")
        _add_train_flags(p)

    p = add("heatmap", cmd_heatmap, "write layer-1 attention of each case as an 8-bit PGM")
    _add_data_flags(p)
    p.add_argument("--run", required=True, help="output directory of a train run")
    p.add_argument("--cases", required=True, help="comma-separated case ids")
    return ap


def _fail(code: int, kind: str, exc: BaseException) -> int:
    msg = json.dumps(str(exc).strip("'\""))
    print(f"error kind={kind} type={type(exc).__name__} message={msg}", file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    level = os.environ.get("BIGEN_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(asctime)s %(name)s %(message)s")
    try:
        args = build_parser().parse_args(argv)
        return args.func(args, argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    except FloatingPointError as exc:  # NumericalFault and TrainingFault's cause
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except RuntimeError as exc:
        if isinstance(exc.__cause__, FloatingPointError):
            return _fail(EXIT_NUMERIC, "numerical", exc)
        return _fail(EXIT_DATA, "data", exc)
    except (ValueError, KeyError, OSError) as exc:
        return _fail(EXIT_DATA, "data", exc)


if __name__ == "__main__":
    sys.exit(main())
