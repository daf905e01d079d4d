"""Training loop, model selection, ablation grid and hyper-parameter sweeps."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .bank import KnowledgeBank
from .corpus import ENTITY_TERMS, Case, Vocab
from .encoder import ABLATION_ROWS, EncoderConfig
from .metrics import MetricReport, bleu, evaluate
from .model import Batch, BiGenModel
from .optim import Adam
from .retrieval import RetrievalConfig

log = logging.getLogger(__name__)


class TrainingFault(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 1e-4
    weight_decay: float = 5e-5
    seed: int = 0
    patience: int = 10
    d: int = 512
    L: int = 3
    heads: int = 4
    ws: bool = True
    wsl: bool = True
    vtca: bool = True
    kr: bool = True
    ttca: bool = True
    k: float = 0.4
    m: int = 20
    v: int = 3
    beam: int = 3
    max_len: int = 64
    val_every: int = 1

    def __post_init__(self):
        if self.lr <= 0 or self.weight_decay <= 0:
            raise ValueError("lr and weight_decay must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(L=self.L, heads=self.heads, d=self.d, ws=self.ws, wsl=self.wsl,
                             vtca=self.vtca, kr=self.kr, ttca=self.ttca)

    def retrieval_config(self) -> RetrievalConfig:
        return RetrievalConfig(k=self.k, m=self.m, v=self.v)

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, val = line.partition("=")
            key, val = key.strip(), val.strip()
            if key not in types:
                raise KeyError(f"unknown config key '{key}'")
            kind = types[key]
            if kind in ("bool", bool):
                values[key] = val.lower() in ("1", "true", "yes", "on")
            elif kind in ("int", int):
                values[key] = int(val)
            else:
                values[key] = float(val)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values)


@dataclass
class TrainResult:
    model: BiGenModel
    log: list[dict] = field(default_factory=list)
    best_epoch: int = -1
    best_val_bleu4: float = float("-inf")


def build_model(cfg: TrainConfig, vocab: Vocab, d_in: int, d_bank: int, dtype=np.float32) -> BiGenModel:
    return BiGenModel(cfg.encoder_config(), len(vocab), d_in, d_bank, seed=cfg.seed, dtype=dtype,
                      rcfg=cfg.retrieval_config())


def _bank_for(cfg: TrainConfig, bank: KnowledgeBank | None) -> KnowledgeBank | None:
    if not cfg.kr:
        return None
    if bank is None:
        raise ValueError("knowledge retrieval enabled but no bank given")
    if bank.provenance.get("split", "train") != "train":
        raise ValueError("knowledge bank was not built from the train split")
    return bank


def _locate_fault(model: BiGenModel, cases: Sequence[Case], vocab: Vocab, bank) -> str:
    for c in cases:
        try:
            with ad.no_grad():
                model.loss(Batch.from_cases([c], vocab), bank, vocab.pad)
        except FloatingPointError:
            return c.case_id
    return ",".join(c.case_id for c in cases)


def val_bleu4(model: BiGenModel, cases: Sequence[Case], vocab: Vocab, bank, max_len: int) -> float:
    if not cases:
        return 0.0
    hyps = model.generate_greedy_batch(cases, vocab, bank, max_len)
    return bleu([vocab.decode(h) for h in hyps], [c.report for c in cases], 4)


def train(cfg: TrainConfig, train_cases: Sequence[Case], val_cases: Sequence[Case], vocab: Vocab,
          bank: KnowledgeBank | None, log_path: str | Path | None = None) -> TrainResult:
    """Train with Adam on the summed NLL; keep the parameters with the best validation BLEU-4."""
    if not train_cases:
        raise ValueError("empty training set")
    bank = _bank_for(cfg, bank)
    if bank is not None:
        bank.check_disjoint(val_cases)
    d_in = train_cases[0].visual.shape[1]
    d_bank = bank.d if bank is not None else train_cases[0].retrieval.shape[1]
    model = build_model(cfg, vocab, d_in, d_bank)
    opt = Adam(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    result = TrainResult(model)
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    stale = 0
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, 7, epoch]).permutation(len(train_cases))
            total = 0.0
            for start in range(0, len(order), cfg.batch_size):
                chunk = [train_cases[i] for i in order[start:start + cfg.batch_size]]
                opt.zero_grad()
                try:
                    loss = model.loss(Batch.from_cases(chunk, vocab), bank, vocab.pad)
                except FloatingPointError as exc:
                    bad = _locate_fault(model, chunk, vocab, bank)
                    raise TrainingFault(f"non-finite loss at epoch {epoch}, case {bad}: {exc}") from exc
                loss.backward()
                opt.step()
                total += loss.item()
            record = {"epoch": epoch, "loss": total / len(train_cases)}
            if val_cases and ((epoch + 1) % cfg.val_every == 0 or epoch == cfg.epochs - 1):
                score = val_bleu4(model, val_cases, vocab, bank, cfg.max_len)
                record["val_bleu4"] = score
                if score > result.best_val_bleu4:
                    result.best_val_bleu4, result.best_epoch = score, epoch
                    best_state = {k: v.copy() for k, v in model.state_dict().items()}
                    stale = 0
                else:
                    stale += 1
            result.log.append(record)
            log.info("epoch %d loss %.4f val_bleu4 %s", epoch, record["loss"], record.get("val_bleu4"))
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if val_cases and stale >= cfg.patience:
                break
    finally:
        if log_fh:
            log_fh.close()
    if val_cases:
        model.load_state_dict(best_state)
    return result


def generate_reports(model: BiGenModel, cases: Sequence[Case], vocab: Vocab, bank, beam: int,
                     max_len: int):
    bank = bank if model.cfg.kr else None
    hyps = model.generate(cases, vocab, bank, beam=beam, max_len=max_len)
    return [vocab.decode(h.tokens) for h in hyps], hyps


def evaluate_model(model: BiGenModel, cases: Sequence[Case], vocab: Vocab, bank, beam: int = 3,
                   max_len: int = 64) -> MetricReport:
    texts, _ = generate_reports(model, cases, vocab, bank, beam, max_len)
    return evaluate(texts, [c.report for c in cases], ENTITY_TERMS)


def save_checkpoint(path, model: BiGenModel) -> None:
    checkpoint.save(path, model.state_dict())


def load_checkpoint(path, cfg: TrainConfig, vocab: Vocab, d_in: int, d_bank: int) -> BiGenModel:
    model = build_model(cfg, vocab, d_in, d_bank)
    model.load_state_dict(checkpoint.load(path))
    return model


# -- experiment drivers ---------------------------------------------------------
def average_improvement(row: dict[str, float], base: dict[str, float]) -> float:
    keys = MetricReport.NLP_KEYS
    deltas = [(row[k] - base[k]) / base[k] for k in keys if base[k] > 0]
    return float(np.mean(deltas)) if deltas else 0.0


def run_ablation(base: TrainConfig, train_cases, val_cases, test_cases, vocab: Vocab, bank: KnowledgeBank,
                 rows: Sequence[dict[str, bool]] = ABLATION_ROWS, seeds: Sequence[int] = (0,)) -> list[dict]:
    """One result dict per flag row: flags, seed-averaged NLP metrics and ``avg_delta``."""
    for flags in rows:
        EncoderConfig(L=base.L, heads=base.heads, d=base.d, **flags)  # validate before any training
    results = []
    for flags in rows:
        per_seed = []
        for s in seeds:
            cfg = replace(base, seed=s, **flags)
            res = train(cfg, train_cases, val_cases, vocab, bank)
            rep = evaluate_model(res.model, test_cases, vocab, bank, cfg.beam, cfg.max_len)
            per_seed.append(rep.as_dict())
            log.info("ablation %s seed %d bleu4 %.4f", flags, s, rep.bleu4)
        mean = {k: float(np.mean([r[k] for r in per_seed])) for k in per_seed[0]}
        results.append({"flags": dict(flags), "metrics": mean, "per_seed": per_seed})
    ref = results[0]["metrics"]
    for r in results:
        r["avg_delta"] = average_improvement(r["metrics"], ref) if r is not results[0] else None
    return results


def ablation_table(results: Sequence[dict]) -> str:
    head = ["WS", "WSL", "VTCA", "KR", "TTCA"]
    cols = list(MetricReport.NLP_KEYS)
    lines = [" ".join(f"{h:>4}" for h in head) + " | " + " ".join(f"{c[:8]:>8}" for c in cols) + " | avg_delta"]
    for r in results:
        flags = " ".join(f"{'x' if r['flags'][h.lower()] else '-':>4}" for h in head)
        vals = " ".join(f"{r['metrics'][c]:8.4f}" for c in cols)
        delta = "-" if r["avg_delta"] is None else f"{100 * r['avg_delta']:+.2f}%"
        lines.append(f"{flags} | {vals} | {delta}")
    return "\n".join(lines)


SWEEP_PARAMS = ("k", "v", "m")


def run_sweep(base: TrainConfig, param: str, values: Sequence, train_cases, val_cases, test_cases,
              vocab: Vocab, bank: KnowledgeBank) -> list[dict]:
    if param not in SWEEP_PARAMS:
        raise ValueError(f"sweep parameter must be one of {SWEEP_PARAMS}, got '{param}'")
    for val in values:
        if param == "k" and not 0 < float(val) <= 1:
            raise ValueError(f"k={val} outside (0, 1]")
        if param == "v" and not 1 <= int(val) <= bank.T:
            raise ValueError(f"v={val} outside [1, T={bank.T}]")
        if param == "m" and int(val) < 1:
            raise ValueError(f"m={val} must be >= 1")
    out = []
    for val in values:
        cfg = replace(base, **{param: float(val) if param == "k" else int(val)})
        res = train(cfg, train_cases, val_cases, vocab, bank)
        rep = evaluate_model(res.model, test_cases, vocab, bank, cfg.beam, cfg.max_len)
        out.append({"param": param, "value": getattr(cfg, param), "metrics": rep.as_dict()})
    return out
