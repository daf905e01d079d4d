"""Synthetic paired (patch features, report) corpus in a shared latent space.

Each tissue type owns a prototype vector. A case is a grid of patches whose
tissue map is made of contiguous blobs; every patch carries two independent
noisy views of its prototype: a *visual* feature passed through a fixed random
mixing matrix (the model input) and a *retrieval* embedding living in the same
latent space as the sentence embeddings of the knowledge bank. Reports are
assembled from per-tissue templates, ordered by tissue area, and close with a
Her-2 status sentence.
"""

from __future__ import annotations

import base64
import hashlib
import json
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

# name, Her-2 influence, (extensive template, focal template)
TISSUE_LIBRARY: list[tuple[str, str, tuple[str, str]]] = [
    ("invasive ductal carcinoma", "positive",
     ("sections show extensive invasive ductal carcinoma, morphology m-8500/3.",
      "a focus of invasive ductal carcinoma is identified.")),
    ("fibrous stroma", "none",
     ("dense fibrous stroma occupies much of the section.",
      "fibrous stroma is seen at the periphery.")),
    ("adipose tissue", "none",
     ("mature adipose tissue is abundant.",
      "scattered adipose tissue is present.")),
    ("lobular carcinoma", "negative",
     ("infiltrating lobular carcinoma, m-8520/3, is widespread.",
      "small nests of lobular carcinoma are noted.")),
    ("lymphocytic infiltrate", "none",
     ("a dense lymphocytic infiltrate surrounds the lesion.",
      "a mild lymphocytic infiltrate is present.")),
    ("ductal carcinoma in situ", "none",
     ("ductal carcinoma in situ, m-8500/2, is extensive.",
      "ductal carcinoma in situ is focally present.")),
    ("necrosis", "none",
     ("large areas of necrosis are identified.",
      "focal necrosis is seen.")),
    ("benign breast lobules", "none",
     ("benign breast lobules are well preserved.",
      "rare benign breast lobules are present.")),
    ("microcalcifications", "none",
     ("numerous microcalcifications are seen.",
      "occasional microcalcifications are noted.")),
    ("blood vessels", "none",
     ("prominent blood vessels are seen throughout.",
      "small blood vessels are present.")),
]

HER2_TEMPLATE = "her-2 status: {}."
BACKGROUND = -1  # tissue id of non-diagnostic patches; never mentioned in reports
ENTITY_TERMS: tuple[str, ...] = tuple(
    sorted({name for name, _, _ in TISSUE_LIBRARY} | {"her-2", "m-8500/3", "m-8520/3", "m-8500/2"})
)


@dataclass(frozen=True)
class TissuePrototype:
    tissue_id: int
    name: str
    vector: np.ndarray
    templates: tuple[str, ...]
    her2_influence: str


@dataclass
class World:
    """Everything needed to regenerate features and embed sentences."""

    seed: int
    d: int
    prototypes: list[TissuePrototype]
    mixing: np.ndarray
    status_vectors: dict[str, np.ndarray]
    background: np.ndarray
    background_range: tuple[float, float] = (0.3, 0.6)
    visual_noise: float = 0.35
    retrieval_noise: float = 0.12
    sentence_noise: float = 0.08
    mention_threshold: float = 0.08
    extensive_threshold: float = 0.3
    visual_family: int = 2  # tissues per visual family; see visual_table

    def visual_table(self) -> np.ndarray:
        """Prototype rows behind the visual view, background last.

        The visual extractor is not trained on text, so it does not separate every
        tissue the reports distinguish: each run of ``visual_family`` consecutive
        tissues shares the prototype of its first member. The retrieval view keeps
        one prototype per tissue."""
        f = self.visual_family
        return np.stack([self.prototypes[(t // f) * f].vector for t in range(len(self.prototypes))]
                        + [self.background])

    def header(self) -> dict:
        return {"type": "header", "seed": self.seed, "d": self.d, "tissue_count": len(self.prototypes),
                "visual_noise": self.visual_noise, "retrieval_noise": self.retrieval_noise,
                "sentence_noise": self.sentence_noise, "mention_threshold": self.mention_threshold,
                "extensive_threshold": self.extensive_threshold, "visual_family": self.visual_family}


@dataclass
class Case:
    case_id: str
    patient_id: str
    grid: tuple[int, int]
    tissue_ids: np.ndarray  # (M,) row-major, BACKGROUND for non-diagnostic patches
    visual: np.ndarray  # (M, d) float32, model input X
    retrieval: np.ndarray  # (M, d) float32, retrieval view
    report: str
    her2: str

    @property
    def M(self) -> int:
        return len(self.tissue_ids)

    def positions(self) -> list[tuple[int, int]]:
        cols = self.grid[1]
        return [(i // cols, i % cols) for i in range(self.M)]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


def make_world(seed: int, tissue_count: int, d: int, **noise) -> World:
    if tissue_count < 1:
        raise ValueError("tissue_count must be at least 1")
    if tissue_count > len(TISSUE_LIBRARY):
        raise ValueError(f"tissue_count {tissue_count} exceeds the {len(TISSUE_LIBRARY)} available tissue types")
    if d < 4:
        raise ValueError(f"latent width d={d} must be at least 4")
    if noise.get("visual_family", 1) < 1:
        raise ValueError("visual_family must be at least 1")
    rng = np.random.default_rng([seed, 0])
    vecs: list[np.ndarray] = []
    # extra directions: two Her-2 status sentences and non-diagnostic background
    while len(vecs) < tissue_count + 3:
        cand = _unit(rng.standard_normal(d))
        if all(abs(cand @ v) < 0.5 for v in vecs):
            vecs.append(cand)
    protos = [
        TissuePrototype(i, name, vecs[i], templates, infl)
        for i, (name, infl, templates) in enumerate(TISSUE_LIBRARY[:tissue_count])
    ]
    q, _ = np.linalg.qr(rng.standard_normal((d, d)))
    return World(seed=seed, d=d, prototypes=protos, mixing=q,
                 status_vectors={"positive": vecs[-3], "negative": vecs[-2]}, background=vecs[-1], **noise)


def _tissue_map(rng: np.random.Generator, rows: int, cols: int, tissues: np.ndarray, weights: np.ndarray) -> np.ndarray:
    """Weighted-Voronoi blobs: each cell takes the tissue of its nearest seed point."""
    n_seeds = len(tissues) * 3
    seed_tissue = rng.choice(tissues, size=n_seeds, p=weights)
    seed_tissue[: len(tissues)] = tissues  # every chosen tissue gets at least one blob
    pts = rng.uniform(0, 1, size=(n_seeds, 2)) * [rows, cols]
    rr, cc = np.mgrid[0:rows, 0:cols]
    cells = np.stack([rr.ravel() + 0.5, cc.ravel() + 0.5], axis=1)
    dist = ((cells[:, None, :] - pts[None]) ** 2).sum(-1)
    labels = seed_tissue[dist.argmin(1)]
    flip = rng.uniform(size=labels.shape) < 0.05
    labels[flip] = rng.choice(tissues, size=int(flip.sum()))
    return labels


def compose_report(world: World, tissue_ids: np.ndarray) -> tuple[str, str]:
    """Report for a tissue map; area fractions are taken over diagnostic (non-background) patches."""
    counts = Counter(t for t in tissue_ids.tolist() if t != BACKGROUND)
    m = max(sum(counts.values()), 1)
    mentioned = [(c / m, t) for t, c in counts.items() if c / m >= world.mention_threshold]
    mentioned.sort(key=lambda ft: (-ft[0], ft[1]))
    sentences = []
    positive = False
    for frac, t in mentioned:
        proto = world.prototypes[t]
        sentences.append(proto.templates[0 if frac >= world.extensive_threshold else 1])
        positive |= proto.her2_influence == "positive"
    status = "positive" if positive else "negative"
    sentences.append(HER2_TEMPLATE.format(status))
    return " ".join(sentences), status


def generate_case(world: World, index: int, patches_range: tuple[int, int], patient_id: str | None = None) -> Case:
    rng = np.random.default_rng([world.seed, 1, index])
    lo, hi = patches_range
    m_target = int(rng.integers(lo, hi + 1))
    cols = max(1, int(round(np.sqrt(m_target))))
    rows = max(1, m_target // cols)
    n_t = len(world.prototypes)
    k = int(rng.integers(1, min(4, n_t) + 1))
    tissues = np.sort(rng.choice(n_t, size=k, replace=False))
    bg = rng.uniform(*world.background_range)
    weights = np.append(rng.dirichlet(np.ones(k)) * (1 - bg), bg)
    labels = _tissue_map(rng, rows, cols, np.append(tissues, BACKGROUND), weights)
    # BACKGROUND == -1 picks the last row
    table = np.stack([p.vector for p in world.prototypes] + [world.background])
    protos = table[labels]
    d = world.d
    visual = (world.visual_table()[labels] @ world.mixing
              + world.visual_noise * rng.standard_normal((len(labels), d))).astype(np.float32)
    retrieval = (protos + world.retrieval_noise * rng.standard_normal((len(labels), d))).astype(np.float32)
    report, her2 = compose_report(world, labels)
    return Case(case_id=f"case-{index:05d}", patient_id=patient_id or f"patient-{index:05d}",
                grid=(rows, cols), tissue_ids=labels.astype(np.int64), visual=visual,
                retrieval=retrieval, report=report, her2=her2)


def generate_corpus(seed: int, n_cases: int, tissue_count: int = 8,
                    patches_per_case_range: tuple[int, int] = (64, 256), d: int = 32,
                    multi_case_rate: float = 0.0) -> tuple[World, list[Case]]:
    """Deterministic corpus; ``multi_case_rate`` gives some patients a second case."""
    if n_cases < 1:
        raise ValueError("n_cases must be at least 1")
    lo, hi = patches_per_case_range
    if lo < 1 or hi < lo:
        raise ValueError(f"invalid patches_per_case_range {patches_per_case_range}")
    world = make_world(seed, tissue_count, d)
    prng = np.random.default_rng([seed, 2])
    cases = []
    patient = 0
    for i in range(n_cases):
        if i > 0 and prng.uniform() < multi_case_rate:
            pid = f"patient-{patient - 1:05d}"
        else:
            pid = f"patient-{patient:05d}"
            patient += 1
        cases.append(generate_case(world, i, (lo, hi), pid))
    return world, cases


# -- splits -----------------------------------------------------------------
SPLIT_RATIO = (796, 88, 93)


def split_dataset(cases: Sequence[Case], seed: int = 0) -> tuple[list[Case], list[Case], list[Case]]:
    """Patient-disjoint train/val/test split at the 796:88:93 ratio."""
    by_patient: dict[str, list[Case]] = {}
    for c in sorted(cases, key=lambda c: c.case_id):
        if not c.patient_id:
            raise ValueError(f"case {c.case_id} has no patient_id")
        by_patient.setdefault(c.patient_id, []).append(c)
    patients = sorted(by_patient)
    if len(patients) < 3:
        raise ValueError(f"need at least 3 patients to split, got {len(patients)}")
    order = np.random.default_rng([seed, 3]).permutation(len(patients))
    patients = [patients[i] for i in order]
    n = len(cases)
    total = sum(SPLIT_RATIO)
    n_val = max(1, round(n * SPLIT_RATIO[1] / total))
    n_test = max(1, round(n * SPLIT_RATIO[2] / total))
    targets = [n_val, n_test]
    val: list[Case] = []
    test: list[Case] = []
    train: list[Case] = []
    pi = 0
    for bucket, target in ((val, targets[0]), (test, targets[1])):
        while len(bucket) < target and len(patients) - pi > 1:
            bucket.extend(by_patient[patients[pi]])
            pi += 1
    for p in patients[pi:]:
        train.extend(by_patient[p])
    if not train:
        raise ValueError("split left the training set empty")
    return train, val, test


# -- vocabulary ---------------------------------------------------------------
_TOKEN_RE = re.compile(r"[a-z0-9]+(?:[-/.][a-z0-9]+)*|[^\sa-z0-9]")
_ATTACH = set(".,;:")


def tokenize(text: str) -> list[str]:
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    out = ""
    for tok in tokens:
        if tok in _ATTACH or not out:
            out += tok
        else:
            out += " " + tok
    return out


@dataclass
class Vocab:
    itos: list[str]
    stoi: dict[str, int] = field(init=False)

    def __post_init__(self):
        self.stoi = {t: i for i, t in enumerate(self.itos)}
        for s in SPECIALS:
            if self.itos.count(s) != 1:
                raise ValueError(f"special token {s} must appear exactly once")

    def __len__(self) -> int:
        return len(self.itos)

    @property
    def pad(self) -> int:
        return self.stoi[PAD]

    @property
    def bos(self) -> int:
        return self.stoi[BOS]

    @property
    def eos(self) -> int:
        return self.stoi[EOS]

    @property
    def unk(self) -> int:
        return self.stoi[UNK]

    def encode(self, text: str) -> list[int]:
        return [self.bos] + [self.stoi.get(t, self.unk) for t in tokenize(text)] + [self.eos]

    def decode(self, ids: Iterable[int]) -> str:
        words = []
        for i in ids:
            i = int(i)
            if i < 0 or i >= len(self.itos):
                raise KeyError(f"token id {i} not in vocabulary of size {len(self.itos)}")
            if i in (self.bos, self.pad):
                continue
            if i == self.eos:
                break
            words.append(self.itos[i])
        return detokenize(words)


def build_vocab(reports: Iterable[str], min_freq: int = 1) -> Vocab:
    counts = Counter(t for r in reports for t in tokenize(r))
    words = sorted(w for w, c in counts.items() if c >= min_freq and w not in SPECIALS)
    return Vocab(list(SPECIALS) + words)


# -- persistence --------------------------------------------------------------
def _b64(arr: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype="<f4").tobytes()).decode("ascii")


def _unb64(s: str, shape) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f4").reshape(shape).astype(np.float32)


def case_to_record(c: Case) -> dict:
    return {"type": "case", "case_id": c.case_id, "patient_id": c.patient_id, "grid": list(c.grid),
            "tissue_ids": c.tissue_ids.tolist(), "visual_f32": _b64(c.visual),
            "retrieval_f32": _b64(c.retrieval), "report": c.report, "her2": c.her2}


def record_to_case(r: dict, d: int) -> Case:
    m = len(r["tissue_ids"])
    return Case(case_id=r["case_id"], patient_id=r["patient_id"], grid=tuple(r["grid"]),
                tissue_ids=np.asarray(r["tissue_ids"], dtype=np.int64),
                visual=_unb64(r["visual_f32"], (m, d)), retrieval=_unb64(r["retrieval_f32"], (m, d)),
                report=r["report"], her2=r["her2"])


def save_corpus(path, world: World, cases: Sequence[Case]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(world.header(), sort_keys=True) + "\n")
        for c in cases:
            fh.write(json.dumps(case_to_record(c), sort_keys=True) + "\n")


def load_corpus(path) -> tuple[World, list[Case]]:
    with open(path, encoding="utf-8") as fh:
        header = json.loads(fh.readline())
        if header.get("type") != "header":
            raise ValueError(f"{path}: first record must be the corpus header")
        world = make_world(header["seed"], header["tissue_count"], header["d"],
                           **{k: header[k] for k in ("visual_noise", "retrieval_noise", "sentence_noise",
                                                     "mention_threshold", "extensive_threshold", "visual_family")
                              if k in header})
        cases = [record_to_case(json.loads(line), world.d) for line in fh if line.strip()]
    return world, cases


def save_split_manifest(path, train, val, test) -> None:
    Path(path).write_text(json.dumps({"train": [c.case_id for c in train], "val": [c.case_id for c in val],
                                      "test": [c.case_id for c in test]}, indent=1) + "\n")


def load_split_manifest(path) -> dict[str, list[str]]:
    return json.loads(Path(path).read_text())


def corpus_hash(cases: Sequence[Case]) -> str:
    h = hashlib.sha256()
    for c in cases:
        h.update(json.dumps(case_to_record(c), sort_keys=True).encode())
    return h.hexdigest()[:16]
