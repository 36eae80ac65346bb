"""Experiment surface: corpora, semi-supervised splits, evaluation, CKA
analysis, the synthetic toy task, and run-config loading."""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cotrain
from .cotrain import CotrainSettings, RunSpec, TrainResult, train_loop, train_supervised
from .distill import DistillConfig, select_layers
from .encoder import (
    EncoderConfig,
    EncoderModel,
    forward,
    load_checkpoint,
    pack_sequences,
    save_checkpoint,
    tokenize,
)
from .errors import ConfigError, ValidationError
from .peft import LrRegime, ParamPolicy


@dataclass
class Corpus:
    """Texts with optional integer labels in [0, n_classes)."""

    examples: list[tuple[str, int | None]]
    n_classes: int
    name: str = "corpus"

    def __post_init__(self) -> None:
        for i, (_, label) in enumerate(self.examples):
            if label is not None and not (0 <= label < self.n_classes):
                raise ValidationError(
                    f"{self.name}: label {label} at example {i} outside "
                    f"[0, {self.n_classes})"
                )

    def __len__(self) -> int:
        return len(self.examples)

    def labeled_pairs(self) -> list[tuple[str, int]]:
        return [(t, y) for t, y in self.examples if y is not None]

    def texts(self) -> list[str]:
        return [t for t, _ in self.examples]


@dataclass
class SemiSplit:
    labeled: Corpus
    unlabeled: Corpus
    dev: Corpus
    test: Corpus
    per_class: int
    seed: int


@dataclass
class CKAMatrix:
    """Layer-by-layer similarity grid, teacher layers down, student across."""

    values: np.ndarray
    teacher_layers: list[int]
    student_layers: list[int]


def load_corpus(path: str | Path, fmt: str | None = None, n_classes: int | None = None) -> Corpus:
    """Read a JSONL ({"text": ..., "label": int?}) or CSV (text,label) corpus.

    The class count is inferred from the labels unless given explicitly;
    malformed lines are reported with their line numbers.
    """
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if fmt not in ("jsonl", "csv"):
        raise ConfigError(f"unknown corpus format {fmt!r}")
    examples: list[tuple[str, int | None]] = []
    if fmt == "jsonl":
        with path.open() as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    text = rec["text"]
                    label = rec.get("label")
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise ValidationError(f"{path}:{lineno}: malformed record ({exc})") from None
                if not isinstance(text, str):
                    raise ValidationError(f"{path}:{lineno}: text must be a string")
                if label is not None and not isinstance(label, int):
                    raise ValidationError(f"{path}:{lineno}: label must be an int")
                examples.append((text, label))
    else:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            if reader.fieldnames is None or "text" not in reader.fieldnames:
                raise ValidationError(f"{path}: CSV needs a 'text' column")
            for lineno, row in enumerate(reader, start=2):
                text = row["text"]
                raw = row.get("label")
                label: int | None = None
                if raw not in (None, ""):
                    try:
                        label = int(raw)
                    except ValueError:
                        raise ValidationError(f"{path}:{lineno}: bad label {raw!r}") from None
                examples.append((text, label))
    if not examples:
        raise ValidationError(f"{path}: corpus is empty")
    labels = [y for _, y in examples if y is not None]
    inferred = (max(labels) + 1) if labels else 0
    if n_classes is None:
        n_classes = inferred
    elif labels and inferred > n_classes:
        raise ValidationError(
            f"{path}: label {max(labels)} outside declared [0, {n_classes})"
        )
    return Corpus(examples, n_classes, name=path.stem)


def save_corpus(corpus: Corpus, path: str | Path, fmt: str | None = None) -> None:
    path = Path(path)
    if fmt is None:
        fmt = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if fmt == "jsonl":
        with path.open("w") as fh:
            for text, label in corpus.examples:
                rec: dict = {"text": text}
                if label is not None:
                    rec["label"] = label
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
    elif fmt == "csv":
        with path.open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["text", "label"])
            for text, label in corpus.examples:
                writer.writerow([text, "" if label is None else label])
    else:
        raise ConfigError(f"unknown corpus format {fmt!r}")


def make_split(
    corpus: Corpus,
    per_class: int,
    dev_size: int,
    test_size: int | None = None,
    seed: int = 0,
) -> SemiSplit:
    """Stratified semi-supervised split: exactly `per_class` labeled examples
    of each class; the rest goes to dev, test and (label-stripped) unlabeled.

    Deterministic under the seed; the four parts are disjoint.
    """
    if per_class < 1:
        raise ConfigError(f"per_class must be >= 1, got {per_class}")
    labeled_idx = [i for i, (_, y) in enumerate(corpus.examples) if y is not None]
    by_class: dict[int, list[int]] = {c: [] for c in range(corpus.n_classes)}
    for i in labeled_idx:
        by_class[corpus.examples[i][1]].append(i)
    rng = np.random.default_rng(seed)
    chosen: list[int] = []
    for c in range(corpus.n_classes):
        pool = by_class[c]
        if len(pool) < per_class:
            raise ValidationError(
                f"class {c} has only {len(pool)} labeled examples, need {per_class}"
            )
        picks = rng.permutation(len(pool))[:per_class]
        chosen.extend(pool[i] for i in picks)
    chosen_set = set(chosen)
    rest = [i for i in labeled_idx if i not in chosen_set]
    rest_order = rng.permutation(len(rest))
    rest = [rest[i] for i in rest_order]
    if test_size is None:
        test_size = max(0, (len(rest) - dev_size) // 2)
    if dev_size + test_size > len(rest):
        raise ValidationError(
            f"dev {dev_size} + test {test_size} exceeds remaining {len(rest)} examples"
        )
    dev_idx = rest[:dev_size]
    test_idx = rest[dev_size : dev_size + test_size]
    unl_idx = rest[dev_size + test_size :]

    def subset(indices: list[int], strip: bool, name: str) -> Corpus:
        ex = [
            (corpus.examples[i][0], None if strip else corpus.examples[i][1])
            for i in indices
        ]
        return Corpus(ex, corpus.n_classes, name=f"{corpus.name}.{name}")

    return SemiSplit(
        labeled=subset(chosen, False, "labeled"),
        unlabeled=subset(unl_idx, True, "unlabeled"),
        dev=subset(dev_idx, False, "dev"),
        test=subset(test_idx, False, "test"),
        per_class=per_class,
        seed=seed,
    )


def evaluate(model: EncoderModel, corpus: Corpus, max_len: int = 64, batch_size: int = 32) -> float:
    """Argmax accuracy in eval mode. Ties go to the lowest class index, so
    results are bit-reproducible."""
    if corpus.n_classes != model.config.n_classes:
        raise ConfigError(
            f"corpus has {corpus.n_classes} classes, model {model.config.n_classes}"
        )
    pairs = corpus.labeled_pairs()
    if not pairs:
        raise ValidationError(f"{corpus.name}: no labeled examples to score")
    return cotrain._accuracy(model, pairs, max_len, batch_size)


def linear_cka(x: np.ndarray, y: np.ndarray) -> float:
    """Linear centered kernel alignment between two representation matrices
    (rows = samples). Invariant to orthogonal transforms and isotropic
    scaling; 1 for self-comparison; 0 (with a warning) for zero variance."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 2 or y.ndim != 2 or x.shape[0] != y.shape[0]:
        raise ConfigError(f"linear_cka needs matching sample counts, got {x.shape} vs {y.shape}")
    if x.shape[0] < 2:
        raise ConfigError("linear_cka needs at least 2 samples")
    xc = x - x.mean(axis=0, keepdims=True)
    yc = y - y.mean(axis=0, keepdims=True)
    xx = np.linalg.norm(xc.T @ xc)
    yy = np.linalg.norm(yc.T @ yc)
    if xx == 0.0 or yy == 0.0:
        warnings.warn("linear_cka: zero-variance input, returning 0")
        return 0.0
    xy = np.linalg.norm(xc.T @ yc)
    return float(xy * xy / (xx * yy))


def cls_states(model: EncoderModel, texts: list[str], max_len: int = 64, batch_size: int = 32) -> list[np.ndarray]:
    """Per-layer CLS representations across a probe set; index 0 is the
    embedding output."""
    n_layers = model.config.n_layers
    collected: list[list[np.ndarray]] = [[] for _ in range(n_layers + 1)]
    for i in range(0, len(texts), batch_size):
        chunk = texts[i : i + batch_size]
        batch = pack_sequences([tokenize(t, max_len) for t in chunk])
        trace = forward(model, batch, train_mode=False)
        for li, h in enumerate(trace.hidden_states):
            collected[li].append(h.data[batch.cls_indices])
    return [np.concatenate(parts, axis=0) for parts in collected]


def cka_heatmap(
    teacher: EncoderModel,
    student: EncoderModel,
    probe_texts: list[str],
    n_samples: int,
    max_len: int = 64,
) -> CKAMatrix:
    """CKA between every teacher layer and every student layer over the CLS
    states of `n_samples` probe sequences."""
    if n_samples < 2:
        raise ConfigError(f"cka_heatmap needs n_samples >= 2, got {n_samples}")
    texts = probe_texts[:n_samples]
    if len(texts) < n_samples:
        raise ConfigError(f"only {len(texts)} probe texts for n_samples={n_samples}")
    t_states = cls_states(teacher, texts, max_len)
    s_states = cls_states(student, texts, max_len)
    values = np.zeros((len(t_states), len(s_states)))
    for i, tx in enumerate(t_states):
        for j, sx in enumerate(s_states):
            values[i, j] = linear_cka(tx, sx)
    return CKAMatrix(
        values=values,
        teacher_layers=list(range(len(t_states))),
        student_layers=list(range(len(s_states))),
    )


def write_cka_csv(matrix: CKAMatrix, path: str | Path) -> None:
    """Header row = student layer indices, first column = teacher layer index."""
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["teacher_layer"] + [str(j) for j in matrix.student_layers])
        for i, row in zip(matrix.teacher_layers, matrix.values):
            writer.writerow([str(i)] + [repr(float(v)) for v in row])


# ---------------------------------------------------------------------------
# Synthetic topic-classification toy task

_TOY_KEYWORDS = [
    ["bank", "tax", "fund", "sale", "debt", "cash", "loan", "bond", "rate",
     "firm", "pay", "gold", "euro", "fee", "audit", "trade", "stock", "yield",
     "wage", "lease", "asset", "broker", "mint", "tariff"],
    ["team", "goal", "cup", "race", "win", "game", "club", "bat", "run",
     "swim", "kick", "score", "coach", "arena", "medal", "derby", "pitch",
     "squad", "rally", "serve", "puck", "sprint", "relay", "vault"],
    ["chip", "code", "data", "web", "app", "byte", "wifi", "disk", "bot",
     "node", "gpu", "lan", "pixel", "cache", "query", "modem", "laser",
     "robot", "cloud", "patch", "kernel", "array", "stack", "cable"],
    ["vote", "law", "king", "veto", "envoy", "court", "party", "mayor",
     "bill", "seat", "poll", "duke", "senate", "decree", "treaty", "union",
     "crown", "ballot", "charter", "regime", "quorum", "edict", "summit",
     "assembly"],
]

_TOY_NOISE = [
    "the", "a", "of", "to", "and", "in", "on", "for", "with", "as", "at",
    "by", "from", "this", "that", "it", "was", "is", "are", "be", "has",
    "had", "new", "old", "big", "few", "last", "next", "more", "some",
    "day", "week", "year", "news", "many", "not", "but", "they", "will",
    "can",
]


def gen_toy_corpus(
    n_examples: int,
    n_classes: int = 4,
    seed: int = 0,
    mix: float = 0.55,
    overlap: float = 0.0,
    keywords_per_class: int = 24,
    noise_words: int | None = None,
    min_words: int = 5,
    max_words: int = 9,
) -> Corpus:
    """Synthetic topic corpus from class-conditional keyword distributions.

    Every word slot draws a keyword with probability `mix` (else a shared
    noise word). A keyword comes from the label's own sub-lexicon with
    probability 1 - overlap, otherwise uniformly from the whole keyword
    lexicon. Separability is controlled by `mix` and `overlap`; the size of
    each class's sub-lexicon (`keywords_per_class`) controls how many
    labeled examples it takes to cover the vocabulary. Each example is
    guaranteed at least one own-class keyword, so labels stay recoverable.
    """
    if not (2 <= n_classes <= len(_TOY_KEYWORDS)):
        raise ConfigError(f"n_classes must be in [2, {len(_TOY_KEYWORDS)}], got {n_classes}")
    if not (0.0 < mix <= 1.0):
        raise ConfigError(f"mix must be in (0, 1], got {mix}")
    if not (0.0 <= overlap < 1.0):
        raise ConfigError(f"overlap must be in [0, 1), got {overlap}")
    if not (1 <= keywords_per_class <= len(_TOY_KEYWORDS[0])):
        raise ConfigError(
            f"keywords_per_class must be in [1, {len(_TOY_KEYWORDS[0])}], "
            f"got {keywords_per_class}"
        )
    if noise_words is None:
        noise_words = len(_TOY_NOISE)
    if not (1 <= noise_words <= len(_TOY_NOISE)):
        raise ConfigError(
            f"noise_words must be in [1, {len(_TOY_NOISE)}], got {noise_words}"
        )
    rng = np.random.default_rng(seed)
    sub_lex = [_TOY_KEYWORDS[c][:keywords_per_class] for c in range(n_classes)]
    noise_lex = _TOY_NOISE[:noise_words]
    lexicon = [w for words in sub_lex for w in words]
    examples: list[tuple[str, int | None]] = []
    for i in range(n_examples):
        label = int(i % n_classes)
        own = sub_lex[label]
        n_words = int(rng.integers(min_words, max_words + 1))
        words = []
        n_own = 0
        for _ in range(n_words):
            if rng.random() < mix:
                if overlap > 0.0 and rng.random() < overlap:
                    words.append(lexicon[rng.integers(len(lexicon))])
                else:
                    words.append(own[rng.integers(len(own))])
                    n_own += 1
            else:
                words.append(noise_lex[rng.integers(len(noise_lex))])
        if n_own == 0:  # keep the label recoverable
            words[rng.integers(len(words))] = own[rng.integers(len(own))]
        order = rng.permutation(len(words))
        examples.append((" ".join(words[j] for j in order), label))
    return Corpus(examples, n_classes, name="toy")


# ---------------------------------------------------------------------------
# Run configuration

@dataclass
class RunConfig:
    """File-level description of a training run; see README for the schema."""

    seed: int = 0
    out_dir: str = "run"
    data: dict = field(default_factory=dict)
    teacher: dict = field(default_factory=dict)
    students: dict = field(default_factory=dict)
    distill: dict = field(default_factory=dict)
    consistency: dict = field(default_factory=dict)
    peft: dict = field(default_factory=dict)
    optim: dict = field(default_factory=dict)
    eval: dict = field(default_factory=dict)

    @staticmethod
    def from_file(path: str | Path) -> "RunConfig":
        doc = json.loads(Path(path).read_text())
        known = {f for f in RunConfig.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown run-config keys: {sorted(unknown)}")
        return RunConfig(**doc)


def _load_part(data_cfg: dict, key: str) -> Corpus:
    if key not in data_cfg:
        raise ConfigError(f"run config data section is missing {key!r}")
    return load_corpus(data_cfg[key])


def prepare_run(config: RunConfig, out_dir: str | Path | None = None) -> RunSpec:
    """Materialize a RunSpec from a RunConfig: load corpora, build or load
    (and, if asked, pre-train) the teacher, resolve policies."""
    data_cfg = config.data
    labeled_c = _load_part(data_cfg, "labeled")
    unlabeled_c = _load_part(data_cfg, "unlabeled")
    dev_c = _load_part(data_cfg, "dev")
    test_c = load_corpus(data_cfg["test"]) if "test" in data_cfg else None

    n_classes = max(labeled_c.n_classes, dev_c.n_classes)
    optim_cfg = config.optim
    regime: str | LrRegime = optim_cfg.get("regime", "bert")
    if "peak_lr" in optim_cfg:
        regime = LrRegime(
            "custom",
            float(optim_cfg["peak_lr"]),
            float(optim_cfg.get("warmup_fraction", 0.2)),
            float(optim_cfg.get("final_fraction", 0.0)),
        )
    max_len = int(optim_cfg.get("max_len", 64))

    teacher_cfg_doc = dict(config.teacher)
    ckpt = teacher_cfg_doc.pop("checkpoint", None)
    pretrain_steps = int(teacher_cfg_doc.pop("pretrain_steps", 0))
    pretrain_corpus_path = teacher_cfg_doc.pop("pretrain_corpus", None)
    pretrain_batch = int(teacher_cfg_doc.pop("pretrain_batch", 16))
    pretrain_lr = teacher_cfg_doc.pop("pretrain_lr", None)
    if ckpt:
        teacher = load_checkpoint(ckpt)
    else:
        if "config" not in teacher_cfg_doc:
            raise ConfigError("teacher section needs either 'checkpoint' or 'config'")
        enc_doc = dict(teacher_cfg_doc["config"])
        enc_doc.setdefault("n_classes", n_classes)
        teacher = EncoderModel.init(
            EncoderConfig.from_dict(enc_doc), seed=config.seed,
        )
        if pretrain_steps:
            if pretrain_corpus_path is None:
                raise ConfigError("teacher pretraining needs 'pretrain_corpus'")
            pre = load_corpus(pretrain_corpus_path)
            pre_regime = (
                LrRegime("pretrain", float(pretrain_lr), 0.1, 0.0)
                if pretrain_lr is not None else regime
            )
            train_supervised(
                teacher, pre.labeled_pairs(), pretrain_steps, regime=pre_regime,
                batch_size=pretrain_batch, seed=config.seed, max_len=max_len,
            )
    if teacher.config.n_classes != n_classes:
        raise ConfigError(
            f"teacher has {teacher.config.n_classes} classes, data has {n_classes}"
        )

    selections = [
        select_layers(sel, teacher.config)
        for sel in config.students.get("selections", [])
    ]
    if len(selections) < 1:
        raise ConfigError("students section needs at least one layer selection")

    settings = CotrainSettings(
        distill=DistillConfig(**config.distill),
        lam=float(config.consistency.get("lambda", 1.0)),
        mu_ramp_fraction=float(config.consistency.get("mu_ramp_fraction", 0.2)),
        teacher_finetune=bool(optim_cfg.get("teacher_finetune", False)),
        regime=regime,
        seed=config.seed,
    )
    policy = ParamPolicy(
        bitfit=bool(config.peft.get("bitfit", False)),
        freeze_embeddings=bool(config.peft.get("freeze_embeddings", False)),
        train_head=bool(config.peft.get("train_head", True)),
        explicit_overrides=dict(config.peft.get("overrides", {})),
    )
    return RunSpec(
        seed=config.seed,
        teacher=teacher,
        selections=selections,
        settings=settings,
        policy=policy,
        total_steps=int(optim_cfg.get("total_steps", 100)),
        labeled=labeled_c.labeled_pairs(),
        unlabeled=unlabeled_c.texts(),
        dev=dev_c.labeled_pairs(),
        test=test_c.labeled_pairs() if test_c is not None else None,
        labeled_batch=int(optim_cfg.get("labeled_batch", 4)),
        unlabeled_batch=int(optim_cfg.get("unlabeled_batch", 16)),
        eval_interval=int(config.eval.get("interval", 25)),
        max_len=max_len,
        out_dir=Path(out_dir if out_dir is not None else config.out_dir),
    )


def run_training(config: RunConfig, out_dir: str | Path | None = None) -> TrainResult:
    spec = prepare_run(config, out_dir)
    if spec.out_dir is not None:
        spec.out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(spec.teacher, spec.out_dir / "teacher.json")
    return train_loop(spec)
