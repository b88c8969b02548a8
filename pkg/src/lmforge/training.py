"""Masked-LM batches, MLM/NSP and distillation losses, and the training loops.

``pretrain`` trains from scratch, ``finetune`` continues from a checkpoint
(optionally swapping in a new tokenizer first), and ``distill`` trains a
smaller student against a frozen teacher. All loops use Adam with linear
warmup then linear decay and are deterministic under ``Schedule.seed``.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .corpus import Corpus, SentencePair, sample_sentence_pairs
from .model import (ForwardOutput, ModelConfig, ModelParameters, forward, load_checkpoint, new_model,
                    replace_embeddings_for_new_tokenizer, save_checkpoint)
from .tensor import Tensor
from .tokenizer import BpeTokenizer, Tokenizer, WordPieceTokenizer, load_tokenizer

log = logging.getLogger(__name__)

IGNORE_INDEX = -100


@dataclass(frozen=True)
class MaskingPolicy:
    select_prob: float = 0.15
    mask_frac: float = 0.8
    random_frac: float = 0.1
    keep_frac: float = 0.1

    def __post_init__(self):
        if not 0 < self.select_prob <= 1:
            raise ValueError("select_prob must lie in (0, 1]")
        fracs = (self.mask_frac, self.random_frac, self.keep_frac)
        if min(fracs) < 0 or abs(sum(fracs) - 1.0) > 1e-9:
            raise ValueError("mask/random/keep fractions must be non-negative and sum to 1")


@dataclass
class TrainingBatch:
    token_ids: np.ndarray
    attention_mask: np.ndarray
    mlm_labels: np.ndarray
    segment_ids: np.ndarray | None = None
    nsp_labels: np.ndarray | None = None

    @property
    def num_selected(self) -> int:
        return int((self.mlm_labels != IGNORE_INDEX).sum())


def derive_seed(*parts: int) -> int:
    return int(np.random.SeedSequence([int(p) for p in parts]).generate_state(1)[0])


def _encode_example(tokenizer: Tokenizer, ex, max_seq: int):
    if isinstance(ex, SentencePair):
        return tokenizer.encode(ex.sentence_a, pair=ex.sentence_b, max_length=max_seq), int(ex.is_next)
    return tokenizer.encode(ex, max_length=max_seq), None


def build_mlm_batch(examples: Sequence[SentencePair | str], tokenizer: Tokenizer, policy: MaskingPolicy = MaskingPolicy(),
                    max_seq: int = 128, seed: int = 0) -> TrainingBatch:
    """Encode, pad to ``max_seq`` and apply BERT-style masking.

    Each non-special token is selected independently with ``select_prob``;
    selected tokens become MASK, a uniform random non-special token, or stay
    unchanged in the ratio mask/random/keep. If nothing at all is selected
    one candidate is forced so the batch always carries an MLM target.
    """
    if not examples:
        raise ValueError("cannot build a batch from zero examples")
    n = len(examples)
    ids = np.full((n, max_seq), tokenizer.pad_id, dtype=np.int64)
    attn = np.zeros((n, max_seq), dtype=np.int64)
    segs = np.zeros((n, max_seq), dtype=np.int64)
    special = np.ones((n, max_seq), dtype=bool)
    nsp = []
    for r, ex in enumerate(examples):
        enc, label = _encode_example(tokenizer, ex, max_seq)
        k = len(enc.ids)
        ids[r, :k] = enc.ids
        attn[r, :k] = 1
        segs[r, :k] = enc.segment_ids
        special[r, :k] = np.asarray(enc.special_tokens_mask, dtype=bool)
        nsp.append(label)

    rng = np.random.default_rng(seed)
    candidates = ~special
    selected = (rng.random(ids.shape) < policy.select_prob) & candidates
    if not selected.any() and candidates.any():
        flat = np.flatnonzero(candidates)
        selected.flat[flat[rng.integers(flat.size)]] = True
    action = rng.random(ids.shape)
    random_ids = rng.integers(tokenizer.num_special, len(tokenizer), size=ids.shape)

    labels = np.where(selected, ids, IGNORE_INDEX)
    to_mask = selected & (action < policy.mask_frac)
    to_random = selected & (action >= policy.mask_frac) & (action < policy.mask_frac + policy.random_frac)
    masked = ids.copy()
    masked[to_mask] = tokenizer.mask_id
    masked[to_random] = random_ids[to_random]

    has_pairs = all(label is not None for label in nsp)
    return TrainingBatch(
        token_ids=masked,
        attention_mask=attn,
        mlm_labels=labels,
        segment_ids=segs,
        nsp_labels=np.asarray(nsp, dtype=np.int64) if has_pairs else None,
    )


def mlm_nsp_loss(output: ForwardOutput, batch: TrainingBatch) -> tuple[Tensor, Tensor, Tensor]:
    """(mlm, nsp, total) with total = mlm + nsp; nsp is 0 when the model or batch has no NSP."""
    if batch.num_selected == 0:
        raise ValueError("batch has no selected MLM positions")
    mlm = T.cross_entropy(output.mlm_logits, batch.mlm_labels)
    if output.nsp_logits is not None and batch.nsp_labels is not None:
        nsp = T.cross_entropy(output.nsp_logits, batch.nsp_labels)
    else:
        nsp = T.tensor(0.0, dtype=output.mlm_logits.dtype)
    return mlm, nsp, mlm + nsp


def run_forward(params: ModelParameters, config: ModelConfig, batch: TrainingBatch) -> ForwardOutput:
    segs = batch.segment_ids if config.num_segment_types else None
    return forward(params, config, batch.token_ids, batch.attention_mask, segs)


# -- schedules and reports -----------------------------------------------------------


@dataclass
class Schedule:
    epochs: int = 1
    batch_size: int = 8
    lr: float = 1e-4
    warmup: float = 0.1
    seed: int = 0
    max_seq: int = 64
    num_examples: int | None = None
    positive_fraction: float = 0.5
    dynamic_masking: bool = True
    policy: MaskingPolicy = field(default_factory=MaskingPolicy)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if not 0 <= self.warmup < 1:
            raise ValueError("warmup must lie in [0, 1)")
        if isinstance(self.policy, dict):
            self.policy = MaskingPolicy(**self.policy)


@dataclass
class TrainReport:
    epoch_mlm: list[float] = field(default_factory=list)
    epoch_nsp: list[float] = field(default_factory=list)
    epoch_total: list[float] = field(default_factory=list)
    epoch_seconds: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    initial_loss: float = float("nan")
    final_loss: float = float("nan")
    wall_time: float = 0.0
    steps: int = 0
    checkpoint_path: str | None = None
    final_kl: float | None = None
    params: ModelParameters | None = field(default=None, repr=False, compare=False)
    config: ModelConfig | None = field(default=None, repr=False, compare=False)
    tokenizer: Tokenizer | None = field(default=None, repr=False, compare=False)

    @property
    def epochs(self) -> int:
        return len(self.epoch_total)

    def tsv(self, include_time: bool = True) -> str:
        head = "epoch\tmlm_loss\tnsp_loss\ttotal_loss" + ("\tseconds" if include_time else "")
        rows = [head]
        for i, (m, n, t) in enumerate(zip(self.epoch_mlm, self.epoch_nsp, self.epoch_total), start=1):
            row = f"{i}\t{m:.6f}\t{n:.6f}\t{t:.6f}"
            if include_time:
                row += f"\t{self.epoch_seconds[i - 1]:.3f}"
            rows.append(row)
        return "\n".join(rows) + "\n"


def check_tokenizer_flavor(config: ModelConfig, tokenizer: Tokenizer) -> None:
    want = BpeTokenizer if config.flavor == "roberta" else WordPieceTokenizer
    if not isinstance(tokenizer, want):
        raise ValueError(f"{config.flavor} flavor needs a {want.kind} tokenizer, got {tokenizer.kind}")
    if len(tokenizer) != config.vocab_size:
        raise ValueError(f"tokenizer has {len(tokenizer)} tokens but config.vocab_size is {config.vocab_size}")


def make_examples(corpus: Corpus, config: ModelConfig, count: int | None, positive_fraction: float,
                  seed: int) -> list:
    """NSP sentence pairs for the bert flavor, single sentences otherwise."""
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    if config.has_nsp:
        return sample_sentence_pairs(corpus, count or len(corpus), positive_fraction, seed)
    sentences = corpus.sentences
    if count is None or count == len(sentences):
        return list(sentences)
    rng = np.random.default_rng(seed)
    return [sentences[i] for i in rng.integers(len(sentences), size=count)]


def make_batches(examples: Sequence, tokenizer: Tokenizer, schedule: Schedule, seed: int) -> list[TrainingBatch]:
    """Fixed, statically masked batches in corpus order."""
    bs = schedule.batch_size
    return [build_mlm_batch(examples[i:i + bs], tokenizer, schedule.policy, schedule.max_seq, derive_seed(seed, i))
            for i in range(0, len(examples), bs)]


def unique_parameters(params: ModelParameters) -> list[Tensor]:
    return params.values()


def mean_batch_loss(params, config, batches: Sequence[TrainingBatch]) -> tuple[float, float, float]:
    tot = np.zeros(3)
    for b in batches:
        mlm, nsp, total = mlm_nsp_loss(run_forward(params, config, b), b)
        tot += (mlm.item(), nsp.item(), total.item())
    return tuple(float(x) for x in tot / len(batches))


def _epoch_batches(examples, tokenizer, schedule, epoch, static_batches):
    rng = np.random.default_rng(derive_seed(schedule.seed, 1, epoch))
    if not schedule.dynamic_masking:
        order = rng.permutation(len(static_batches))
        return [static_batches[i] for i in order]
    order = rng.permutation(len(examples))
    bs = schedule.batch_size
    out = []
    for bi, start in enumerate(range(0, len(order), bs)):
        chunk = [examples[i] for i in order[start:start + bs]]
        out.append(build_mlm_batch(chunk, tokenizer, schedule.policy, schedule.max_seq,
                                   derive_seed(schedule.seed, 2, epoch, bi)))
    return out


def _write_epoch(out_dir: Path | None, report: TrainReport, params, config, tokenizer, epoch: int):
    if out_dir is None:
        return
    ckpt = out_dir / f"epoch-{epoch}"
    save_checkpoint(params, config, tokenizer, ckpt)
    report.checkpoint_path = str(ckpt)
    (out_dir / "report.tsv").write_text(report.tsv(), encoding="utf-8")


def _train(params: ModelParameters, config: ModelConfig, tokenizer: Tokenizer, examples: list,
           schedule: Schedule, out_dir, loss_fn, eval_batches) -> TrainReport:
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    static = make_batches(examples, tokenizer, schedule, derive_seed(schedule.seed, 3)) \
        if not schedule.dynamic_masking else []
    if eval_batches is None:
        # static masking: measure on exactly the batches being fitted
        eval_batches = static or make_batches(examples, tokenizer, schedule, derive_seed(schedule.seed, 4))
    steps_per_epoch = math.ceil(len(examples) / schedule.batch_size)
    total_steps = schedule.epochs * steps_per_epoch
    opt = T.Adam(unique_parameters(params), lr=schedule.lr)
    report = TrainReport(params=params, config=config, tokenizer=tokenizer)
    report.initial_loss = _eval_total(loss_fn, eval_batches)
    start = time.perf_counter()
    step = 0
    for epoch in range(1, schedule.epochs + 1):
        t0 = time.perf_counter()
        sums = np.zeros(3)
        batches = _epoch_batches(examples, tokenizer, schedule, epoch, static)
        for batch in batches:
            mlm, nsp, total = loss_fn(batch)
            opt.zero_grad()
            total.backward()
            opt.step(lr=T.warmup_linear(step, total_steps, schedule.lr, schedule.warmup))
            step += 1
            sums += (mlm.item(), nsp.item(), total.item())
            report.step_losses.append(total.item())
        m, n, t = (float(x) for x in sums / len(batches))
        report.epoch_mlm.append(m)
        report.epoch_nsp.append(n)
        report.epoch_total.append(t)
        report.epoch_seconds.append(time.perf_counter() - t0)
        log.info("epoch %d: mlm %.4f nsp %.4f total %.4f", epoch, m, n, t)
        _write_epoch(out_dir, report, params, config, tokenizer, epoch)
    report.steps = step
    report.wall_time = time.perf_counter() - start
    report.final_loss = _eval_total(loss_fn, eval_batches)
    return report


def _eval_total(loss_fn, batches) -> float:
    if not batches:
        return float("nan")
    return float(np.mean([loss_fn(b)[2].item() for b in batches]))


def pretrain(config: ModelConfig, corpus: Corpus, tokenizer: Tokenizer, schedule: Schedule = Schedule(),
             out_dir=None, params: ModelParameters | None = None) -> TrainReport:
    """Train MLM (+NSP for the bert flavor) from a fresh initialisation.

    ``initial_loss`` and ``final_loss`` in the report are evaluated on one
    fixed, statically masked pass over the training examples.
    """
    check_tokenizer_flavor(config, tokenizer)
    if params is None:
        params = new_model(config, seed=schedule.seed)
    examples = make_examples(corpus, config, schedule.num_examples, schedule.positive_fraction,
                             derive_seed(schedule.seed, 0))
    def loss_fn(batch):
        return mlm_nsp_loss(run_forward(params, config, batch), batch)

    return _train(params, config, tokenizer, examples, schedule, out_dir, loss_fn, None)


def finetune(checkpoint_path, corpus: Corpus, schedule: Schedule = Schedule(), replace_tokenizer=None,
             out_dir=None) -> TrainReport:
    """Continue MLM(+NSP) training from a checkpoint.

    ``replace_tokenizer`` (a Tokenizer or a directory) switches to a new
    vocabulary first: embeddings and output bias are re-initialised and the
    transformer body is kept.
    """
    params, config = load_checkpoint(checkpoint_path)
    if replace_tokenizer is not None:
        tokenizer = replace_tokenizer if isinstance(replace_tokenizer, Tokenizer) else load_tokenizer(replace_tokenizer)
        want = BpeTokenizer if config.flavor == "roberta" else WordPieceTokenizer
        if not isinstance(tokenizer, want):
            raise ValueError(f"{config.flavor} flavor needs a {want.kind} tokenizer, got {tokenizer.kind}")
        params, config = replace_embeddings_for_new_tokenizer(params, config, len(tokenizer),
                                                              seed=derive_seed(schedule.seed, 5))
        config = replace(config, cased=not tokenizer.lowercase)
    else:
        tokenizer = load_tokenizer(checkpoint_path)
    return pretrain(config, corpus, tokenizer, schedule, out_dir=out_dir, params=params)


# -- distillation ----------------------------------------------------------------------


@dataclass(frozen=True)
class DistillationConfig:
    temperature: float = 2.0
    alpha_soft: float = 0.5
    alpha_mlm: float = 0.2
    alpha_cos: float = 0.3
    init_from_teacher: bool = True

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")
        w = (self.alpha_soft, self.alpha_mlm, self.alpha_cos)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("distillation weights must be non-negative and sum to 1")


def _selected_rows(batch: TrainingBatch) -> np.ndarray:
    return np.flatnonzero(batch.mlm_labels.reshape(-1) != IGNORE_INDEX)


def _softmax_np(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def soft_kl(student_logits: Tensor, teacher_logits: np.ndarray, rows: np.ndarray, temperature: float) -> Tensor:
    """Mean over ``rows`` of KL(softmax(teacher/T) || softmax(student/T)); teacher is constant."""
    v = student_logits.shape[-1]
    s = student_logits.reshape(-1, v)[rows] * (1.0 / temperature)
    t = teacher_logits.reshape(-1, v)[rows].astype(np.float64) / temperature
    p = _softmax_np(t)
    ent = (p * np.log(np.clip(p, 1e-300, None))).sum(axis=-1)
    logq = T.log_softmax(s, axis=-1)
    cross = (logq * T.tensor(p, dtype=s.dtype)).sum(axis=-1)
    return (T.tensor(ent, dtype=s.dtype) - cross).mean()


def cosine_loss(student_hidden: Tensor, teacher_hidden: np.ndarray, attention_mask: np.ndarray) -> Tensor:
    """1 - mean cosine similarity over non-pad positions."""
    d = student_hidden.shape[-1]
    rows = np.flatnonzero(np.asarray(attention_mask).reshape(-1) == 1)
    s = student_hidden.reshape(-1, d)[rows]
    t = teacher_hidden.reshape(-1, d)[rows]
    t_norm = np.linalg.norm(t, axis=-1)
    dot = (s * T.tensor(t, dtype=s.dtype)).sum(axis=-1)
    s_norm = T.sqrt((s * s).sum(axis=-1))
    cos = dot / (s_norm * T.tensor(t_norm, dtype=s.dtype))
    return 1.0 - cos.mean()


def distillation_loss(student_out: ForwardOutput, teacher_out: ForwardOutput, batch: TrainingBatch,
                      dconf: DistillationConfig = DistillationConfig()) -> Tensor:
    """alpha_soft * T^2 * KL + alpha_mlm * hard MLM CE + alpha_cos * (1 - cosine); zero-weight terms are skipped."""
    if student_out.mlm_logits.shape[-1] != teacher_out.mlm_logits.shape[-1]:
        raise ValueError("student and teacher vocabularies differ")
    terms = []
    if dconf.alpha_soft:
        kl = soft_kl(student_out.mlm_logits, teacher_out.mlm_logits.data, _selected_rows(batch), dconf.temperature)
        terms.append(kl * (dconf.alpha_soft * dconf.temperature ** 2))
    if dconf.alpha_mlm:
        mlm = T.cross_entropy(student_out.mlm_logits, batch.mlm_labels)
        terms.append(mlm if dconf.alpha_mlm == 1 else mlm * dconf.alpha_mlm)
    if dconf.alpha_cos:
        if student_out.hidden.shape[-1] != teacher_out.hidden.shape[-1]:
            raise ValueError("cosine loss needs equal student and teacher hidden sizes")
        cos = cosine_loss(student_out.hidden, teacher_out.hidden.data, batch.attention_mask)
        terms.append(cos * dconf.alpha_cos)
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return total


def mean_kl_to_teacher(student: ModelParameters, student_config: ModelConfig, teacher: ModelParameters,
                       teacher_config: ModelConfig, batches: Sequence[TrainingBatch]) -> float:
    """Average temperature-1 KL(teacher || student) over the selected positions of ``batches``."""
    vals = []
    for b in batches:
        s = run_forward(student, student_config, b)
        t = run_forward(teacher, teacher_config, b)
        vals.append(soft_kl(s.mlm_logits, t.mlm_logits.data, _selected_rows(b), 1.0).item())
    return float(np.mean(vals))


def student_from_teacher(teacher: ModelParameters, teacher_config: ModelConfig, student_config: ModelConfig,
                         seed: int) -> ModelParameters:
    """Fresh student whose embeddings and layers are copied from every other teacher layer where shapes allow."""
    student = new_model(student_config, seed)
    if student_config.hidden_size != teacher_config.hidden_size:
        return student
    stride = max(1, teacher_config.num_layers // max(1, student_config.num_layers))
    for name, t in student.items():
        src = name
        if name.startswith("layers."):
            i = int(name.split(".")[1])
            src = name.replace(f"layers.{i}.", f"layers.{min(i * stride, teacher_config.num_layers - 1)}.", 1)
        if src in teacher and teacher[src].shape == t.shape:
            t.data = teacher[src].data.copy()
    return student


def _resolve_teacher(teacher):
    if isinstance(teacher, (str, Path)):
        params, config = load_checkpoint(teacher)
        return params, config, load_tokenizer(teacher)
    return teacher


def distill(teacher_checkpoint, student_config: ModelConfig, corpus: Corpus,
            dconf: DistillationConfig = DistillationConfig(), schedule: Schedule = Schedule(),
            out_dir=None) -> TrainReport:
    """Train ``student_config`` against a frozen teacher.

    ``teacher_checkpoint`` is a checkpoint directory or a
    ``(params, config, tokenizer)`` triple. Training examples are single
    sentences; the teacher sees segment id 0 throughout.
    """
    t_params, t_config, tokenizer = _resolve_teacher(teacher_checkpoint)
    if student_config.vocab_size != t_config.vocab_size:
        raise ValueError("student and teacher vocab sizes differ")
    if dconf.alpha_cos and student_config.hidden_size != t_config.hidden_size:
        raise ValueError(f"student hidden size {student_config.hidden_size} != teacher {t_config.hidden_size}")
    if dconf.init_from_teacher:
        student = student_from_teacher(t_params, t_config, student_config, schedule.seed)
    else:
        student = new_model(student_config, schedule.seed)

    no_nsp = replace(student_config, flavor="distil", num_segment_types=0) if student_config.has_nsp else student_config
    examples = make_examples(corpus, no_nsp, schedule.num_examples, schedule.positive_fraction,
                             derive_seed(schedule.seed, 0))
    eval_batches = make_batches(examples, tokenizer, schedule, derive_seed(schedule.seed, 4))

    def loss_fn(batch):
        t_out = run_forward(t_params, t_config, batch)
        s_out = run_forward(student, student_config, batch)
        total = distillation_loss(s_out, t_out, batch, dconf)
        hard = T.cross_entropy(s_out.mlm_logits.detach(), batch.mlm_labels)
        return hard, T.tensor(0.0, dtype=total.dtype), total

    report = _train(student, student_config, tokenizer, examples, schedule, out_dir, loss_fn, eval_batches)
    report.final_kl = mean_kl_to_teacher(student, student_config, t_params, t_config, eval_batches)
    return report
