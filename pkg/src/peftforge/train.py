"""The two training stages: autoregressive pretraining and downstream
classification fine-tuning.

Both stages share the same loop skeleton: decoupled-weight-decay Adam over
the stack's trainable leaves, linear warmup/decay schedule, gradient
accumulation over micro-batches, global-norm clipping at 1.0, and
best-epoch checkpoint selection (validation perplexity for pretraining,
validation AUROC for fine-tuning). Runs are bit-reproducible per seed.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import BOS_ID, EOS_ID, PAD_ID, Corpus, Dataset, Example, TaskSpec, Vocab, encode_example
from .metrics import auroc_binary, auroc_multiclass, auroc_multilabel, perplexity
from .model import BaseModel, forward_classify, forward_lm
from .tensor import Tensor

GRAD_CLIP_NORM = 1.0
ADAM_BETA1, ADAM_BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
WEIGHT_DECAY = 0.0


@dataclass
class TrainConfig:
    stage: str  # pretrain | finetune
    learning_rate: float
    warmup_ratio: float = 0.06
    max_seq_len: int = 512
    grad_accum_steps: int = 1
    batch_size: int = 10
    epochs: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.grad_accum_steps < 1:
            raise ValueError("epochs, batch_size and grad_accum_steps must be >= 1")

    @classmethod
    def pretrain(cls, **overrides) -> "TrainConfig":
        args = dict(stage="pretrain", learning_rate=3e-4, warmup_ratio=0.06,
                    max_seq_len=512, grad_accum_steps=4, batch_size=10, epochs=3)
        args.update(overrides)
        return cls(**args)

    @classmethod
    def finetune(cls, **overrides) -> "TrainConfig":
        args = dict(stage="finetune", learning_rate=5e-5, warmup_ratio=0.06,
                    max_seq_len=512, grad_accum_steps=10, batch_size=10, epochs=5)
        args.update(overrides)
        return cls(**args)


# ---------------------------------------------------------------------------
# Losses and schedule
# ---------------------------------------------------------------------------


def lm_loss(logits: Tensor, targets: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean NLL per unmasked position; targets are inputs shifted by one.

    ``mask`` zeroes padding (and any virtual-token) positions out of both
    the loss and its gradient.
    """
    b, s, v = logits.shape
    targets = np.asarray(targets).reshape(-1)
    m = np.asarray(mask, dtype=logits.data.dtype).reshape(-1)
    n = float(m.sum())
    if n == 0:
        raise ValueError("lm_loss: every position is masked")
    lsm = T.log_softmax_lastdim(T.reshape(logits, (b * s, v)))
    picked = T.take_lastdim(lsm, targets)
    return T.scale(T.tsum(T.mul(picked, T.constant(m))), -1.0 / n)


def classification_loss(outputs: Tensor, labels, task: TaskSpec) -> Tensor:
    """Binary: sigmoid BCE; multiclass: softmax CE; multilabel: mean BCE."""
    n, width = outputs.shape
    if width != task.n_outputs:
        raise ValueError(f"output width {width} does not match task {task.name} "
                         f"({task.n_outputs} outputs)")
    labels = np.asarray(labels)
    if task.kind == "binary":
        if labels.shape != (n,) or not set(np.unique(labels)) <= {0, 1}:
            raise ValueError("binary labels must be a 0/1 vector")
        return T.tmean(T.bce_with_logits(outputs, labels.astype(np.float64).reshape(n, 1)))
    if task.kind == "multiclass":
        if labels.shape != (n,) or labels.min() < 0 or labels.max() >= task.n_classes:
            raise ValueError(f"class labels must lie in [0, {task.n_classes})")
        picked = T.take_lastdim(T.log_softmax_lastdim(outputs), labels)
        return T.scale(T.tsum(picked), -1.0 / n)
    if labels.shape != (n, task.n_classes):
        raise ValueError(f"multilabel targets must be [{n}, {task.n_classes}] indicators")
    return T.tmean(T.bce_with_logits(outputs, labels.astype(np.float64)))


def lr_schedule(step: int, total_steps: int, warmup_ratio: float, peak_lr: float) -> float:
    """Linear ramp 0 -> peak over the warmup span, then linear decay -> 0."""
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = math.ceil(warmup_ratio * total_steps)
    if warmup > 0 and step <= warmup:
        return peak_lr * step / warmup
    if total_steps == warmup:
        return peak_lr
    return peak_lr * (total_steps - step) / (total_steps - warmup)


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class AdamW:
    """Decoupled-weight-decay Adam over an explicit parameter list.

    Parameters with no grad buffer are skipped, so frozen or unreached
    leaves are never touched.
    """

    def __init__(self, params: list[Tensor], beta1: float = ADAM_BETA1,
                 beta2: float = ADAM_BETA2, eps: float = ADAM_EPS,
                 weight_decay: float = WEIGHT_DECAY):
        self.params = list(params)
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self._m: dict[int, np.ndarray] = {}
        self._v: dict[int, np.ndarray] = {}
        self.t = 0

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            key = id(p)
            m = self._m.setdefault(key, np.zeros_like(p.data))
            v = self._v.setdefault(key, np.zeros_like(p.data))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.weight_decay:
                update = update + self.weight_decay * p.data
            p.data = p.data - p.data.dtype.type(lr) * update.astype(p.data.dtype)


def clip_global_norm(params: list[Tensor], max_norm: float) -> float:
    """Scale all grads so their joint L2 norm is at most ``max_norm``."""
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float((p.grad.astype(np.float64) ** 2).sum())
    norm = math.sqrt(total)
    if norm > max_norm > 0:
        scale = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad *= p.grad.dtype.type(scale)
    return norm


# ---------------------------------------------------------------------------
# Run history
# ---------------------------------------------------------------------------


@dataclass
class StepRecord:
    step: int
    epoch: int
    loss: float
    lr: float


@dataclass
class EpochRecord:
    epoch: int
    train_metric: float
    eval_metric: float
    seconds: float


@dataclass
class RunHistory:
    stage: str
    metric_name: str  # perplexity | auroc
    steps: list[StepRecord] = field(default_factory=list)
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    final_metric: float = math.nan
    skipped_labels: int = 0

    def write_jsonl(self, path: str | Path) -> None:
        """One JSON object per step/epoch, chronological, plus a summary."""
        train_key = "train_perplexity" if self.stage == "pretrain" else "train_loss"
        with open(path, "w", encoding="utf-8") as f:
            for e in self.epochs:
                for s in self.steps:
                    if s.epoch == e.epoch:
                        f.write(json.dumps({"kind": "step", "step": s.step, "epoch": s.epoch,
                                            "loss": s.loss, "lr": s.lr}) + "\n")
                f.write(json.dumps({"kind": "epoch", "epoch": e.epoch,
                                    train_key: e.train_metric,
                                    "eval_" + self.metric_name: e.eval_metric,
                                    "seconds": e.seconds}) + "\n")
            f.write(json.dumps({"kind": "summary", "stage": self.stage,
                                "best_epoch": self.best_epoch,
                                "metric_name": self.metric_name,
                                "final_metric": self.final_metric}) + "\n")


# ---------------------------------------------------------------------------
# Batching
# ---------------------------------------------------------------------------


def lm_windows(docs: list[list[int]], max_len: int) -> list[list[int]]:
    """BOS + doc + EOS, chunked into consecutive windows of max_len+1 ids."""
    out = []
    for doc in docs:
        ids = [BOS_ID] + list(doc) + [EOS_ID]
        for s in range(0, len(ids) - 1, max_len):
            win = ids[s: s + max_len + 1]
            if len(win) >= 2:
                out.append(win)
    return out


def pack_lm_batch(windows: list[list[int]]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Right-pad to the batch max; mask marks real (input, target) pairs."""
    width = max(len(w) for w in windows) - 1
    b = len(windows)
    inputs = np.full((b, width), PAD_ID, dtype=np.int64)
    targets = np.full((b, width), PAD_ID, dtype=np.int64)
    mask = np.zeros((b, width), dtype=np.float32)
    for i, w in enumerate(windows):
        n = len(w) - 1
        inputs[i, :n] = w[:-1]
        targets[i, :n] = w[1:]
        mask[i, :n] = 1.0
    return inputs, targets, mask


def pack_cls_batch(id_lists: list[list[int]]) -> np.ndarray:
    width = max(len(ids) for ids in id_lists)
    out = np.full((len(id_lists), width), PAD_ID, dtype=np.int64)
    for i, ids in enumerate(id_lists):
        out[i, : len(ids)] = ids
    return out


def _chunks(seq, size):
    for i in range(0, len(seq), size):
        yield seq[i: i + size]


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------


def evaluate_lm_nll(base: BaseModel, stack, windows: list[list[int]],
                    batch_size: int) -> tuple[float, int]:
    """(total NLL, token count) over fixed-order batches, eval mode."""
    total, count = 0.0, 0
    with T.no_grad():
        for group in _chunks(windows, batch_size):
            inputs, targets, mask = pack_lm_batch(group)
            logits, nv = forward_lm(base, inputs, stack, train=False)
            if nv:
                logits = T.narrow(logits, 1, nv, inputs.shape[1])
            n = int(mask.sum())
            total += lm_loss(logits, targets, mask).item() * n
            count += n
    return total, count


def evaluate_perplexity(base: BaseModel, stack, windows: list[list[int]],
                        batch_size: int) -> float:
    total, count = evaluate_lm_nll(base, stack, windows, batch_size)
    return perplexity(total, count)


def multilabel_matrix(examples: list[Example], k: int) -> np.ndarray:
    y = np.zeros((len(examples), k), dtype=np.int64)
    for i, ex in enumerate(examples):
        y[i, list(ex.label)] = 1
    return y


def predict_scores(base: BaseModel, stack, examples: list[Example], vocab: Vocab,
                   task: TaskSpec, max_len: int, batch_size: int) -> np.ndarray:
    """Probabilities per example: [n] for binary, [n, k] otherwise."""
    head = stack.head
    if head is None:
        raise ValueError("stack has no classifier head")
    outs = []
    with T.no_grad():
        for group in _chunks(examples, batch_size):
            ids = [encode_example(vocab, ex.text)[:max_len] for ex in group]
            logits = forward_classify(base, head, pack_cls_batch(ids), stack, train=False)
            if task.kind == "multiclass":
                outs.append(T.softmax_lastdim(logits).data)
            else:
                outs.append(T.sigmoid(logits).data)
    scores = np.concatenate(outs, axis=0)
    return scores[:, 0] if task.kind == "binary" else scores


def task_auroc(task: TaskSpec, scores: np.ndarray, examples: list[Example]) -> tuple[float, int]:
    """(AUROC, skipped label count) for one split."""
    if task.kind == "binary":
        labels = np.array([ex.label for ex in examples])
        return auroc_binary(scores, labels), 0
    if task.kind == "multiclass":
        labels = np.array([ex.label for ex in examples])
        return auroc_multiclass(scores, labels), 0
    return auroc_multilabel(scores, multilabel_matrix(examples, task.n_classes))


def _validate_split_labels(dataset: Dataset, task: TaskSpec) -> None:
    for split, examples in dataset.splits.items():
        if task.kind == "multilabel":
            y = multilabel_matrix(examples, task.n_classes)
            if not any(y[:, c].min() != y[:, c].max() for c in range(task.n_classes)):
                raise ValueError(f"{split} split has no label with both outcomes; AUROC undefined")
        else:
            if len({ex.label for ex in examples}) < 2:
                raise ValueError(f"{split} split contains a single class; AUROC undefined")


# ---------------------------------------------------------------------------
# Training loops
# ---------------------------------------------------------------------------


def _trainable_set(base: BaseModel, stack) -> list[Tensor]:
    params = [p for _, p in base.named_params() if p.requires_grad]
    if stack is not None:
        params += stack.trainable_params()
    if not params:
        raise ValueError("nothing to train: stack and base are both fully frozen")
    return params


def _accum_groups(n_items: int, batch_size: int, accum: int):
    micro = math.ceil(n_items / batch_size)
    return math.ceil(micro / accum)


def pretrain_lm(base: BaseModel, stack, corpus: Corpus, cfg: TrainConfig,
                history_path: str | Path | None = None, log=None) -> RunHistory:
    """Autoregressive training of the stack's trainable set on a corpus.

    Optimizer steps fire every ``grad_accum_steps`` micro-batches; the
    best-validation-perplexity epoch's trainable state is restored at the
    end and reported as the final metric.
    """
    if len(corpus) == 0:
        raise ValueError("empty corpus")
    n_virt = stack.num_virtual_tokens() if stack is not None else 0
    max_len = min(cfg.max_seq_len, base.config.max_seq_len - n_virt)
    if max_len < 1:
        raise ValueError("virtual tokens leave no room for content")
    train_windows = lm_windows(corpus.docs_for("train"), max_len)
    test_windows = lm_windows(corpus.docs_for("test"), max_len)
    if not train_windows or not test_windows:
        raise ValueError("corpus splits too small to train on")

    params = _trainable_set(base, stack)
    opt = AdamW(params)
    rng = T.make_rng(cfg.seed)
    total_steps = cfg.epochs * _accum_groups(len(train_windows), cfg.batch_size, cfg.grad_accum_steps)
    if total_steps == 0:
        raise ValueError("training schedule has zero steps")

    history = RunHistory(stage="pretrain", metric_name="perplexity")
    best = math.inf
    snapshot: list[np.ndarray] | None = None
    step_idx = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(train_windows))
        shuffled = [train_windows[i] for i in order]
        nll_sum, token_sum = 0.0, 0
        micro_batches = list(_chunks(shuffled, cfg.batch_size))
        for group in _chunks(micro_batches, cfg.grad_accum_steps):
            group_losses = []
            for batch in group:
                inputs, targets, mask = pack_lm_batch(batch)
                logits, nv = forward_lm(base, inputs, stack, train=True, rng=rng)
                if nv:
                    logits = T.narrow(logits, 1, nv, inputs.shape[1])
                loss = lm_loss(logits, targets, mask)
                T.backward(T.scale(loss, 1.0 / len(group)))
                group_losses.append(loss.item())
                nll_sum += loss.item() * mask.sum()
                token_sum += int(mask.sum())
            clip_global_norm(params, GRAD_CLIP_NORM)
            lr = lr_schedule(step_idx, total_steps, cfg.warmup_ratio, cfg.learning_rate)
            opt.step(lr)
            opt.zero_grad()
            history.steps.append(StepRecord(step_idx, epoch, float(np.mean(group_losses)), lr))
            step_idx += 1
        train_ppl = perplexity(nll_sum, token_sum)
        eval_ppl = evaluate_perplexity(base, stack, test_windows, cfg.batch_size)
        history.epochs.append(EpochRecord(epoch, train_ppl, eval_ppl, time.perf_counter() - t0))
        if log:
            log(f"epoch {epoch}/{cfg.epochs}  train_ppl={train_ppl:.3f}  eval_ppl={eval_ppl:.3f}")
        if eval_ppl < best:
            best = eval_ppl
            history.best_epoch = epoch
            snapshot = [p.data.copy() for p in params]
    if snapshot is not None:
        for p, saved in zip(params, snapshot):
            p.data = saved
    history.final_metric = best
    if history_path is not None:
        history.write_jsonl(history_path)
    return history


def finetune_classify(base: BaseModel, stack, dataset: Dataset, task: TaskSpec,
                      cfg: TrainConfig, vocab: Vocab,
                      history_path: str | Path | None = None, log=None) -> RunHistory:
    """Supervised fine-tuning with best-validation-AUROC checkpoint selection.

    The reported test AUROC is computed after restoring the best epoch's
    trainable state, so it corresponds to the argmax-validation epoch.
    """
    _validate_split_labels(dataset, task)
    n_virt = stack.num_virtual_tokens() if stack is not None else 0
    max_len = min(cfg.max_seq_len, base.config.max_seq_len - n_virt)
    if max_len < 3:
        raise ValueError("virtual tokens leave no room for content")

    train_examples = dataset["train"]
    encoded = [encode_example(vocab, ex.text)[:max_len] for ex in train_examples]
    if task.kind == "multilabel":
        label_rows = multilabel_matrix(train_examples, task.n_classes)
    else:
        label_rows = np.array([ex.label for ex in train_examples])

    params = _trainable_set(base, stack)
    opt = AdamW(params)
    rng = T.make_rng(cfg.seed)
    total_steps = cfg.epochs * _accum_groups(len(train_examples), cfg.batch_size, cfg.grad_accum_steps)

    history = RunHistory(stage="finetune", metric_name="auroc")
    best = -math.inf
    snapshot: list[np.ndarray] | None = None
    step_idx = 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = list(rng.permutation(len(train_examples)))
        loss_sum, n_batches = 0.0, 0
        groups = list(_chunks(list(_chunks(order, cfg.batch_size)), cfg.grad_accum_steps))
        for group in groups:
            group_losses = []
            for idx in group:
                ids = [encoded[i] for i in idx]
                labels = label_rows[idx]
                logits = forward_classify(base, stack.head, pack_cls_batch(ids), stack,
                                          train=True, rng=rng)
                loss = classification_loss(logits, labels, task)
                T.backward(T.scale(loss, 1.0 / len(group)))
                group_losses.append(loss.item())
            clip_global_norm(params, GRAD_CLIP_NORM)
            lr = lr_schedule(step_idx, total_steps, cfg.warmup_ratio, cfg.learning_rate)
            opt.step(lr)
            opt.zero_grad()
            history.steps.append(StepRecord(step_idx, epoch, float(np.mean(group_losses)), lr))
            loss_sum += float(np.sum(group_losses))
            n_batches += len(group)
            step_idx += 1
        valid_scores = predict_scores(base, stack, dataset["valid"], vocab, task,
                                      max_len, cfg.batch_size)
        valid_auroc, _ = task_auroc(task, valid_scores, dataset["valid"])
        history.epochs.append(EpochRecord(epoch, loss_sum / max(n_batches, 1),
                                          valid_auroc, time.perf_counter() - t0))
        if log:
            log(f"epoch {epoch}/{cfg.epochs}  train_loss={loss_sum / max(n_batches, 1):.4f}  "
                f"valid_auroc={valid_auroc:.4f}")
        if valid_auroc > best:
            best = valid_auroc
            history.best_epoch = epoch
            snapshot = [p.data.copy() for p in params]
    if snapshot is not None:
        for p, saved in zip(params, snapshot):
            p.data = saved
    test_scores = predict_scores(base, stack, dataset["test"], vocab, task,
                                 max_len, cfg.batch_size)
    test_auroc, skipped = task_auroc(task, test_scores, dataset["test"])
    history.final_metric = test_auroc
    history.skipped_labels = skipped
    if history_path is not None:
        history.write_jsonl(history_path)
    return history
