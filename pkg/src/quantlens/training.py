"""From-scratch trainer for the toy model.

Plain Adam with gradient-norm clipping, cross-entropy on the answer
position only. Batches are grouped by sequence length (no padding), with
the epoch order reshuffled from a named substream, so a (seed, data,
hyperparams) triple always produces the same weights on the same machine.
"""

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import InvalidConfig, TrainingFailure
from .model import ModelBundle, run_batch
from .rng import substream

# Measuring recall with the largest usable batch keeps the per-epoch
# bookkeeping cheap relative to the optimization itself.
_EVAL_BATCH = 1024


@dataclass
class TrainConfig:
    lr: float = 2.5e-3
    steps: int = 4096
    batch: int = 256
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    # Stop once recall on the recall set reaches this level (None: run all
    # steps). Checked once per epoch.
    target_recall: float = None

    def __post_init__(self):
        if self.lr <= 0 or self.steps < 1 or self.batch < 1:
            raise InvalidConfig("lr, steps, and batch must be positive")
        if self.grad_clip <= 0:
            raise InvalidConfig("grad_clip must be positive")


@dataclass
class TrainReport:
    loss_curve: list = field(default_factory=list)   # one entry per step
    recall_curve: list = field(default_factory=list)  # (epoch, recall)
    steps_run: int = 0
    epochs_run: int = 0
    stopped_early: bool = False
    final_recall: float = None


def _length_buckets(examples):
    buckets = {}
    for idx, (ids, _, _) in enumerate(examples):
        buckets.setdefault(len(ids), []).append(idx)
    return buckets


def _batch_tensors(examples, indices):
    ids = np.stack([np.asarray(examples[i][0], dtype=np.int64) for i in indices])
    pos = np.asarray([examples[i][1] for i in indices], dtype=np.int64)
    tgt = np.asarray([examples[i][2] for i in indices], dtype=np.int64)
    return (torch.from_numpy(ids), torch.from_numpy(pos), torch.from_numpy(tgt))


def eval_recall(bundle, examples, params=None):
    """Fraction of examples whose greedy answer matches the target."""
    if not examples:
        return 0.0
    hits = 0
    buckets = _length_buckets(examples)
    with torch.no_grad():
        for length in sorted(buckets):
            idxs = buckets[length]
            for lo in range(0, len(idxs), _EVAL_BATCH):
                chunk = idxs[lo:lo + _EVAL_BATCH]
                toks, pos, tgt = _batch_tensors(examples, chunk)
                logits, _ = run_batch(bundle, toks, want_logits="positions",
                                      positions=pos, params=params)
                pred = np.argmax(logits.numpy(), axis=1)
                hits += int((pred == tgt.numpy()).sum())
    return hits / len(examples)


def train(bundle, examples, tconf, recall_examples=None):
    """Optimize a copy of `bundle` on (ids, answer_pos, target) triples.

    Returns (trained bundle, TrainReport). Raises TrainingFailure with the
    offending step when the loss goes non-finite.
    """
    if not examples:
        raise InvalidConfig("no training examples")
    if recall_examples is None:
        recall_examples = examples

    params = {k: v.clone().requires_grad_(True) for k, v in bundle.params.items()}
    opt = torch.optim.Adam(params.values(), lr=tconf.lr,
                           betas=(tconf.beta1, tconf.beta2), eps=tconf.adam_eps)
    rng = substream(tconf.seed, "train")
    report = TrainReport()
    loss_fn = torch.nn.functional.cross_entropy

    buckets = _length_buckets(examples)
    step = 0
    epoch = 0
    while step < tconf.steps:
        epoch += 1
        batches = []
        for length in sorted(buckets):
            order = np.array(buckets[length])
            rng.shuffle(order)
            for lo in range(0, len(order), tconf.batch):
                batches.append(order[lo:lo + tconf.batch])
        batch_order = np.arange(len(batches))
        rng.shuffle(batch_order)

        for bidx in batch_order:
            if step >= tconf.steps:
                break
            toks, pos, tgt = _batch_tensors(examples, batches[bidx])
            opt.zero_grad(set_to_none=True)
            logits, _ = run_batch(bundle, toks, want_logits="positions",
                                  positions=pos, params=params)
            loss = loss_fn(logits, tgt)
            loss_val = float(loss.detach())
            if not math.isfinite(loss_val):
                raise TrainingFailure(
                    f"loss became {loss_val} at step {step}", step=step
                )
            loss.backward()
            torch.nn.utils.clip_grad_norm_(params.values(), tconf.grad_clip)
            opt.step()
            report.loss_curve.append(loss_val)
            step += 1

        recall = eval_recall(bundle, recall_examples, params=params)
        report.recall_curve.append((epoch, recall))
        if tconf.target_recall is not None and recall >= tconf.target_recall:
            report.stopped_early = True
            break

    report.steps_run = step
    report.epochs_run = epoch
    report.final_recall = report.recall_curve[-1][1] if report.recall_curve else None

    trained = ModelBundle(
        config=bundle.config,
        params={k: v.detach().clone() for k, v in params.items()},
        meta=dict(bundle.meta, trained_steps=step,
                  train_seed=int(tconf.seed)),
    )
    return trained, report


def grad_check(bundle, sample, epsilon=1e-4, entries_per_tensor=4, seed=0):
    """Max relative error between autograd and central finite differences.

    The check runs in float64 so the finite-difference probe is not drowned
    by float32 rounding. For each parameter tensor the largest-gradient
    entry plus a few random ones are probed. `sample` is one (ids,
    answer_pos, target) triple.
    """
    ids, pos, tgt = sample
    toks = torch.from_numpy(np.asarray(ids, dtype=np.int64))[None, :]
    pos_t = torch.tensor([pos], dtype=torch.int64)
    tgt_t = torch.tensor([tgt], dtype=torch.int64)

    params64 = {k: v.detach().double().clone().requires_grad_(True)
                for k, v in bundle.params.items()}

    def loss_of(p):
        logits, _ = run_batch(bundle, toks, want_logits="positions",
                              positions=pos_t, params=p)
        return torch.nn.functional.cross_entropy(logits, tgt_t)

    loss = loss_of(params64)
    loss.backward()

    rng = substream(seed, "gradcheck")
    worst = 0.0
    for name in sorted(params64):
        p = params64[name]
        g = p.grad
        if g is None:
            continue
        flat_g = g.flatten()
        order = torch.argsort(flat_g.abs(), descending=True)
        probe = [int(order[0])]
        probe += [int(rng.integers(flat_g.numel()))
                  for _ in range(entries_per_tensor - 1)]
        frozen = {k: v.detach().clone() for k, v in params64.items()}
        for flat_idx in probe:
            with torch.no_grad():
                base = float(frozen[name].flatten()[flat_idx])
                frozen[name].flatten()[flat_idx] = base + epsilon
                up = float(loss_of(frozen))
                frozen[name].flatten()[flat_idx] = base - epsilon
                down = float(loss_of(frozen))
                frozen[name].flatten()[flat_idx] = base
            numeric = (up - down) / (2 * epsilon)
            analytic = float(flat_g[flat_idx])
            denom = max(abs(analytic), abs(numeric))
            if denom < 1e-10:
                continue
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst
