"""Output-level knowledge probes.

Two views of what a model knows about a fact: the layer-wise view, reading
each residual state through the final norm and unembedding to get a lens
distribution per layer, and the behavioral view, scoring greedy answers
over paraphrase sets. Probability math is float64 throughout.
"""

from dataclasses import dataclass

import numpy as np
import torch

from . import numkit
from .corpus import TEMPLATES_PER_RELATION, supervised_example
from .errors import InvalidConfig, InvalidInput
from .model import forward, greedy_batch, run_batch, softmax64


RANK_BUCKETS = (
    ("1", 1, 1),
    ("2-5", 2, 5),
    ("6-10", 6, 10),
    ("11-100", 11, 100),
    ("101-1000", 101, 1000),
    (">1000", 1001, None),
)


def _final_norm64(h, scale, eps):
    rms = np.sqrt(np.mean(h * h, axis=-1, keepdims=True) + eps)
    return h / rms * scale


def _lens_from_hidden(bundle, hidden):
    """Lens distributions for rows of hidden states, (N, d) -> (N, vocab)."""
    h = np.asarray(hidden, dtype=np.float64)
    cfg = bundle.config
    if cfg.lens_apply_final_norm:
        g = bundle.params["final_norm"].detach().numpy().astype(np.float64)
        h = _final_norm64(h, g, cfg.norm_eps)
    wu = bundle.params["unembed"].detach().numpy().astype(np.float64)
    return softmax64(h @ wu.T)


def logit_lens(bundle, trace, layer, position):
    """Distribution over the vocabulary read from one residual state."""
    resid = trace.require("residual_out")
    n_layers, n_pos = resid.shape[0], resid.shape[1]
    if not 0 <= layer < n_layers:
        raise InvalidInput(f"layer {layer} out of range [0, {n_layers})")
    if not -n_pos <= position < n_pos:
        raise InvalidInput(f"position {position} out of range")
    return _lens_from_hidden(bundle, resid[layer, position][None, :])[0]


def rank_of_target(probs, target_id):
    """1-based rank under descending probability, ties toward lower id."""
    p = np.asarray(probs, dtype=np.float64)
    if not 0 <= target_id < p.shape[0]:
        raise InvalidInput(f"target {target_id} outside vocabulary")
    pt = p[target_id]
    above = int((p > pt).sum())
    tied_before = int((p[:target_id] == pt).sum())
    return 1 + above + tied_before


@dataclass
class LensTrajectory:
    """Per-layer fate of one target token at the answer position."""

    target_id: int
    probs: np.ndarray         # (n_layers,)
    ranks: np.ndarray         # (n_layers,) 1-based
    entropy_bits: np.ndarray  # (n_layers,)

    @property
    def n_layers(self):
        return self.probs.shape[0]

    def rows(self):
        return [
            {"layer": l, "prob": float(self.probs[l]),
             "rank": int(self.ranks[l]),
             "entropy_bits": float(self.entropy_bits[l])}
            for l in range(self.n_layers)
        ]


def target_trajectory(bundle, prompt_ids, target_id):
    """Lens probability, rank, and entropy of the target at every layer,
    read at the last prompt position."""
    if not 0 <= target_id < bundle.config.vocab_size:
        raise InvalidInput(f"target {target_id} outside vocabulary")
    with torch.no_grad():
        _, trace = forward(bundle, prompt_ids,
                           capture=frozenset(["residual_out"]))
    resid = trace.residual_out[:, -1, :]  # (n_layers, d_model)
    dists = _lens_from_hidden(bundle, resid)
    n_layers = dists.shape[0]
    probs = dists[:, target_id].copy()
    ranks = np.array([rank_of_target(dists[l], target_id)
                      for l in range(n_layers)], dtype=np.int64)
    ents = np.array([numkit.shannon_entropy(dists[l])
                     for l in range(n_layers)])
    return LensTrajectory(target_id=target_id, probs=probs, ranks=ranks,
                          entropy_bits=ents)


def rank_histogram(ranks):
    """Counts over fixed buckets; exhaustive and disjoint by construction."""
    counts = {label: 0 for label, _, _ in RANK_BUCKETS}
    for r in ranks:
        r = int(r)
        if r < 1:
            raise InvalidInput(f"ranks are 1-based, got {r}")
        for label, lo, hi in RANK_BUCKETS:
            if r >= lo and (hi is None or r <= hi):
                counts[label] += 1
                break
    return counts


def target_ranks(bundle, world, fact_ids=None, template_id=0, batch=1024):
    """Final-distribution rank of every fact's target, in fact order."""
    fact_ids = list(range(world.n_facts)) if fact_ids is None else list(fact_ids)
    if not fact_ids:
        raise InvalidInput("no facts to rank")
    by_len = {}
    for i, f in enumerate(fact_ids):
        ids, _, target = supervised_example(world, f, template_id)
        by_len.setdefault(len(ids), []).append((i, ids, target))
    out = np.zeros(len(fact_ids), dtype=np.int64)
    for length in sorted(by_len):
        entries = by_len[length]
        for s in range(0, len(entries), batch):
            chunk = entries[s:s + batch]
            toks = torch.from_numpy(
                np.asarray([e[1] for e in chunk], dtype=np.int64))
            with torch.no_grad():
                logits, _ = run_batch(bundle, toks, want_logits="last")
            probs = softmax64(logits.numpy())
            for (i, _, target), row in zip(chunk, probs):
                out[i] = rank_of_target(row, target)
    return out


def peak_confidence_layer(trajectory, min_layer):
    """Deepest layer attaining the minimum lens entropy at or after
    min_layer. Early layers are excluded because their entropy minima do
    not track the answer signal."""
    ents = np.asarray(getattr(trajectory, "entropy_bits", trajectory),
                      dtype=np.float64)
    if not 0 <= min_layer < ents.shape[0]:
        raise InvalidInput(f"min_layer {min_layer} out of range")
    tail = ents[min_layer:]
    return min_layer + int(np.nonzero(tail == tail.min())[0][-1])


# ---------------------------------------------------------------------------
# Accuracy suites


@dataclass
class AccuracyReport:
    n_facts: int
    template_ids: tuple
    per_fact: dict            # fact_id -> [bool per template]
    acc_any: float
    acc_majority: float
    acc_all: float
    per_relation: dict        # relation_id -> {any, majority, all, n}

    def to_json(self):
        return {
            "n_facts": self.n_facts,
            "template_ids": list(self.template_ids),
            "acc_any": self.acc_any,
            "acc_majority": self.acc_majority,
            "acc_all": self.acc_all,
            "per_relation": {str(k): v for k, v in sorted(self.per_relation.items())},
            "per_fact": {str(k): [int(b) for b in v]
                         for k, v in sorted(self.per_fact.items())},
        }


def summarize_correctness(world, table, template_ids):
    """Aggregate a {fact_id: [bool per paraphrase]} table. Majority is
    strict: more than half the paraphrases must be correct."""
    if not table:
        raise InvalidInput("empty correctness table")
    n_templates = len(template_ids)
    if n_templates < 1:
        raise InvalidConfig("need at least one paraphrase")
    per_fact = {}
    marks = []  # (relation_id, any, majority, all)
    for fact_id, flags in table.items():
        flags = [bool(x) for x in flags]
        if len(flags) != n_templates:
            raise InvalidInput(f"fact {fact_id} has {len(flags)} marks, "
                               f"expected {n_templates}")
        per_fact[fact_id] = flags
        k = sum(flags)
        marks.append((world.fact(fact_id).relation_id,
                      k >= 1, 2 * k > n_templates, k == n_templates))

    def agg(rows):
        n = len(rows)
        return {
            "any": sum(r[1] for r in rows) / n,
            "majority": sum(r[2] for r in rows) / n,
            "all": sum(r[3] for r in rows) / n,
            "n": n,
        }

    overall = agg(marks)
    by_rel = {}
    for rid in sorted({m[0] for m in marks}):
        by_rel[rid] = agg([m for m in marks if m[0] == rid])
    return AccuracyReport(
        n_facts=len(per_fact),
        template_ids=tuple(template_ids),
        per_fact=per_fact,
        acc_any=overall["any"],
        acc_majority=overall["majority"],
        acc_all=overall["all"],
        per_relation=by_rel,
    )


def accuracy_suite(bundle, world, fact_ids=None, template_ids=None,
                   batch=1024):
    """Greedy-decode every (fact, paraphrase) pair and aggregate."""
    fact_ids = list(range(world.n_facts)) if fact_ids is None else list(fact_ids)
    if template_ids is None:
        template_ids = list(range(TEMPLATES_PER_RELATION))
    else:
        template_ids = list(template_ids)
    if not fact_ids:
        raise InvalidInput("no facts to score")
    if not template_ids:
        raise InvalidConfig("need at least one paraphrase")

    by_len = {}
    for f in fact_ids:
        for t in template_ids:
            ids, _, target = supervised_example(world, f, t)
            by_len.setdefault(len(ids), []).append((f, t, ids, target))

    hits = {f: {} for f in fact_ids}
    for length in sorted(by_len):
        entries = by_len[length]
        for i in range(0, len(entries), batch):
            chunk = entries[i:i + batch]
            toks = torch.from_numpy(
                np.asarray([e[2] for e in chunk], dtype=np.int64))
            preds = greedy_batch(bundle, toks)
            for (f, t, _, target), pred in zip(chunk, preds):
                hits[f][t] = int(pred) == target
    table = {f: [hits[f][t] for t in template_ids] for f in fact_ids}
    return summarize_correctness(world, table, template_ids)
