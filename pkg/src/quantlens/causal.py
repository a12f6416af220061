"""Causal information-flow analysis.

Two complementary interventions over a (layer, position-group) grid:

  repair    run the degraded model but splice in the reference model's
            residual state at one cell; the rise in the target's
            probability measures how much of the lost signal that state
            carries (sufficiency)
  ablation  zero the model's own residual state at one cell; the drop in
            the target's probability measures how much the model depends
            on it (necessity)

Effects are raw probability deltas averaged over prompts, with standard
errors. A concentration score summarizes whether a grid's mass sits in a
few cells or is smeared everywhere.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import render_prompt, supervised_example
from .errors import (
    AlignmentError,
    InvalidInput,
    NotFound,
    TraceIncomplete,
)
from .model import PATCH_SITES, PatchDirective, PatchSpec, run_batch, softmax64

GROUP_ORDER = ("first_subject", "mid_subject", "last_subject", "relation",
               "last_token")

DEFAULT_SAMPLE_CAP = 256


@dataclass(frozen=True)
class RepairCase:
    """One prompt prepared for grid interventions. answer_pos is the
    position whose next-token distribution is scored."""

    prompt_id: object
    token_ids: tuple
    target_id: int
    groups: dict
    answer_pos: int = -1

    def resolved_answer_pos(self):
        n = len(self.token_ids)
        pos = self.answer_pos if self.answer_pos >= 0 else n + self.answer_pos
        if not 0 <= pos < n:
            raise InvalidInput(f"answer position {self.answer_pos} out of range")
        return pos


def cases_from_facts(world, fact_ids, template_id=0):
    """Intervention cases for corpus facts, keyed (fact_id, template_id)."""
    cases = []
    for f in fact_ids:
        ids, positions = render_prompt(world, f, template_id)
        _, _, target = supervised_example(world, f, template_id)
        cases.append(RepairCase(
            prompt_id=(f, template_id),
            token_ids=tuple(ids),
            target_id=target,
            groups={k: tuple(v) for k, v in positions.groups().items()},
        ))
    return cases


class CleanStore:
    """Immutable per-prompt residual traces from a reference model."""

    def __init__(self, model_digest, traces):
        self.model_digest = model_digest
        self._traces = dict(traces)
        for arr in self._traces.values():
            arr.flags.writeable = False

    def __len__(self):
        return len(self._traces)

    def __contains__(self, prompt_id):
        return prompt_id in self._traces

    @property
    def ids(self):
        return list(self._traces)

    def get(self, prompt_id):
        if prompt_id not in self._traces:
            raise NotFound(f"no clean trace for prompt {prompt_id!r}")
        return self._traces[prompt_id]


def capture_clean_traces(bundle, cases):
    """Residual-stream states (n_layers, seq, d_model) for every case."""
    store = {}
    for bucket in _length_buckets(cases):
        toks = _tokens(bucket)
        with torch.no_grad():
            _, caps = run_batch(bundle, toks,
                                capture=frozenset(["residual_out"]),
                                want_logits="last")
        resid = caps["residual_out"].numpy()
        for i, case in enumerate(bucket):
            store[case.prompt_id] = resid[i].copy()
    return CleanStore(bundle.digest(), store)


def _length_buckets(cases):
    if not cases:
        raise InvalidInput("no cases given")
    by_len = {}
    for c in cases:
        by_len.setdefault(len(c.token_ids), []).append(c)
    return [by_len[k] for k in sorted(by_len)]


def _tokens(bucket):
    return torch.from_numpy(
        np.asarray([c.token_ids for c in bucket], dtype=np.int64))


def _target_probs(bundle, cases, patch_for_bucket=None):
    """P(target) at each case's answer position, in case order."""
    out = {}
    for bucket in _length_buckets(cases):
        toks = _tokens(bucket)
        positions = np.asarray([c.resolved_answer_pos() for c in bucket])
        patch = patch_for_bucket(bucket) if patch_for_bucket else None
        with torch.no_grad():
            logits, _ = run_batch(bundle, toks, patch=patch,
                                  want_logits="positions",
                                  positions=positions)
        probs = softmax64(logits.numpy())
        for i, case in enumerate(bucket):
            out[case.prompt_id] = float(probs[i, case.target_id])
    return np.array([out[c.prompt_id] for c in cases])


@dataclass
class PatchGrid:
    """Mean effect per (layer, group) cell with sampling error."""

    kind: str                 # 'repair' or 'ablation'
    layers: tuple
    groups: tuple
    effects: np.ndarray       # (n_layers, n_groups)
    stderr: np.ndarray
    counts: np.ndarray
    window: int
    n_prompts: int
    base_mean: float
    meta: dict = field(default_factory=dict)

    def cell(self, layer, group):
        return float(self.effects[self.layers.index(layer),
                                  self.groups.index(group)])

    def argmax_cell(self):
        idx = np.unravel_index(int(np.argmax(self.effects)),
                               self.effects.shape)
        return self.layers[idx[0]], self.groups[idx[1]]

    def rows(self):
        out = []
        for i, layer in enumerate(self.layers):
            for j, group in enumerate(self.groups):
                out.append({
                    "layer": layer, "group": group,
                    "effect": float(self.effects[i, j]),
                    "stderr": float(self.stderr[i, j]),
                    "n": int(self.counts[i, j]),
                })
        return out

    def to_json(self):
        return {
            "kind": self.kind,
            "window": self.window,
            "n_prompts": self.n_prompts,
            "base_mean": self.base_mean,
            "groups": list(self.groups),
            "layers": list(self.layers),
            "cells": self.rows(),
            "meta": self.meta,
        }


def _present_groups(cases, group_names):
    names = GROUP_ORDER if group_names is None else tuple(group_names)
    present = []
    for g in names:
        if any(c.groups.get(g) for c in cases):
            present.append(g)
    if not present:
        raise InvalidInput("no non-empty position groups in the cases")
    return tuple(present)


def _grid_layers(n_layers, window):
    if not 1 <= window <= n_layers:
        raise InvalidInput(f"window {window} out of range")
    return tuple(range(n_layers - window + 1))


def _run_grid(bundle, cases, base, make_directive, window, group_names,
              sign):
    """sign +1 scores probability gained (repair), -1 probability lost
    (ablation)."""
    groups = _present_groups(cases, group_names)
    layers = _grid_layers(bundle.config.n_layers, window)
    effects = np.zeros((len(layers), len(groups)))
    stderr = np.zeros_like(effects)
    counts = np.zeros(effects.shape, dtype=np.int64)

    base_by_id = {c.prompt_id: b for c, b in zip(cases, base)}
    for li, layer in enumerate(layers):
        span = range(layer, layer + window)
        for gi, gname in enumerate(groups):
            touched = [c for c in cases if c.groups.get(gname)]
            if not touched:
                continue

            def patch_for(bucket, _span=span, _g=gname):
                directives = []
                for row, case in enumerate(bucket):
                    for lp in _span:
                        for t in case.groups[_g]:
                            directives.append(
                                make_directive(case, row, lp, t))
                return PatchSpec(tuple(directives))

            patched = _target_probs(bundle, touched, patch_for)
            deltas = sign * np.array(
                [patched[i] - base_by_id[c.prompt_id]
                 for i, c in enumerate(touched)])
            effects[li, gi] = deltas.mean()
            if len(deltas) > 1:
                stderr[li, gi] = deltas.std(ddof=1) / np.sqrt(len(deltas))
            counts[li, gi] = len(deltas)
    return groups, layers, effects, stderr, counts


def cross_model_repair(bundle, clean_store, cases, group_names=None,
                       window=1, sample_cap=DEFAULT_SAMPLE_CAP):
    """Splice reference residual states into this model, cell by cell.

    Positive effects mean the reference state restores probability the
    model had lost. Requires a clean trace for every case.
    """
    cases = list(cases)[:sample_cap]
    if not cases:
        raise InvalidInput("no cases given")
    for case in cases:
        if case.prompt_id not in clean_store:
            raise TraceIncomplete(f"no clean trace for {case.prompt_id!r}")
        trace = clean_store.get(case.prompt_id)
        expected = (bundle.config.n_layers, len(case.token_ids),
                    bundle.config.d_model)
        if trace.shape != expected:
            raise AlignmentError(
                f"trace for {case.prompt_id!r} has shape {trace.shape}, "
                f"expected {expected}")

    base = _target_probs(bundle, cases)

    def make(case, row, layer, t):
        # copy: store arrays are read-only, torch wants writable buffers
        clean = clean_store.get(case.prompt_id)
        return PatchDirective(site="residual_out", layer=layer, position=t,
                              action="replace",
                              vector=np.array(clean[layer, t]), row=row)

    groups, layers, effects, stderr, counts = _run_grid(
        bundle, cases, base, make, window, group_names, sign=1)
    return PatchGrid(kind="repair", layers=layers, groups=groups,
                     effects=effects, stderr=stderr, counts=counts,
                     window=window, n_prompts=len(cases),
                     base_mean=float(base.mean()),
                     meta={"reference_digest": clean_store.model_digest})


def zero_ablation(bundle, cases, group_names=None, window=1,
                  sample_cap=DEFAULT_SAMPLE_CAP, site="residual_out"):
    """Zero the model's own states, cell by cell. Positive effects mean
    the model needed that state.

    The default site wipes the whole residual vector at the cell, which
    in a small model is a blunt instrument: nearly any position is
    load-bearing. Component sites (attn_out, ffn_out) knock out only that
    block's additive contribution and leave the rest of the state intact,
    which differentiates cells by function instead of by blast radius.
    """
    if site not in PATCH_SITES:
        raise InvalidInput(f"site must be one of {sorted(PATCH_SITES)}")
    cases = list(cases)[:sample_cap]
    if not cases:
        raise InvalidInput("no cases given")
    base = _target_probs(bundle, cases)

    def make(case, row, layer, t):
        return PatchDirective(site=site, layer=layer, position=t,
                              action="zero", row=row)

    groups, layers, effects, stderr, counts = _run_grid(
        bundle, cases, base, make, window, group_names, sign=-1)
    return PatchGrid(kind="ablation", layers=layers, groups=groups,
                     effects=effects, stderr=stderr, counts=counts,
                     window=window, n_prompts=len(cases),
                     base_mean=float(base.mean()))


def effect_concentration(grid_or_values, warn_on_zero=True):
    """Normalized Herfindahl index of |effect| mass over grid cells.

    1 means a single cell carries everything, 0 means a perfectly uniform
    spread. An all-zero grid has no defined concentration and reports 0.
    """
    values = (grid_or_values.effects if isinstance(grid_or_values, PatchGrid)
              else grid_or_values)
    e = np.abs(np.asarray(values, dtype=np.float64)).ravel()
    if e.size == 0:
        raise InvalidInput("empty grid")
    total = e.sum()
    if total <= 0.0:
        if warn_on_zero:
            warnings.warn("all-zero grid: concentration undefined, using 0",
                          RuntimeWarning)
        return 0.0
    if e.size == 1:
        return 1.0
    n = e.size
    herfindahl = float((e ** 2).sum() / total ** 2)
    return (herfindahl - 1.0 / n) / (1.0 - 1.0 / n)
