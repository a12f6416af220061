"""Damage localization and repair for quantized models.

The sweeps answer "where does low-bit damage live": quantize a growing
layer prefix (domino), one layer at a time, or one component family at a
time, and score factual accuracy after each cut. The repair side applies
mixed-precision protection plans, amplifies the most confident layer's
residual contribution at inference time, and runs a fixed battery of
low-rank error compensation and protection variants so the same budget can
be compared across bit widths.

Every sweep evaluates greedy decoding on the primary paraphrase template
and is stamped with the model and corpus digests it ran against.
"""

from dataclasses import dataclass, field, replace

import numpy as np

from . import corpus, diagnostics, probes
from .errors import InvalidConfig, InvalidInput
from .model import (
    COMPONENTS,
    PatchDirective,
    PatchSpec,
    forward,
    softmax64,
)
from .numkit import shannon_entropy
from .quant import (
    PASSTHROUGH_BITS,
    PlanDirective,
    QuantSpec,
    apply_plan,
    average_bits,
    build_plan,
    kurtosis_protect_plan,
    plan_components,
    plan_first_k_layers,
    plan_protect_early_layers,
    plan_uniform,
)

SWEEP_KINDS = ("domino", "single_layer", "component", "injection", "battery")

# Component families for the masked sweep. "none" is the empty control.
COMPONENT_MASKS = {
    "all": COMPONENTS,
    "mlp": ("gate", "up", "down"),
    "attn": ("q", "k", "v", "o"),
    "gate_up": ("gate", "up"),
    "down": ("down",),
    "qk": ("q", "k"),
    "v": ("v",),
    "o": ("o",),
    "none": (),
}

DEFAULT_ALPHA_GRID = (2.0, 3.0, 5.0, 7.0, 9.0)
INJECTION_SAMPLE_CAP = 256


@dataclass
class SweepResult:
    """One score per swept value, with enough settings attached to rerun.

    scores are accuracies in [0, 1] for every kind except "injection",
    whose headline score is a mean cosine in [-1, 1] and whose per-value
    LayerCurve objects ride along in curves.
    """

    kind: str
    values: tuple
    scores: tuple
    subset: dict
    quant: dict
    curves: tuple = None
    extras: dict = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in SWEEP_KINDS:
            raise InvalidConfig(f"unknown sweep kind {self.kind!r}")
        self.values = tuple(self.values)
        self.scores = tuple(float(s) for s in self.scores)
        if len(self.values) != len(self.scores):
            raise InvalidInput(
                f"{len(self.values)} values but {len(self.scores)} scores")
        lo = -1.0 if self.kind == "injection" else 0.0
        for v, s in zip(self.values, self.scores):
            if not lo <= s <= 1.0:
                raise InvalidInput(f"score {s} at {v!r} outside [{lo}, 1]")
        if self.curves is not None:
            self.curves = tuple(self.curves)
            if len(self.curves) != len(self.values):
                raise InvalidInput("one curve per swept value required")

    def rows(self):
        return list(zip(self.values, self.scores))

    def score_of(self, value):
        try:
            return self.scores[self.values.index(value)]
        except ValueError:
            raise InvalidInput(f"value {value!r} was not swept") from None

    def to_json(self):
        doc = {
            "kind": self.kind,
            "values": list(self.values),
            "scores": list(self.scores),
            "subset": self.subset,
            "quant": self.quant,
            "extras": self.extras,
            "meta": self.meta,
        }
        if self.curves is not None:
            doc["curves"] = [c.to_json() for c in self.curves]
        return doc


def _stamp(bundle, world, seed=None):
    meta = {"model_digest": bundle.digest(), "corpus_digest": world.digest()}
    if seed is not None:
        meta["seed"] = seed
    return meta


def _subset_desc(world, fact_ids, name):
    n = world.n_facts if fact_ids is None else len(fact_ids)
    return {"name": name, "n_facts": n, "template_ids": [0]}


def _accuracy(bundle, world, fact_ids):
    return probes.accuracy_suite(bundle, world, fact_ids=fact_ids,
                                 template_ids=(0,)).acc_any


def _spec_doc(spec):
    return {"bits": spec.bits, "group_size": spec.group_size,
            "algorithm": spec.algorithm}


def domino_sweep(bundle, world, spec_lo, k_values, fact_ids=None,
                 calib_prompts=None, subset_name="all", seed=None):
    """Accuracy after quantizing the layer prefix 0..k at spec_lo for each
    k, deeper layers untouched. k = -1 quantizes nothing and must score
    exactly like the baseline (identical weights, identical greedy calls).
    """
    n_layers = bundle.config.n_layers
    ks = [int(k) for k in k_values]
    for k in ks:
        if not -1 <= k < n_layers:
            raise InvalidConfig(f"domino k {k} outside [-1, {n_layers})")
    scores = []
    for k in ks:
        plan = plan_first_k_layers(bundle.config, spec_lo, k)
        qb, _ = apply_plan(bundle, plan, calib_prompts)
        scores.append(_accuracy(qb, world, fact_ids))
    return SweepResult(
        kind="domino", values=tuple(ks), scores=tuple(scores),
        subset=_subset_desc(world, fact_ids, subset_name),
        quant={**_spec_doc(spec_lo), "rest_bits": PASSTHROUGH_BITS},
        meta=_stamp(bundle, world, seed))


def single_layer_sweep(bundle, world, spec, layers=None, fact_ids=None,
                       calib_prompts=None, subset_name="all", seed=None):
    """Accuracy with exactly one layer quantized at spec, for each layer."""
    n_layers = bundle.config.n_layers
    layer_list = list(range(n_layers)) if layers is None else [int(l) for l in layers]
    for l in layer_list:
        if not 0 <= l < n_layers:
            raise InvalidConfig(f"layer {l} out of range")
    base = replace(spec, bits=PASSTHROUGH_BITS)
    scores = []
    for l in layer_list:
        plan = build_plan(bundle.config, base, (
            PlanDirective(bits=spec.bits, layers=(l,),
                          group_size=spec.group_size,
                          algorithm=spec.algorithm),))
        qb, _ = apply_plan(bundle, plan, calib_prompts)
        scores.append(_accuracy(qb, world, fact_ids))
    return SweepResult(
        kind="single_layer", values=tuple(layer_list), scores=tuple(scores),
        subset=_subset_desc(world, fact_ids, subset_name),
        quant=_spec_doc(spec), meta=_stamp(bundle, world, seed))


def resolve_mask(name):
    key = str(name).replace("/", "_")
    if key not in COMPONENT_MASKS:
        raise InvalidConfig(
            f"unknown component mask {name!r}; known: {sorted(COMPONENT_MASKS)}")
    return key, COMPONENT_MASKS[key]


def component_sweep(bundle, world, spec, masks=None, fact_ids=None,
                    calib_prompts=None, subset_name="all", seed=None):
    """Accuracy with only one component family quantized, per mask."""
    if masks is None:
        masks = ("all", "mlp", "attn", "gate_up", "down", "qk", "v", "o")
    names, scores = [], []
    for mask in masks:
        key, comps = resolve_mask(mask)
        names.append(key)
        plan = plan_components(bundle.config, comps, spec)
        qb, _ = apply_plan(bundle, plan, calib_prompts)
        scores.append(_accuracy(qb, world, fact_ids))
    return SweepResult(
        kind="component", values=tuple(names), scores=tuple(scores),
        subset=_subset_desc(world, fact_ids, subset_name),
        quant=_spec_doc(spec), meta=_stamp(bundle, world, seed))


@dataclass(frozen=True)
class EarlyLayers:
    """Hold the first n layers at bits_hi, quantize the rest at the base."""

    n_layers: int = 2
    bits_hi: int = 8


@dataclass(frozen=True)
class KurtosisBudget:
    """Protect the heaviest-tailed weight rows at 8 bits until the model's
    average bit width reaches the target."""

    target_avg_bits: float


@dataclass
class ProtectResult:
    bundle: object
    plan: object
    average_bits: float
    report: object
    strategy: dict


def source_protect(bundle, base_spec, strategy, calib_prompts=None):
    """Apply a mixed-precision protection strategy on top of base_spec."""
    config = bundle.config
    if isinstance(strategy, EarlyLayers):
        if not 0 <= strategy.n_layers <= config.n_layers:
            raise InvalidConfig(
                f"cannot protect {strategy.n_layers} of {config.n_layers} layers")
        plan = plan_protect_early_layers(config, base_spec,
                                         strategy.n_layers, strategy.bits_hi)
        desc = {"strategy": "early_layers", "n_layers": strategy.n_layers,
                "bits_hi": strategy.bits_hi}
    elif isinstance(strategy, KurtosisBudget):
        plan = kurtosis_protect_plan(bundle, base_spec,
                                     strategy.target_avg_bits)
        desc = {"strategy": "kurtosis",
                "target_avg_bits": strategy.target_avg_bits}
    else:
        raise InvalidConfig(f"unknown protection strategy {strategy!r}")
    qb, report = apply_plan(bundle, plan, calib_prompts)
    return ProtectResult(bundle=qb, plan=plan,
                         average_bits=average_bits(plan, config),
                         report=report, strategy=desc)


@dataclass(frozen=True)
class AmplifyConfig:
    """Boost the most confident layer's contribution by alpha > 1.

    layer "auto" picks the deepest lens-entropy minimum at or after
    min_layer per prompt; an int pins the layer. mode "residual" scales
    that layer's residual state at the last position and lets the rest of
    the forward pass run; mode "lens_substitute" instead sharpens the
    chosen layer's lens distribution (power alpha) and uses it as the
    output, skipping the remaining layers entirely.
    """

    alpha: float
    layer: object = "auto"
    min_layer: int = 1
    mode: str = "residual"

    def __post_init__(self):
        if not self.alpha > 1.0:
            raise InvalidConfig(f"alpha must exceed 1, got {self.alpha}")
        if self.mode not in ("residual", "lens_substitute"):
            raise InvalidConfig(f"unknown amplify mode {self.mode!r}")
        if self.layer != "auto" and not isinstance(self.layer, int):
            raise InvalidConfig("layer must be 'auto' or an int")
        if self.min_layer < 0:
            raise InvalidConfig("min_layer must be >= 0")


@dataclass
class AmplifyOutcome:
    base_prediction: int
    amplified_prediction: int
    base_probs: np.ndarray
    amplified_probs: np.ndarray
    layer_used: int
    entropy_bits: np.ndarray
    alpha: float
    mode: str


def amplified_forward(bundle, prompt_ids, cfg):
    """Two-pass amplification: read the lens trajectory, pick the peak-
    confidence layer, then rerun with that layer's last-position residual
    state scaled by alpha (or substitute its sharpened lens readout)."""
    ids = list(prompt_ids)
    logits, trace = forward(bundle, ids, capture={"residual_out"})
    base_probs = softmax64(logits[-1])
    n_layers = bundle.config.n_layers
    lens = [probes.logit_lens(bundle, trace, l, -1) for l in range(n_layers)]
    ents = np.array([shannon_entropy(p) for p in lens])
    if cfg.layer == "auto":
        l_star = probes.peak_confidence_layer(ents, min_layer=cfg.min_layer)
    else:
        if not 0 <= cfg.layer < n_layers:
            raise InvalidConfig(f"amplify layer {cfg.layer} out of range")
        l_star = cfg.layer
    if cfg.mode == "residual":
        patch = PatchSpec([PatchDirective(
            site="residual_out", layer=l_star, position=len(ids) - 1,
            action="scale", alpha=cfg.alpha)])
        amp_logits, _ = forward(bundle, ids, patch=patch)
        amp_probs = softmax64(amp_logits[-1])
    else:
        # Power sharpening: alpha * log p renormalized, i.e. temperature
        # 1/alpha on the chosen layer's readout. Floor keeps log finite.
        amp_probs = softmax64(cfg.alpha * np.log(np.maximum(lens[l_star],
                                                            1e-300)))
    return AmplifyOutcome(
        base_prediction=int(np.argmax(base_probs)),
        amplified_prediction=int(np.argmax(amp_probs)),
        base_probs=base_probs, amplified_probs=amp_probs,
        layer_used=int(l_star), entropy_bits=ents,
        alpha=cfg.alpha, mode=cfg.mode)


def amplified_accuracy(bundle, world, cfg, fact_ids=None, template_id=0):
    """Greedy accuracy with amplification applied to every prompt."""
    ids = list(range(world.n_facts)) if fact_ids is None else list(fact_ids)
    if not ids:
        raise InvalidInput("no facts to score")
    hits = 0
    for f in ids:
        prompt, _, target = corpus.supervised_example(world, f, template_id)
        out = amplified_forward(bundle, prompt, cfg)
        hits += int(out.amplified_prediction == target)
    return hits / len(ids)


def signal_injection_sweep(bundle, world, bits_hi, k_values, bits_lo=2,
                           group_size=32, algorithm="rtn", fact_ids=None,
                           calib_prompts=None, sample_cap=INJECTION_SAMPLE_CAP,
                           subset_name="all", seed=None):
    """Residual-stream cosine against the baseline when layers 0..k run at
    bits_hi and everything deeper runs at bits_lo, for each k.

    The per-layer cosine curves ride in .curves; the headline score per k
    is the curve's mean over layers. Layers at or below k see only
    bits_hi weights, so their cosines cannot depend on bits_lo.
    """
    if bits_hi not in (8, 4):
        raise InvalidConfig(f"bits_hi must be 8 or 4, got {bits_hi}")
    config = bundle.config
    ks = [int(k) for k in k_values]
    for k in ks:
        if not -1 <= k < config.n_layers:
            raise InvalidConfig(f"injection k {k} outside [-1, {config.n_layers})")
    facts = list(range(world.n_facts)) if fact_ids is None else list(fact_ids)
    facts = facts[:sample_cap]
    if not facts:
        raise InvalidInput("no facts to trace")
    prompts, positions = [], []
    for f in facts:
        ids, pos = corpus.render_prompt(world, f, 0)
        prompts.append(ids)
        positions.append(pos.last_token)
    fp_traces = diagnostics.collect_traces(bundle, prompts, {"residual_out"})
    spec_hi = QuantSpec(bits=bits_hi, group_size=group_size,
                        algorithm=algorithm)
    curves, scores = [], []
    for k in ks:
        plan = plan_first_k_layers(config, spec_hi, k, rest_bits=bits_lo)
        qb, _ = apply_plan(bundle, plan, calib_prompts)
        q_traces = diagnostics.collect_traces(qb, prompts, {"residual_out"})
        curve = diagnostics.value_cosine_profile(
            fp_traces, q_traces, position=positions, site="residual_out")
        curves.append(curve)
        scores.append(float(curve.means.mean()))
    return SweepResult(
        kind="injection", values=tuple(ks), scores=tuple(scores),
        subset=_subset_desc(world, facts, subset_name),
        quant={"bits_hi": bits_hi, "bits_lo": bits_lo,
               "group_size": group_size, "algorithm": algorithm},
        curves=tuple(curves), meta=_stamp(bundle, world, seed))


def compensation_battery(bundle, world, base_spec, ranks=(8, 32),
                         calib_prompts=None, fact_ids=None, protect_layers=2,
                         protect_bits=8, subset_name="all", seed=None):
    """Fixed repair battery at one bit width: plain quantization, low-rank
    error compensation at each rank, early-layer protection, and a
    kurtosis protection plan matched to the early-layer bit budget.

    Run it at two bit widths with the same ranks and budgets to compare
    how much repair each regime admits.
    """
    for r in ranks:
        if int(r) < 1:
            raise InvalidConfig(f"compensation rank must be >= 1, got {r}")
    config = bundle.config
    comp_mode = "activation" if calib_prompts is not None else "plain"
    early_plan = plan_protect_early_layers(config, base_spec, protect_layers,
                                           protect_bits)
    variants = [("plain", plan_uniform(config, base_spec))]
    for r in ranks:
        variants.append((f"rank_{int(r)}", build_plan(
            config, base_spec,
            compensation={"rank": int(r), "mode": comp_mode})))
    variants.append(("early_layers", early_plan))
    variants.append(("kurtosis", kurtosis_protect_plan(
        bundle, base_spec, average_bits(early_plan, config))))
    names, scores, avg = [], [], {}
    for name, plan in variants:
        qb, _ = apply_plan(bundle, plan, calib_prompts)
        names.append(name)
        scores.append(_accuracy(qb, world, fact_ids))
        avg[name] = average_bits(plan, config)
    return SweepResult(
        kind="battery", values=tuple(names), scores=tuple(scores),
        subset=_subset_desc(world, fact_ids, subset_name),
        quant={**_spec_doc(base_spec), "ranks": [int(r) for r in ranks],
               "compensation_mode": comp_mode,
               "protect_layers": protect_layers,
               "protect_bits": protect_bits},
        extras={"average_bits": avg}, meta=_stamp(bundle, world, seed))
