"""Weight-only post-training quantization.

All algorithms share one asymmetric min-max grid: per output row, per group
of `group_size` input channels, with the range widened to include zero,

    scale = (max - min) / (2^bits - 1)        (floored at 1e-12)
    zero  = round(-min / scale), clipped to the grid
    q     = clip(round(w / scale) + zero, 0, 2^bits - 1)

and the dequantized weight (q - zero) * scale is what the model runs with.
Embeddings, norm scales, and the unembedding are never touched.

Three algorithms fill that grid:

  rtn        round-to-nearest, no calibration
  gptq       column-by-column greedy with error feedback through the
             Cholesky factor of the inverse input Hessian
  awq+gptq   per-channel scale search s_c = mean|x_c|^beta folded into the
             weights before gptq runs

With an identity Hessian the gptq path degenerates to rtn bit for bit; a
test pins that. Internals run float64 and results are stored float32.

Plans map every quantizable matrix to a spec, carry optional row-protection
sets (protected rows are kept at 8-bit rtn), and an optional low-rank
compensation step added after quantization.
"""

import json
import warnings
from dataclasses import dataclass, field, replace

import numpy as np
import scipy.linalg
import torch

from . import numkit
from .errors import (
    DegenerateSample,
    InsufficientSamples,
    InvalidConfig,
    InvalidInput,
    NumericalFailure,
)
from .model import (
    COMPONENT_PARAMS,
    COMPONENTS,
    ModelBundle,
    param_shapes,
    parse_param_name,
    quantizable_params,
    run_batch,
)

VALID_BITS = (2, 3, 4, 8, 16)
PASSTHROUGH_BITS = 16

SCALE_FLOOR = 1e-12

# GPTQ processes columns in blocks; tying the block to the group keeps the
# grid parameters fixed while a block is being compensated.
MAX_BLOCK = 32

AWQ_BETA_GRID = tuple(i / 8.0 for i in range(9))

# Which captured site feeds each quantizable matrix during calibration.
COMPONENT_INPUT_SITE = {
    "q": "attn_norm_out",
    "k": "attn_norm_out",
    "v": "attn_norm_out",
    "o": "attn_preproj",
    "gate": "ffn_norm_out",
    "up": "ffn_norm_out",
    "down": "h_key",
}


@dataclass(frozen=True)
class QuantSpec:
    bits: int
    group_size: int = 32
    algorithm: str = "rtn"
    damping_frac: float = 0.01

    def __post_init__(self):
        if self.bits not in VALID_BITS:
            raise InvalidConfig(f"bits must be one of {VALID_BITS}, got {self.bits}")
        if self.group_size < 1:
            raise InvalidConfig("group_size must be >= 1")
        if self.algorithm not in ("rtn", "gptq", "awq+gptq"):
            raise InvalidConfig(f"unknown algorithm {self.algorithm!r}")
        if not 0.0 <= self.damping_frac < 1.0:
            raise InvalidConfig("damping_frac must be in [0, 1)")

    def to_json(self):
        return {"bits": self.bits, "group_size": self.group_size,
                "algorithm": self.algorithm, "damping_frac": self.damping_frac}

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)


@dataclass
class Codebook:
    """Grid parameters for one quantized matrix. row_bits records the
    effective width per output row (protected rows sit at 8)."""

    scales: np.ndarray       # (rows, n_groups) float64
    zero_points: np.ndarray  # (rows, n_groups) float64, integral values
    bits: int
    group_size: int
    row_bits: np.ndarray = None  # (rows,) int

    def __post_init__(self):
        if self.row_bits is None:
            self.row_bits = np.full(self.scales.shape[0], self.bits, dtype=np.int64)


def _group_slices(n_cols, group_size):
    return [(lo, min(lo + group_size, n_cols))
            for lo in range(0, n_cols, group_size)]


def _find_grid(block, bits):
    """Per-row (scale, zero_point) for one group of columns.

    The range is widened to include zero, which keeps the integer
    zero-point inside [0, 2^bits - 1] and makes the half-step error bound
    hold without the clip ever engaging; the clip stays as a guard for
    degenerate floored-scale groups."""
    mn = np.minimum(block.min(axis=1), 0.0)
    mx = np.maximum(block.max(axis=1), 0.0)
    levels = float(2 ** bits - 1)
    scale = np.maximum((mx - mn) / levels, SCALE_FLOOR)
    zero = np.clip(np.rint(-mn / scale), 0.0, levels)
    return scale, zero


def _apply_grid(w, scale, zero, bits):
    """Quantize-dequantize columns sharing one (scale, zero) per row."""
    levels = float(2 ** bits - 1)
    if w.ndim == 1:
        q = np.clip(np.rint(w / scale) + zero, 0.0, levels)
        return (q - zero) * scale
    q = np.clip(np.rint(w / scale[:, None]) + zero[:, None], 0.0, levels)
    return (q - zero[:, None]) * scale[:, None]


def _rtn_core(w64, bits, group_size):
    out = np.empty_like(w64)
    slices = _group_slices(w64.shape[1], group_size)
    scales = np.empty((w64.shape[0], len(slices)))
    zeros = np.empty_like(scales)
    for g, (lo, hi) in enumerate(slices):
        scale, zero = _find_grid(w64[:, lo:hi], bits)
        scales[:, g] = scale
        zeros[:, g] = zero
        out[:, lo:hi] = _apply_grid(w64[:, lo:hi], scale, zero, bits)
    return out, scales, zeros


def _protect_rows(w64, out, codebook, protected_rows):
    """Re-quantize protected rows at 8 bits from their original values."""
    if len(protected_rows) == 0:
        return
    rows = np.asarray(sorted(protected_rows), dtype=np.int64)
    if rows.min() < 0 or rows.max() >= w64.shape[0]:
        raise InvalidConfig("protected row index out of range")
    sub, scales, zeros = _rtn_core(w64[rows], 8, codebook.group_size)
    out[rows] = sub
    codebook.scales[rows] = scales
    codebook.zero_points[rows] = zeros
    codebook.row_bits[rows] = 8


def rtn_quantize(w, spec, protected_rows=()):
    """Round-to-nearest on the shared grid. Returns (float32 tensor,
    Codebook). Passthrough (16-bit) returns a copy and no codebook."""
    w64 = np.asarray(
        w.detach().numpy() if isinstance(w, torch.Tensor) else w, dtype=np.float64
    )
    if w64.ndim != 2:
        raise InvalidInput(f"expected a matrix, got shape {w64.shape}")
    if spec.bits == PASSTHROUGH_BITS:
        return torch.from_numpy(w64.astype(np.float32)), None
    out, scales, zeros = _rtn_core(w64, spec.bits, spec.group_size)
    book = Codebook(scales=scales, zero_points=zeros, bits=spec.bits,
                    group_size=spec.group_size)
    _protect_rows(w64, out, book, protected_rows)
    return torch.from_numpy(out.astype(np.float32)), book


def hessian_from_inputs(x, damping_frac):
    """H = 2 X^T X / n + damping. x is (samples, in_features)."""
    x64 = np.asarray(x, dtype=np.float64)
    if x64.ndim != 2 or x64.shape[0] < 1:
        raise InsufficientSamples("hessian needs at least one input row")
    h = 2.0 * (x64.T @ x64) / x64.shape[0]
    mean_diag = float(np.trace(h)) / h.shape[0]
    if mean_diag > 0:
        lam = damping_frac * mean_diag
    else:
        warnings.warn("degenerate calibration activations, unit damping",
                      RuntimeWarning)
        lam = damping_frac
    h[np.diag_indices_from(h)] += lam
    return h


def collect_hessian(bundle, layer, component, calib_prompts, damping_frac=0.01):
    """Input Hessian for one matrix, gathered from the live model.

    Runs the calibration prompts, captures the site that feeds the given
    component at the given layer, and accumulates over all token positions.
    """
    if component not in COMPONENT_INPUT_SITE:
        raise InvalidConfig(f"unknown component {component!r}")
    if not calib_prompts:
        raise InsufficientSamples("calibration set is empty")
    site = COMPONENT_INPUT_SITE[component]
    by_len = {}
    for ids in calib_prompts:
        by_len.setdefault(len(ids), []).append(ids)
    chunks = []
    with torch.no_grad():
        for length in sorted(by_len):
            toks = torch.from_numpy(np.asarray(by_len[length], dtype=np.int64))
            _, caps = run_batch(bundle, toks, capture=frozenset([site]),
                                want_logits="last")
            t = caps[site][:, layer]
            chunks.append(t.reshape(-1, t.shape[-1]).numpy().astype(np.float64))
    return hessian_from_inputs(np.concatenate(chunks, axis=0), damping_frac)


def _inverse_cholesky_upper(h, damping_frac):
    """Upper factor U with U^T U = H^-1, retrying with extra damping."""
    h = h.copy()
    bump = max(damping_frac, 1e-4) * max(float(np.trace(h)) / h.shape[0], 1e-12)
    for attempt in range(11):
        try:
            hinv = numkit.cholesky_inverse(h)
            return scipy.linalg.cholesky(hinv, lower=False)
        except (NumericalFailure, np.linalg.LinAlgError):
            if attempt == 10:
                break
            h[np.diag_indices_from(h)] += bump
            bump *= 2.0
    raise NumericalFailure("hessian not invertible after 10 damping retries",
                           iterations=10)


def gptq_quantize(w, h, spec, protected_rows=()):
    """Greedy column-wise quantization with error feedback.

    Each block of columns is quantized left to right; the rounding error of
    a column, whitened by the Cholesky factor of H^-1, is subtracted from
    the columns that remain, then the whole block's residual is propagated
    past the block boundary. Grid parameters are refreshed from the
    current (error-fed) weights at every group boundary.
    """
    w64 = np.asarray(
        w.detach().numpy() if isinstance(w, torch.Tensor) else w, dtype=np.float64
    )
    if w64.ndim != 2:
        raise InvalidInput(f"expected a matrix, got shape {w64.shape}")
    if spec.bits == PASSTHROUGH_BITS:
        return torch.from_numpy(w64.astype(np.float32)), None
    h64 = np.asarray(h, dtype=np.float64)
    n_rows, n_cols = w64.shape
    if h64.shape != (n_cols, n_cols):
        raise InvalidInput(
            f"hessian shape {h64.shape} does not match {n_cols} input features"
        )
    if not np.all(np.isfinite(h64)):
        raise InvalidInput("hessian contains NaN or Inf")

    work = w64.copy()
    h64 = h64.copy()
    dead = np.diag(h64) <= 0
    if dead.any():
        h64[dead, dead] = 1.0
        work[:, dead] = 0.0
    upper = _inverse_cholesky_upper(h64, spec.damping_frac)

    gs = spec.group_size
    slices = _group_slices(n_cols, gs)
    scales = np.empty((n_rows, len(slices)))
    zeros = np.empty_like(scales)
    out = np.empty_like(work)
    block = min(gs, MAX_BLOCK)

    for i1 in range(0, n_cols, block):
        i2 = min(i1 + block, n_cols)
        err_block = np.empty((n_rows, i2 - i1))
        for j in range(i1, i2):
            g = j // gs
            if j % gs == 0:
                lo, hi = slices[g]
                scales[:, g], zeros[:, g] = _find_grid(work[:, lo:hi], spec.bits)
            q = _apply_grid(work[:, j], scales[:, g], zeros[:, g], spec.bits)
            out[:, j] = q
            err = (work[:, j] - q) / upper[j, j]
            if j + 1 < i2:
                work[:, j + 1:i2] -= np.outer(err, upper[j, j + 1:i2])
            err_block[:, j - i1] = err
        if i2 < n_cols:
            work[:, i2:] -= err_block @ upper[i1:i2, i2:]

    book = Codebook(scales=scales, zero_points=zeros, bits=spec.bits,
                    group_size=spec.group_size)
    _protect_rows(w64, out, book, protected_rows)
    return torch.from_numpy(out.astype(np.float32)), book


def awq_scales(col_energy, beta):
    """Per-channel scales mean|x|^beta, normalized so their geometric
    spread is centered (beta = 0 gives all ones)."""
    e = np.maximum(np.asarray(col_energy, dtype=np.float64), 1e-8)
    s = e ** beta
    s = s / np.sqrt(s.max() * s.min())
    return s


def awq_scale_search(w, x, spec, beta_grid=AWQ_BETA_GRID):
    """Pick the activation-aware scaling exponent by brute force.

    For each beta the weights are scaled channel-wise, quantized on the
    usual grid, unscaled, and judged by output MSE on the calibration
    inputs. Returns (scales, beta, per-beta error list). Ties prefer the
    smaller beta, so searches over constant inputs collapse to beta 0.
    """
    w64 = np.asarray(
        w.detach().numpy() if isinstance(w, torch.Tensor) else w, dtype=np.float64
    )
    x64 = np.asarray(x, dtype=np.float64)
    if x64.ndim != 2 or x64.shape[1] != w64.shape[1]:
        raise InvalidInput("calibration inputs do not match weight columns")
    if spec.bits == PASSTHROUGH_BITS:
        return np.ones(w64.shape[1]), 0.0, [0.0 for _ in beta_grid]
    gram = x64.T @ x64
    col_energy = np.abs(x64).mean(axis=0)

    best = None
    errs = []
    for beta in beta_grid:
        s = awq_scales(col_energy, beta)
        deq, _, _ = _rtn_core(w64 * s[None, :], spec.bits, spec.group_size)
        diff = w64 - deq / s[None, :]
        err = float(np.einsum("ij,jk,ik->", diff, gram, diff))
        errs.append(err)
        if best is None or err < best[0]:
            best = (err, beta, s)
    _, beta, s = best
    return s, beta, errs


def lowrank_compensate(w_ref, w_q, rank, x=None, mode="plain"):
    """Best rank-r correction to the quantization error w_ref - w_q.

    mode 'plain' truncates the SVD of the error itself; 'activation'
    whitens the error by the PSD square root of the calibration second
    moment first, so the correction spends its rank where the inputs
    actually have energy. Ranks above min(shape) are clamped with a
    warning. Returns the correction, float32, same shape as the weights.
    """
    ref = np.asarray(
        w_ref.detach().numpy() if isinstance(w_ref, torch.Tensor) else w_ref,
        dtype=np.float64,
    )
    quant = np.asarray(
        w_q.detach().numpy() if isinstance(w_q, torch.Tensor) else w_q,
        dtype=np.float64,
    )
    if ref.shape != quant.shape or ref.ndim != 2:
        raise InvalidInput("weight shapes disagree")
    if rank < 1:
        raise InvalidInput(f"rank must be >= 1, got {rank}")
    max_rank = min(ref.shape)
    if rank > max_rank:
        warnings.warn(f"rank {rank} clamped to {max_rank}", RuntimeWarning)
        rank = max_rank
    err = ref - quant

    if mode == "plain":
        r = numkit.svd(err)
        delta = (r.u[:, :rank] * r.s[:rank]) @ r.v[:, :rank].T
    elif mode == "activation":
        if x is None:
            raise InvalidInput("activation mode needs calibration inputs")
        x64 = np.asarray(x, dtype=np.float64)
        if x64.shape[1] != ref.shape[1]:
            raise InvalidInput("calibration inputs do not match weight columns")
        second = x64.T @ x64 / x64.shape[0]
        vals, vecs = np.linalg.eigh(second)
        vals = np.clip(vals, 0.0, None)
        tol = 1e-10 * max(float(vals.max()), 1e-300)
        root = np.sqrt(vals)
        inv_root = np.where(vals > tol, 1.0 / np.maximum(root, 1e-300), 0.0)
        sqrt_m = (vecs * root) @ vecs.T
        pinv_sqrt_m = (vecs * inv_root) @ vecs.T
        r = numkit.svd(err @ sqrt_m)
        delta = (r.u[:, :rank] * r.s[:rank]) @ r.v[:, :rank].T @ pinv_sqrt_m
    else:
        raise InvalidInput(f"unknown compensation mode {mode!r}")
    return torch.from_numpy(delta.astype(np.float32))


# ---------------------------------------------------------------------------
# Plans


@dataclass(frozen=True)
class PlanDirective:
    """One layered rule: which layers/components move to which spec.
    None selects everything on that axis."""

    bits: int
    layers: tuple = None
    components: tuple = None
    group_size: int = None
    algorithm: str = None

    def selector(self):
        return (self.layers, self.components)


@dataclass
class QuantPlan:
    default: QuantSpec
    matrix_specs: dict = field(default_factory=dict)   # name -> QuantSpec
    protection: dict = field(default_factory=dict)     # name -> row tuple
    compensation: dict = None                          # {"rank", "mode"}

    def spec_for(self, name):
        return self.matrix_specs.get(name, self.default)

    def protected_rows(self, name):
        return self.protection.get(name, ())

    def to_json(self):
        return {
            "defaults": self.default.to_json(),
            "overrides": [
                {"name": k, "spec": v.to_json()}
                for k, v in sorted(self.matrix_specs.items())
            ],
            "protection": [
                {"name": k, "rows": list(v)}
                for k, v in sorted(self.protection.items())
            ],
            "compensation": self.compensation,
        }

    @classmethod
    def from_json(cls, doc):
        return cls(
            default=QuantSpec.from_json(doc["defaults"]),
            matrix_specs={e["name"]: QuantSpec.from_json(e["spec"])
                          for e in doc.get("overrides", [])},
            protection={e["name"]: tuple(e["rows"])
                        for e in doc.get("protection", [])},
            compensation=doc.get("compensation"),
        )


def build_plan(config, default_spec, directives=(), compensation=None):
    """Resolve layered directives into a per-matrix plan.

    Later directives override earlier ones matrix by matrix; two directives
    with the same selector but different settings are a configuration error
    rather than a silent last-wins."""
    seen = {}
    for d in directives:
        key = d.selector()
        prior = seen.get(key)
        if prior is not None and prior != d:
            raise InvalidConfig(f"conflicting directives for selector {key}")
        seen[key] = d
    if compensation is not None:
        if set(compensation) != {"rank", "mode"}:
            raise InvalidConfig("compensation needs exactly {rank, mode}")
        if compensation["mode"] not in ("plain", "activation"):
            raise InvalidConfig(f"unknown compensation mode {compensation['mode']!r}")
        if compensation["rank"] < 1:
            raise InvalidConfig("compensation rank must be >= 1")

    plan = QuantPlan(default=default_spec, compensation=compensation)
    for d in directives:
        layers = range(config.n_layers) if d.layers is None else d.layers
        comps = COMPONENTS if d.components is None else d.components
        for comp in comps:
            if comp not in COMPONENT_PARAMS:
                raise InvalidConfig(f"unknown component {comp!r}")
        for l in layers:
            if not 0 <= l < config.n_layers:
                raise InvalidConfig(f"layer {l} out of range")
            for comp in comps:
                name = f"layers.{l}.{COMPONENT_PARAMS[comp]}"
                spec = replace(
                    plan.default,
                    bits=d.bits,
                    group_size=d.group_size or plan.default.group_size,
                    algorithm=d.algorithm or plan.default.algorithm,
                )
                plan.matrix_specs[name] = spec
    return plan


def plan_uniform(config, spec, compensation=None):
    return build_plan(config, spec, compensation=compensation)


def plan_first_k_layers(config, spec_lo, k, rest_bits=PASSTHROUGH_BITS):
    """Layers 0..k at spec_lo, everything deeper left at rest_bits.
    k = -1 quantizes nothing."""
    if k >= config.n_layers:
        raise InvalidConfig(f"k {k} out of range for {config.n_layers} layers")
    directives = []
    if k >= 0:
        directives.append(PlanDirective(bits=spec_lo.bits,
                                        layers=tuple(range(k + 1)),
                                        group_size=spec_lo.group_size,
                                        algorithm=spec_lo.algorithm))
    base = replace(spec_lo, bits=rest_bits)
    return build_plan(config, base, directives)


def plan_components(config, components, spec, rest_bits=PASSTHROUGH_BITS):
    """Only the named components quantized; empty mask quantizes nothing."""
    base = replace(spec, bits=rest_bits)
    directives = []
    if components:
        directives.append(PlanDirective(bits=spec.bits,
                                        components=tuple(components),
                                        group_size=spec.group_size,
                                        algorithm=spec.algorithm))
    return build_plan(config, base, directives)


def plan_protect_early_layers(config, base_spec, n_layers_hi, bits_hi=8):
    """Uniform base_spec with the first n layers held at bits_hi."""
    directives = []
    if n_layers_hi > 0:
        directives.append(PlanDirective(bits=bits_hi,
                                        layers=tuple(range(n_layers_hi))))
    return build_plan(config, base_spec, directives)


def average_bits(plan, config):
    """Parameter-weighted mean bit width over quantizable matrices,
    protected rows counted at 8 bits."""
    shapes = param_shapes(config)
    total = 0
    weighted = 0.0
    for name in quantizable_params(config):
        rows, cols = shapes[name]
        spec = plan.spec_for(name)
        n_protected = len(set(plan.protected_rows(name)))
        if n_protected > rows:
            raise InvalidConfig(f"more protected rows than rows in {name}")
        weighted += cols * (
            n_protected * max(spec.bits, 8)
            + (rows - n_protected) * spec.bits
        )
        total += rows * cols
    return weighted / total


def protection_fraction(base_bits, target_avg_bits, high_bits=8):
    """Fraction of parameters to hold at high_bits so the average lands on
    target: base + (high - base) * f = target. target == base means no
    protection at all."""
    if not base_bits <= target_avg_bits <= high_bits:
        raise InvalidConfig(
            f"target {target_avg_bits} not in [{base_bits}, {high_bits}]"
        )
    if target_avg_bits == base_bits:
        return 0.0
    return (target_avg_bits - base_bits) / (high_bits - base_bits)


def kurtosis_protect_plan(bundle, base_spec, target_avg_bits):
    """Protect the highest-kurtosis output rows across the whole model
    until the parameter budget implied by target_avg_bits is spent.
    Ties break deterministically by (layer, component, row)."""
    config = bundle.config
    frac = protection_fraction(base_spec.bits, target_avg_bits)
    rows = []
    total_params = 0
    for name in quantizable_params(config):
        layer, component = parse_param_name(name)
        comp_idx = COMPONENTS.index(component)
        w = bundle.params[name].detach().numpy().astype(np.float64)
        total_params += w.size
        for r in range(w.shape[0]):
            try:
                k = numkit.kurtosis(w[r])
            except DegenerateSample:
                k = 0.0
            rows.append((-k, layer, comp_idx, r, name, w.shape[1]))
    rows.sort(key=lambda t: t[:4])
    budget = frac * total_params
    protection = {}
    spent = 0
    for negk, layer, comp_idx, r, name, width in rows:
        if spent >= budget:
            break
        protection.setdefault(name, []).append(r)
        spent += width
    plan = QuantPlan(default=base_spec,
                     protection={k: tuple(sorted(v)) for k, v in protection.items()})
    return plan


# ---------------------------------------------------------------------------
# Applying a plan to a model


@dataclass
class QuantReport:
    """Per-matrix record of how quantization went."""

    rows: list = field(default_factory=list)
    average_bits: float = None
    plan: dict = None

    def to_json(self):
        return {"average_bits": self.average_bits, "plan": self.plan,
                "rows": self.rows}


def _needs_calibration(plan, config):
    return any(
        plan.spec_for(name).algorithm in ("gptq", "awq+gptq")
        and plan.spec_for(name).bits != PASSTHROUGH_BITS
        for name in quantizable_params(config)
    ) or (plan.compensation or {}).get("mode") == "activation"


def _layer_inputs(bundle, params, calib_batches, layer):
    """Calibration inputs for every component of one layer, computed with
    the current (partially quantized) parameters."""
    sites = frozenset(COMPONENT_INPUT_SITE.values())
    collected = {site: [] for site in sites}
    with torch.no_grad():
        for toks in calib_batches:
            _, caps = run_batch(bundle, toks, capture=sites,
                                want_logits="last", params=params)
            for site in sites:
                t = caps[site][:, layer]  # (B, T, width)
                collected[site].append(
                    t.reshape(-1, t.shape[-1]).numpy().astype(np.float64)
                )
    return {site: np.concatenate(vals, axis=0) for site, vals in collected.items()}


def apply_plan(bundle, plan, calib_prompts=None):
    """Quantize a model under a plan, layer by layer.

    Calibrated algorithms see inputs produced by the already-quantized
    prefix of the model, the same inputs the deployed model would see.
    Returns (quantized bundle, QuantReport).
    """
    config = bundle.config
    needs_calib = _needs_calibration(plan, config)
    if needs_calib and not calib_prompts:
        raise InvalidConfig("plan needs calibration prompts")

    calib_batches = []
    if calib_prompts:
        by_len = {}
        for ids in calib_prompts:
            by_len.setdefault(len(ids), []).append(ids)
        for length in sorted(by_len):
            calib_batches.append(
                torch.from_numpy(np.asarray(by_len[length], dtype=np.int64))
            )

    params = {k: v.clone() for k, v in bundle.params.items()}
    extras = {}
    report = QuantReport(plan=plan.to_json())
    comp = plan.compensation

    for layer in range(config.n_layers):
        layer_specs = {
            c: plan.spec_for(f"layers.{layer}.{COMPONENT_PARAMS[c]}")
            for c in COMPONENTS
        }
        layer_active = any(s.bits != PASSTHROUGH_BITS for s in layer_specs.values())
        calibrated = needs_calib and layer_active and calib_batches
        inputs = (
            _layer_inputs(bundle, params, calib_batches, layer)
            if calibrated else {}
        )

        for comp_name in COMPONENTS:
            name = f"layers.{layer}.{COMPONENT_PARAMS[comp_name]}"
            spec = layer_specs[comp_name]
            if spec.bits == PASSTHROUGH_BITS:
                continue
            w_ref = params[name]
            protected = plan.protected_rows(name)
            x = inputs.get(COMPONENT_INPUT_SITE[comp_name])
            row = {"name": name, "bits": spec.bits, "algorithm": spec.algorithm,
                   "protected_rows": len(protected)}

            if spec.algorithm == "rtn":
                w_q, book = rtn_quantize(w_ref, spec, protected)
            elif spec.algorithm == "gptq":
                h = hessian_from_inputs(x, spec.damping_frac)
                w_q, book = gptq_quantize(w_ref, h, spec, protected)
            else:  # awq+gptq
                scales, beta, _ = awq_scale_search(w_ref, x, spec)
                h = hessian_from_inputs(x / scales[None, :], spec.damping_frac)
                w_scaled_q, book = gptq_quantize(
                    w_ref.detach().numpy().astype(np.float64) * scales[None, :],
                    h, spec, protected,
                )
                w_q = torch.from_numpy(
                    (w_scaled_q.numpy().astype(np.float64)
                     / scales[None, :]).astype(np.float32)
                )
                extras[f"{name}.awq_scales"] = torch.from_numpy(
                    scales.astype(np.float32)
                )
                row["awq_beta"] = beta

            if comp is not None:
                delta = lowrank_compensate(
                    w_ref, w_q, comp["rank"],
                    x=x if comp["mode"] == "activation" else None,
                    mode=comp["mode"],
                )
                w_q = w_q + delta
                row["compensation_rank"] = comp["rank"]

            ref64 = w_ref.detach().numpy().astype(np.float64)
            q64 = w_q.detach().numpy().astype(np.float64)
            diff = ref64 - q64
            denom = max(float(np.linalg.norm(ref64)), 1e-300)
            row["rel_frobenius"] = float(np.linalg.norm(diff)) / denom
            if x is not None:
                h_plain = hessian_from_inputs(x, spec.damping_frac)
                row["calib_err"] = float(np.einsum("ij,jk,ik->", diff, h_plain, diff))
                rtn_q, _ = rtn_quantize(w_ref, spec, protected)
                rtn_diff = ref64 - rtn_q.numpy().astype(np.float64)
                row["calib_err_rtn"] = float(
                    np.einsum("ij,jk,ik->", rtn_diff, h_plain, rtn_diff)
                )

            params[name] = w_q
            if book is not None:
                extras[f"{name}.scales"] = torch.from_numpy(
                    book.scales.astype(np.float32))
                extras[f"{name}.zero_points"] = torch.from_numpy(
                    book.zero_points.astype(np.float32))
                if (book.row_bits != spec.bits).any():
                    extras[f"{name}.row_bits"] = torch.from_numpy(
                        book.row_bits.astype(np.float32))
            report.rows.append(row)

    report.average_bits = average_bits(plan, config)
    quantized = ModelBundle(
        config=config,
        params=params,
        meta=dict(bundle.meta, kind="quantized", plan=plan.to_json(),
                  average_bits=report.average_bits),
        extras=extras,
    )
    return quantized, report
