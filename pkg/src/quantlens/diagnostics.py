"""Layer-wise comparisons between a baseline model's traces and a quantized
model's traces on the same prompts.

Every profile here reduces to a LayerCurve: one mean (and dispersion) per
layer, so curves from different bit-widths can be overlaid directly. The
representational comparisons (linear CKA, top-k right-singular subspace
overlap, quantization-error alignment) operate on activation matrices with
prompts as rows, assembled from traces at one position per prompt.

Positions are given either as one int shared by every prompt or as a
per-prompt sequence; negative values index from the end of each prompt.
Attention rows captured in float32 are renormalized in float64 before any
entropy arithmetic.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np
import torch

from . import numkit
from .errors import InsufficientSamples, InvalidInput
from .model import ForwardTrace, run_batch

# Sites whose per-position vectors can be compared directly between runs.
VECTOR_SITES = ("ffn_out", "residual_out", "attn_out")

# Columns of every LayerCurve CSV export, in order.
CURVE_COLUMNS = ("layer", "mean", "std", "n")

# Singular values below max(sigma) * this are treated as rank deficiency.
RANK_RTOL = 1e-10

# Activations whose difference has a smaller Frobenius norm than this are
# "the same" for error-alignment purposes; there is no direction to align.
ERROR_FLOOR = 1e-12

DEAD_GATE_TOL = 1e-9
JACCARD_FRACTION = 0.01
DEFAULT_SUBSPACE_K = 50
ENERGY_WARN_BELOW = 0.90
MIN_CKA_PROMPTS = 32


@dataclass
class LayerCurve:
    """One statistic per layer: means, dispersion, and sample counts.

    extras carries profile-specific per-layer side data (e.g. the fraction
    of gate channels excluded as dead).
    """

    name: str
    means: np.ndarray
    stds: np.ndarray
    counts: np.ndarray
    position: str
    extras: dict = field(default_factory=dict)

    @property
    def n_layers(self):
        return self.means.shape[0]

    def rows(self):
        return [(l, float(self.means[l]), float(self.stds[l]),
                 int(self.counts[l])) for l in range(self.n_layers)]

    def to_json(self):
        out = {
            "name": self.name,
            "position": self.position,
            "means": [float(v) for v in self.means],
            "stds": [float(v) for v in self.stds],
            "counts": [int(v) for v in self.counts],
        }
        for key, val in self.extras.items():
            out[key] = ([float(v) for v in val]
                        if isinstance(val, np.ndarray) else val)
        return out


@dataclass
class CkaHeatmap:
    """Linear CKA between every baseline layer and every quantized layer.

    values[i, j] compares baseline layer i with quantized layer j; prompts
    are the sample rows of both activation matrices.
    """

    values: np.ndarray
    site: str
    position: str
    n_prompts: int

    @property
    def diagonal_mean(self):
        return float(np.mean(np.diag(self.values)))

    def to_json(self):
        return {
            "site": self.site,
            "position": self.position,
            "n_prompts": self.n_prompts,
            "values": [[float(v) for v in row] for row in self.values],
        }


def _as_trace_list(traces, name):
    if traces is None:
        raise InvalidInput(f"{name}: no traces given")
    items = traces if isinstance(traces, (list, tuple)) else [traces]
    if len(items) == 0:
        raise InvalidInput(f"{name}: no traces given")
    return list(items)


def _paired_traces(traces_fp, traces_q):
    fp = _as_trace_list(traces_fp, "baseline traces")
    qq = _as_trace_list(traces_q, "quantized traces")
    if len(fp) != len(qq):
        raise InvalidInput(
            f"trace count mismatch: {len(fp)} baseline vs {len(qq)} quantized")
    return fp, qq


def collect_traces(bundle, prompts, sites):
    """Forward every prompt and return one ForwardTrace per prompt, in the
    given order. Prompts are batched by length; `sites` is any subset of
    the model's capture sites."""
    if len(prompts) == 0:
        raise InvalidInput("no prompts to trace")
    sites = frozenset(sites)
    by_len = {}
    for i, ids in enumerate(prompts):
        by_len.setdefault(len(ids), []).append(i)
    traces = [None] * len(prompts)
    with torch.no_grad():
        for length in sorted(by_len):
            idx = by_len[length]
            toks = np.asarray([list(prompts[i]) for i in idx], dtype=np.int64)
            logits, caps = run_batch(bundle, torch.from_numpy(toks),
                                     capture=sites, want_logits="full")
            for row, i in enumerate(idx):
                tr = ForwardTrace(
                    logits=logits[row].numpy(),
                    final_hidden=caps["final_hidden"][row].numpy())
                for site in sites:
                    setattr(tr, site, caps[site][row].numpy())
                traces[i] = tr
    return traces


def _resolve_position(pos, length, idx):
    p = int(pos)
    if p < 0:
        p += length
    if not 0 <= p < length:
        raise InvalidInput(
            f"position {pos} out of range for prompt {idx} of length {length}")
    return p


def _positions_for(traces, position, site):
    """One resolved position per trace. `position` is an int applied to all
    prompts or a sequence with one entry per prompt."""
    if np.isscalar(position):
        seq = [position] * len(traces)
    else:
        seq = list(position)
        if len(seq) != len(traces):
            raise InvalidInput(
                f"got {len(seq)} positions for {len(traces)} traces")
    out = []
    for i, (tr, pos) in enumerate(zip(traces, seq)):
        length = tr.require(site).shape[-2]
        out.append(_resolve_position(pos, length, i))
    return out


def _curve(name, per_layer_samples, position, extras=None):
    """Collapse lists of per-layer samples into a LayerCurve. Layers with no
    samples get mean 0, std 0, count 0."""
    n_layers = len(per_layer_samples)
    means = np.zeros(n_layers)
    stds = np.zeros(n_layers)
    counts = np.zeros(n_layers, dtype=np.int64)
    for l, samples in enumerate(per_layer_samples):
        counts[l] = len(samples)
        if samples:
            arr = np.asarray(samples, dtype=np.float64)
            means[l] = arr.mean()
            if arr.size > 1:
                stds[l] = arr.std(ddof=1)
    return LayerCurve(name=name, means=means, stds=stds, counts=counts,
                      position=position, extras=extras or {})


def _prob_row(row):
    # float32 capture leaves simplex sums off by ~1e-7; renormalize first.
    a = np.asarray(row, dtype=np.float64)
    total = a.sum()
    if total <= 0:
        raise InvalidInput("attention row sums to zero")
    return a / total


def attn_entropy_profile(traces, positions="all"):
    """Per-layer normalized attention entropy of one model's traces.

    For each head and query position t > 0, the entropy of the attention
    row in bits is divided by log2(t+1), the entropy of a uniform window,
    giving a value in [0, 1]: 1 means attention is spread evenly, 0 means
    a single key takes all mass. Position 0 has a one-key window and no
    defined spread, so it is always skipped. `positions` is "all" or a
    position argument as in the module docstring.
    """
    items = _as_trace_list(traces, "traces")
    n_layers = items[0].require("attn_probs").shape[0]
    if positions == "all":
        chosen = None
    else:
        chosen = _positions_for(items, positions, "attn_probs")
        if any(p == 0 for p in chosen):
            raise InvalidInput(
                "attention entropy is undefined at position 0")
    samples = [[] for _ in range(n_layers)]
    for i, tr in enumerate(items):
        probs = tr.require("attn_probs")
        if probs.shape[0] != n_layers:
            raise InvalidInput("traces disagree on layer count")
        seq_len = probs.shape[-1]
        ts = range(1, seq_len) if chosen is None else [chosen[i]]
        for l in range(n_layers):
            for h in range(probs.shape[1]):
                for t in ts:
                    ent = numkit.shannon_entropy(_prob_row(probs[l, h, t]))
                    samples[l].append(ent / np.log2(t + 1))
    label = "all>0" if chosen is None else str(positions)
    return _curve("attn_entropy", samples, label)


def attn_jsd_profile(traces_fp, traces_q, position,
                     aggregation="per_head_mean"):
    """Per-layer Jensen-Shannon divergence between two models' attention
    rows at one query position per prompt, in bits.

    aggregation "per_head_mean" averages each head's JSD; "mean_distribution"
    first averages the rows across heads and takes one JSD of the mixtures.
    """
    fp, qq = _paired_traces(traces_fp, traces_q)
    if aggregation not in ("per_head_mean", "mean_distribution"):
        raise InvalidInput(f"unknown aggregation {aggregation!r}")
    pos = _positions_for(fp, position, "attn_probs")
    a0 = fp[0].require("attn_probs")
    n_layers, n_heads = a0.shape[0], a0.shape[1]
    samples = [[] for _ in range(n_layers)]
    for i, (ta, tb) in enumerate(zip(fp, qq)):
        pa = ta.require("attn_probs")
        pb = tb.require("attn_probs")
        if pa.shape != pb.shape:
            raise InvalidInput(
                f"attention shape mismatch at prompt {i}: "
                f"{pa.shape} vs {pb.shape}")
        t = pos[i]
        for l in range(n_layers):
            if aggregation == "per_head_mean":
                vals = [numkit.jsd(_prob_row(pa[l, h, t]),
                                   _prob_row(pb[l, h, t]))
                        for h in range(n_heads)]
                samples[l].append(float(np.mean(vals)))
            else:
                ma = _prob_row(pa[l, :, t].mean(axis=0))
                mb = _prob_row(pb[l, :, t].mean(axis=0))
                samples[l].append(numkit.jsd(ma, mb))
    return _curve("attn_jsd", samples, str(position))


def gate_sign_flip_rate(traces_fp, traces_q, position, dead_tol=DEAD_GATE_TOL):
    """Per-layer fraction of FFN gate pre-activations whose sign differs
    between the two runs at one position per prompt.

    Channels within dead_tol of zero in either run are excluded: their sign
    is noise, not computation. The per-layer excluded fraction is reported
    in extras["exclusion_rate"]. A prompt contributes no sample at a layer
    where every channel is excluded.
    """
    fp, qq = _paired_traces(traces_fp, traces_q)
    pos = _positions_for(fp, position, "gate_preact")
    n_layers = fp[0].require("gate_preact").shape[0]
    samples = [[] for _ in range(n_layers)]
    excluded = np.zeros(n_layers, dtype=np.int64)
    total = np.zeros(n_layers, dtype=np.int64)
    for i, (ta, tb) in enumerate(zip(fp, qq)):
        ga = ta.require("gate_preact").astype(np.float64)
        gb = tb.require("gate_preact").astype(np.float64)
        if ga.shape != gb.shape:
            raise InvalidInput(
                f"gate shape mismatch at prompt {i}: {ga.shape} vs {gb.shape}")
        t = pos[i]
        for l in range(n_layers):
            a, b = ga[l, t], gb[l, t]
            live = (np.abs(a) >= dead_tol) & (np.abs(b) >= dead_tol)
            total[l] += a.shape[0]
            excluded[l] += int(a.shape[0] - live.sum())
            if live.any():
                flips = np.sign(a[live]) != np.sign(b[live])
                samples[l].append(float(flips.mean()))
    extras = {"exclusion_rate": excluded / np.maximum(total, 1)}
    return _curve("gate_sign_flip_rate", samples, str(position), extras)


def expert_jaccard_profile(traces_fp, traces_q, position,
                           fraction=JACCARD_FRACTION):
    """Per-layer Jaccard overlap of the top-|magnitude| FFN key neurons
    between the two runs at one position per prompt."""
    fp, qq = _paired_traces(traces_fp, traces_q)
    pos = _positions_for(fp, position, "h_key")
    n_layers = fp[0].require("h_key").shape[0]
    samples = [[] for _ in range(n_layers)]
    for i, (ta, tb) in enumerate(zip(fp, qq)):
        ka = ta.require("h_key")
        kb = tb.require("h_key")
        if ka.shape != kb.shape:
            raise InvalidInput(
                f"h_key shape mismatch at prompt {i}: {ka.shape} vs {kb.shape}")
        t = pos[i]
        for l in range(n_layers):
            samples[l].append(numkit.jaccard_top_fraction(
                np.abs(ka[l, t]), np.abs(kb[l, t]), fraction))
    return _curve("expert_jaccard", samples, str(position))


def value_cosine_profile(traces_fp, traces_q, position, site="ffn_out"):
    """Per-layer cosine similarity of one site's vectors between the two
    runs at one position per prompt."""
    if site not in VECTOR_SITES:
        raise InvalidInput(
            f"site {site!r} not comparable; pick one of {VECTOR_SITES}")
    fp, qq = _paired_traces(traces_fp, traces_q)
    pos = _positions_for(fp, position, site)
    n_layers = fp[0].require(site).shape[0]
    samples = [[] for _ in range(n_layers)]
    for i, (ta, tb) in enumerate(zip(fp, qq)):
        va = ta.require(site)
        vb = tb.require(site)
        if va.shape != vb.shape:
            raise InvalidInput(
                f"{site} shape mismatch at prompt {i}: {va.shape} vs {vb.shape}")
        t = pos[i]
        for l in range(n_layers):
            samples[l].append(numkit.cosine(va[l, t], vb[l, t]))
    return _curve(f"value_cosine_{site}", samples, str(position))


def activation_matrix(traces, site, layer, position):
    """(n_prompts, width) float64 matrix of one site's vectors at one layer,
    one row per prompt."""
    items = _as_trace_list(traces, "traces")
    pos = _positions_for(items, position, site)
    rows = []
    for tr, t in zip(items, pos):
        arr = tr.require(site)
        if not 0 <= layer < arr.shape[0]:
            raise InvalidInput(f"layer {layer} out of range")
        rows.append(np.asarray(arr[layer, t], dtype=np.float64))
    return np.stack(rows, axis=0)


def _center_columns(x):
    return x - x.mean(axis=0, keepdims=True)


def linear_cka(x, y):
    """Linear centered kernel alignment between two activation matrices
    with matched rows (samples) and arbitrary widths.

    Invariant to orthogonal transforms and isotropic scaling of either
    feature space. Returns 0.0 when either matrix is constant across
    samples (nothing to align). Result clipped to [0, 1].
    """
    a = numkit.as_array(x, "cka x", ndim=2)
    b = numkit.as_array(y, "cka y", ndim=2)
    if a.shape[0] != b.shape[0]:
        raise InvalidInput(
            f"cka needs matched samples: {a.shape[0]} vs {b.shape[0]} rows")
    a = _center_columns(a)
    b = _center_columns(b)
    sxx = np.linalg.norm(a.T @ a)
    syy = np.linalg.norm(b.T @ b)
    if sxx < 1e-12 or syy < 1e-12:
        return 0.0
    sxy = np.linalg.norm(b.T @ a)
    return float(np.clip((sxy * sxy) / (sxx * syy), 0.0, 1.0))


def cka_heatmap(traces_fp, traces_q, position, site="residual_out"):
    """Linear CKA between every pair of (baseline layer, quantized layer)
    activation matrices at one position per prompt.

    Fewer than MIN_CKA_PROMPTS prompts would make sample-level CKA
    unstable, so that is rejected rather than silently reported.
    """
    fp, qq = _paired_traces(traces_fp, traces_q)
    if len(fp) < MIN_CKA_PROMPTS:
        raise InsufficientSamples(
            f"cka heatmap needs >= {MIN_CKA_PROMPTS} prompts, got {len(fp)}")
    n_layers = fp[0].require(site).shape[0]
    mats_fp = [activation_matrix(fp, site, l, position)
               for l in range(n_layers)]
    mats_q = [activation_matrix(qq, site, l, position)
              for l in range(n_layers)]
    values = np.zeros((n_layers, n_layers))
    for i in range(n_layers):
        for j in range(n_layers):
            values[i, j] = linear_cka(mats_fp[i], mats_q[j])
    return CkaHeatmap(values=values, site=site, position=str(position),
                      n_prompts=len(fp))


def _top_right_basis(a, k, center):
    """Top-k right singular vectors (columns) and the effective rank used."""
    m = numkit.as_array(a, "subspace input", ndim=2)
    if center:
        m = _center_columns(m)
    res = numkit.svd(m)
    if res.s.size == 0 or res.s[0] <= 0:
        return None, 0
    rank = int(np.sum(res.s > res.s[0] * RANK_RTOL))
    return res.v[:, :min(k, rank)], rank


def subspace_similarity(a_fp, a_q, k=DEFAULT_SUBSPACE_K, center=True):
    """Mean squared singular value of V_fp^T V_q, the top-k right-singular
    bases of two activation matrices: 1 when the dominant k-dimensional
    feature subspaces coincide, 0 when they are orthogonal.

    k is clamped to the smaller effective rank (with a RuntimeWarning);
    k=1 reduces to cos^2 of the principal angle. Symmetric in its inputs.
    """
    if k < 1:
        raise InvalidInput(f"subspace k must be >= 1, got {k}")
    va, ra = _top_right_basis(a_fp, k, center)
    vb, rb = _top_right_basis(a_q, k, center)
    if va is None or vb is None:
        warnings.warn("subspace similarity of an all-zero matrix is 0",
                      RuntimeWarning, stacklevel=2)
        return 0.0
    k_eff = min(k, ra, rb)
    if k_eff < k:
        warnings.warn(
            f"subspace k clamped {k} -> {k_eff} by effective rank",
            RuntimeWarning, stacklevel=2)
    va, vb = va[:, :k_eff], vb[:, :k_eff]
    if va.shape[0] != vb.shape[0]:
        raise InvalidInput(
            f"subspace width mismatch: {va.shape[0]} vs {vb.shape[0]}")
    s = np.linalg.svd(va.T @ vb, compute_uv=False)
    return float(np.clip(np.mean(s * s), 0.0, 1.0))


def spectral_energy_fraction(a, k=DEFAULT_SUBSPACE_K, center=True):
    """Fraction of squared singular-value mass captured by the top k
    directions; how faithfully a k-dim subspace represents the matrix."""
    m = numkit.as_array(a, "energy input", ndim=2)
    if center:
        m = _center_columns(m)
    s = np.linalg.svd(m, compute_uv=False)
    total = float(np.sum(s * s))
    if total <= 0:
        return 1.0
    return float(np.sum(s[:k] * s[:k]) / total)


def error_subspace_alignment(a_fp, a_q, k=DEFAULT_SUBSPACE_K, center=True):
    """Subspace similarity between the baseline activations and the
    quantization error (a_q - a_fp): high when the error lives inside the
    signal's own dominant directions, low when it is off-axis noise.

    When the two activation matrices agree to within ERROR_FLOOR there is
    no error direction; returns 0.0 with a RuntimeWarning.
    """
    fp = numkit.as_array(a_fp, "alignment baseline", ndim=2)
    qq = numkit.as_array(a_q, "alignment quantized", ndim=2)
    if fp.shape != qq.shape:
        raise InvalidInput(
            f"alignment shape mismatch: {fp.shape} vs {qq.shape}")
    err = qq - fp
    if np.linalg.norm(err) < ERROR_FLOOR:
        warnings.warn("no quantization error to align", RuntimeWarning,
                      stacklevel=2)
        return 0.0
    return subspace_similarity(fp, err, k=k, center=center)


def subspace_profile(traces_fp, traces_q, position, site="residual_out",
                     k=DEFAULT_SUBSPACE_K, center=True):
    """Per-layer subspace similarity between the two runs' activation
    matrices, with per-layer top-k spectral energy fractions in extras.

    Warns when either side's energy fraction drops below ENERGY_WARN_BELOW:
    the subspace comparison then describes a thin slice of the activity.
    """
    fp, qq = _paired_traces(traces_fp, traces_q)
    n_layers = fp[0].require(site).shape[0]
    means = np.zeros(n_layers)
    energy_fp = np.zeros(n_layers)
    energy_q = np.zeros(n_layers)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for l in range(n_layers):
            ma = activation_matrix(fp, site, l, position)
            mb = activation_matrix(qq, site, l, position)
            means[l] = subspace_similarity(ma, mb, k=k, center=center)
            energy_fp[l] = spectral_energy_fraction(ma, k=k, center=center)
            energy_q[l] = spectral_energy_fraction(mb, k=k, center=center)
    low = min(energy_fp.min(), energy_q.min())
    if low < ENERGY_WARN_BELOW:
        warnings.warn(
            f"top-{k} subspace holds only {low:.1%} of spectral energy at "
            "the worst layer", RuntimeWarning, stacklevel=2)
    return LayerCurve(
        name=f"subspace_similarity_{site}", means=means,
        stds=np.zeros(n_layers),
        counts=np.full(n_layers, len(fp), dtype=np.int64),
        position=str(position),
        extras={"energy_fp": energy_fp, "energy_q": energy_q, "k": k})


def error_alignment_profile(traces_fp, traces_q, position,
                            site="residual_out", k=DEFAULT_SUBSPACE_K,
                            center=True):
    """Per-layer error_subspace_alignment, with the per-layer error
    Frobenius norms in extras (zero norm marks a no-error layer)."""
    fp, qq = _paired_traces(traces_fp, traces_q)
    n_layers = fp[0].require(site).shape[0]
    means = np.zeros(n_layers)
    err_norm = np.zeros(n_layers)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for l in range(n_layers):
            ma = activation_matrix(fp, site, l, position)
            mb = activation_matrix(qq, site, l, position)
            err_norm[l] = float(np.linalg.norm(mb - ma))
            means[l] = error_subspace_alignment(ma, mb, k=k, center=center)
    return LayerCurve(
        name=f"error_alignment_{site}", means=means,
        stds=np.zeros(n_layers),
        counts=np.full(n_layers, len(fp), dtype=np.int64),
        position=str(position),
        extras={"error_frobenius": err_norm, "k": k})
