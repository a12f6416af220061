"""Decoder-only toy transformer with a traced, patchable forward pass.

The architecture is the usual small-Llama shape: pre-norm RMSNorm blocks,
rotary position embeddings on q/k, SiLU-gated FFN, untied unembedding,
causal attention, no biases anywhere. Weights live in a flat name->tensor
dict (float32) rather than an nn.Module so that quantizers, checkpoints,
and digests can treat the model as plain data.

One batched forward (`run_batch`) serves training, evaluation, calibration
capture, and causal patching; `forward` is the single-sequence view of the
same code path. Rows of a batch must share one sequence length - callers
group by length instead of padding, which keeps every position real.

Activation sites that can be captured or patched:

    residual_out   per-layer block output, after any patch at that site
    attn_out       attention branch output (post W_o), pre residual add
    ffn_out        FFN branch output (post W_down), pre residual add
    gate_preact    W_gate output before the SiLU
    h_key          SiLU(W_gate x) * (W_up x)
    attn_probs     per-head attention rows
    attn_norm_out  input to W_q/W_k/W_v (for calibration)
    ffn_norm_out   input to W_gate/W_up (for calibration)
    attn_preproj   input to W_o (for calibration)

Patches apply at attn_out, ffn_out, and residual_out, before the value is
consumed downstream, so a zero patch reads back as zeros in the trace.
"""

import hashlib
import json
import os
import struct
from dataclasses import dataclass, field, fields, replace

import numpy as np
import torch

from .errors import (
    CorruptCheckpoint,
    InvalidConfig,
    InvalidInput,
    InvalidPatch,
    TraceIncomplete,
)
from .rng import substream_seed

CAPTURE_SITES = frozenset({
    "residual_out", "attn_out", "ffn_out", "gate_preact", "h_key",
    "attn_probs", "attn_norm_out", "ffn_norm_out", "attn_preproj",
})
PATCH_SITES = frozenset({"residual_out", "attn_out", "ffn_out"})
CAPTURE_ALL = frozenset(CAPTURE_SITES)

# Per-layer matrices eligible for quantization, keyed by component name.
# Embedding, norm scales, and the unembedding are never quantized.
COMPONENT_PARAMS = {
    "q": "wq", "k": "wk", "v": "wv", "o": "wo",
    "gate": "wgate", "up": "wup", "down": "wdown",
}
COMPONENTS = tuple(COMPONENT_PARAMS)

CHECKPOINT_MAGIC = b"QLCK1"
_ALIGN = 64


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 8
    d_model: int = 128
    n_heads: int = 4
    head_dim: int = 32
    d_ff: int = 344
    max_seq_len: int = 16
    rope_theta: float = 10000.0
    norm_eps: float = 1e-5
    # Whether logit-lens readout applies the final RMSNorm before the
    # unembedding. Raw readout is kept available for comparison runs.
    lens_apply_final_norm: bool = True

    def __post_init__(self):
        ints = ("vocab_size", "n_layers", "d_model", "n_heads", "head_dim",
                "d_ff", "max_seq_len")
        for name in ints:
            if getattr(self, name) < 1:
                raise InvalidConfig(f"{name} must be >= 1")
        if self.d_model != self.n_heads * self.head_dim:
            raise InvalidConfig(
                f"d_model {self.d_model} != n_heads*head_dim "
                f"{self.n_heads * self.head_dim}"
            )
        if self.head_dim % 2 != 0:
            raise InvalidConfig("head_dim must be even for rotary embedding")

    def to_json(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json(cls, doc):
        return cls(**doc)


def param_shapes(config):
    """Name -> shape for every tensor in a bundle. Matrices are stored
    (out_features, in_features); forward applies x @ W.T."""
    c = config
    shapes = {"embed": (c.vocab_size, c.d_model)}
    for l in range(c.n_layers):
        p = f"layers.{l}."
        shapes[p + "attn_norm"] = (c.d_model,)
        shapes[p + "wq"] = (c.d_model, c.d_model)
        shapes[p + "wk"] = (c.d_model, c.d_model)
        shapes[p + "wv"] = (c.d_model, c.d_model)
        shapes[p + "wo"] = (c.d_model, c.d_model)
        shapes[p + "ffn_norm"] = (c.d_model,)
        shapes[p + "wgate"] = (c.d_ff, c.d_model)
        shapes[p + "wup"] = (c.d_ff, c.d_model)
        shapes[p + "wdown"] = (c.d_model, c.d_ff)
    shapes["final_norm"] = (c.d_model,)
    shapes["unembed"] = (c.vocab_size, c.d_model)
    return shapes


def quantizable_params(config):
    """Names of matrices a plan may touch, in layer-then-component order."""
    names = []
    for l in range(config.n_layers):
        for comp in COMPONENTS:
            names.append(f"layers.{l}.{COMPONENT_PARAMS[comp]}")
    return names


def parse_param_name(name):
    """(layer, component) for a quantizable matrix name."""
    head, _, leaf = name.rpartition(".")
    layer = int(head.split(".")[1])
    for comp, pname in COMPONENT_PARAMS.items():
        if pname == leaf:
            return layer, comp
    raise InvalidInput(f"not a quantizable matrix: {name}")


@dataclass
class ModelBundle:
    config: ModelConfig
    params: dict
    # Provenance notes (quantization plan, training info). Not hashed.
    meta: dict = field(default_factory=dict)
    # Codebooks and other sidecar tensors from quantization. Not hashed.
    extras: dict = field(default_factory=dict)

    def clone(self):
        return ModelBundle(
            config=self.config,
            params={k: v.clone() for k, v in self.params.items()},
            meta=json.loads(json.dumps(self.meta)),
            extras={k: v.clone() for k, v in self.extras.items()},
        )

    def digest(self):
        """sha256 over config plus parameter bytes (meta/extras excluded,
        they are provenance, not identity)."""
        h = hashlib.sha256()
        h.update(json.dumps(self.config.to_json(), sort_keys=True).encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(self.params[name].detach().contiguous().numpy().tobytes())
        return h.hexdigest()


def init_model(config, seed):
    """Fresh float32 bundle. Each tensor draws from its own named substream
    so the init of one tensor never depends on the order the others are
    created. Weights are N(0, 1/fan_in); norm scales start at 1."""
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith("norm"):
            params[name] = torch.ones(shape, dtype=torch.float32)
            continue
        fan_in = shape[1] if len(shape) == 2 else config.d_model
        if name == "embed":
            fan_in = config.d_model
        gen = torch.Generator()
        gen.manual_seed(substream_seed(seed, f"init:{name}") & (2 ** 63 - 1))
        params[name] = torch.empty(shape, dtype=torch.float32).normal_(
            mean=0.0, std=fan_in ** -0.5, generator=gen
        )
    return ModelBundle(config=config, params=params,
                       meta={"kind": "fp", "init_seed": int(seed)})


# ---------------------------------------------------------------------------
# Rotary embedding tables, cached per (theta, head_dim, length, dtype).

_ROPE_CACHE = {}


def _rope_tables(theta, head_dim, length, dtype):
    key = (float(theta), int(head_dim), int(length), dtype)
    hit = _ROPE_CACHE.get(key)
    if hit is None:
        inv = theta ** (
            -torch.arange(0, head_dim, 2, dtype=torch.float64) / head_dim
        )
        angles = torch.arange(length, dtype=torch.float64)[:, None] * inv[None, :]
        hit = (angles.cos().to(dtype), angles.sin().to(dtype))
        _ROPE_CACHE[key] = hit
    return hit


def _apply_rope(x, cos, sin):
    # x: (B, H, T, head_dim), tables: (T, head_dim/2)
    even, odd = x[..., 0::2], x[..., 1::2]
    out = torch.empty_like(x)
    out[..., 0::2] = even * cos - odd * sin
    out[..., 1::2] = even * sin + odd * cos
    return out


def _rmsnorm(x, scale, eps):
    rms = x.pow(2).mean(dim=-1, keepdim=True).add(eps).rsqrt()
    return x * rms * scale


# ---------------------------------------------------------------------------
# Patching


@dataclass(frozen=True)
class PatchDirective:
    """One edit at (site, layer, position) of one batch row.

    action 'replace' needs a vector of the site's feature width;
    'scale' needs alpha; 'zero' needs nothing.
    """

    site: str
    layer: int
    position: int
    action: str
    vector: np.ndarray = None
    alpha: float = None
    row: int = 0


class PatchSpec:
    """A validated set of patch directives, compiled per (site, layer)."""

    def __init__(self, directives=()):
        self.directives = list(directives)
        seen = set()
        for d in self.directives:
            if d.site not in PATCH_SITES:
                raise InvalidPatch(f"unknown patch site {d.site!r}")
            if d.action not in ("replace", "zero", "scale"):
                raise InvalidPatch(f"unknown patch action {d.action!r}")
            if d.action == "replace" and d.vector is None:
                raise InvalidPatch("replace patch needs a vector")
            if d.action == "scale" and d.alpha is None:
                raise InvalidPatch("scale patch needs alpha")
            key = (d.row, d.site, d.layer, d.position)
            if key in seen:
                raise InvalidPatch(f"duplicate patch directive at {key}")
            seen.add(key)

    def __len__(self):
        return len(self.directives)

    def validate_against(self, config, seq_len, batch):
        for d in self.directives:
            if not 0 <= d.layer < config.n_layers:
                raise InvalidPatch(f"layer {d.layer} out of range")
            if not 0 <= d.position < seq_len:
                raise InvalidPatch(f"position {d.position} out of range")
            if not 0 <= d.row < batch:
                raise InvalidPatch(f"row {d.row} out of range")
            if d.action == "replace" and d.vector.shape != (config.d_model,):
                raise InvalidPatch(
                    f"replace vector shape {d.vector.shape} != ({config.d_model},)"
                )

    def compiled(self):
        by_site_layer = {}
        for d in self.directives:
            by_site_layer.setdefault((d.site, d.layer), []).append(d)
        return by_site_layer


def _apply_directives(x, directives, dtype):
    x = x.clone()
    for d in directives:
        if d.action == "zero":
            x[d.row, d.position] = 0.0
        elif d.action == "scale":
            x[d.row, d.position] = x[d.row, d.position] * d.alpha
        else:
            x[d.row, d.position] = torch.from_numpy(
                np.ascontiguousarray(d.vector)
            ).to(dtype)
    return x


# ---------------------------------------------------------------------------
# Forward


@dataclass
class ForwardTrace:
    """Captured activations for one sequence (numpy float32).

    Only the requested sites are populated; reading an absent field through
    `require` raises TraceIncomplete. h_value is an alias of ffn_out: the
    FFN writes W_down @ h_key into the residual stream.
    """

    logits: np.ndarray = None          # (T, vocab)
    final_hidden: np.ndarray = None    # (T, d_model), pre final norm
    residual_out: np.ndarray = None    # (L, T, d_model)
    attn_out: np.ndarray = None        # (L, T, d_model)
    ffn_out: np.ndarray = None         # (L, T, d_model)
    gate_preact: np.ndarray = None     # (L, T, d_ff)
    h_key: np.ndarray = None           # (L, T, d_ff)
    attn_probs: np.ndarray = None      # (L, H, T, T)
    attn_norm_out: np.ndarray = None   # (L, T, d_model)
    ffn_norm_out: np.ndarray = None    # (L, T, d_model)
    attn_preproj: np.ndarray = None    # (L, T, d_model)

    @property
    def h_value(self):
        return self.ffn_out

    def require(self, name):
        val = getattr(self, "ffn_out" if name == "h_value" else name)
        if val is None:
            raise TraceIncomplete(f"trace was captured without {name!r}")
        return val


def _check_tokens(config, tokens):
    arr = np.asarray(tokens)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise InvalidInput(f"tokens must be 1-d or 2-d, got shape {arr.shape}")
    if arr.shape[1] < 1 or arr.shape[1] > config.max_seq_len:
        raise InvalidInput(
            f"sequence length {arr.shape[1]} outside [1, {config.max_seq_len}]"
        )
    if arr.min() < 0 or arr.max() >= config.vocab_size:
        raise InvalidInput("token id out of vocabulary range")
    return torch.from_numpy(np.ascontiguousarray(arr, dtype=np.int64))


def run_batch(bundle, tokens, capture=frozenset(), patch=None,
              want_logits="full", positions=None, params=None):
    """Forward a batch of equal-length rows.

    want_logits: 'full' -> (B, T, V); 'last' -> (B, V) at the final
    position; 'positions' -> (B, V) at per-row `positions`.
    Returns (logits, captures) with captures keyed by site name, tensors
    shaped (B, L, ...) stacked over layers.
    """
    cfg = bundle.config
    p = params if params is not None else bundle.params
    capture = frozenset(capture)
    unknown = capture - CAPTURE_SITES
    if unknown:
        raise InvalidInput(f"unknown capture sites: {sorted(unknown)}")
    toks = _check_tokens(cfg, tokens)
    bsz, tlen = toks.shape
    if patch is not None and len(patch):
        patch.validate_against(cfg, tlen, bsz)
        patch_map = patch.compiled()
    else:
        patch_map = {}

    dtype = p["embed"].dtype
    cos, sin = _rope_tables(cfg.rope_theta, cfg.head_dim, tlen, dtype)
    scale = cfg.head_dim ** -0.5
    mask = torch.full((tlen, tlen), float("-inf"), dtype=dtype).triu(1)

    caps = {site: [] for site in capture}

    def grab(site, value):
        if site in capture:
            caps[site].append(value.detach().clone())

    x = p["embed"][toks]
    for l in range(cfg.n_layers):
        pre = f"layers.{l}."
        h = _rmsnorm(x, p[pre + "attn_norm"], cfg.norm_eps)
        grab("attn_norm_out", h)
        q = (h @ p[pre + "wq"].T).view(bsz, tlen, cfg.n_heads, cfg.head_dim)
        k = (h @ p[pre + "wk"].T).view(bsz, tlen, cfg.n_heads, cfg.head_dim)
        v = (h @ p[pre + "wv"].T).view(bsz, tlen, cfg.n_heads, cfg.head_dim)
        q = _apply_rope(q.transpose(1, 2), cos, sin)
        k = _apply_rope(k.transpose(1, 2), cos, sin)
        v = v.transpose(1, 2)
        scores = q @ k.transpose(-1, -2) * scale + mask
        probs = scores.softmax(dim=-1)
        grab("attn_probs", probs)
        ctx = (probs @ v).transpose(1, 2).reshape(bsz, tlen, cfg.d_model)
        grab("attn_preproj", ctx)
        attn_out = ctx @ p[pre + "wo"].T
        if ("attn_out", l) in patch_map:
            attn_out = _apply_directives(attn_out, patch_map[("attn_out", l)], dtype)
        grab("attn_out", attn_out)
        x = x + attn_out

        h = _rmsnorm(x, p[pre + "ffn_norm"], cfg.norm_eps)
        grab("ffn_norm_out", h)
        gate = h @ p[pre + "wgate"].T
        grab("gate_preact", gate)
        hk = torch.nn.functional.silu(gate) * (h @ p[pre + "wup"].T)
        grab("h_key", hk)
        ffn_out = hk @ p[pre + "wdown"].T
        if ("ffn_out", l) in patch_map:
            ffn_out = _apply_directives(ffn_out, patch_map[("ffn_out", l)], dtype)
        grab("ffn_out", ffn_out)
        x = x + ffn_out
        if ("residual_out", l) in patch_map:
            x = _apply_directives(x, patch_map[("residual_out", l)], dtype)
        grab("residual_out", x)

    final_hidden = x
    normed = _rmsnorm(x, p["final_norm"], cfg.norm_eps)
    if want_logits == "full":
        logits = normed @ p["unembed"].T
    elif want_logits == "last":
        logits = normed[:, -1, :] @ p["unembed"].T
    elif want_logits == "positions":
        if positions is None:
            raise InvalidInput("want_logits='positions' needs positions")
        rows = torch.arange(bsz)
        logits = normed[rows, positions, :] @ p["unembed"].T
    else:
        raise InvalidInput(f"unknown want_logits mode {want_logits!r}")

    out_caps = {site: torch.stack(vals, dim=1) for site, vals in caps.items()}
    out_caps["final_hidden"] = final_hidden
    return logits, out_caps


def forward(bundle, tokens, capture=frozenset(), patch=None):
    """Single-sequence forward. Returns (logits (T, vocab) float32 numpy,
    ForwardTrace). An empty PatchSpec is the same as no patch."""
    arr = np.asarray(tokens)
    if arr.ndim != 1:
        raise InvalidInput("forward expects a single token sequence")
    with torch.no_grad():
        logits, caps = run_batch(bundle, arr[None, :], capture=capture,
                                 patch=patch, want_logits="full")
    trace = ForwardTrace(
        logits=logits[0].numpy(),
        final_hidden=caps["final_hidden"][0].numpy(),
    )
    for site, val in caps.items():
        if site != "final_hidden":
            setattr(trace, site, val[0].numpy())
    return trace.logits, trace


def softmax64(logits):
    """float64 softmax used for every probability-valued metric."""
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def greedy_predict(bundle, tokens):
    """(argmax id, float64 distribution) at the last position. Ties take
    the lower token id."""
    logits, _ = forward(bundle, tokens)
    probs = softmax64(logits[-1])
    return int(np.argmax(probs)), probs


def greedy_batch(bundle, tokens_2d):
    """Greedy ids for equal-length rows, same tie rule as greedy_predict."""
    with torch.no_grad():
        logits, _ = run_batch(bundle, tokens_2d, want_logits="last")
    return np.argmax(logits.numpy(), axis=1)


# ---------------------------------------------------------------------------
# Checkpoints: magic | uint64 header length | JSON header | aligned tensors.
# Tensor offsets in the header are relative to the 64-byte-aligned payload
# base that follows the header.


def _align(n):
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


def save_checkpoint(bundle, path):
    named = [(name, bundle.params[name]) for name in sorted(bundle.params)]
    named += [(f"codebook:{name}", t) for name, t in sorted(bundle.extras.items())]
    entries = []
    offset = 0
    blobs = []
    for name, tensor in named:
        blob = tensor.detach().contiguous().to(torch.float32).numpy().tobytes()
        entries.append({
            "name": name,
            "shape": list(tensor.shape),
            "offset": offset,
            "length": len(blob),
        })
        blobs.append(blob)
        offset = _align(offset + len(blob))
    header = json.dumps({
        "config": bundle.config.to_json(),
        "meta": bundle.meta,
        "tensors": entries,
    }, sort_keys=True).encode()
    base = _align(len(CHECKPOINT_MAGIC) + 8 + len(header))
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(b"\0" * (base - f.tell()))
        for entry, blob in zip(entries, blobs):
            f.seek(base + entry["offset"])
            f.write(blob)
    return os.path.getsize(path)


def load_checkpoint(path):
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CorruptCheckpoint(f"cannot read {path}: {e}") from e
    if data[:len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CorruptCheckpoint(f"{path}: bad magic")
    try:
        (hlen,) = struct.unpack_from("<Q", data, len(CHECKPOINT_MAGIC))
        hstart = len(CHECKPOINT_MAGIC) + 8
        header = json.loads(data[hstart:hstart + hlen])
        config = ModelConfig.from_json(header["config"])
    except (struct.error, ValueError, KeyError, TypeError) as e:
        raise CorruptCheckpoint(f"{path}: unreadable header: {e}") from e
    base = _align(hstart + hlen)
    expected = param_shapes(config)
    params, extras = {}, {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        start = base + entry["offset"]
        end = start + entry["length"]
        if end > len(data):
            raise CorruptCheckpoint(f"{path}: truncated tensor {name}")
        count = int(np.prod(shape)) if shape else 1
        if entry["length"] != count * 4:
            raise CorruptCheckpoint(f"{path}: length mismatch for {name}")
        arr = np.frombuffer(data[start:end], dtype="<f4").reshape(shape)
        tensor = torch.from_numpy(arr.copy())
        if name.startswith("codebook:"):
            extras[name.split(":", 1)[1]] = tensor
            continue
        if name not in expected:
            raise CorruptCheckpoint(f"{path}: unexpected tensor {name}")
        if shape != expected[name]:
            raise CorruptCheckpoint(
                f"{path}: tensor {name} has shape {shape}, want {expected[name]}"
            )
        if not np.all(np.isfinite(arr)):
            raise CorruptCheckpoint(f"{path}: non-finite values in {name}")
        params[name] = tensor
    missing = set(expected) - set(params)
    if missing:
        raise CorruptCheckpoint(f"{path}: missing tensors: {sorted(missing)[:3]}")
    return ModelBundle(config=config, params=params,
                       meta=header.get("meta", {}), extras=extras)
