"""Experiment manifests.

One JSON document fully determines a pipeline run: corpus and model
settings, training hyperparameters, the quantization ladder, per-analysis
parameters, and explicit named seeds. Everything downstream stamps the
manifest digest, so two runs from the same document are byte-comparable.

The output directory is deliberately not part of the manifest: where the
artifacts land must not change what they contain.
"""

import hashlib
import json
from dataclasses import dataclass, field, fields as dc_fields

from ..errors import InvalidConfig
from ..model import ModelConfig
from ..training import TrainConfig

SEED_STREAMS = ("corpus", "init", "train", "calib")
ANALYSIS_SECTIONS = ("probes", "causal", "diagnostics", "interventions")
KNOWN_BITS = (2, 3, 4, 8)
ALGORITHMS = ("rtn", "gptq", "awq")

_CORPUS_KEYS = frozenset({
    "n_subjects", "n_relations", "targets_per_relation",
    "given_pool", "family_pool",
})
_MODEL_KEYS = frozenset(
    f.name for f in dc_fields(ModelConfig)) - {"vocab_size"}
_TRAIN_KEYS = frozenset(
    f.name for f in dc_fields(TrainConfig)) - {"seed"}
_QUANT_KEYS = frozenset({"bits", "group_size", "algorithm", "calib_size"})
_HEX = frozenset("0123456789abcdef")


def _require_mapping(doc, name):
    if not isinstance(doc, dict):
        raise InvalidConfig(f"manifest section {name!r} must be a mapping")
    return doc


@dataclass
class ExperimentManifest:
    """Validated description of one experiment."""

    name: str
    seeds: dict
    corpus: dict = field(default_factory=dict)
    model: dict = field(default_factory=dict)
    train: dict = field(default_factory=dict)
    quant: dict = field(default_factory=dict)
    analyses: dict = field(default_factory=dict)
    artifacts: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    def validate(self):
        if not isinstance(self.name, str) or not self.name.strip():
            raise InvalidConfig("manifest needs a non-empty name")
        _require_mapping(self.seeds, "seeds")
        missing = [s for s in SEED_STREAMS if s not in self.seeds]
        if missing:
            raise InvalidConfig(f"manifest missing seeds: {missing}")
        unknown = sorted(set(self.seeds) - set(SEED_STREAMS))
        if unknown:
            raise InvalidConfig(f"unknown seed streams: {unknown}")
        for stream, value in self.seeds.items():
            if not isinstance(value, int) or isinstance(value, bool):
                raise InvalidConfig(f"seed {stream!r} must be an integer")

        for section, allowed in (("corpus", _CORPUS_KEYS),
                                 ("model", _MODEL_KEYS),
                                 ("train", _TRAIN_KEYS),
                                 ("quant", _QUANT_KEYS)):
            doc = _require_mapping(getattr(self, section), section)
            bad = sorted(set(doc) - allowed)
            if bad:
                raise InvalidConfig(f"unknown {section} keys: {bad}")

        quant = self.quant
        bits = quant.get("bits", list(KNOWN_BITS))
        if not bits or any(b not in KNOWN_BITS for b in bits):
            raise InvalidConfig(
                f"quant bits must be a non-empty subset of {KNOWN_BITS}")
        if len(set(bits)) != len(bits):
            raise InvalidConfig("quant bits repeats an entry")
        if quant.get("group_size", 128) < 1:
            raise InvalidConfig("quant group_size must be >= 1")
        if quant.get("algorithm", "rtn") not in ALGORITHMS:
            raise InvalidConfig(
                f"quant algorithm must be one of {ALGORITHMS}")
        if quant.get("calib_size", 128) < 0:
            raise InvalidConfig("quant calib_size must be >= 0")

        _require_mapping(self.analyses, "analyses")
        bad = sorted(set(self.analyses) - set(ANALYSIS_SECTIONS))
        if bad:
            raise InvalidConfig(f"unknown analyses: {bad}")
        for key, doc in self.analyses.items():
            _require_mapping(doc, f"analyses.{key}")

        _require_mapping(self.artifacts, "artifacts")
        for name, entry in self.artifacts.items():
            entry = _require_mapping(entry, f"artifacts.{name}")
            if "path" not in entry:
                raise InvalidConfig(f"artifact {name!r} has no path")
            digest = entry.get("digest")
            if (not isinstance(digest, str) or len(digest) != 64
                    or set(digest) - _HEX):
                raise InvalidConfig(
                    f"artifact {name!r} needs a sha256 hex digest")

    # -- plumbing -----------------------------------------------------------

    def bits_ladder(self):
        return tuple(self.quant.get("bits", list(KNOWN_BITS)))

    def analysis(self, section, key, default=None):
        return self.analyses.get(section, {}).get(key, default)

    def to_json(self):
        return {
            "name": self.name,
            "seeds": dict(self.seeds),
            "corpus": dict(self.corpus),
            "model": dict(self.model),
            "train": dict(self.train),
            "quant": dict(self.quant),
            "analyses": {k: dict(v) for k, v in self.analyses.items()},
            "artifacts": {k: dict(v) for k, v in self.artifacts.items()},
        }

    @classmethod
    def from_json(cls, doc):
        doc = _require_mapping(doc, "manifest")
        known = {"name", "seeds", "corpus", "model", "train", "quant",
                 "analyses", "artifacts"}
        bad = sorted(set(doc) - known)
        if bad:
            raise InvalidConfig(f"unknown manifest fields: {bad}")
        if "seeds" not in doc:
            raise InvalidConfig("manifest missing seeds")
        return cls(name=doc.get("name", ""), seeds=doc["seeds"],
                   corpus=doc.get("corpus", {}), model=doc.get("model", {}),
                   train=doc.get("train", {}), quant=doc.get("quant", {}),
                   analyses=doc.get("analyses", {}),
                   artifacts=doc.get("artifacts", {}))

    def digest(self):
        blob = json.dumps(self.to_json(), sort_keys=True,
                          separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path):
        try:
            with open(path) as f:
                doc = json.load(f)
        except OSError as e:
            raise InvalidConfig(f"cannot read manifest {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise InvalidConfig(f"manifest {path} is not JSON: {e}") from e
        return cls.from_json(doc)


def default_manifest(seed=0):
    """The stock experiment: train the toy model just past its recall
    target so the 4-bit model fails on the weakest facts while 8-bit
    tracks the baseline and 2-bit collapses."""
    return ExperimentManifest(
        name="default",
        seeds={s: seed for s in SEED_STREAMS},
        corpus={"n_subjects": 512, "n_relations": 8,
                "targets_per_relation": 240,
                "given_pool": 64, "family_pool": 64},
        model={},
        train={"lr": 5e-4, "steps": 8192, "batch": 256,
               "target_recall": 0.97},
        quant={"bits": [8, 4, 3, 2], "group_size": 128,
               "algorithm": "rtn", "calib_size": 128},
        analyses={
            "probes": {"lens_sample": 64},
            "causal": {"sample_cap": 160, "window": 1,
                       "ablation_site": "attn_out"},
            "diagnostics": {"sample_cap": 64, "subspace_k": 10},
            "interventions": {
                "alpha_grid": [2, 3, 5, 7, 9],
                "protect_layers": 1,
                "protect_bits": 8,
                "ranks": [8, 32],
                "injection_bits_hi": [8, 4],
                "amplify_min_layer": 2,
            },
        },
    )
