"""Synthetic factual-recall corpus.

The world is a closed set of facts (subject, relation) -> target over an
invented vocabulary. Subjects are two-token names drawn as unique pairs
from shared given/family name pools: with 512 subjects over 64x64 pools,
any single name token is ambiguous across ~8 subjects, so identifying a
subject requires combining both tokens rather than keying on either alone.
Every relation comes with four paraphrase templates, all of which end
immediately before the target token, so a single greedy step answers the
prompt.

Everything is a pure function of (seed, sizing): worlds serialize to JSON
with a stable digest, and two calls with the same arguments are identical.
"""

import hashlib
import json
from dataclasses import dataclass, field

from .errors import (
    CapacityExceeded,
    InvalidConfig,
    InvalidInput,
    TokenizationError,
)
from .rng import substream

BOS = "<bos>"
PAD = "<pad>"
SUBJECT_SLOT = "[S]"

# Shared function words. Everything else in a prompt is generated per world.
FUNCTION_WORDS = ("the", "of", "is", "about")

VOCAB_CAPACITY = 4096

TEMPLATES_PER_RELATION = 4

_CONSONANTS = "bdfgklmnprstvz"
_VOWELS = "aeiou"


def _pseudo_words(rng, count, taken):
    """Deterministic pronounceable nonsense words, all distinct."""
    words = []
    seen = set(taken)
    while len(words) < count:
        n_syll = int(rng.integers(2, 4))
        w = "".join(
            _CONSONANTS[int(rng.integers(len(_CONSONANTS)))]
            + _VOWELS[int(rng.integers(len(_VOWELS)))]
            for _ in range(n_syll)
        )
        if w not in seen:
            seen.add(w)
            words.append(w)
    return words


@dataclass(frozen=True)
class Vocab:
    tokens: tuple

    def __post_init__(self):
        object.__setattr__(self, "_ids", {t: i for i, t in enumerate(self.tokens)})

    @property
    def size(self):
        return len(self.tokens)

    @property
    def bos_id(self):
        return self._ids[BOS]

    @property
    def pad_id(self):
        return self._ids[PAD]

    def id_of(self, token):
        try:
            return self._ids[token]
        except KeyError:
            raise TokenizationError(f"token not in vocabulary: {token!r}") from None

    def encode(self, tokens):
        return [self.id_of(t) for t in tokens]


@dataclass(frozen=True)
class Relation:
    relation_id: int
    words: tuple          # two relation-specific content words
    templates: tuple      # TEMPLATES_PER_RELATION token tuples with [S] slot
    targets: tuple        # candidate target tokens for this relation


@dataclass(frozen=True)
class FactRecord:
    fact_id: int
    subject: tuple        # (given, family)
    relation_id: int
    target: str


@dataclass(frozen=True)
class PromptPositions:
    """Indices into the rendered (BOS-prefixed) prompt."""

    first_subject: int
    last_subject: int
    relation_span: tuple
    last_token: int

    def groups(self):
        """Named position groups. mid_subject is empty for two-token names
        but kept so downstream grids have a fixed vocabulary of groups."""
        return {
            "first_subject": (self.first_subject,),
            "mid_subject": tuple(range(self.first_subject + 1, self.last_subject)),
            "last_subject": (self.last_subject,),
            "relation": self.relation_span,
            "last_token": (self.last_token,),
        }


def _relation_templates(w1, w2):
    # Subject appears early, mid, and late across paraphrases, and the
    # relation words appear both before and after it, so no single absolute
    # position carries the fact. Template 0 is the primary form.
    return (
        ("the", w1, "of", SUBJECT_SLOT, "is"),
        (SUBJECT_SLOT, w1, "is"),
        ("the", w2, "of", SUBJECT_SLOT, "is"),
        ("about", SUBJECT_SLOT, "the", w1, "is"),
    )


@dataclass
class World:
    seed: int
    n_subjects: int
    n_relations: int
    targets_per_relation: int
    given_pool: int
    family_pool: int
    vocab: Vocab
    subjects: tuple       # (given, family) pairs, unique as pairs
    relations: tuple      # Relation
    facts: tuple          # FactRecord, id = subject*n_relations + relation
    _digest: str = field(default=None, repr=False)

    @property
    def n_facts(self):
        return len(self.facts)

    def fact(self, fact_id):
        f = self.facts[fact_id]
        if f.fact_id != fact_id:
            raise InvalidInput(f"fact table out of order at {fact_id}")
        return f

    def to_json(self):
        return {
            "seed": self.seed,
            "n_subjects": self.n_subjects,
            "n_relations": self.n_relations,
            "targets_per_relation": self.targets_per_relation,
            "given_pool": self.given_pool,
            "family_pool": self.family_pool,
            "vocab": list(self.vocab.tokens),
            "subjects": [list(s) for s in self.subjects],
            "relations": [
                {
                    "relation_id": r.relation_id,
                    "words": list(r.words),
                    "templates": [list(t) for t in r.templates],
                    "targets": list(r.targets),
                }
                for r in self.relations
            ],
            "facts": [
                [f.fact_id, f.subject[0], f.subject[1], f.relation_id, f.target]
                for f in self.facts
            ],
        }

    @classmethod
    def from_json(cls, doc):
        vocab = Vocab(tuple(doc["vocab"]))
        relations = tuple(
            Relation(
                relation_id=r["relation_id"],
                words=tuple(r["words"]),
                templates=tuple(tuple(t) for t in r["templates"]),
                targets=tuple(r["targets"]),
            )
            for r in doc["relations"]
        )
        facts = tuple(
            FactRecord(fact_id=f[0], subject=(f[1], f[2]),
                       relation_id=f[3], target=f[4])
            for f in doc["facts"]
        )
        return cls(
            seed=doc["seed"],
            n_subjects=doc["n_subjects"],
            n_relations=doc["n_relations"],
            targets_per_relation=doc["targets_per_relation"],
            given_pool=doc["given_pool"],
            family_pool=doc["family_pool"],
            vocab=vocab,
            subjects=tuple((s[0], s[1]) for s in doc["subjects"]),
            relations=relations,
            facts=facts,
        )

    def digest(self):
        if self._digest is None:
            blob = json.dumps(self.to_json(), sort_keys=True,
                              separators=(",", ":")).encode()
            self._digest = hashlib.sha256(blob).hexdigest()
        return self._digest


def generate_world(seed, n_subjects=512, n_relations=8, targets_per_relation=240,
                   given_pool=64, family_pool=64):
    """Build a deterministic fact world.

    Subjects are distinct (given, family) pairs sampled without replacement
    from the pool cross product, so with pools smaller than n_subjects the
    individual name tokens repeat across subjects and only the pair is
    identifying.
    """
    if n_subjects < 1 or n_relations < 1 or targets_per_relation < 2:
        raise InvalidConfig(
            "world sizing must have >=1 subject, >=1 relation, >=2 targets"
        )
    if given_pool < 1 or family_pool < 1:
        raise InvalidConfig("name pools must be at least 1")
    if given_pool * family_pool < n_subjects:
        raise InvalidConfig(
            f"name pools {given_pool}x{family_pool} cannot produce "
            f"{n_subjects} distinct subject pairs"
        )
    rng = substream(seed, "corpus")
    reserved = set(FUNCTION_WORDS) | {BOS, PAD}

    rel_words = _pseudo_words(rng, 2 * n_relations, reserved)
    reserved.update(rel_words)
    given = _pseudo_words(rng, given_pool, reserved)
    reserved.update(given)
    family = _pseudo_words(rng, family_pool, reserved)
    reserved.update(family)
    target_words = _pseudo_words(rng, n_relations * targets_per_relation, reserved)

    tokens = (
        [BOS, PAD]
        + list(FUNCTION_WORDS)
        + rel_words
        + given
        + family
        + target_words
    )
    if len(tokens) > VOCAB_CAPACITY:
        raise CapacityExceeded(
            f"vocabulary would need {len(tokens)} tokens, cap is {VOCAB_CAPACITY}"
        )
    vocab = Vocab(tuple(tokens))

    pair_codes = rng.choice(given_pool * family_pool, size=n_subjects,
                            replace=False)
    subjects = tuple(
        (given[c // family_pool], family[c % family_pool])
        for c in sorted(pair_codes.tolist())
    )
    relations = []
    for r in range(n_relations):
        w1, w2 = rel_words[2 * r], rel_words[2 * r + 1]
        pool = tuple(
            target_words[r * targets_per_relation:(r + 1) * targets_per_relation]
        )
        relations.append(
            Relation(relation_id=r, words=(w1, w2),
                     templates=_relation_templates(w1, w2), targets=pool)
        )

    facts = []
    for s in range(n_subjects):
        for r in range(n_relations):
            pool = relations[r].targets
            target = pool[int(rng.integers(len(pool)))]
            facts.append(
                FactRecord(
                    fact_id=s * n_relations + r,
                    subject=subjects[s],
                    relation_id=r,
                    target=target,
                )
            )

    return World(
        seed=seed,
        n_subjects=n_subjects,
        n_relations=n_relations,
        targets_per_relation=targets_per_relation,
        given_pool=given_pool,
        family_pool=family_pool,
        vocab=vocab,
        subjects=subjects,
        relations=relations,
        facts=tuple(facts),
    )


def render_prompt(world, fact_id, template_id, prefix=()):
    """Token ids for BOS + (optional prefix) + template with the subject
    substituted, plus the position annotations. The target is never part
    of the prompt.
    """
    fact = world.fact(fact_id)
    rel = world.relations[fact.relation_id]
    if not 0 <= template_id < len(rel.templates):
        raise InvalidInput(f"template_id {template_id} out of range")
    template = rel.templates[template_id]

    toks = [BOS, *prefix]
    first = last = None
    span = []
    for t in template:
        if t == SUBJECT_SLOT:
            first = len(toks)
            toks.extend(fact.subject)
            last = len(toks) - 1
        else:
            if t in rel.words:
                span.append(len(toks))
            toks.append(t)
    positions = PromptPositions(
        first_subject=first,
        last_subject=last,
        relation_span=tuple(span),
        last_token=len(toks) - 1,
    )
    return world.vocab.encode(toks), positions


def supervised_example(world, fact_id, template_id, prefix=()):
    """(prompt ids, answer position, target id) for one fact/template."""
    ids, pos = render_prompt(world, fact_id, template_id, prefix)
    fact = world.fact(fact_id)
    return ids, pos.last_token, world.vocab.id_of(fact.target)


@dataclass(frozen=True)
class Splits:
    train_ids: tuple
    eval_ids: tuple


def build_splits(world, train_fraction, seed):
    """Split fact ids for training and held-out evaluation.

    train_fraction 1.0 is the memorization regime: eval equals train.
    Any other fraction must leave both sides non-empty.
    """
    if not 0.0 < train_fraction <= 1.0:
        raise InvalidConfig(f"train_fraction must be in (0, 1], got {train_fraction}")
    ids = list(range(world.n_facts))
    if train_fraction == 1.0:
        return Splits(train_ids=tuple(ids), eval_ids=tuple(ids))
    rng = substream(seed, "splits")
    rng.shuffle(ids)
    cut = int(-(-train_fraction * len(ids) // 1))  # ceil
    train, evalset = ids[:cut], ids[cut:]
    if not train or not evalset:
        raise InvalidConfig(
            f"train_fraction {train_fraction} leaves an empty split on "
            f"{len(ids)} facts"
        )
    return Splits(train_ids=tuple(sorted(train)), eval_ids=tuple(sorted(evalset)))


@dataclass(frozen=True)
class SubsetPartition:
    """Facts split by where quantization hurt.

    robust: reference and quantized model both correct
    failure: reference correct, quantized model wrong
    other: reference already wrong
    """

    robust: tuple
    failure: tuple
    other: tuple

    @property
    def counts(self):
        return {
            "total": len(self.robust) + len(self.failure) + len(self.other),
            "robust": len(self.robust),
            "failure": len(self.failure),
            "other": len(self.other),
        }

    def to_json(self):
        return {
            "counts": self.counts,
            "robust": list(self.robust),
            "failure": list(self.failure),
            "other": list(self.other),
        }


def partition_subsets(preds_ref, preds_quant):
    """Partition fact ids by per-fact correctness of two models.

    Both arguments map fact_id -> bool (correct under greedy decoding) and
    must cover the same fact ids.
    """
    if set(preds_ref) != set(preds_quant):
        raise InvalidInput("partition inputs cover different fact ids")
    robust, failure, other = [], [], []
    for fid in sorted(preds_ref):
        if preds_ref[fid] and preds_quant[fid]:
            robust.append(fid)
        elif preds_ref[fid]:
            failure.append(fid)
        else:
            other.append(fid)
    return SubsetPartition(robust=tuple(robust), failure=tuple(failure),
                           other=tuple(other))
