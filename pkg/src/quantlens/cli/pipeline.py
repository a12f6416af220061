"""Stage runner that turns one manifest into one experiment tree.

Eight stages run in a fixed order, each writing its files under the output
directory and recording digests in stages.json: a digest of everything the
stage consumed (the manifest plus every upstream stage's output digest)
next to a digest of everything it wrote. A rerun skips a stage only when
both sides still match, so stale intermediate data can never leak into a
later stage: any change upstream changes the input digest downstream and
forces a rerun there too.

The manifest digest is part of every stage's input digest, which means
editing the manifest reruns the whole tree rather than patching it in
place. That is deliberate: every output file embeds the digest of the
manifest that produced it, and a tree must never mix two manifests.

A pid lock file guards the output directory; two concurrent runs into the
same tree would interleave half-written stages.
"""

import hashlib
import json
import os
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .. import causal, corpus, diagnostics, interventions, model, probes, quant
from ..errors import InvalidConfig, LockHeld, StageFailure
from ..interventions import AmplifyConfig, EarlyLayers
from ..model import ModelConfig
from ..quant import QuantSpec
from ..rng import substream
from ..training import TrainConfig, train
from .manifest import ExperimentManifest

STAGE_ORDER = (
    "gen-corpus",
    "train",
    "quantize",
    "partition-subsets",
    "probes",
    "causal",
    "diagnostics",
    "interventions",
)

UPSTREAM = {
    "gen-corpus": (),
    "train": ("gen-corpus",),
    "quantize": ("train",),
    "partition-subsets": ("gen-corpus", "train", "quantize"),
    "probes": ("gen-corpus", "train", "quantize", "partition-subsets"),
    "causal": ("gen-corpus", "train", "quantize", "partition-subsets"),
    "diagnostics": ("gen-corpus", "train", "quantize", "partition-subsets"),
    "interventions": ("gen-corpus", "train", "quantize", "partition-subsets"),
}

# Repair grids are read over the prompt's content positions. The readout
# position is excluded from the headline grid because patching it at the
# last layer replaces the model's entire answer state and is therefore a
# ceiling, not a measurement; its column is written separately.
CONTENT_GROUPS = ("first_subject", "mid_subject", "last_subject", "relation")

# Below this many facts the subset is too noisy to score a 10-point lift,
# and the targeted-repair stage falls back to the 3-bit contrast.
MIN_FAILURE_FACTS = 32

DIAG_SITES = ("residual_out", "ffn_out", "gate_preact", "h_key", "attn_probs")

_ALGO_SPEC = {"rtn": "rtn", "gptq": "gptq", "awq": "awq+gptq"}


def _sha256_file(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _canonical_digest(doc):
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def _write_json(out_dir, relpath, doc):
    path = Path(out_dir) / relpath
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        json.dump(doc, f, indent=2, sort_keys=True)
        f.write("\n")
    return relpath


def _alive(pid):
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


class DirectoryLock:
    """Single-process ownership of an output tree via a pid file."""

    def __init__(self, out_dir):
        self.path = Path(out_dir) / ".lock"
        self._held = False

    def __enter__(self):
        for _ in range(2):
            try:
                fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            except FileExistsError:
                try:
                    pid = int(self.path.read_text().strip() or "0")
                except (OSError, ValueError):
                    pid = 0
                if pid and _alive(pid):
                    raise LockHeld(
                        f"{self.path} is held by live process {pid}")
                # Stale lock from a dead process: reclaim it.
                try:
                    self.path.unlink()
                except FileNotFoundError:
                    pass
                continue
            os.write(fd, str(os.getpid()).encode())
            os.close(fd)
            self._held = True
            return self
        raise LockHeld(f"could not acquire {self.path}")

    def __exit__(self, *exc):
        if self._held:
            try:
                self.path.unlink()
            except FileNotFoundError:
                pass
            self._held = False
        return False


class PipelineContext:
    """Shared artifacts for stage functions.

    A stage that ran seeds the cache with live objects; a stage that was
    skipped leaves the cache cold and later stages reload its artifacts
    from disk on first touch.
    """

    def __init__(self, manifest, out_dir, overrides=None):
        self.manifest = manifest
        self.out = Path(out_dir)
        self.md = manifest.digest()
        self.overrides = dict(overrides or {})
        self.cache = {}

    def _read(self, relpath):
        with open(self.out / relpath) as f:
            return json.load(f)

    @property
    def world(self):
        if "world" not in self.cache:
            doc = self._read("corpus/world.json")
            self.cache["world"] = corpus.World.from_json(doc["world"])
        return self.cache["world"]

    @property
    def config(self):
        if "config" not in self.cache:
            self.cache["config"] = ModelConfig(
                vocab_size=self.world.vocab.size, **self.manifest.model)
        return self.cache["config"]

    @property
    def fp(self):
        if "fp" not in self.cache:
            self.cache["fp"] = model.load_checkpoint(
                self.out / "models" / "fp.qlck")
        return self.cache["fp"]

    def q(self, bits):
        key = ("q", bits)
        if key not in self.cache:
            self.cache[key] = model.load_checkpoint(
                self.out / "models" / f"q{bits}.qlck")
        return self.cache[key]

    @property
    def partition(self):
        if "partition" not in self.cache:
            doc = self._read("partition/subsets.json")
            self.cache["partition"] = corpus.SubsetPartition(
                robust=tuple(doc["robust"]),
                failure=tuple(doc["failure"]),
                other=tuple(doc["other"]))
        return self.cache["partition"]

    @property
    def calib_prompts(self):
        if "calib" not in self.cache:
            size = self.manifest.quant.get("calib_size", 128)
            world = self.world
            rng = substream(self.manifest.seeds["calib"], "calib")
            picks = rng.choice(world.n_facts, size=min(size, world.n_facts),
                               replace=False)
            self.cache["calib"] = tuple(
                corpus.render_prompt(world, int(f), 0)[0]
                for f in sorted(picks.tolist()))
        return self.cache["calib"]

    def model_names(self):
        bits = self.overrides.get("bits")
        ladder = [bits] if bits is not None else self.manifest.bits_ladder()
        return ["fp"] + [f"q{b}" for b in ladder]

    def bundle_of(self, name):
        return self.fp if name == "fp" else self.q(int(name[1:]))

    def analysis_facts(self, default_subset):
        """Fact pool an analysis stage samples from, honoring --subset."""
        name = self.overrides.get("subset", default_subset)
        part = self.partition
        if name == "robust":
            return part.robust
        if name == "failure":
            return part.failure
        return tuple(sorted(part.robust + part.failure + part.other))


def _primary_per_fact(bundle, world):
    rep = probes.accuracy_suite(bundle, world, template_ids=(0,))
    return {f: bool(v[0]) for f, v in rep.per_fact.items()}


def _subset_primary_acc(bundle, world, fact_ids):
    rep = probes.accuracy_suite(bundle, world, fact_ids=fact_ids,
                                template_ids=(0,))
    return rep.acc_any


def _quant_spec(manifest, bits):
    return QuantSpec(
        bits=bits,
        group_size=manifest.quant.get("group_size", 128),
        algorithm=_ALGO_SPEC[manifest.quant.get("algorithm", "rtn")])


def _amplify_config(iv, alpha):
    kwargs = {"alpha": float(alpha),
              "min_layer": int(iv.get("amplify_min_layer", 2))}
    if "amplify_margin_bits" in iv:
        kwargs["margin_bits"] = float(iv["amplify_margin_bits"])
    return AmplifyConfig(**kwargs)


# ---------------------------------------------------------------------------
# Stages. Each returns the relative paths it wrote.


def _stage_gen_corpus(ctx):
    m = ctx.manifest
    world = corpus.generate_world(m.seeds["corpus"], **m.corpus)
    ctx.cache["world"] = world
    return [_write_json(ctx.out, "corpus/world.json", {
        "manifest_digest": ctx.md,
        "world_digest": world.digest(),
        "world": world.to_json(),
    })]


def _stage_train(ctx):
    m = ctx.manifest
    world = ctx.world
    bundle = model.init_model(ctx.config, seed=m.seeds["init"])
    n_templates = len(world.relations[0].templates)
    examples = [corpus.supervised_example(world, f, t)
                for f in range(world.n_facts) for t in range(n_templates)]
    tconf = TrainConfig(seed=m.seeds["train"], **m.train)
    trained, report = train(bundle, examples, tconf, examples)
    ctx.cache["fp"] = trained

    (ctx.out / "models").mkdir(parents=True, exist_ok=True)
    model.save_checkpoint(trained, ctx.out / "models" / "fp.qlck")
    files = ["models/fp.qlck"]
    files.append(_write_json(ctx.out, "models/fp.qlck.json", {
        "manifest_digest": ctx.md,
        "model_digest": trained.digest(),
        "config": asdict(ctx.config),
    }))
    files.append(_write_json(ctx.out, "models/train_report.json", {
        "manifest_digest": ctx.md,
        "steps_run": report.steps_run,
        "epochs_run": report.epochs_run,
        "stopped_early": report.stopped_early,
        "final_recall": report.final_recall,
        "loss_curve": [float(x) for x in report.loss_curve],
        "recall_curve": [[int(e), float(r)] for e, r in report.recall_curve],
    }))
    return files


def _stage_quantize(ctx):
    m = ctx.manifest
    needs_calib = m.quant.get("algorithm", "rtn") != "rtn"
    bits_only = ctx.overrides.get("bits")
    ladder = [bits_only] if bits_only is not None else m.bits_ladder()
    files, entries = [], {}
    for bits in ladder:
        spec = _quant_spec(m, bits)
        plan = quant.plan_uniform(ctx.config, spec)
        calib = ctx.calib_prompts if needs_calib else None
        bundle, report = quant.apply_plan(ctx.fp, plan, calib)
        ctx.cache[("q", bits)] = bundle
        rel = f"models/q{bits}.qlck"
        model.save_checkpoint(bundle, ctx.out / rel)
        files.append(rel)
        files.append(_write_json(ctx.out, rel + ".json", {
            "manifest_digest": ctx.md,
            "model_digest": bundle.digest(),
            "spec": spec.to_json(),
        }))
        entries[f"q{bits}"] = report.to_json()
    files.append(_write_json(ctx.out, "models/quantize.json", {
        "manifest_digest": ctx.md,
        "models": entries,
    }))
    return files


def _stage_partition(ctx):
    world = ctx.world
    part = corpus.partition_subsets(_primary_per_fact(ctx.fp, world),
                                    _primary_per_fact(ctx.q(4), world))
    ctx.cache["partition"] = part
    return [_write_json(ctx.out, "partition/subsets.json", {
        "manifest_digest": ctx.md,
        "reference": "fp",
        "quantized": "q4",
        "template_id": 0,
        "decoding": "greedy",
        **part.to_json(),
    })]


def _stage_probes(ctx):
    world = ctx.world
    lens_sample = ctx.manifest.analysis("probes", "lens_sample", 64)
    files = []

    acc, ranks = {}, {}
    for name in ctx.model_names():
        bundle = ctx.bundle_of(name)
        full = probes.accuracy_suite(bundle, world)
        acc[name] = {
            "primary": _subset_primary_acc(bundle, world, None),
            "acc_any": full.acc_any,
            "acc_majority": full.acc_majority,
            "acc_all": full.acc_all,
            "per_relation": {str(k): v for k, v in
                             sorted(full.per_relation.items())},
        }
        ranks[name] = probes.rank_histogram(
            probes.target_ranks(bundle, world))
    files.append(_write_json(ctx.out, "probes/accuracy.json", {
        "manifest_digest": ctx.md,
        "chance": 1.0 / world.targets_per_relation,
        "models": acc,
    }))
    files.append(_write_json(ctx.out, "probes/ranks.json", {
        "manifest_digest": ctx.md,
        "buckets": [label for label, _, _ in probes.RANK_BUCKETS],
        "models": ranks,
    }))

    part = ctx.partition
    picks = (list(part.failure) + list(part.robust))[:lens_sample]
    lens = {}
    for name in ctx.model_names():
        bundle = ctx.bundle_of(name)
        per_fact = {}
        for f in picks:
            ids, _, target = corpus.supervised_example(world, f, 0)
            traj = probes.target_trajectory(bundle, ids, target)
            per_fact[str(f)] = traj.rows()
        lens[name] = per_fact
    files.append(_write_json(ctx.out, "probes/lens.json", {
        "manifest_digest": ctx.md,
        "facts": [int(f) for f in picks],
        "models": lens,
    }))
    return files


def _stage_causal(ctx):
    m = ctx.manifest
    cap = m.analysis("causal", "sample_cap", 160)
    window = m.analysis("causal", "window", 1)
    site = m.analysis("causal", "ablation_site", "attn_out")
    world = ctx.world
    facts = ctx.analysis_facts("failure")[:cap]
    if not facts:
        raise InvalidConfig(
            "the fact subset for the causal stage is empty; train closer "
            "to the recall target so quantization has something to break")
    cases = causal.cases_from_facts(world, facts)
    store = causal.capture_clean_traces(ctx.fp, cases)
    files = []

    self_grid = causal.cross_model_repair(ctx.fp, store, cases,
                                          window=window)
    files.append(_write_json(ctx.out, "causal/repair_self.json", {
        "manifest_digest": ctx.md,
        "patched_model": "fp",
        "max_abs_effect": float(np.max(np.abs(self_grid.effects))),
        "grid": self_grid.to_json(),
    }))

    for bits in (4, 2):
        grid = causal.cross_model_repair(ctx.q(bits), store, cases,
                                         group_names=CONTENT_GROUPS,
                                         window=window)
        readout = causal.cross_model_repair(ctx.q(bits), store, cases,
                                            group_names=("last_token",),
                                            window=window)
        files.append(_write_json(ctx.out, f"causal/repair_q{bits}.json", {
            "manifest_digest": ctx.md,
            "patched_model": f"q{bits}",
            "grid": grid.to_json(),
            "readout_column": {
                str(l): readout.cell(l, "last_token")
                for l in readout.layers
            },
        }))

    for name in ("fp", "q2"):
        bundle = ctx.bundle_of(name)
        grid = causal.zero_ablation(bundle, cases, site=site)
        files.append(_write_json(ctx.out, f"causal/ablation_{name}.json", {
            "manifest_digest": ctx.md,
            "model": name,
            "site": site,
            "concentration": causal.effect_concentration(grid),
            "grid": grid.to_json(),
        }))
    return files


def _stage_diagnostics(ctx):
    m = ctx.manifest
    cap = m.analysis("diagnostics", "sample_cap", 64)
    k = m.analysis("diagnostics", "subspace_k", 50)
    world = ctx.world
    facts = ctx.analysis_facts("failure")[:cap]
    if not facts:
        raise InvalidConfig(
            "the fact subset for the diagnostics stage is empty; train "
            "closer to the recall target so quantization has something "
            "to break")
    prompts, answer_pos = [], []
    for f in facts:
        ids, positions = corpus.render_prompt(world, f, 0)
        prompts.append(ids)
        answer_pos.append(positions.last_token)

    traces = {name: diagnostics.collect_traces(ctx.bundle_of(name), prompts,
                                               set(DIAG_SITES))
              for name in ("fp", "q4", "q2")}
    files = []

    profiles = {}
    for name in ("q4", "q2"):
        tq = traces[name]
        profiles[name] = {
            "gate_sign_flip": diagnostics.gate_sign_flip_rate(
                traces["fp"], tq, position=answer_pos).to_json(),
            "expert_jaccard": diagnostics.expert_jaccard_profile(
                traces["fp"], tq, position=answer_pos).to_json(),
            "value_cosine": diagnostics.value_cosine_profile(
                traces["fp"], tq, position=answer_pos).to_json(),
            "attn_jsd": diagnostics.attn_jsd_profile(
                traces["fp"], tq, position=answer_pos).to_json(),
        }
    entropy = {name: diagnostics.attn_entropy_profile(
        traces[name], positions=answer_pos).to_json()
        for name in traces}
    files.append(_write_json(ctx.out, "diagnostics/profiles.json", {
        "manifest_digest": ctx.md,
        "n_prompts": len(prompts),
        "pairs": profiles,
        "attn_entropy": entropy,
    }))

    cka = {name: diagnostics.cka_heatmap(traces["fp"], traces[name],
                                         position=-1).to_json()
           for name in ("q4", "q2")}
    for name in cka:
        cka[name]["diagonal_mean"] = float(
            np.mean(np.diag(np.asarray(cka[name]["values"]))))
    files.append(_write_json(ctx.out, "diagnostics/cka.json", {
        "manifest_digest": ctx.md,
        "pairs": cka,
    }))

    sub = {}
    for name in ("q4", "q2"):
        tq = traces[name]
        sub[name] = {
            "subspace": diagnostics.subspace_profile(
                traces["fp"], tq, position=-1, k=k).to_json(),
            "error_alignment": diagnostics.error_alignment_profile(
                traces["fp"], tq, position=-1, k=k).to_json(),
        }
    files.append(_write_json(ctx.out, "diagnostics/subspace.json", {
        "manifest_digest": ctx.md,
        "k": k,
        "pairs": sub,
    }))
    return files


def _stage_interventions(ctx):
    m = ctx.manifest
    iv = m.analyses.get("interventions", {})
    world = ctx.world
    n_layers = ctx.config.n_layers
    subset_name = ctx.overrides.get("subset", "robust")
    sweep_facts = ctx.analysis_facts("robust")
    k_only = ctx.overrides.get("k")
    k_values = ((k_only,) if k_only is not None
                else tuple(range(-1, n_layers)))
    files = []

    domino = interventions.domino_sweep(
        ctx.fp, world, _quant_spec(m, 2), k_values,
        fact_ids=sweep_facts, subset_name=subset_name)
    files.append(_write_json(ctx.out, "interventions/domino.json", {
        "manifest_digest": ctx.md,
        "sweep": domino.to_json(),
    }))

    for bits_hi in iv.get("injection_bits_hi", [8, 4]):
        sweep = interventions.signal_injection_sweep(
            ctx.fp, world, bits_hi, k_values, bits_lo=2,
            group_size=m.quant.get("group_size", 128),
            fact_ids=sweep_facts, subset_name=subset_name)
        files.append(_write_json(
            ctx.out, f"interventions/injection_q{bits_hi}.json", {
                "manifest_digest": ctx.md,
                "sweep": sweep.to_json(),
            }))

    component = interventions.component_sweep(
        ctx.fp, world, _quant_spec(m, 2), subset_name="all")
    files.append(_write_json(ctx.out, "interventions/component.json", {
        "manifest_digest": ctx.md,
        "sweep": component.to_json(),
    }))

    files.append(_write_json(ctx.out, "interventions/repair.json",
                             _targeted_repair(ctx, iv)))

    battery = {}
    fp_primary = _subset_primary_acc(ctx.fp, world, None)
    bits_only = ctx.overrides.get("bits")
    for bits in ((bits_only,) if bits_only is not None else (4, 2)):
        sweep = interventions.compensation_battery(
            ctx.fp, world, _quant_spec(m, bits),
            ranks=tuple(iv.get("ranks", [8, 32])),
            protect_layers=iv.get("protect_layers", 1),
            protect_bits=iv.get("protect_bits", 8),
            subset_name="all")
        battery[f"q{bits}"] = sweep.to_json()
    files.append(_write_json(ctx.out, "interventions/battery.json", {
        "manifest_digest": ctx.md,
        "fp_primary": fp_primary,
        "runs": battery,
    }))
    return files


def _targeted_repair(ctx, iv):
    """Protect-then-amplify ladder on the failure subset.

    The subset comes from the 4-bit contrast unless it is too small to
    score reliably, in which case the 3-bit contrast is used and the
    switch is recorded in the output.
    """
    m = ctx.manifest
    world = ctx.world
    subset = list(ctx.partition.failure)
    bits_used, fallback = 4, False
    if len(subset) < MIN_FAILURE_FACTS:
        if 3 not in m.bits_ladder():
            raise InvalidConfig(
                f"failure subset has {len(subset)} facts "
                f"(< {MIN_FAILURE_FACTS}) and the ladder has no 3-bit "
                "model to fall back to")
        part3 = corpus.partition_subsets(
            _primary_per_fact(ctx.fp, world),
            _primary_per_fact(ctx.q(3), world))
        subset = list(part3.failure)
        bits_used, fallback = 3, True
        if not subset:
            raise InvalidConfig(
                "no facts fail at 4 or 3 bits; the targeted-repair stage "
                "has nothing to fix")

    spec = _quant_spec(m, bits_used)
    plain_acc = _subset_primary_acc(ctx.q(bits_used), world, subset)
    protect = interventions.source_protect(
        ctx.fp, spec,
        EarlyLayers(iv.get("protect_layers", 1), iv.get("protect_bits", 8)))
    protect_acc = _subset_primary_acc(protect.bundle, world, subset)

    alpha_grid = iv.get("alpha_grid", [2, 3, 5, 7, 9])
    if ctx.overrides.get("alpha") is not None:
        alpha_grid = [ctx.overrides["alpha"]]
    amplified = {}
    for alpha in alpha_grid:
        cfg = _amplify_config(iv, alpha)
        amplified[str(alpha)] = interventions.amplified_accuracy(
            protect.bundle, world, cfg, fact_ids=subset)
    best_alpha = min((a for a in amplified
                      if amplified[a] == max(amplified.values())),
                     key=float)
    return {
        "manifest_digest": ctx.md,
        "bits": bits_used,
        "fallback_to_3bit": fallback,
        "subset_size": len(subset),
        "plain": plain_acc,
        "protect": protect_acc,
        "protect_average_bits": protect.average_bits,
        "amplified": amplified,
        "best_alpha": float(best_alpha),
        "combined": amplified[best_alpha],
        "combined_lift": amplified[best_alpha] - plain_acc,
    }


_STAGES = {
    "gen-corpus": _stage_gen_corpus,
    "train": _stage_train,
    "quantize": _stage_quantize,
    "partition-subsets": _stage_partition,
    "probes": _stage_probes,
    "causal": _stage_causal,
    "diagnostics": _stage_diagnostics,
    "interventions": _stage_interventions,
}


def _input_digest(stage, manifest_digest, stage_ledger):
    upstream = {}
    for dep in UPSTREAM[stage]:
        entry = stage_ledger.get(dep)
        upstream[dep] = entry["output"] if entry else None
    return _canonical_digest({
        "stage": stage,
        "manifest": manifest_digest,
        "upstream": upstream,
    })


def _outputs_fresh(out_dir, entry):
    for rel, digest in entry.get("outputs", {}).items():
        path = Path(out_dir) / rel
        if not path.is_file() or _sha256_file(path) != digest:
            return False
    return bool(entry.get("outputs"))


def _preflight(manifest):
    ladder = manifest.bits_ladder()
    missing = sorted({2, 4} - set(ladder))
    if missing:
        raise InvalidConfig(
            f"the analysis stages contrast the 4-bit and 2-bit models; "
            f"quant.bits is missing {missing}")


def run_pipeline(manifest, out_dir, force=False):
    """Run every stage, skipping the ones whose digests still match.

    Returns the summary document (also written to summary.json). Raises
    StageFailure around the first stage that throws; earlier stages'
    outputs stay on disk so a rerun resumes from the failure.
    """
    _preflight(manifest)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with DirectoryLock(out):
        md = manifest.digest()
        manifest.save(out / "manifest.json")
        ledger = {"manifest_digest": md, "stages": {}}
        ledger_path = out / "stages.json"
        if ledger_path.is_file():
            with open(ledger_path) as f:
                old = json.load(f)
            ledger["stages"] = old.get("stages", {})

        ctx = PipelineContext(manifest, out)
        statuses = {}
        for stage in STAGE_ORDER:
            digest = _input_digest(stage, md, ledger["stages"])
            entry = ledger["stages"].get(stage)
            if (not force and entry and entry.get("input") == digest
                    and _outputs_fresh(out, entry)):
                statuses[stage] = {"status": "skipped", "seconds": 0.0}
                continue
            started = time.monotonic()
            try:
                written = _STAGES[stage](ctx)
            except Exception as exc:
                ledger["stages"].pop(stage, None)
                _write_json(out, "stages.json", ledger)
                raise StageFailure(stage, exc) from exc
            outputs = {rel: _sha256_file(out / rel) for rel in sorted(written)}
            ledger["stages"][stage] = {
                "input": digest,
                "outputs": outputs,
                "output": _canonical_digest(outputs),
                "seconds": round(time.monotonic() - started, 3),
            }
            _write_json(out, "stages.json", ledger)
            statuses[stage] = {
                "status": "run",
                "seconds": ledger["stages"][stage]["seconds"],
            }

        summary = {
            "manifest_digest": md,
            "name": manifest.name,
            "stages": statuses,
        }
        subsets = out / "partition" / "subsets.json"
        if subsets.is_file():
            with open(subsets) as f:
                summary["partition"] = json.load(f)["counts"]
        _write_json(out, "summary.json", summary)
        return summary


def run_stage(manifest, out_dir, stage, overrides=None):
    """Run one stage in place, reading upstream artifacts from disk.

    With overrides (--subset/--bits/--alpha/--k) the stage's outputs are
    scoped to the requested slice, so its ledger entry is dropped: the
    next full pipeline run redoes the stage instead of trusting partial
    files. Without overrides the entry is recorded and a later pipeline
    run can skip the stage like any other.
    """
    if stage not in _STAGES:
        raise InvalidConfig(f"unknown stage {stage!r}; expected one of "
                            f"{', '.join(STAGE_ORDER)}")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with DirectoryLock(out):
        md = manifest.digest()
        existing = out / "manifest.json"
        if existing.is_file():
            if ExperimentManifest.load(existing).digest() != md:
                raise InvalidConfig(
                    "output directory belongs to a different manifest; "
                    "pass a fresh --out or rerun the full pipeline")
        else:
            manifest.save(existing)

        ledger = {"manifest_digest": md, "stages": {}}
        ledger_path = out / "stages.json"
        if ledger_path.is_file():
            with open(ledger_path) as f:
                ledger["stages"] = json.load(f).get("stages", {})

        ctx = PipelineContext(manifest, out, overrides)
        started = time.monotonic()
        try:
            written = _STAGES[stage](ctx)
        except InvalidConfig:
            raise
        except Exception as exc:
            ledger["stages"].pop(stage, None)
            _write_json(out, "stages.json", ledger)
            raise StageFailure(stage, exc) from exc
        seconds = round(time.monotonic() - started, 3)
        if ctx.overrides:
            ledger["stages"].pop(stage, None)
        else:
            outputs = {rel: _sha256_file(out / rel) for rel in sorted(written)}
            ledger["stages"][stage] = {
                "input": _input_digest(stage, md, ledger["stages"]),
                "outputs": outputs,
                "output": _canonical_digest(outputs),
                "seconds": seconds,
            }
        _write_json(out, "stages.json", ledger)
        return {"stage": stage, "seconds": seconds, "files": sorted(written)}
