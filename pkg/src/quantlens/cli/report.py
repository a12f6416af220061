"""Plot-data export: one CSV per figure, plus an index with a digest.

Reads a finished (or partial) experiment tree and writes report/ next to
the analysis directories. Every figure file is a flat CSV so any plotting
tool can consume it; the first line is a comment carrying the manifest
digest so a stray file can be traced back to its run.

A missing analysis is not an error: its figures are listed under
"missing" in index.json and the rest are written normally. The index's
report_digest hashes the present figure files (names and bytes, sorted),
so two runs of the same manifest produce the same digest.
"""

import csv
import hashlib
import io
import json
import warnings
from pathlib import Path

from ..errors import InvalidConfig
from .manifest import ExperimentManifest

FIGURES = (
    ("cliff", "fig01_cliff.csv"),
    ("ranks", "fig02_ranks.csv"),
    ("lens", "fig03_lens.csv"),
    ("repair_grids", "fig04_grids.csv"),
    ("attn_entropy", "fig05_attn_entropy.csv"),
    ("attn_jsd", "fig06_attn_jsd.csv"),
    ("gate_flips", "fig07_gate_flips.csv"),
    ("expert_jaccard", "fig08_expert_jaccard.csv"),
    ("value_cosine", "fig09_value_cosine.csv"),
    ("cka", "fig10_cka.csv"),
    ("subspace", "fig11_subspace.csv"),
    ("sweeps", "fig12_sweeps.csv"),
)

HEADERS = {
    "cliff": ["model", "bits", "primary", "acc_any", "acc_majority",
              "acc_all"],
    "ranks": ["model", "bucket", "count"],
    "lens": ["model", "fact_id", "layer", "prob", "rank", "entropy_bits"],
    "repair_grids": ["kind", "model", "layer", "group", "effect", "stderr",
                     "n"],
    "attn_entropy": ["model", "layer", "mean", "std", "n"],
    "attn_jsd": ["pair", "layer", "mean", "std", "n"],
    "gate_flips": ["pair", "layer", "mean", "std", "n"],
    "expert_jaccard": ["pair", "layer", "mean", "std", "n"],
    "value_cosine": ["pair", "layer", "mean", "std", "n"],
    "cka": ["pair", "row_layer", "col_layer", "value"],
    "subspace": ["pair", "metric", "layer", "mean", "std", "n"],
    "sweeps": ["sweep", "value", "score"],
}

# fp weights are float32; the column exists so the cliff plots on a
# numeric bits axis with the baseline at the far right.
FP_BITS = 32


def _model_bits(name):
    return FP_BITS if name == "fp" else int(name[1:])


def _model_order(names):
    return sorted(names, key=lambda n: (n != "fp", -_model_bits(n)))


def _pair_order(names):
    return sorted(names, key=lambda n: -_model_bits(n))


def _load(root, relpath):
    path = root / relpath
    if not path.is_file():
        return None
    try:
        with open(path) as f:
            return json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        warnings.warn(f"skipping unreadable {relpath}: {e}", RuntimeWarning)
        return None


def _curve_rows(tag, curve):
    means, stds, counts = curve["means"], curve["stds"], curve["counts"]
    return [[tag, l, means[l], stds[l], counts[l]]
            for l in range(len(means))]


# -- one builder per figure, each returning a list of rows or None ----------


def _fig_cliff(root):
    doc = _load(root, "probes/accuracy.json")
    if doc is None:
        return None
    rows = []
    for name in _model_order(doc["models"]):
        m = doc["models"][name]
        rows.append([name, _model_bits(name), m["primary"], m["acc_any"],
                     m["acc_majority"], m["acc_all"]])
    return rows


def _fig_ranks(root):
    doc = _load(root, "probes/ranks.json")
    if doc is None:
        return None
    return [[name, bucket, doc["models"][name][bucket]]
            for name in _model_order(doc["models"])
            for bucket in doc["buckets"]]


def _fig_lens(root):
    doc = _load(root, "probes/lens.json")
    if doc is None:
        return None
    rows = []
    for name in _model_order(doc["models"]):
        per_fact = doc["models"][name]
        for fact in doc["facts"]:
            for r in per_fact[str(fact)]:
                rows.append([name, fact, r["layer"], r["prob"], r["rank"],
                             r["entropy_bits"]])
    return rows


def _fig_repair_grids(root):
    sources = [
        ("repair_self", "fp", "causal/repair_self.json", "grid"),
        ("repair", "q4", "causal/repair_q4.json", "grid"),
        ("repair", "q2", "causal/repair_q2.json", "grid"),
        ("ablation", "fp", "causal/ablation_fp.json", "grid"),
        ("ablation", "q2", "causal/ablation_q2.json", "grid"),
    ]
    rows, seen = [], False
    for kind, model, relpath, key in sources:
        doc = _load(root, relpath)
        if doc is None:
            continue
        seen = True
        for cell in doc[key]["cells"]:
            rows.append([kind, model, cell["layer"], cell["group"],
                         cell["effect"], cell["stderr"], cell["n"]])
        for layer, effect in sorted(doc.get("readout_column", {}).items(),
                                    key=lambda kv: int(kv[0])):
            rows.append(["repair_readout", model, int(layer), "last_token",
                         effect, "", ""])
    return rows if seen else None


def _fig_attn_entropy(root):
    doc = _load(root, "diagnostics/profiles.json")
    if doc is None:
        return None
    rows = []
    for name in _model_order(doc["attn_entropy"]):
        rows.extend(_curve_rows(name, doc["attn_entropy"][name]))
    return rows


def _profile_fig(metric):
    def build(root):
        doc = _load(root, "diagnostics/profiles.json")
        if doc is None:
            return None
        rows = []
        for name in _pair_order(doc["pairs"]):
            rows.extend(_curve_rows(f"fp_vs_{name}",
                                    doc["pairs"][name][metric]))
        return rows
    return build


def _fig_cka(root):
    doc = _load(root, "diagnostics/cka.json")
    if doc is None:
        return None
    rows = []
    for name in _pair_order(doc["pairs"]):
        values = doc["pairs"][name]["values"]
        for i, row in enumerate(values):
            for j, v in enumerate(row):
                rows.append([f"fp_vs_{name}", i, j, v])
    return rows


def _fig_subspace(root):
    doc = _load(root, "diagnostics/subspace.json")
    if doc is None:
        return None
    rows = []
    for name in _pair_order(doc["pairs"]):
        for metric in ("subspace", "error_alignment"):
            curve = doc["pairs"][name][metric]
            for l in range(len(curve["means"])):
                rows.append([f"fp_vs_{name}", metric, l, curve["means"][l],
                             curve["stds"][l], curve["counts"][l]])
    return rows


def _fig_sweeps(root):
    rows, seen = [], False

    def add_sweep(label, doc):
        nonlocal seen
        if doc is None:
            return
        seen = True
        sweep = doc["sweep"]
        rows.extend([label, v, s]
                    for v, s in zip(sweep["values"], sweep["scores"]))

    add_sweep("domino", _load(root, "interventions/domino.json"))
    injections = sorted((root / "interventions").glob("injection_q*.json"),
                        key=lambda p: -int(p.stem.split("_q")[1]))
    for path in injections:
        add_sweep(path.stem, _load(root, f"interventions/{path.name}"))
    add_sweep("component", _load(root, "interventions/component.json"))

    repair = _load(root, "interventions/repair.json")
    if repair is not None:
        seen = True
        label = f"repair_q{repair['bits']}"
        rows.append([label, "plain", repair["plain"]])
        rows.append([label, "protect", repair["protect"]])
        for alpha in sorted(repair["amplified"], key=float):
            rows.append([label, f"alpha_{alpha}",
                         repair["amplified"][alpha]])

    battery = _load(root, "interventions/battery.json")
    if battery is not None:
        seen = True
        for name in _pair_order(battery["runs"]):
            run = battery["runs"][name]
            rows.extend([f"battery_{name}", v, s]
                        for v, s in zip(run["values"], run["scores"]))
    return rows if seen else None


_BUILDERS = {
    "cliff": _fig_cliff,
    "ranks": _fig_ranks,
    "lens": _fig_lens,
    "repair_grids": _fig_repair_grids,
    "attn_entropy": _fig_attn_entropy,
    "attn_jsd": _profile_fig("attn_jsd"),
    "gate_flips": _profile_fig("gate_sign_flip"),
    "expert_jaccard": _profile_fig("expert_jaccard"),
    "value_cosine": _profile_fig("value_cosine"),
    "cka": _fig_cka,
    "subspace": _fig_subspace,
    "sweeps": _fig_sweeps,
}


def _render_csv(name, rows, manifest_digest):
    buf = io.StringIO()
    buf.write(f"# manifest_digest={manifest_digest}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(HEADERS[name])
    writer.writerows(rows)
    return buf.getvalue()


def build_report(results_dir, report_dir=None):
    """Write the figure CSVs and index.json; returns the index document.

    results_dir is an experiment tree as written by the pipeline (or
    imported from an archive). report_dir defaults to results_dir/report.
    """
    root = Path(results_dir)
    out = Path(report_dir) if report_dir else root / "report"
    out.mkdir(parents=True, exist_ok=True)

    md = "unknown"
    if (root / "manifest.json").is_file():
        try:
            md = ExperimentManifest.load(root / "manifest.json").digest()
        except InvalidConfig as e:
            warnings.warn(f"cannot digest manifest: {e}", RuntimeWarning)

    figures, missing = {}, []
    for name, filename in FIGURES:
        rows = _BUILDERS[name](root)
        if rows is None:
            missing.append(name)
            continue
        text = _render_csv(name, rows, md)
        with open(out / filename, "w") as f:
            f.write(text)
        figures[name] = filename

    if not figures:
        warnings.warn(f"no analysis files under {root}; report is empty",
                      RuntimeWarning)

    digest = hashlib.sha256()
    for name, filename in FIGURES:
        if name in figures:
            digest.update(filename.encode() + b"\0")
            digest.update((out / filename).read_bytes() + b"\0")

    index = {
        "manifest_digest": md,
        "figures": figures,
        "missing": missing,
        "report_digest": digest.hexdigest(),
    }
    with open(out / "index.json", "w") as f:
        json.dump(index, f, indent=2, sort_keys=True)
        f.write("\n")
    return index
