"""Binary trace archives: captured activations that outlive the model.

Same container as checkpoints (magic, uint64 header length, JSON header,
64-byte-aligned float32 payload) under a different magic, so one reader
skeleton handles both. An archive holds the traces of one evaluation run:
per prompt, the tensors of whichever capture sites were requested, plus
the prompt tokens and run metadata. Imported stores feed the diagnostics
functions directly in place of a live model.
"""

import json
import os
import struct
from dataclasses import dataclass

import numpy as np

from ..errors import AlignmentError, CorruptArchive, InvalidInput
from ..model import CAPTURE_SITES, ForwardTrace

ARCHIVE_MAGIC = b"QLTR1"
_ALIGN = 64

# Sites that may appear in an archive. final_hidden is always captured by
# collect_traces, so it is storable too.
STORABLE_SITES = tuple(sorted(set(CAPTURE_SITES) | {"logits", "final_hidden"}))


def _align(n):
    return (n + _ALIGN - 1) // _ALIGN * _ALIGN


@dataclass
class TraceStore:
    """Ordered, immutable bag of per-prompt traces from one run."""

    prompt_ids: tuple
    sites: tuple
    traces: tuple              # ForwardTrace per prompt, same order
    tokens: dict               # prompt_id -> tuple of token ids
    meta: dict

    def __len__(self):
        return len(self.prompt_ids)

    def get(self, prompt_id):
        try:
            return self.traces[self.prompt_ids.index(prompt_id)]
        except ValueError:
            raise InvalidInput(f"prompt {prompt_id!r} not in store") from None


def paired_stores(a, b):
    """Traces of two stores aligned prompt-for-prompt. Stores from
    different evaluation runs do not silently zip together."""
    if a.prompt_ids != b.prompt_ids:
        only_a = set(a.prompt_ids) - set(b.prompt_ids)
        only_b = set(b.prompt_ids) - set(a.prompt_ids)
        raise AlignmentError(
            f"stores cover different prompts ({len(only_a)} unmatched on one "
            f"side, {len(only_b)} on the other)" if only_a or only_b else
            "stores order their prompts differently")
    return list(a.traces), list(b.traces)


def export_traces(path, traces, prompt_ids, sites, tokens=None, meta=None):
    """Write one archive; returns the byte size. Every trace must carry
    every requested site."""
    traces = list(traces)
    prompt_ids = [str(p) for p in prompt_ids]
    if len(traces) != len(prompt_ids):
        raise InvalidInput(
            f"{len(traces)} traces but {len(prompt_ids)} prompt ids")
    if not traces:
        raise InvalidInput("refusing to write an empty archive")
    if len(set(prompt_ids)) != len(prompt_ids):
        raise InvalidInput("duplicate prompt ids")
    sites = tuple(sites)
    for s in sites:
        if s not in STORABLE_SITES:
            raise InvalidInput(f"site {s!r} is not storable")
    tokens = {} if tokens is None else {str(k): list(v)
                                        for k, v in tokens.items()}

    entries, blobs = [], []
    offset = 0
    for pid, trace in zip(prompt_ids, traces):
        for site in sites:
            arr = np.ascontiguousarray(trace.require(site),
                                       dtype=np.float32)
            blob = arr.tobytes()
            entries.append({"name": f"{pid}/{site}",
                            "shape": list(arr.shape),
                            "offset": offset, "length": len(blob)})
            blobs.append(blob)
            offset = _align(offset + len(blob))
    header = json.dumps({
        "prompt_ids": prompt_ids,
        "sites": list(sites),
        "tokens": tokens,
        "meta": dict(meta or {}),
        "tensors": entries,
    }, sort_keys=True).encode()
    base = _align(len(ARCHIVE_MAGIC) + 8 + len(header))
    with open(path, "wb") as f:
        f.write(ARCHIVE_MAGIC)
        f.write(struct.pack("<Q", len(header)))
        f.write(header)
        f.write(b"\0" * (base - f.tell()))
        for entry, blob in zip(entries, blobs):
            f.seek(base + entry["offset"])
            f.write(blob)
    return os.path.getsize(path)


def import_traces(path):
    """Read an archive back into a TraceStore, verifying the index."""
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise CorruptArchive(f"cannot read {path}: {e}") from e
    if data[:len(ARCHIVE_MAGIC)] != ARCHIVE_MAGIC:
        raise CorruptArchive(f"{path}: bad magic")
    try:
        (hlen,) = struct.unpack_from("<Q", data, len(ARCHIVE_MAGIC))
        hstart = len(ARCHIVE_MAGIC) + 8
        header = json.loads(data[hstart:hstart + hlen])
        prompt_ids = [str(p) for p in header["prompt_ids"]]
        sites = tuple(header["sites"])
        index = header["tensors"]
    except (struct.error, ValueError, KeyError, TypeError) as e:
        raise CorruptArchive(f"{path}: unreadable header: {e}") from e
    base = _align(hstart + hlen)

    spans = []
    arrays = {}
    for entry in index:
        try:
            name = entry["name"]
            shape = tuple(int(s) for s in entry["shape"])
            start, length = int(entry["offset"]), int(entry["length"])
        except (KeyError, TypeError, ValueError) as e:
            raise CorruptArchive(f"{path}: malformed index entry: {e}") from e
        count = int(np.prod(shape)) if shape else 1
        if length != count * 4:
            raise CorruptArchive(
                f"{path}: {name} declares shape {shape} but {length} bytes")
        if base + start + length > len(data):
            raise CorruptArchive(f"{path}: truncated tensor {name}")
        spans.append((start, start + length, name))
        arrays[name] = np.frombuffer(
            data, dtype="<f4", count=count,
            offset=base + start).reshape(shape).copy()
    spans.sort()
    for (s0, e0, n0), (s1, _, n1) in zip(spans, spans[1:]):
        if s1 < e0:
            raise CorruptArchive(
                f"{path}: index entries {n0} and {n1} overlap")

    traces = []
    for pid in prompt_ids:
        fields = {}
        for site in sites:
            key = f"{pid}/{site}"
            if key not in arrays:
                raise CorruptArchive(f"{path}: missing tensor {key}")
            fields[site] = arrays[key]
        traces.append(ForwardTrace(**fields))
    tokens = {str(k): tuple(v) for k, v in header.get("tokens", {}).items()}
    return TraceStore(prompt_ids=tuple(prompt_ids), sites=sites,
                      traces=tuple(traces), tokens=tokens,
                      meta=header.get("meta", {}))
