"""Experiment orchestration: manifests, pipeline stages, trace archives,
report emission, and the command-line entry point."""

from .archive import TraceStore, export_traces, import_traces, paired_stores

__all__ = [
    "TraceStore",
    "export_traces",
    "import_traces",
    "paired_stores",
    "main",
]


def main(argv=None):
    # Imported lazily so `quantlens.cli.archive` stays usable without the
    # full orchestration stack loaded.
    from .main import main as entry
    return entry(argv)
