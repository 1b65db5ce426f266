"""Global iterative structured pruning on a tiny byte-level transformer.

Configs are plain dicts with the same keys as the CLI's JSON config files;
missing keys take their defaults.
"""

import json

from . import _gisp
from ._gisp import ConstraintError, Error, NumericError, UsageError

__version__ = "0.1.0"
__all__ = [
    "ConstraintError",
    "Error",
    "NumericError",
    "UsageError",
    "canonical_trace",
    "checkpoint_info",
    "default_config",
    "effective_config",
    "evaluate",
    "make_data",
    "prune",
    "reconstruct",
    "sparsity_profile",
    "sweep",
    "trace_check",
    "train",
]


def _doc(config):
    return json.dumps(config or {})


def default_config():
    return json.loads(_gisp.default_config())


def effective_config(config=None):
    """The config with every default filled in; raises UsageError if invalid."""
    return json.loads(_gisp.effective_config(_doc(config)))


def make_data(out_dir, corpus_bytes=1_000_000, qa_items=600, seed=0):
    _gisp.make_data(str(out_dir), corpus_bytes, qa_items, seed)


def train(config, out):
    """Trains the dense model, writes the checkpoint and its manifest."""
    return json.loads(_gisp.train(_doc(config), str(out)))


def prune(config, checkpoint, method="gisp", ratio=None, seed=0, milestones=(), out_dir=""):
    """Prunes a dense checkpoint with gisp, oneshot, wanda_sp or magnitude.

    The result holds the masks, the trace text (gisp and oneshot) and the
    pruned fraction. Files are written only when out_dir is given.
    """
    return json.loads(
        _gisp.prune(_doc(config), str(checkpoint), method, ratio, seed, list(milestones), str(out_dir))
    )


def evaluate(config, checkpoint, trace=None, iteration=None, ratio=None):
    """Perplexity and QA accuracy of a checkpoint, or of a trace point of a dense checkpoint."""
    return json.loads(_gisp.evaluate(_doc(config), str(checkpoint), str(trace or ""), iteration, ratio))


def sweep(config, checkpoint, methods, ratios, seeds=(), once_for_all=False, out_dir=""):
    return json.loads(
        _gisp.sweep(_doc(config), str(checkpoint), list(methods), list(ratios), list(seeds), once_for_all, str(out_dir))
    )


def trace_check(path):
    """(nested, violation) for a trace file."""
    return _gisp.trace_check(str(path))


def sparsity_profile(trace, checkpoint, iteration=None, ratio=None):
    return json.loads(_gisp.sparsity_profile(str(trace), str(checkpoint), iteration, ratio))


def reconstruct(trace, checkpoint, out, iteration=None, ratio=None):
    """Writes the compacted model at a trace point; returns the iteration used."""
    return _gisp.reconstruct(str(trace), str(checkpoint), str(out), iteration, ratio)


def canonical_trace(text):
    return _gisp.canonical_trace(text)


def checkpoint_info(path):
    return json.loads(_gisp.checkpoint_info(str(path)))
