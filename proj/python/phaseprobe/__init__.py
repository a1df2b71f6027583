"""Python access to the phaseprobe core."""

import json

from . import _phaseprobe
from ._phaseprobe import (
    PhaseprobeError,
    bh_fdr,
    candidate_count,
    cluster_bootstrap,
    fit_condition_ols,
    read_store_layer,
    tree_distances,
)

__all__ = [
    "PhaseprobeError",
    "bh_fdr",
    "candidate_count",
    "cluster_bootstrap",
    "default_lexicon",
    "fit_condition_ols",
    "generate_stimuli",
    "read_store_layer",
    "run",
    "tree_distances",
    "verify",
    "write_fixture",
]


def _lines(text):
    return [json.loads(line) for line in text.splitlines() if line]


def default_lexicon(subject_mode="disjoint"):
    return json.loads(_phaseprobe.default_lexicon(subject_mode))


def generate_stimuli(n_items, seed=0, lexicon=None, subject_mode="disjoint"):
    """Stimulus records, three per item. `lexicon` is a dict in the lexicon file format."""
    lex = None if lexicon is None else json.dumps(lexicon)
    return _lines(_phaseprobe.generate_stimuli_jsonl(n_items, seed, lex, subject_mode))


def verify(stimuli, conllu):
    """Invariance verdicts for stimulus records against CoNLL-U text."""
    text = "".join(json.dumps(s) + "\n" for s in stimuli)
    return _lines(_phaseprobe.verify_jsonl(text, conllu))


def write_fixture(directory, n_items=60, layers=4, seed=7):
    """Writes a synthetic run under `directory` and returns its config."""
    return json.loads(_phaseprobe.write_fixture(str(directory), n_items, layers, seed))


def run(config, stages=()):
    """Runs pipeline stages (all when empty) and returns one dict per stage."""
    return [json.loads(r) for r in _phaseprobe.run_stages(str(config), list(stages))]
