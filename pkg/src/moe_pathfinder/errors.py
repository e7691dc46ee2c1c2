"""Error types shared across the pipeline.

FormatError covers anything wrong with bytes on disk (bad magic, truncated
payload, manifest/blob shape disagreement).  InvariantError covers violations
of runtime contracts (fully pruned layer, unreachable sparsity target, failed
selfcheck).  The CLI maps them to distinct exit codes.
"""


class FormatError(Exception):
    """A file is malformed or inconsistent with its manifest."""


class InvariantError(Exception):
    """A runtime invariant or precondition was violated."""
