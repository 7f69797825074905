"""Dense-sparse-dense (DSD) training for small fully connected networks.

Modules, bottom up: ``autodiff`` (tape-based reverse mode), ``network``,
``optim``, ``pruning``, ``data``, ``flow`` (phase orchestration and the LLR
control), ``stats`` (multi-seed harness, Welch t-test), ``reporting``
(histograms and audits), ``checkpoint``, ``config`` and ``cli``.
"""

__version__ = "0.1.0"
