"""Node-tuple marking GNNs with a Q-learning tuple search.

Subpackages: ``graph`` (graphs, marking, generators), ``wl`` (1-WL oracle and
cycle counts), ``nn`` (autodiff, layers, checkpoints), ``subgraph``
(marked-graph encoders), ``agent`` (Deep-Q search), ``training`` (ORD, SIMUL,
PRE loops and evaluation) and ``cli``.
"""
__version__ = "0.1.0"
