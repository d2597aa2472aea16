"""Federated averaging simulator with adaptive federated dropout.

Modules: ``model`` (network engine), ``submodel`` (unit selection and
slicing), ``control`` (dropout controllers), ``compression`` (codecs),
``netsim`` (simulated clock), ``data`` (synthetic federated data),
``federation`` (round loop) and ``cli``.
"""

__version__ = "0.1.0"
