"""Parameter-shared pre-norm transformers read as Euler discretisations of an ODE.

Submodules: ``numerics`` (autodiff primitives), ``euler`` (integrator and error
theory), ``model``, ``training``, ``search``, ``early_exit``, ``diagnostics``,
``checkpoint``, ``data`` and ``cli``.
"""
__version__ = "0.1.0"
