"""Differentiable parameter learning for hydrologic models, with an SCE-UA baseline.

Submodules: ``autodiff`` (tape AD), ``nets`` (LSTM / MLP, gA / gZ heads),
``hbv`` and ``vic_lite`` (process models), ``surrogate`` (LSTM emulator of
VIC-lite), ``dpl_train`` (end-to-end training), ``sceua`` (calibration
baseline), ``metrics``, ``dataland`` (synthetic data and CSV I/O),
``experiments`` and ``cli``.
"""

__version__ = "0.1.0"
