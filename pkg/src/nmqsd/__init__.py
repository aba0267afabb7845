"""Quantum-trajectory engine for Markovian and non-Markovian state diffusion.

Subpackages:

- ``linalg``:     small dense complex matrix/vector helpers
- ``kernel``:     exponential-sum bath kernels, memory time, kernel fitting
- ``noise``:      exact colored-noise generation and covariance checks
- ``models``:     model presets (driven Mg+ three-level ion, verification models)
- ``propagator``: the colored-noise propagator equations and trajectory runner
- ``markov``:     Lindblad master equation and diffusive unraveling
- ``ensemble``:   deterministic parallel Monte Carlo driver
- ``analysis``:   signal histogram, lineshape fits, peak-area ratio
- ``fewmode``:    brute-force system-plus-modes reference dynamics
- ``cli``:        the ``nmqsd`` command-line interface
"""

__version__ = "0.1.0"
