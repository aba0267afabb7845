"""Model presets: the driven three-level Mg+ ion and small verification models.

All Mg+ quantities live in the scaled time unit in which the spontaneous
decay rate out of the excited bright state is 1e-3 per unit.  Basis
ordering is (1, 2, 3) -> indices (0, 1, 2): 1 is the driven ground
state, 2 the fluorescing excited state (together the bright manifold),
3 the dark shelf state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernel as kernelmod
from .kernel import KernelTerm, MemoryKernel, memory_time, mg24_kernel
from .linalg import cmatrix, ketbra

__all__ = [
    "Channel",
    "Mg24Params",
    "ModelSpec",
    "build_dephasing",
    "build_mg24",
    "build_rabi",
    "load_model",
    "save_model",
]


@dataclass(frozen=True)
class Channel:
    """One coupling operator with its emission (and optional absorption) kernel."""

    coupling: np.ndarray
    minus_kernel: MemoryKernel
    plus_kernel: MemoryKernel | None = None

    def __post_init__(self):
        object.__setattr__(self, "coupling", cmatrix(self.coupling))

    @property
    def dim(self) -> int:
        return self.coupling.shape[0]


@dataclass(frozen=True)
class ModelSpec:
    """Subsystem Hamiltonian plus coupling channels; immutable and shareable."""

    dim: int
    hamiltonian: np.ndarray
    channels: tuple[Channel, ...]
    label: str = "custom"
    bright_states: tuple[int, ...] = (0, 1)
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        h = cmatrix(self.hamiltonian)
        if h.shape[0] != self.dim:
            raise ValueError(f"Hamiltonian dim {h.shape[0]} != model dim {self.dim}")
        if np.max(np.abs(h - h.conj().T)) > 1e-12:
            raise ValueError("Hamiltonian must be Hermitian")
        for ch in self.channels:
            if ch.dim != self.dim:
                raise ValueError("channel dimension does not match model dimension")
        if any(i < 0 or i >= self.dim for i in self.bright_states):
            raise ValueError("bright state index out of range")
        object.__setattr__(self, "hamiltonian", h)
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "bright_states", tuple(self.bright_states))


@dataclass(frozen=True)
class Mg24Params:
    """Physical inputs of the three-level Mg+ model and its derived rates.

    rabi:        laser Rabi frequency of the 1-2 transition.
    gamma:       spontaneous decay rate of state 2 (1e-3 by definition of
                 the scaled time unit).
    zeeman:      Zeeman splitting entering the shelving rates.
    lambda_det:  photodetector coupling; defaults to 0.22/sqrt(tau).
    kernel:      common bath kernel of all four channels.
    tau:         bath memory time; computed from the kernel when None.
    """

    rabi: float = 2.0
    gamma: float = 1e-3
    zeeman: float = 12.1
    lambda_det: float | None = None
    kernel: MemoryKernel | None = None
    tau: float | None = None

    def resolved(self) -> "Mg24Params":
        kern = self.kernel if self.kernel is not None else mg24_kernel()
        tau = self.tau if self.tau is not None else memory_time(kern)
        lam = self.lambda_det if self.lambda_det is not None else 0.22 / math.sqrt(tau)
        return replace(self, kernel=kern, tau=tau, lambda_det=lam)

    @property
    def rate_out_of_dark(self) -> float:
        """R_minus = 8 Omega^2 gamma / (9 alpha^2)."""
        return 8.0 * self.rabi**2 * self.gamma / (9.0 * self.zeeman**2)

    @property
    def rate_into_dark(self) -> float:
        """R_plus; exactly R_minus / 16 by the two rate formulas."""
        return self.rate_out_of_dark / 16.0


def build_mg24(params: Mg24Params | None = None, **overrides) -> ModelSpec:
    """Three-level intermittent-fluorescence model with four channels.

    H = (Omega/2)(|1><2| + |2><1|); channels: spontaneous emission
    2 -> 1, dark-state refill 3 -> 1, shelving 1 -> 3, and a diagonal
    photodetector coupling |1><1| - |3><3|.  Channel strengths are set
    so the Markovian limit reproduces the target incoherent rates:
    lambda_12 = sqrt(gamma/tau), lambda_13 = sqrt(R_minus/tau),
    lambda_31 = sqrt(R_plus/tau).
    """
    if params is not None and overrides:
        raise ValueError("pass either a Mg24Params or keyword overrides, not both")
    p = (params if params is not None else Mg24Params(**overrides)).resolved()
    if p.tau <= 0.0 or p.gamma <= 0.0:
        raise ValueError("tau and gamma must be > 0")
    if p.zeeman == 0.0:
        raise ValueError("zeeman splitting must be nonzero")
    d = 3
    h = (p.rabi / 2.0) * (ketbra(d, 0, 1) + ketbra(d, 1, 0))
    lam12 = math.sqrt(p.gamma / p.tau)
    lam13 = math.sqrt(p.rate_out_of_dark / p.tau)
    lam31 = math.sqrt(p.rate_into_dark / p.tau)
    channels = (
        Channel(lam12 * ketbra(d, 0, 1), p.kernel),
        Channel(lam13 * ketbra(d, 0, 2), p.kernel),
        Channel(lam31 * ketbra(d, 2, 0), p.kernel),
        Channel(p.lambda_det * (ketbra(d, 0, 0) - ketbra(d, 2, 2)), p.kernel),
    )
    record = {
        "rabi": p.rabi, "gamma": p.gamma, "zeeman": p.zeeman,
        "lambda_12": lam12, "lambda_13": lam13, "lambda_31": lam31,
        "lambda_det": p.lambda_det, "tau": p.tau,
        "rate_out_of_dark": p.rate_out_of_dark, "rate_into_dark": p.rate_into_dark,
    }
    return ModelSpec(dim=d, hamiltonian=h, channels=channels, label="mg24",
                     bright_states=(0, 1), params=record)


def build_rabi(omega: float, dim: int = 2) -> ModelSpec:
    """Closed driven two-level system (no channels); analytic period 2 pi / omega."""
    h = (omega / 2.0) * (ketbra(dim, 0, 1) + ketbra(dim, 1, 0))
    return ModelSpec(dim=dim, hamiltonian=h, channels=(), label="rabi",
                     bright_states=tuple(range(min(2, dim))), params={"rabi": omega})


def build_dephasing(omega0: float, kernel: MemoryKernel) -> ModelSpec:
    """Two-level pure dephasing: H = (omega0/2) sigma_z, one Hermitian channel sigma_z."""
    d = 2
    sz = ketbra(d, 0, 0) - ketbra(d, 1, 1)
    h = (omega0 / 2.0) * sz
    return ModelSpec(dim=d, hamiltonian=h, channels=(Channel(sz, kernel),),
                     label="dephasing", bright_states=(0,), params={"omega0": omega0})


# ---------------------------------------------------------------------------
# model config files (flat "key = value" text)
# ---------------------------------------------------------------------------

_FLOAT_KEYS = {
    "mg24": ("rabi", "gamma", "zeeman", "lambda_det", "tau"),
    "rabi": ("rabi",),
    "dephasing": ("omega0",),
}


def save_model(model: ModelSpec, path) -> None:
    """Write a preset model back to a config file (kernel terms inline)."""
    if model.label not in _FLOAT_KEYS:
        raise ValueError(f"only preset models can be serialized, got {model.label!r}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"model = {model.label}\n")
        for key in _FLOAT_KEYS[model.label]:
            if key in model.params:
                fh.write(f"{key} = {model.params[key]!r}\n")
        kernels = {id(ch.minus_kernel): ch.minus_kernel for ch in model.channels}
        if len(kernels) > 1:
            raise ValueError("config files support a single shared kernel")
        for kern in kernels.values():
            for term in kern.terms:
                fh.write(f"kernel_term = {term.amplitude!r} {term.decay!r} {term.frequency!r}\n")


def load_model(path) -> ModelSpec:
    """Rebuild a preset model from a config file."""
    keys: dict[str, str] = {}
    terms: list[KernelTerm] = []
    kernel_file = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            if key == "kernel_term":
                fields = value.split()
                if len(fields) != 3:
                    raise ValueError(f"{path}:{lineno}: kernel_term needs 'A gamma omega'")
                terms.append(KernelTerm(*(float(f) for f in fields)))
            elif key == "kernel_file":
                kernel_file = value
            else:
                keys[key] = value
    name = keys.pop("model", None)
    if name not in _FLOAT_KEYS:
        raise ValueError(f"{path}: missing or unknown model preset {name!r}")
    floats = {}
    for key, value in keys.items():
        if key not in _FLOAT_KEYS[name]:
            raise ValueError(f"{path}: unknown key {key!r} for model {name!r}")
        floats[key] = float(value)
    kern = None
    if terms:
        kern = MemoryKernel(tuple(terms))
    elif kernel_file is not None:
        kern = kernelmod.load_kernel(kernel_file)
    if name == "mg24":
        return build_mg24(Mg24Params(kernel=kern, **floats))
    if name == "rabi":
        return build_rabi(floats.get("rabi", 2.0))
    if kern is None:
        raise ValueError(f"{path}: dephasing model requires kernel terms or kernel_file")
    return build_dephasing(floats.get("omega0", 0.0), kern)
