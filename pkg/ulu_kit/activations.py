import math
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Optional, Tuple, Union

import numpy as np
from scipy.special import erf, expit

from .errors import InvalidSpecError

SQRT_HALF = math.sqrt(0.5)

# Self-normalizing constants (Klambauer et al.)
SELU_LAMBDA = 1.0507009873554805
SELU_ALPHA = 1.6732632423543772

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ActivationKind(Enum):
    ULU = "ulu"
    AULU = "aulu"
    RELU = "relu"
    LEAKY_RELU = "leaky_relu"
    SILU = "silu"
    SWISH = "swish"
    GELU = "gelu"
    MISH = "mish"
    ELU = "elu"
    SELU = "selu"
    TANH = "tanh"
    SIGMOID = "sigmoid"
    IDENTITY = "identity"


class Parameterization(Enum):
    """
    The two equivalent ways of writing a ULU branch:
    TANH_FORM 0.5x(tanh(ax)+1) and SIGMOID_FORM x*sigmoid(ax).
    A tanh-form coefficient a equals a sigmoid-form coefficient 2a.
    """
    TANH_FORM = "tanh"
    SIGMOID_FORM = "sigmoid"


_ARITY = {
    ActivationKind.ULU: 2,
    ActivationKind.AULU: 2,
    ActivationKind.LEAKY_RELU: 1,
    ActivationKind.SWISH: 1,
}

# Used when the text form omits the parameter list
_DEFAULT_PARAMS = {
    ActivationKind.ULU: (0.3, 0.8),
    ActivationKind.AULU: (SQRT_HALF, SQRT_HALF),
    ActivationKind.LEAKY_RELU: (0.01,),
    ActivationKind.SWISH: (1.0,),
}

# Kinds whose definition switches formula at x = 0
PIECEWISE_KINDS = frozenset({
    ActivationKind.ULU,
    ActivationKind.AULU,
    ActivationKind.RELU,
    ActivationKind.LEAKY_RELU,
    ActivationKind.SELU,
})

_TEXT_FORM = re.compile(r"^\s*([a-z_\-]+)\s*(?:\((.*)\))?\s*$")


# ---------------------------------------------------------------------------
# Elementwise kernels. Scalar entry points call these on 0-d arrays so that a
# batch evaluation is bit-identical to a loop over scalars.
# ---------------------------------------------------------------------------

def _sech2(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        c = np.cosh(z)
        return 1.0 / (c * c)


def _branch(x: np.ndarray, left, right) -> np.ndarray:
    return np.where(x < 0, left, right)


def _ulu_value(x: np.ndarray, a1: float, a2: float) -> np.ndarray:
    z = _branch(x, a1, a2) * x
    return 0.5 * x * (np.tanh(z) + 1.0)


def _ulu_dx(x: np.ndarray, a1: float, a2: float) -> np.ndarray:
    z = _branch(x, a1, a2) * x
    return 0.5 * (z * _sech2(z) + np.tanh(z) + 1.0)


def _ulu_d2x(x: np.ndarray, a1: float, a2: float) -> np.ndarray:
    a = _branch(x, a1, a2)
    z = a * x
    return a * _sech2(z) * (1.0 - z * np.tanh(z))


def _ulu_value_sigmoid(x: np.ndarray, a1: float, a2: float) -> np.ndarray:
    return x * expit(_branch(x, a1, a2) * x)


def _ulu_dx_sigmoid(x: np.ndarray, a1: float, a2: float) -> np.ndarray:
    a = _branch(x, a1, a2)
    s = expit(a * x)
    return s + a * x * s * (1.0 - s)


def _aulu_grad_beta(x: np.ndarray, beta1: float, beta2: float) -> Tuple[np.ndarray, np.ndarray]:
    # d/d(beta) of 0.5x(tanh(beta^2 x)+1) = beta * x^2 * sech^2(beta^2 x)
    beta = _branch(x, beta1, beta2)
    g = beta * x * x * _sech2(beta * beta * x)
    left = x < 0
    return np.where(left, g, 0.0), np.where(left, 0.0, g)


def _relu(x, p):
    return np.maximum(x, 0.0)


def _relu_dx(x, p):
    # right-hand derivative at the kink
    return np.where(x >= 0, 1.0, 0.0)


def _leaky_relu(x, p):
    return np.where(x >= 0, x, p[0] * x)


def _leaky_relu_dx(x, p):
    return np.where(x >= 0, 1.0, p[0])


def _silu(x, p):
    return x * expit(x)


def _silu_dx(x, p):
    s = expit(x)
    return s * (1.0 + x * (1.0 - s))


def _swish(x, p):
    return x * expit(p[0] * x)


def _swish_dx(x, p):
    s = expit(p[0] * x)
    return s + p[0] * x * s * (1.0 - s)


def _gelu(x, p):
    # exact erf form, not the tanh approximation
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def _gelu_dx(x, p):
    return 0.5 * (1.0 + erf(x * _INV_SQRT2)) + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)


def _mish(x, p):
    return x * np.tanh(np.logaddexp(0.0, x))


def _mish_dx(x, p):
    sp = np.logaddexp(0.0, x)
    return np.tanh(sp) + x * _sech2(sp) * expit(x)


def _elu(x, p):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def _elu_dx(x, p):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


def _selu(x, p):
    return SELU_LAMBDA * np.where(x > 0, x, SELU_ALPHA * np.expm1(np.minimum(x, 0.0)))


def _selu_dx(x, p):
    return SELU_LAMBDA * np.where(x >= 0, 1.0, SELU_ALPHA * np.exp(np.minimum(x, 0.0)))


def _tanh(x, p):
    return np.tanh(x)


def _tanh_dx(x, p):
    return _sech2(x)


def _sigmoid(x, p):
    return expit(x)


def _sigmoid_dx(x, p):
    s = expit(x)
    return s * (1.0 - s)


def _identity(x, p):
    return x * 1.0


def _identity_dx(x, p):
    return np.ones_like(x)


def _ulu_kernel(x, p):
    return _ulu_value(x, p[0], p[1])


def _ulu_kernel_dx(x, p):
    return _ulu_dx(x, p[0], p[1])


def _aulu_kernel(x, p):
    return _ulu_value(x, p[0] * p[0], p[1] * p[1])


def _aulu_kernel_dx(x, p):
    return _ulu_dx(x, p[0] * p[0], p[1] * p[1])


Kernel = Callable[[np.ndarray, Tuple[float, ...]], np.ndarray]

_KERNELS: Dict[ActivationKind, Tuple[Kernel, Kernel]] = {
    ActivationKind.ULU: (_ulu_kernel, _ulu_kernel_dx),
    ActivationKind.AULU: (_aulu_kernel, _aulu_kernel_dx),
    ActivationKind.RELU: (_relu, _relu_dx),
    ActivationKind.LEAKY_RELU: (_leaky_relu, _leaky_relu_dx),
    ActivationKind.SILU: (_silu, _silu_dx),
    ActivationKind.SWISH: (_swish, _swish_dx),
    ActivationKind.GELU: (_gelu, _gelu_dx),
    ActivationKind.MISH: (_mish, _mish_dx),
    ActivationKind.ELU: (_elu, _elu_dx),
    ActivationKind.SELU: (_selu, _selu_dx),
    ActivationKind.TANH: (_tanh, _tanh_dx),
    ActivationKind.SIGMOID: (_sigmoid, _sigmoid_dx),
    ActivationKind.IDENTITY: (_identity, _identity_dx),
}


def _as_float_array(xs) -> np.ndarray:
    return np.asarray(xs, dtype=np.float64)


# ---------------------------------------------------------------------------
# Domain types
# ---------------------------------------------------------------------------

@dataclass
class AdaptiveParams:
    """
    Learnable (beta1, beta2) pair of one AULU activation site.

    The branch coefficients are beta1**2 (x < 0) and beta2**2 (x >= 0), so
    they stay non-negative whatever the sign of the betas. The gradient slots
    are filled by the autodiff backward pass; `frozen` pairs are never updated
    by the optimizer.

    A pair made by from_coefficients keeps the exact coefficients it was given
    for as long as its betas are the square roots they started from, since
    sqrt(c)**2 is not always c in floating point.
    """
    beta1: float = SQRT_HALF
    beta2: float = SQRT_HALF
    grad_beta1: float = 0.0
    grad_beta2: float = 0.0
    frozen: bool = False
    pinned: Optional[Tuple[float, float]] = field(default=None, repr=False)

    def __post_init__(self):
        self.beta1 = float(self.beta1)
        self.beta2 = float(self.beta2)
        if not (math.isfinite(self.beta1) and math.isfinite(self.beta2)):
            raise InvalidSpecError(
                f"AULU betas must be finite, got beta1={self.beta1}, beta2={self.beta2}"
            )

    @classmethod
    def from_coefficients(cls, c1: float, c2: float, frozen: bool = False) -> "AdaptiveParams":
        if not (c1 >= 0 and c2 >= 0):
            raise InvalidSpecError(f"AULU coefficients must be non-negative, got ({c1}, {c2})")
        c1, c2 = float(c1), float(c2)
        return cls(math.sqrt(c1), math.sqrt(c2), frozen=frozen, pinned=(c1, c2))

    def coefficients(self) -> Tuple[float, float]:
        if self.pinned is not None:
            c1, c2 = self.pinned
            if (self.beta1, self.beta2) == (math.sqrt(c1), math.sqrt(c2)):
                return c1, c2
        return self.beta1 * self.beta1, self.beta2 * self.beta2

    def lib(self) -> float:
        """Like Inductive Bias of this site: |beta1^2 - beta2^2|"""
        c1, c2 = self.coefficients()
        return abs(c1 - c2)

    def zero_grad(self):
        self.grad_beta1 = 0.0
        self.grad_beta2 = 0.0


@dataclass(frozen=True)
class ActivationSpec:
    """
    Tagged description of a nonlinearity: a kind plus its fixed parameters.

    ULU takes (alpha1, alpha2) > 0, AULU takes the initial (beta1, beta2),
    LeakyReLU its negative slope and Swish its gamma. Every other kind takes
    no parameters.
    """
    kind: ActivationKind
    params: Tuple[float, ...] = ()

    def __post_init__(self):
        if not isinstance(self.kind, ActivationKind):
            raise InvalidSpecError(f"Unknown activation kind {self.kind!r}")

        params = tuple(float(p) for p in self.params)
        object.__setattr__(self, "params", params)

        arity = _ARITY.get(self.kind, 0)
        if len(params) != arity:
            raise InvalidSpecError(
                f"{self.kind.value} takes {arity} parameter(s), got {len(params)}: {params}"
            )
        if not all(math.isfinite(p) for p in params):
            raise InvalidSpecError(f"{self.kind.value} parameters must be finite, got {params}")
        if self.kind is ActivationKind.ULU and min(params) <= 0:
            raise InvalidSpecError(
                f"ULU requires alpha1 > 0 and alpha2 > 0, got ({params[0]}, {params[1]})"
            )

    @classmethod
    def parse(cls, text: str) -> "ActivationSpec":
        """
        Parse the canonical text form, e.g. "ulu(0.3, 0.8)", "aulu", "gelu"

        Args:
            text: Activation text; case-insensitive, whitespace around commas ignored

        Returns:
            The parsed ActivationSpec
        """
        match = _TEXT_FORM.match(text.lower())
        if not match:
            raise InvalidSpecError(f"Cannot parse activation {text!r}")

        name = match.group(1).replace("-", "_")
        try:
            kind = ActivationKind(name)
        except ValueError:
            known = ", ".join(k.value for k in ActivationKind)
            raise InvalidSpecError(f"Unknown activation {name!r}; expected one of: {known}") from None

        raw = match.group(2)
        if raw is None or not raw.strip():
            params = _DEFAULT_PARAMS.get(kind, ())
        else:
            try:
                params = tuple(float(part.strip()) for part in raw.split(","))
            except ValueError:
                raise InvalidSpecError(f"Non-numeric parameter in activation {text!r}") from None
        return cls(kind, params)

    @classmethod
    def ulu(cls, alpha1: float, alpha2: float) -> "ActivationSpec":
        return cls(ActivationKind.ULU, (alpha1, alpha2))

    @property
    def is_adaptive(self) -> bool:
        return self.kind is ActivationKind.AULU

    def initial_adaptive_params(self, frozen: bool = False) -> AdaptiveParams:
        if not self.is_adaptive:
            raise InvalidSpecError(f"{self} is not an adaptive activation")
        return AdaptiveParams(beta1=self.params[0], beta2=self.params[1], frozen=frozen)

    def value(self, xs) -> np.ndarray:
        fn, _ = _KERNELS[self.kind]
        return fn(_as_float_array(xs), self.params)

    def derivative(self, xs) -> np.ndarray:
        _, dfn = _KERNELS[self.kind]
        return dfn(_as_float_array(xs), self.params)

    def __str__(self) -> str:
        name = self.kind.value
        if not self.params:
            return name
        if self.is_adaptive and self.params == _DEFAULT_PARAMS[ActivationKind.AULU]:
            return name
        return f"{name}({','.join(repr(p) for p in self.params)})"


Activation = Union[ActivationSpec, AdaptiveParams]


# ---------------------------------------------------------------------------
# Scalar operations
# ---------------------------------------------------------------------------

def ulu_eval(x: float, alpha1: float, alpha2: float,
             form: Parameterization = Parameterization.TANH_FORM) -> float:
    """
    ULU value: 0.5x(tanh(a x)+1) with a = alpha1 for x < 0, alpha2 for x >= 0.

    Coefficients are not validated here; ActivationSpec rejects non-positive
    alphas at construction. With form=SIGMOID_FORM the coefficients are read
    as sigmoid-form values and x*sigmoid(a x) is evaluated instead.
    """
    x = np.float64(x)
    if form is Parameterization.SIGMOID_FORM:
        return float(_ulu_value_sigmoid(x, alpha1, alpha2))
    return float(_ulu_value(x, alpha1, alpha2))


def ulu_dx(x: float, alpha1: float, alpha2: float,
           form: Parameterization = Parameterization.TANH_FORM) -> float:
    """First derivative of ULU with respect to x; 0.5 at x = 0"""
    x = np.float64(x)
    if form is Parameterization.SIGMOID_FORM:
        return float(_ulu_dx_sigmoid(x, alpha1, alpha2))
    return float(_ulu_dx(x, alpha1, alpha2))


def ulu_d2x(x: float, alpha1: float, alpha2: float) -> float:
    """Second derivative of ULU; takes the alpha2 branch at x = 0"""
    return float(_ulu_d2x(np.float64(x), alpha1, alpha2))


def aulu_eval(x: float, p: AdaptiveParams) -> float:
    c1, c2 = p.coefficients()
    return float(_ulu_value(np.float64(x), c1, c2))


def aulu_dx(x: float, p: AdaptiveParams) -> float:
    c1, c2 = p.coefficients()
    return float(_ulu_dx(np.float64(x), c1, c2))


def aulu_grad_beta(x: float, p: AdaptiveParams) -> Tuple[float, float]:
    """
    Partial derivatives of AULU with respect to (beta1, beta2) at x.

    Only the branch selected by the sign of x has a nonzero sensitivity;
    both components vanish at x = 0.
    """
    g1, g2 = _aulu_grad_beta(np.float64(x), p.beta1, p.beta2)
    return float(g1), float(g2)


def reference_eval(spec: ActivationSpec, x: float) -> float:
    return float(spec.value(np.float64(x)))


def reference_dx(spec: ActivationSpec, x: float) -> float:
    """
    Analytic derivative of any library activation.

    ReLU, LeakyReLU and SELU use the right-hand derivative at x = 0.
    """
    return float(spec.derivative(np.float64(x)))


def convert_parameterization(alpha: float, from_form: Parameterization,
                             to_form: Parameterization) -> float:
    """
    Convert a branch coefficient between tanh form and sigmoid form

    Args:
        alpha: Positive coefficient expressed in from_form
        from_form: Parameterization alpha is written in
        to_form: Parameterization to express it in

    Returns:
        The equivalent coefficient (exact: multiplication or division by 2)
    """
    if not (math.isfinite(alpha) and alpha > 0):
        raise InvalidSpecError(f"Branch coefficient must be positive and finite, got {alpha}")
    if from_form is to_form:
        return alpha
    if from_form is Parameterization.TANH_FORM:
        return alpha * 2.0
    return alpha / 2.0


# ---------------------------------------------------------------------------
# Array operations
# ---------------------------------------------------------------------------

def batch_eval(activation: Activation, xs) -> np.ndarray:
    """
    Apply an activation elementwise, preserving shape

    Args:
        activation: A fixed ActivationSpec or the AdaptiveParams of an AULU site
        xs: Array-like of inputs

    Returns:
        float64 array of the same shape as xs
    """
    xs = _as_float_array(xs)
    if isinstance(activation, AdaptiveParams):
        c1, c2 = activation.coefficients()
        return _ulu_value(xs, c1, c2)
    return activation.value(xs)


def batch_dx(activation: Activation, xs) -> np.ndarray:
    xs = _as_float_array(xs)
    if isinstance(activation, AdaptiveParams):
        c1, c2 = activation.coefficients()
        return _ulu_dx(xs, c1, c2)
    return activation.derivative(xs)


def batch_grad_beta(p: AdaptiveParams, xs) -> Tuple[np.ndarray, np.ndarray]:
    return _aulu_grad_beta(_as_float_array(xs), p.beta1, p.beta2)


def batch_d2x(alpha1: float, alpha2: float, xs) -> np.ndarray:
    return _ulu_d2x(_as_float_array(xs), alpha1, alpha2)


def batch_ulu(alpha1: float, alpha2: float, xs,
              form: Parameterization = Parameterization.TANH_FORM) -> np.ndarray:
    """ulu_eval over an array, with the coefficients read in the given form"""
    xs = _as_float_array(xs)
    if form is Parameterization.SIGMOID_FORM:
        return _ulu_value_sigmoid(xs, alpha1, alpha2)
    return _ulu_value(xs, alpha1, alpha2)


def batch_ulu_dx(alpha1: float, alpha2: float, xs,
                 form: Parameterization = Parameterization.TANH_FORM) -> np.ndarray:
    xs = _as_float_array(xs)
    if form is Parameterization.SIGMOID_FORM:
        return _ulu_dx_sigmoid(xs, alpha1, alpha2)
    return _ulu_dx(xs, alpha1, alpha2)


# Activations exercised by gradient checks and the compare table defaults
LIBRARY_SPECS = (
    "ulu(0.3,0.8)",
    "ulu(0.5,0.5)",
    "ulu(0.55,0.8)",
    "aulu(0.8,1.1)",
    "relu",
    "leaky_relu(0.01)",
    "silu",
    "swish(1.0)",
    "gelu",
    "mish",
    "elu",
    "selu",
    "tanh",
    "sigmoid",
)
