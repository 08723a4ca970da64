"""Exception types raised across the package."""


class PoleError(ZeroDivisionError):
    """A closure was evaluated at (or within ``eps_pole`` of) its singularity."""

    def __init__(self, R, pole):
        self.R = R
        self.pole = pole
        super().__init__(f"closure evaluated at its pole R={pole!r} (got R={R!r})")


class ZeroShearError(ZeroDivisionError):
    """Richardson number requested for a state with no vertical shear."""


class ZeroFluxError(ValueError):
    """Surface density flux Q is zero, so the fixed-point slope is infinite."""


class ZeroWindError(ValueError):
    """Wind forcing vanishes, so the equilibrium shear is undefined."""


class DiffusivityZeroError(ZeroDivisionError):
    """f2(R) vanishes and k(R) = f1^2/f2 is undefined."""


class NoRootError(LookupError):
    """The fixed-point scan found no intersection of k(R) with C*R."""


class InvalidEquilibriumError(ValueError):
    """Equilibrium requested at a Richardson number where f2 <= 0."""


class NegativeDiffusivityError(RuntimeError):
    """A column run reached a face where the diffusivity is negative."""

    def __init__(self, R, t=None):
        self.R = R
        self.t = t
        where = "" if t is None else f" at t={t:g} s"
        super().__init__(f"negative diffusivity at face Richardson number R={R:.6g}{where}")


class ConfigError(ValueError):
    """Bad or incomplete run configuration."""

