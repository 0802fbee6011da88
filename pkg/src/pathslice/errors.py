"""Exception types shared across the package."""


class PathsliceError(Exception):
    """Base class for all package-specific failures."""


class TrajectoryEscaped(PathsliceError):
    """A classical trajectory left the simulation box during integration."""


class TimeStepTooLarge(PathsliceError):
    """The boundary-value problem is not reliably solvable at this step.

    Raised when Newton iteration on the initial momentum fails to converge,
    or when the scaled position/momentum Jacobian degenerates (its
    determinant drops below the 1/2 safeguard), signalling a conjugate
    point or an over-long slice.  Callers should shrink t - s.
    """


class DeterminantDegenerate(PathsliceError):
    """|det d2S/dxdy| fell below the (1/2)(t-s)^(-d) floor."""


class UndersampledPhase(PathsliceError):
    """The grid cannot host the momentum bands the kernel needs.

    The sampled kernel is trustworthy only when the de-aliasing band, the
    taper ramp, and the replica-exclusion margin all fit below the lattice
    momentum ceiling.  Raised before any kernel entries are computed.
    """


class RichardsonFailed(PathsliceError):
    """Reference propagator did not meet its self-validation target."""


class WrapAround(PathsliceError):
    """Probe states accumulated non-negligible mass near the box boundary."""


class ConfigError(PathsliceError):
    """Scenario configuration is invalid; message carries section/key context."""
