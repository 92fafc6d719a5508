"""purevm: a small continuation-passing language, its compiler, and a
simulated non-volatile virtual machine for intermittently powered devices."""

__version__ = "0.1.0"
