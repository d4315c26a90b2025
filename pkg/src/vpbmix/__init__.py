"""Two-species Vlasov-Poisson-Boltzmann mixtures and their Euler-Poisson limit."""

__version__ = "0.1.0"
