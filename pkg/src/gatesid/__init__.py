"""GateSID: gated fusion of semantic-ID and collaborative signals for
cold-start ranking, with a synthetic training/evaluation harness."""

__version__ = "0.1.0"
