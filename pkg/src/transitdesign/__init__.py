"""Bus route network design with tree search, a graph policy-value network and a mesoscopic simulator."""

__version__ = "0.1.0"
