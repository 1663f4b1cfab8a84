"""Weekly listening-pattern embeddings.

Turns per-user listening logs into normalized weekly 4-channel signals,
learns a shared dictionary of sparse multichannel atoms, emits the sparse
codes as user embeddings, and evaluates them on binary activity-prediction
tasks against volume, demographic and activity baselines.
"""

__version__ = "0.1.0"
