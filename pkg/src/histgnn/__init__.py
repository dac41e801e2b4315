"""Mini-batch GNN training with a selective historical embedding cache.

Subsystems: prunable sparse graph containers (graphs), layered neighbor
sampling with an asynchronous producer (sampler), the admission/eviction
cache (cache), a small tape-based GNN compute core (nn), the training loop
with cache-aware pruning and accuracy/error probes (trainer), a multi-round
feature-transfer simulator (comms), a linear-model staleness convergence
harness (sgc), dataset ingestion and synthesis (data), and a CLI (cli).
"""

__version__ = "0.1.0"
