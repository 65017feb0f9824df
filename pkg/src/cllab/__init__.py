"""Continual-learning laboratory.

Submodules:
  kron     - Kronecker-structured linear algebra and nearest-Kronecker sums
  nets     - manually differentiated MLP and vanilla RNN models
  fisher   - Kronecker-factored, diagonal, and exact Fisher estimators
  learners - continual-learning update rules and their state
  tasks    - task generators and dataset ingestion
  bench    - experiment harness, comparison suites, metrics persistence
"""

__version__ = "0.1.0"
