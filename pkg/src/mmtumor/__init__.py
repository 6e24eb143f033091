"""Multimodal brain-scan classification: texture features + CNN image head.

Modules: ``features`` (13 texture statistics), ``data`` (loading, balancing,
standardization, stratified folds), ``model`` (densely connected image head
fused with a tabular head), ``training`` (loss, early stopping, fold
training), ``metrics`` (confusion-derived scores and rank-based AUC),
``pipeline`` / ``cli`` (cross-validation orchestration), ``synthetic``
(separable smoke-test corpus), ``seeding`` (master-seed stream derivation).
"""

__version__ = "0.1.0"
