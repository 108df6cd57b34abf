"""Linear-probe transfer of frozen embeddings: pooling, PCA, logistic probes."""
