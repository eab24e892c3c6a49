"""ResE-BiLSTM post-loan default detection: a numpy implementation of the
residual-enhanced encoder + BiLSTM network, its loan-performance window
pipeline, metrics with AvgR rank aggregation, and Shapley attribution."""

__version__ = "0.1.0"
