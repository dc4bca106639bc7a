# Unit tests for gapflow
