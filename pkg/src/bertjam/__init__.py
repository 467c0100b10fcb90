"""Joint-attention translation with fused micro-BERT layers, at desk scale."""
