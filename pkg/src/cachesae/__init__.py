"""Sparse dictionaries over matrix-valued recurrent cache writes."""
