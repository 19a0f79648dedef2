"""Three-stage screening prioritization: BM25 retrieval, cross-review learning to rank, in-review relevance feedback."""

__version__ = "0.1.0"
