"""seqrec: linear-attention sequential recommendation with a scaling bench.

Core pieces: a small autodiff tensor core (`seqrec.tensor`), four
interchangeable attention mechanisms (`seqrec.attention`), an
encoder-only next-item model (`seqrec.model`), data ingestion and cloze
batching (`seqrec.data`), ranked-retrieval metrics (`seqrec.metrics`),
a training loop (`seqrec.trainer`), and an empirical complexity bench
(`seqrec.bench`). The `seqrec` CLI ties them together.
"""

__version__ = "0.1.0"
