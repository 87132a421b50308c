"""Semantic product search on synthetic click data.

Modules:

* ``catalog``: synthetic catalog, queries and click sessions
* ``graphs`` and ``triplets``: click graphs, query classes and triplet sampling
* ``bpe``: byte-pair tokenizer and MLM masking
* ``tensor``: a small reverse-mode autodiff engine on numpy
* ``encoders``: BiGRU and transformer text encoders
* ``training``: triplet loss, optimizers, pre-training and fine-tuning loops
* ``ann``: random-projection forest index with exact re-scoring
* ``metrics``: ranking and retrieval metrics
* ``cli``: the ``prodsearch`` command
"""

__version__ = "0.1.0"
