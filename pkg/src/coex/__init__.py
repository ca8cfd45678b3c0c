"""Joint entity-relation extraction with cascade pointer tagging.

Subpackages are intentionally flat: `autograd` (tensor engine), `encoder`
(transformer encoder), `tagger` (subject / relation-object heads, loss,
decoding), `data` (tokenizer, corpus IO, synthetic corpus), `trainer`
(optimizer, training loop, checkpoints), `evaluator` (triple scoring,
significance test, latency benchmark), `runtime` (frozen inference model
and HTTP service), `cli` (command line entry point).
"""

__version__ = "0.1.0"
