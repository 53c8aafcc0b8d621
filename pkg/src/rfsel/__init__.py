"""Referential form selection toolkit.

Builds delexicalised referential-form classification datasets from
coreference-annotated corpora, trains neural and feature-based form
classifiers, and probes their representations for linguistic features.
"""

__version__ = "0.1.0"
