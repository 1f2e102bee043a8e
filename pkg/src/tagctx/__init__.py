"""Session-context inference from social-tag embeddings for music recommendation.

The pipeline: play logs are cut into listening sessions, play counts become
implicit ratings, artist tags become per-item tag sentences, a full-softmax
skip-gram model embeds the tags, PCA collapses each tag to a scalar, and a
session's first item(s) then re-rank collaborative-filtering candidates by
distance along that axis.
"""

__version__ = "0.1.0"
