"""crosskt: cross-course knowledge tracing.

Builds a question/concept graph spanning two courses, encodes node
text into features, propagates them with a mean-aggregating message
passer, models each learner's knowledge state with attention over a
merged interaction sequence, aligns single-course and cross-course
states contrastively, and predicts response correctness — all on a
self-contained differentiable core.
"""

__version__ = "0.1.0"
