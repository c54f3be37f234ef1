"""Annotation-free skill extraction toolkit.

Pipeline: synthesize labeled sentences for a skill inventory with an LLM
(or a deterministic stub), train a sentence/skill bi-encoder contrastively,
filter job-posting sentences for skill relevance, and retrieve skills per
posting from a dense index.
"""

__version__ = "0.1.0"
