"""tagsum - target-aware related-work generation.

A desk-scale encoder/decoder for generating the related-work section of a
paper from its abstract and the abstracts of its references.  The encoder
arranges papers and extracted keyphrases in a target-centered graph; the
decoder attends keyphrases first and uses their context to read the target
and reference tokens; training adds local and global contrastive matching
losses against sampled non-reference papers.
"""

from tagsum.config import ModelConfig, RunConfig, desk_profile, paper_profile

__version__ = "0.1.0"

__all__ = [
    "ModelConfig",
    "RunConfig",
    "desk_profile",
    "paper_profile",
    "__version__",
]
