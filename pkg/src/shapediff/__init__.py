"""shapediff: instruction-driven image generation and editing on a procedural shape world.

A single small model handles subject-driven generation, instruction-based
editing, and compositional subject editing. Instructions interleave text
with reference images through "<imagehere>" placeholders; the condition is
a fused vision-language token sequence, and generation runs as conditional
latent diffusion over an exactly renderable scene domain.
"""

__version__ = "0.1.0"

from .grammar import (  # noqa: F401
    PLACEHOLDER,
    ArityMismatch,
    GrammarError,
    ImageSlot,
    MultimodalInstruction,
    TextSpan,
    parse,
    serialize,
    validate_arity,
)
