"""dinobold: structural-to-functional MRI synthesis.

Generates a subject-specific mean functional (BOLD-like) volume from a
structural (T1-like) volume using a frozen self-supervised ViT encoder,
slice-wise attention fusion, and a multi-scale decoder.
"""

__version__ = "0.1.0"
