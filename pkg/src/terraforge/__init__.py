"""terraforge: deterministic synthesis of wide-area aerial scenes.

The package turns a coarse anchor image into progressively finer
orthographic imagery, lifts the finest level to a heightfield mesh,
textures building facades from a ring of oblique views, bakes the views
into a texture atlas, and derives spatial-reasoning QA records from the
reconstructed geometry.  Every stage is reproducible bit-for-bit from a
single seed, including tiled generation of extents far larger than one
generator window.
"""

__version__ = "0.1.0"

from .errors import TerraforgeError

__all__ = ["TerraforgeError", "__version__"]
