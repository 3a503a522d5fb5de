"""cryosynth: Annotated cryo-EM micrograph synthesis from atomic models.

Builds a structure library from coordinate files, places particles in a
scale-adaptive scene, embeds them in a vitreous ice slab and images the
result through a weak-phase projection, a contrast transfer function and
a traditional noise baseline. Every micrograph ships with its ground-truth
placement manifest and occupancy mask.

Stages:
    library     - parse models, voxelize, smooth, extract meshes
    scene       - scale parameters, placement, orientations, context
    ice         - log-normal slab with Perlin topography
    imaging     - potential assembly, projection, CTF, masks, noise
    metrics     - FSC, precision/recall, angular error, pose loss

Quick start::

    $ pip install cryosynth
    $ cryosynth pipeline run --config cryosynth.json --out run1
    $ cryosynth --man

See Also:
    README.md
"""

from importlib.metadata import version, PackageNotFoundError

try:
    __version__ = version("cryosynth")
except PackageNotFoundError:
    __version__ = "0.0.0"
