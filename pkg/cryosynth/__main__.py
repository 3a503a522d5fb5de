"""Allow running cryosynth as ``python -m cryosynth``."""

from cryosynth.main import main

main()
