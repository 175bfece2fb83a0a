#!/usr/bin/env python3
"""Write a small multi-domain demo corpus for exercising the pipeline.

Usage: python3 scripts/make_demo_corpus.py [OUTPUT_DIR]

Creates OUTPUT_DIR (default ./corpus) with a handful of .txt documents
grouped into domain subdirectories. At the default chunk size each
document is a single chunk; a target_size of a couple hundred
characters splits them into several.
"""

import sys
from pathlib import Path

DOCS = {
    "optics/prisms.txt": (
        "The prism splits white light into its component colors. Each "
        "wavelength bends by a different angle as it crosses the glass. "
        "Shorter wavelengths bend more strongly than longer ones, which "
        "is why violet sits at the far edge of the fan.\n\n"
        "A second prism can recombine the fan into white light again. "
        "The recombination works because refraction is reversible when "
        "the geometry is mirrored.\n"
    ),
    "optics/lenses.txt": (
        "The converging lens focuses parallel rays toward a single "
        "point. The distance from the lens to that point is the focal "
        "length, and it depends on the curvature of both surfaces.\n\n"
        "A diverging lens spreads parallel rays apart. Its focal length "
        "is negative by convention, and the spread rays appear to come "
        "from a virtual point on the incoming side.\n"
    ),
    "hydraulics/aqueducts.txt": (
        "The aqueduct carried water across the valley without pumps. "
        "Gravity alone drove the flow along a shallow, steady gradient. "
        "Arcades lifted the channel over low ground so the slope never "
        "reversed.\n\n"
        "Settling tanks along the route let sediment drop out of the "
        "stream. Clean water mattered less for drinking than for the "
        "fountains, which clogged easily.\n"
    ),
    "hydraulics/siphons.txt": (
        "The inverted siphon dives under an obstacle and climbs back "
        "up the far side. Pressure in the sealed pipe pushes the water "
        "uphill again, as long as the outlet sits lower than the inlet. "
        "Lead pipes handled the pressure better than masonry channels.\n"
    ),
}


def main() -> int:
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("corpus")
    for rel, text in sorted(DOCS.items()):
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
        print(f"wrote {path}")
    print(f"{len(DOCS)} documents under {out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
