"""Compare seed-to-seed flicker with and without kernel smoothing on a trained field.

    python3 demos/flicker.py demo_out/field.sfld [--seeds 16]

Each view is rendered once per sampling seed; flicker is the mean over
pixels of the per-pixel standard deviation across those renders.
"""

import argparse
import math

from sdsfield.experiments import flicker_pair
from sdsfield.field import load_field
from sdsfield.geometry import orbit_camera
from sdsfield.renderer import SamplingConfig


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--seeds", type=int, default=16)
    ap.add_argument("--size", type=int, default=32)
    args = ap.parse_args()
    fld = load_field(args.checkpoint)
    sampling = SamplingConfig(n_coarse=24, n_fine=24)
    print("azimuth  ks_on     ks_off    ratio")
    for az in (10, 80, 150, 220, 290):
        cam = orbit_camera(math.radians(az), 0.2, 3.0, width=args.size, height=args.size)
        on, off = flicker_pair(fld, cam, sampling, range(args.seeds))
        print(f"{az:7d}  {on:.6f}  {off:.6f}  {on / off:.3f}")


if __name__ == "__main__":
    main()
