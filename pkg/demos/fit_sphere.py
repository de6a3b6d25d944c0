"""Fit a blob-initialised voxel field to renders of a sphere and save before/after views.

    python3 demos/fit_sphere.py [--iters 300] [--out demo_out]

Runs at 32x32 / 24^3 so it finishes in about a minute on one core.
"""

import argparse
import math
from pathlib import Path

from sdsfield.experiments import evaluate
from sdsfield.field import save_field
from sdsfield.geometry import orbit_camera
from sdsfield.images import write_png
from sdsfield.renderer import SamplingConfig, render_image
from sdsfield.scenes import make_scene
from sdsfield.trainer import FieldConfig, ReferenceTarget, TrainConfig, train


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--iters", type=int, default=300)
    ap.add_argument("--out", default="demo_out")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    cfg = TrainConfig(total_iter=args.iters, image_size=32, sampling=SamplingConfig(n_coarse=24, n_fine=24),
                      field=FieldConfig(resolution=(24, 24, 24)))
    target = ReferenceTarget(make_scene("sphere", (24, 24, 24)), cfg.sampling, cfg.codec())
    cam = orbit_camera(math.radians(40), math.radians(15), 3.0, width=32, height=32)
    still = SamplingConfig(n_coarse=24, n_fine=24, jitter=False)

    start = cfg.make_field()
    print("before:", evaluate(start, cfg, target))
    write_png(out / "before.png", render_image(start, cam, still).image)

    fld, records = train(start.copy(), cfg, target)
    for rec in records[::50]:
        b = rec.breakdown
        print(f"iter {rec.iteration:4d}  t {b.t_used:.3f}  latent {b.sds_latent:.4f}  zvar {b.zvar:.4f}")
    print("after: ", evaluate(fld, cfg, target))
    write_png(out / "after.png", render_image(fld, cam, still).image)
    write_png(out / "target.png", target.image(cam))
    save_field(fld, out / "field.sfld")
    print(f"wrote {out}/before.png, after.png, target.png, field.sfld")


if __name__ == "__main__":
    main()
