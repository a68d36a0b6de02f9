"""Build pseudo views for the toy scene and report how much of each one the warp fills.

Each training view is forward-warped, with its estimated depth, into the
cameras interpolated on the circle through the three camera centres. Pixels
that no confident source pixel lands on stay masked out of the loss.

    python3 demos/pseudo_views.py --out /tmp/pseudo
"""
import argparse
import os

import numpy as np

from sparsegs import io
from sparsegs.geometry import circumcircle
from sparsegs.metrics import psnr
from sparsegs.optim import make_pseudo_views, make_view
from sparsegs.raster import render
from sparsegs.scenes import estimated_depth, two_plane_scene


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=None, help="optional directory for the warped images")
    ap.add_argument("--views-per-pair", type=int, default=2)
    args = ap.parse_args()

    scene = two_plane_scene()
    views = []
    for i, cam in enumerate(scene.train_cams):
        depth, conf = estimated_depth(scene.gt, cam)
        views.append(make_view(cam, render(scene.gt, cam).color, depth, conf, name=f"train{i}"))

    center, radius, _ = circumcircle(*(c.center for c in scene.train_cams))
    print(f"camera circle: centre {np.round(center, 3)}, radius {radius:.3f}")

    pseudo = make_pseudo_views(views, args.views_per_pair)
    for pv in pseudo:
        m = pv.target.pseudo_mask
        # compare the warped pixels with what the ground truth actually looks like from there
        truth = render(scene.gt, pv.camera).color
        err = psnr(pv.target.image[m], truth[m]) if m.any() else float("nan")
        print(f"{pv.name}: filled {m.mean():5.1%}  PSNR of filled pixels vs truth {err:5.2f} dB")
        if args.out:
            os.makedirs(args.out, exist_ok=True)
            io.write_ppm(os.path.join(args.out, pv.name + ".ppm"), pv.target.image)


if __name__ == "__main__":
    main()
