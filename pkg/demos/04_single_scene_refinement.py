"""One scene through the whole localization loop, verbosely.

A drone orbit observes a spot that sits between satellite patch centers;
the initial virtual-view retrieval is ambiguous, and the iterative camera
update walks the rendered view onto the true patch.
"""

import numpy as np

from orthosplat import generate_gallery, generate_query, generate_world, run_pipeline
from orthosplat.cli import build_gallery_index, truth_patch_id
from orthosplat.config import RunConfig
from orthosplat.imgio import write_image
from orthosplat.refine import dump_trajectory

cfg = RunConfig(extent=96.0, buildings=8, patch_m=32.0, stride_m=16.0,
                gallery_px=160, nv=20, orbit_radius=15.0, altitude=15.0,
                res=160, nm=30, k=10)
world = generate_world(cfg.seed, cfg.extent, cfg.buildings)
gallery = generate_gallery(world, cfg.patch_m, cfg.stride_m, cfg.gallery_px)
index = build_gallery_index(gallery, cfg)

center = np.array([43.0, 60.0])   # deliberately off the 16 m patch grid
query = generate_query(world, center, cfg.nv, cfg.orbit_radius, cfg.altitude,
                       seed=11, scene_id="demo")
truth = truth_patch_id(index, query.geotag)
print(f"scene at {center}, truth patch {truth} "
      f"(center {index.geotag_of(truth)}), "
      f"{len(query.sparse_points)} reconstructed points")

result = run_pipeline(query, index, iters=cfg.iters, render_px=cfg.res,
                      k=cfg.k, n_m=cfg.nm, seed=11)
for st in result.states:
    cam = st.camera
    verified = [c.patch_id for c in st.candidates if c.verified]
    print(f"t={st.iteration}: rank of truth {st.ranking.rank_of(truth)}, "
          f"footprint {cam.s_w:.1f}x{cam.s_h:.1f} m at "
          f"{np.round(cam.pose.center()[:2], 1)}, verified {verified}")

dump_trajectory(result, "demo04_trajectory")
strip = np.hstack([st.render.pixels for st in result.states]
                  + [gallery[index.position(truth)].image.pixels])
write_image("demo04_iterations_vs_truth.png", strip)
print("wrote demo04_trajectory/ and demo04_iterations_vs_truth.png")
