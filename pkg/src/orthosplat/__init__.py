"""orthosplat: drone-to-satellite geo-localization by lifting multi-view
drone observations into a Gaussian-splat scene, rendering virtual satellite
views under orthographic projection, and iteratively refining the virtual
camera against a geo-tagged gallery."""

from .config import RunConfig
from .embed import (fuse_initial, gem_pool, global_feature,
                    load_feature_file, save_feature_file)
from .geo3d import (Correspondence2D3D, DegenerateGeometryError, Plane, Pose,
                    Rotation, fit_ground_plane, interpolate_pose,
                    pose_offsets, solve_orthographic_pose)
from .refine import (Candidate, PipelineResult, RefinementState,
                     init_virtual_camera, mine_correspondences, refine_step,
                     run_pipeline, verify_candidate)
from .retrieve import (GalleryIndex, RankedResult, average_precision,
                       meter_error, rank, recall_at_k)
from .scenegen import (GalleryPatch, QueryScene, SyntheticWorld,
                       generate_gallery, generate_query, generate_world,
                       ingest_colmap, subset_views)
from .splat import (GaussianPrimitive, GaussianScene, PerspectiveCamera,
                    RenderedImage, VirtualOrthoCamera,
                    init_primitives_from_points, load_scene, ortho_jacobian,
                    project_covariance, project_orthographic, refit_colors,
                    render, save_scene)

__version__ = "0.1.0"
