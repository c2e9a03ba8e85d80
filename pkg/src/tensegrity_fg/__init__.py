"""Factor-graph state estimation and Chebyshev trajectory smoothing for a
three-bar tensegrity robot."""

from .errors import TensegrityError
from .liegroup import Pose3, Rot3
from .chebyshev import LiePoly, VecPoly
from .clustering import ClusterEstimate, WeightedObservation, chi2_quantile, cluster
from .solver import LMConfig, optimize
from .factors import FrameObservations, NoiseConfig, RobotGeometry, build_frame_graph, solve_frame_graph
from .estimator import EstimatorConfig, StateEstimate, estimate_frame, run_sequence
from .trajectory import TrajectoryData, degree_search, fit_bar_polys, fit_endcap_polys, query
from .simgen import SimConfig, evaluate_fit, generate_trajectory, sample_observations
from .datasets import compute_metrics, load_frames, write_frames

__version__ = "0.1.0"
