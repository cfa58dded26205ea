"""Two-state self-exciting event processes with a latent hot-state duration."""

from .errors import (DomainError, IdentifiabilityWarning, InvalidInputError, NumericalError,
                     ZeroIntensityWarning)
from .process_model import (Constant, HotDurationDist, LogDoubleExp, ModelSpec, PiecewiseConstant,
                            Proportional, Segment, cumulative_intensity, hot_timeline, intensity_at,
                            model_a, model_b, model_c, model_d)
from .gap_time import ChangePointExp, gap_cdf, gap_pdf, gap_quantile, gap_sample, gap_sf
from .likelihood import (LikelihoodContext, cond_loglik, full_loglik, marginal_loglik,
                         segment_marginal_loglik)
from .data_model import MatchLog, SegmentTable, build_segments, read_dataset, write_dataset
from .inference import (FitResult, McemConfig, initial_spec, louis_se, mcem_fit,
                        sample_tau_posterior, tau_posterior)
from .simulate import SimConfig, simulate_constant, simulate_season, simulate_thinning

__version__ = "0.1.0"
