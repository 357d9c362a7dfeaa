"""Maximum-entropy classification for probabilistic record linkage."""

from .comparison import (KeyField, KeyRecord, KeySchema, PatternTable, agreement,
                         build_comparison_space, dedup_keys, encode_record, soundex)
from .estimation import EstimatorConfig, FitResult, fit_supervised, fit_unsupervised
from .mec import (MecSet, flr_estimate, flr_target_search, maximal_mec, mec_set_by_threshold,
                  mec_set_of_size, mmr_estimate, true_error_rates)
from .model import LinkageParams, expected_matches, solve_fixed_point
from .simgen import GeneratorSpec, JointBlock, default_name_blocks, generate_files

__version__ = "0.1.0"
