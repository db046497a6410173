"""
Configuration file for the killed / concatenated Markov process toolkit
"""

# Directory configuration
DIRECTORIES = {
    'output': './result/',
    'demos': './demos/',
}

# Numerical tolerances
TOLERANCES = {
    'row_sum': 1e-12,             # sub-Markov / Markov row sums
    'semigroup': 1e-10,           # Chapman-Kolmogorov on supplied kernel families
    'chapman_kolmogorov': 1e-9,   # exact matrix exponentials
    'identity': 1e-12,            # one-point extension identities
    'uniformization': 1e-12,      # Poisson tail mass dropped by uniformization
    'quadrature': 1e-10,          # adaptive quadrature (relative)
    'exit_quadrature': 1e-8,      # exit-point oracle (absolute)
    'invariant': 1e-10,           # ||pi^T A||_inf for restore chains
    'additivity': 1e-12,          # AF / MF shift identities on grid paths
    'grid_snap': 1e-9,            # relative slack when mapping times onto a grid
    'extrapolation': 1e-3,        # Richardson estimate of the MF derivative
}

# Statistical acceptance (echoed into every report)
STATISTICS = {
    'p_threshold': 1e-3,
    'ci_multiplier': 2.576,       # 99% normal interval
    'stderr_multiple': 3.0,
    'min_samples': 30,
    'min_expected': 5.0,          # chi-square bins below this are merged
    'tv_tolerance': 0.01,         # occupation measure vs invariant law
}

# Generator limit checks
SLOPE_BAND = (0.8, 1.2)
GENERATOR_STEPS = [1e-2, 5e-3, 2.5e-3, 1.25e-3]

# Simulation parameters
SIMULATION_CONFIG = {
    'default_seed': 20240611,
    'chunk_size': 2048,           # replications per merged report chunk
    'block_window': 8.0,          # initial path window when a lifetime is not yet known
    'max_blocks': 1_000_000,      # cap on renewals inside one concatenated sample
    'default_dt': 1e-3,
    'jobs_env': 'MSPLICE_JOBS',
    'stream_stride': 1_000_000,   # stream ids reserved per check inside one experiment
}

# Experiment kinds understood by the runner
EXPERIMENT_KINDS = [
    'extend-check',
    'lifetime-law',
    'kill-semigroup',
    'exit-joint',
    'generator-kill',
    'concat',
    'revival',
    'restore-invariant',
    'restarts-formula',
    'renewal-gamma',
    'generator-concat',
    'markov-property',
]

SCHEMA_VERSION = '1'

# File patterns
FILE_PATTERNS = {
    'report': 'report.json',
    'manifest': 'manifest.csv',
    'table': '{name}.csv',
    'demo_glob': '*.json',
}

# Logging configuration
LOGGING_CONFIG = {
    'level': 'INFO',
    'format': '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
    'file': None  # Set to file path if you want to log to file
}
