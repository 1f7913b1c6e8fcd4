import logging
import os

########################################################################
#
#   General options

### Logging
log_level = logging.INFO
log_format = '%(asctime)s %(levelname)s %(name)s: %(message)s'

### Version written into every run manifest
software_version = "1.0.0"

########################################################################
#
#   Geometry
#
# Positions are in meters in the 2D plane. Angles are measured from the
# array normal (boresight); positive angles open toward the clockwise
# side of the boresight, which is +x for a boresight of (0, 1).
# The AP and the PWR both look at the coverage rectangle.

ap_position     = (0.0, 0.0)
ap_boresight    = (0.0, 1.0)
pwr_position    = (10.0, 0.0)
pwr_boresight   = (0.0, 1.0)

# number of antennas of the uniform linear arrays
n_ap  = 4   # N_A, access point
n_pwr = 4   # N_P, passive radar
n_ue  = 4   # N_u, every client

# element spacing as a fraction of the wavelength
element_spacing = 0.5

# coverage rectangle (xmin, xmax, ymin, ymax). Targets are drawn
# uniformly inside it and the position search is restricted to it.
coverage = (0.0, 10.0, 5.0, 15.0)

# targets per scenario. The first c_clients targets are clients.
k_targets = 3
c_clients = 2

# minimum distance between two targets, keeps MUSIC peaks resolvable
min_separation = 1.0

# rejection sampling budget when drawing target positions
scenario_max_attempts = 10000

# client arrays point at the AP, rotated by a random offset within
# +/- this many degrees
client_boresight_jitter_deg = 30.0

########################################################################
#
#   OFDM numerology (802.11ax HE)

num_subcarriers     = 512        # Q
subcarrier_spacing  = 78.125e3   # Hz, delta_f
speed_of_light      = 299792458.0

########################################################################
#
#   Communication channel
#
# Each client channel is a LoS path plus num_multipath scattered paths.
# The scattered paths carry ricean_k_factor_db less power than the LoS.
num_multipath       = 3
ricean_k_factor_db  = 15.0
# excess delay of the scattered paths over the LoS, in whole delay taps
# of 1 / (Q delta_f). A path on a tap is resolvable from the LoS, so its
# cross term with the LoS sums to zero over the band.
multipath_excess_taps = (1, 6)

########################################################################
#
#   Beamforming feedback (802.11ax compressed, MU-MIMO)
#
# bit widths for the phi and psi Givens angles. (9, 7) is the MU
# feedback width, (7, 5) the coarse one.
bff_phi_bits = 9
bff_psi_bits = 7

# Stream gains are reported as SNR against the client noise floor. A
# noiseless run has no floor, so this variance is used as the reference.
bff_noiseless_reference_variance = 1.0

########################################################################
#
#   Estimation
#
# MUSIC grids, degrees
music_grid_step_deg  = 0.5
music_grid_limit_deg = 80.0
client_grid_step_deg = 0.25

# position search: coarse grid over the coverage rectangle, then a fine
# grid in a window around the coarse argmax. Meters.
position_grid_step     = 0.25
position_refine_step   = 0.05
position_refine_window = 0.5

# alternating summation passes. A run stops once every target moved
# less than as_tolerance meters during a pass.
as_max_passes  = 5
as_tolerance   = 0.05
as_single_pass = False

# client AoD <-> radar AoD association gate, degrees. None disables it.
association_gate_deg = 10.0

# Tikhonov weight for rank deficient steering matrices, relative to the trace
tikhonov_scale = 1e-9

# noise variance used by the likelihoods when the CSI is noiseless
noiseless_variance_floor = 1.0

########################################################################
#
#   Monte-Carlo experiment

snr_sweep_db   = [-10.0, -5.0, 0.0, 5.0, 10.0, 15.0, 20.0, 25.0, 30.0]
trials_per_snr = 1000
methods        = ["music_ndp", "music_bff", "ndp_as", "hybrid_as"]
master_seed    = 20240601
hit_radius     = 2.0

# trials run on this many threads. Results do not depend on it.
workers = 1

output_directory = os.path.abspath(os.path.join(os.path.dirname(__file__), "storage", "results"))

########################################################################
# load scenario configs from this directory
scenario_directory = os.path.abspath(os.path.join(os.path.dirname(__file__), "storage", "scenarios"))

########################################################################
# SQLite run history. Set to None to skip it.
sqlite_db_path = os.path.abspath(os.path.join(os.path.dirname(__file__), "storage", "pwr.sqlite3"))
