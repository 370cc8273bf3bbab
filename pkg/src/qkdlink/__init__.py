"""Software twin of a free-space entanglement-based QKD link.

Subsystems: analytic link model (rates/QBER/thresholds), stochastic
timestamp simulator, clock synchronization, coincidence sifting, CASCADE
reconciliation, privacy amplification, side-channel accounting, and the
two-endpoint classical protocol tying them together.
"""

from .params import ChannelParams, DetectorParams, SourceParams
from .linkmodel import (
    QberBreakdown,
    RateBreakdown,
    background_threshold,
    desaturate,
    qber_total,
    rate_breakdown,
    saturate,
    sweep,
)
from .events import TICK, TimestampStream, read_stream, write_stream
from .simulator import GroundTruth, SimConfig, simulate_session
from .timesync import OffsetEstimate, SyncConfig, acquire_offset, holdover_budget, track
from .sifter import Coincidences, SiftedKey, find_coincidences, measure_qber, sift
from .postproc import (
    FinalKey,
    ReconciledKey,
    binary_entropy,
    cascade_reconcile,
    lfsr32_stream,
    privacy_amplify,
)
from .sidechannel import (
    CorrelationMatrix,
    asymmetry_stats,
    build_matrix,
    timing_histograms,
)
from .timecode import EncodedTimingBlock, decode_timing, encode_timing
from .pipeline import PipelineConfig, run_local_pipeline

__version__ = "0.1.0"
