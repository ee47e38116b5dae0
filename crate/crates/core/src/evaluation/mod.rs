//! Protocol files, score files, EER, min-tDCF, DET curves and score-level
//! fusion.

mod metrics;
mod protocol;
mod scores;

pub use metrics::{
    compute_eer, compute_min_tdcf, det_csv, det_from_scores, det_points, eer_from_scores, evaluate,
    min_tdcf_from_scores, operating_points, parse_asv_scores_str, probit, read_asv_scores, tdcf_curve, AsvScores,
    DetPoint, Eer, MetricReport, MinTdcf, OperatingPoint, TdcfParams, TdcfVersion,
};
pub use protocol::{parse_protocol, parse_protocol_str, Key, Partition, Protocol, TrialRecord};
pub use scores::{fuse_scores, parse_scores_str, read_scores, write_scores, ScoreSet};
