//! Judging estimated command sequences by replaying them on the recovery
//! automata, plus the reliability-threshold report.

mod report;
mod simulate;
mod success;

pub use report::{threshold_report, Scored, ThresholdReport, ThresholdRow, GRID_STEPS};
pub use simulate::{parse_command_lines, simulate, SimulationResult};
pub use success::{
    decode_and_replay, read_records, replay, success_rate, success_rates, write_records, GroupRate, SampleRecord,
    SuccessReport,
};
