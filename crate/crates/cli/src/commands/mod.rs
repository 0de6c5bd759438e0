//! One function per subcommand. Each takes a validated [`RunConfig`], prints
//! its summary to stdout, and returns a value the tests can inspect.

mod eval;
mod gradcheck;
mod mix;
mod sample;
mod train;

pub use eval::{eval, REPORT_FILE};
pub use gradcheck::{check_end_to_end, gradcheck, parse_fault, render_table, CheckRow, TOLERANCE};
pub use mix::{mix, MixSummary, HELDOUT_CAPTIONS, HELDOUT_MANIFEST};
pub use sample::{read_captions, sample, CaptionLine, SampleSummary};
pub use train::{train, TrainSummary, LOSS_FILE, MODEL_FILE, OPTIMIZER_FILE};
