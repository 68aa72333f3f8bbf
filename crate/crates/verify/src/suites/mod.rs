//! One suite per acceptance criterion. Each is deterministic for a seed and
//! reports its own wall time against its budget.

mod alignment;
mod constants;
mod e2e;
mod gradient;
mod poisson;
mod render;
mod sampler;
mod visibility;

pub use alignment::alignment_suite;
pub use constants::constants_suite;
pub use e2e::{e2e_config, e2e_run, e2e_suite, held_out_pose, E2eOutcome, PROBE_TIMES};
pub use gradient::gradient_suite;
pub use poisson::poisson_suite;
pub use render::render_suite;
pub use sampler::sampler_suite;
pub use visibility::visibility_suite;
