//! Class-parallel evaluation. Chunks run on the rayon pool and their
//! partial sums are combined in chunk order, so the result does not depend
//! on the number of threads.

use echo4_core::dynamics::RelaxationSpec;
use echo4_core::ensemble::{EmissionRecord, EnsembleSpec, Experiment};
use echo4_core::sequence::SequenceTimeline;
use echo4_core::LevelSystem;
use rayon::prelude::*;

pub fn run_parallel(
    tl: &SequenceTimeline,
    ls: &LevelSystem,
    spec: &EnsembleSpec,
    r: &RelaxationSpec,
) -> echo4_core::Result<EmissionRecord> {
    let exp = Experiment::new(tl, ls, spec, r)?;
    let partials = exp.chunks().into_par_iter().map(|c| exp.run_chunk(c)).collect::<echo4_core::Result<Vec<_>>>()?;
    exp.finish(partials)
}

/// Runs `f` on a dedicated pool of `threads` workers, or the global pool.
pub fn with_threads<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    match threads {
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build().expect("thread pool").install(f),
        None => f(),
    }
}
