pub mod bench;
pub mod gradcheck;
pub mod infer;
pub mod score;
pub mod simulate;
pub mod train;
pub mod viz;

use std::path::Path;

use rayon::prelude::*;

use crate::error::CliResult;

/// Runs `f` over `items` in parallel and returns results in input order;
/// the first failure (in input order) wins.
pub fn fan_out<I: Sync, T: Send>(items: &[I], f: impl Fn(&I) -> CliResult<T> + Sync + Send) -> CliResult<Vec<T>> {
    items.par_iter().map(f).collect::<Vec<_>>().into_iter().collect()
}

/// File stem used as recording ID.
pub fn stem(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path.display().to_string())
}
