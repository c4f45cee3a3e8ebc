use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use lipcert::netgraph::{gen_two_moons, load_idx};
use lipcert::Dataset;

use crate::args::{DataArgs, Split};
use crate::usage;

/// Finds `<prefix>-<kind>-idx?-ubyte[.gz]` in `dir`.
fn idx_file(dir: &Path, prefix: &str, kind: &str) -> Result<PathBuf> {
    let rank = if kind == "images" { 3 } else { 1 };
    let stem = format!("{prefix}-{kind}-idx{rank}-ubyte");
    for name in [format!("{stem}.gz"), stem.clone()] {
        let p = dir.join(&name);
        if p.is_file() {
            return Ok(p);
        }
    }
    anyhow::bail!("{}: no {stem}[.gz]", dir.display())
}

/// Loads `spec` (an IDX directory or `moons:N:NOISE:SEED`).
pub fn load(spec: &str, split: Split, classes: Option<&[usize]>, limit: Option<usize>) -> Result<Dataset> {
    if let Some(rest) = spec.strip_prefix("moons:") {
        let parts: Vec<&str> = rest.split(':').collect();
        let parsed = match parts.as_slice() {
            [n, noise, seed] => n.parse::<usize>().ok().zip(noise.parse::<f64>().ok()).zip(seed.parse::<u64>().ok()),
            _ => None,
        };
        let ((n, noise), seed) =
            parsed.ok_or_else(|| usage(format!("bad moons spec '{spec}', expected moons:N:NOISE:SEED")))?;
        let data = gen_two_moons(n, noise, seed)?;
        if classes.is_some() {
            return Err(usage("--classes applies to IDX data only"));
        }
        return Ok(match limit {
            Some(l) => data.take(l),
            None => data,
        });
    }
    let dir = Path::new(spec);
    let prefix = match split {
        Split::Train => "train",
        Split::Test => "t10k",
    };
    let filter: Option<BTreeSet<usize>> = classes.map(|c| c.iter().copied().collect());
    let images = idx_file(dir, prefix, "images")?;
    let labels = idx_file(dir, prefix, "labels")?;
    load_idx(&images, &labels, limit, filter.as_ref()).with_context(|| format!("loading {}", dir.display()))
}

pub fn load_args(args: &DataArgs, default_split: Split) -> Result<Dataset> {
    load(&args.data, args.split.unwrap_or(default_split), args.classes.as_deref(), args.limit)
}
