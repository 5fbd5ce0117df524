use super::{Corpus, Split};
use crate::error::{Error, Result};
use crate::rng::SeededRng;

/// Random clip-level partition into train/val/test. Validation and test get
/// `round(n * ratio)` clips each; the remainder goes to training.
pub fn split_by_clip(corpus: &Corpus, ratios: [f64; 3], seed: u64) -> Result<Corpus> {
    let n = corpus.n_clips();
    if n < 3 {
        return Err(Error::contract(format!("need at least 3 clips to split, got {n}")));
    }
    if ratios.iter().any(|r| !(0.0..=1.0).contains(r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split ratios {ratios:?} must be fractions summing to 1")));
    }
    let n_val = (n as f64 * ratios[1]).round() as usize;
    let n_test = (n as f64 * ratios[2]).round() as usize;
    if n_val + n_test > n {
        return Err(Error::contract("validation and test shares exceed the clip count"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).substream("split").shuffle(&mut order);
    let mut tags = vec![Split::Train; n];
    for &c in &order[..n_val] {
        tags[c] = Split::Val;
    }
    for &c in &order[n_val..n_val + n_test] {
        tags[c] = Split::Test;
    }
    let mut out = corpus.clone();
    out.set_splits(tags)?;
    Ok(out)
}
