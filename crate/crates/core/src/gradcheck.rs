//! Finite-difference verification of hand-derived gradients.
//!
//! Every backward pass in this crate is written by hand, so the gradient
//! checker is the safety net: it perturbs one coordinate at a time and
//! compares the central-difference slope against the analytic gradient.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Which coordinates to probe.
#[derive(Debug, Clone, Copy)]
pub enum Probes {
    /// Every coordinate; fine for small parameter vectors.
    All,
    /// A seeded random subset, for larger models.
    Random { count: usize, seed: u64 },
}

/// Compares `analytic` against central differences of `f` around `theta`.
///
/// Returns the maximum relative error over the probed coordinates, where the
/// relative error uses `max(|analytic|, |numeric|, 1e-12)` as denominator.
/// The step `h` must lie in `[1e-7, 1e-3]`: larger steps are dominated by
/// truncation error, smaller ones by cancellation in f64.
pub fn gradcheck<F>(f: F, theta: &Tensor, analytic: &Tensor, h: f64, probes: Probes) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    gradcheck_with_floor(f, theta, analytic, h, probes, 1e-12)
}

/// Like [`gradcheck`] but with a caller-chosen denominator floor.
///
/// The default 1e-12 floor suits cheap primitives, where a function
/// evaluation carries at most a few hundred rounding errors. Composite
/// functions (a whole network plus loss) accumulate enough rounding noise
/// that the central difference cannot resolve derivatives much below
/// `ops * eps * |f| / (2h)`; on coordinates whose true gradient sits near
/// that scale, the 1e-12-floor relative error measures noise rather than
/// correctness. Callers checking such functions should pass a floor of
/// roughly that noise estimate divided by the tolerance they intend to
/// compare against, so rounding noise alone can never exceed the tolerance.
pub fn gradcheck_with_floor<F>(
    f: F,
    theta: &Tensor,
    analytic: &Tensor,
    h: f64,
    probes: Probes,
    floor: f64,
) -> Result<f64>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    theta.check_same_shape(analytic, "gradcheck")?;
    if !(1e-7..=1e-3).contains(&h) {
        return Err(Error::invalid("gradcheck", format!("step {h} outside [1e-7, 1e-3]")));
    }
    if !floor.is_finite() || floor < 1e-12 {
        return Err(Error::invalid("gradcheck", format!("denominator floor {floor} must be finite and at least 1e-12")));
    }
    if theta.is_empty() {
        return Err(Error::invalid("gradcheck", "empty parameter vector"));
    }

    let coords: Vec<usize> = match probes {
        Probes::All => (0..theta.len()).collect(),
        Probes::Random { count, seed } => {
            let mut all: Vec<usize> = (0..theta.len()).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            all.shuffle(&mut rng);
            all.truncate(count.max(1).min(theta.len()));
            all.sort_unstable();
            all
        }
    };

    let mut worst: f64 = 0.0;
    let mut work = theta.clone();
    for &i in &coords {
        let orig = theta.data()[i];
        work.data_mut()[i] = orig + h;
        let fp = f(&work)?;
        work.data_mut()[i] = orig - h;
        let fm = f(&work)?;
        work.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::non_finite("gradcheck", format!("f non-finite at coordinate {i}")));
        }
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        worst = worst.max(rel);
    }
    Ok(worst)
}
