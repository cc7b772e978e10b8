//! Monte-Carlo accuracy of compact pooling against exact pooling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{bilinear_pool_exact, compact_bilinear_pool, SketchParams};
use crate::error::{Error, Result};
use crate::streams::{FeatureKind, FeatureMap};
use crate::tensor::Tensor;
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq)]
pub struct SketchCheckOptions {
    pub appearance_channels: usize,
    pub part_channels: usize,
    pub sketch_dims: Vec<usize>,
    pub trials: usize,
    /// Spatial locations per synthetic feature map.
    pub locations: usize,
    pub seed: u64,
    /// Use collision-free tables with `d = C_a·C_p` instead of `sketch_dims`.
    pub collision_free: bool,
}

impl Default for SketchCheckOptions {
    fn default() -> Self {
        SketchCheckOptions {
            appearance_channels: 16,
            part_channels: 8,
            sketch_dims: vec![128, 256, 512, 1024],
            trials: 100,
            locations: 32,
            seed: 0,
            collision_free: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchCheckRow {
    pub dim: usize,
    pub median_rel_error: f64,
}

fn median(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Median relative error of `⟨compact(a₁,p₁), compact(a₂,p₂)⟩` against the
/// exact inner product, over `trials` random non-negative feature-map pairs,
/// each with fresh sketch tables.
pub fn sketch_error_table(opts: &SketchCheckOptions) -> Result<Vec<SketchCheckRow>> {
    let (c_a, c_p, s) = (opts.appearance_channels, opts.part_channels, opts.locations);
    if opts.trials == 0 {
        return Err(Error::Usage("trials must be at least 1".into()));
    }
    if c_a == 0 || c_p == 0 || s == 0 {
        return Err(Error::Usage("channel counts and locations must be positive".into()));
    }
    let dims = if opts.collision_free {
        vec![c_a * c_p]
    } else {
        opts.sketch_dims.clone()
    };
    if dims.is_empty() {
        return Err(Error::Usage("need at least one sketch dimension".into()));
    }
    let mut data_rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let pairs: Vec<[FeatureMap; 4]> = (0..opts.trials)
        .map(|_| {
            let mut map = |c: usize, kind| FeatureMap {
                tensor: Tensor::uniform(&[c, s, 1], 0.0, 1.0, &mut data_rng),
                kind,
            };
            [
                map(c_a, FeatureKind::Appearance),
                map(c_p, FeatureKind::Confidence),
                map(c_a, FeatureKind::Appearance),
                map(c_p, FeatureKind::Confidence),
            ]
        })
        .collect();
    let exact: Vec<f64> = pairs
        .iter()
        .map(|[a1, p1, a2, p2]| {
            let f1 = bilinear_pool_exact(a1, p1)?;
            let f2 = bilinear_pool_exact(a2, p2)?;
            Ok(dot(f1.vector.data(), f2.vector.data()))
        })
        .collect::<Result<_>>()?;

    dims.iter()
        .map(|&d| {
            let errors = pairs
                .iter()
                .zip(&exact)
                .enumerate()
                .map(|(t, ([a1, p1, a2, p2], &e))| {
                    let sketch_seed = opts.seed.wrapping_mul(1_000_003).wrapping_add(t as u64);
                    let params = Arc::new(if opts.collision_free {
                        SketchParams::aligned(c_a, c_p, sketch_seed)?
                    } else {
                        SketchParams::generate(c_a, c_p, d, sketch_seed)?
                    });
                    let c1 = compact_bilinear_pool(a1, p1, &params)?;
                    let c2 = compact_bilinear_pool(a2, p2, &params)?;
                    Ok((dot(c1.vector.data(), c2.vector.data()) - e).abs() / e.abs().max(f64::MIN_POSITIVE))
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok(SketchCheckRow {
                dim: d,
                median_rel_error: median(errors),
            })
        })
        .collect()
}

/// Non-increasing error column with the last entry below `threshold`.
pub fn table_passes(rows: &[SketchCheckRow], threshold: f64) -> bool {
    rows.windows(2).all(|w| w[1].median_rel_error <= w[0].median_rel_error)
        && rows.last().is_some_and(|r| r.median_rel_error < threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collision_free_is_exact() {
        let rows = sketch_error_table(&SketchCheckOptions {
            collision_free: true,
            trials: 10,
            ..SketchCheckOptions::default()
        })
        .unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].dim, 128);
        assert!(rows[0].median_rel_error < 1e-9);
    }

    #[test]
    fn zero_trials_rejected() {
        let opts = SketchCheckOptions {
            trials: 0,
            ..SketchCheckOptions::default()
        };
        assert!(matches!(sketch_error_table(&opts), Err(Error::Usage(_))));
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn pass_rule() {
        let row = |dim, e| SketchCheckRow {
            dim,
            median_rel_error: e,
        };
        assert!(table_passes(&[row(1, 0.3), row(2, 0.2), row(3, 0.05)], 0.1));
        assert!(!table_passes(&[row(1, 0.3), row(2, 0.35), row(3, 0.05)], 0.1));
        assert!(!table_passes(&[row(1, 0.3), row(2, 0.2)], 0.1));
        assert!(!table_passes(&[], 0.1));
    }
}
