//! Gradient-noise instrumentation.
//!
//! Everything here is read-only over the model: gradients are sampled
//! batch by batch without ever updating parameters, matching how the
//! relative-variation and gradient-change protocols are defined.

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::mask::Mask;
use crate::model::{forward_loss, Batch, ParamStore, TransformerConfig};
use crate::runner::BatchStream;

/// One sampled batch gradient over the flat prunable space.
#[derive(Debug, Clone)]
pub struct GradSnapshot {
    pub grad: Vec<f64>,
    pub batch_id: usize,
    pub iteration: usize,
    pub density: f64,
}

/// Elementwise relative gradient variation plus the summary statistics
/// used for distribution reports.
#[derive(Debug, Clone)]
pub struct RgvSummary {
    pub values: Vec<f64>,
    pub l1: f64,
    /// Q1, median, Q3 of the values.
    pub quartiles: [f64; 3],
    /// Count of values beyond 1.5 * IQR outside [Q1, Q3].
    pub outliers: usize,
    /// Coordinates where |g| fell below the floor.
    pub floored_count: usize,
}

/// `(g_i - g) / max(|g|, floor)` elementwise.
pub fn rgv(g_i: &[f64], g_full: &[f64], floor: f64) -> Result<RgvSummary> {
    if g_i.len() != g_full.len() {
        return Err(Error::shape(
            "rgv",
            format!("{} vs {} coordinates", g_i.len(), g_full.len()),
        ));
    }
    if floor <= 0.0 {
        return Err(Error::InvalidArgument(format!("rgv floor must be positive, got {floor}")));
    }
    let mut floored = 0usize;
    let values: Vec<f64> = g_i
        .iter()
        .zip(g_full)
        .map(|(&gi, &g)| {
            let denom = if g.abs() >= floor {
                g.abs()
            } else {
                floored += 1;
                floor
            };
            // Divide by the signed full gradient, floored in magnitude.
            (gi - g) / denom.copysign(if g == 0.0 { 1.0 } else { g })
        })
        .collect();
    let l1 = values.iter().map(|v| v.abs()).sum();
    let quartiles = quartiles_of(&values);
    let iqr = quartiles[2] - quartiles[0];
    let (lo, hi) = (quartiles[0] - 1.5 * iqr, quartiles[2] + 1.5 * iqr);
    let outliers = values.iter().filter(|&&v| v < lo || v > hi).count();
    Ok(RgvSummary {
        values,
        l1,
        quartiles,
        outliers,
        floored_count: floored,
    })
}

/// Linear-interpolation quartiles of an unsorted slice.
fn quartiles_of(values: &[f64]) -> [f64; 3] {
    if values.is_empty() {
        return [0.0; 3];
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite rgv values"));
    let q = |frac: f64| -> f64 {
        let pos = frac * (sorted.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        let w = pos - lo as f64;
        sorted[lo] * (1.0 - w) + sorted[hi] * w
    };
    [q(0.25), q(0.5), q(0.75)]
}

/// Gradient noise variance computed two ways: directly from the
/// snapshot norms, and through the relative-variation route. The two
/// agree identically when `g_full` is the exact mean of the snapshots
/// and no coordinate hits the floor.
#[derive(Debug, Clone, Copy)]
pub struct SgnVariance {
    /// `(1/S) * [(1/N) * sum g_i.g_i  -  g.g]`
    pub sigma: f64,
    /// Same quantity reconstructed from RGV terms.
    pub sigma_via_rgv: f64,
    pub batch_size: usize,
    pub batch_count: usize,
}

pub fn sgn_variance(
    snapshots: &[GradSnapshot],
    g_full: &[f64],
    batch_size: usize,
    floor: f64,
) -> Result<SgnVariance> {
    if snapshots.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "sgn variance needs at least 2 snapshots, got {}",
            snapshots.len()
        )));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    for s in snapshots {
        if s.grad.len() != g_full.len() {
            return Err(Error::shape(
                "sgn_variance",
                format!("snapshot {} vs mean {} coordinates", s.grad.len(), g_full.len()),
            ));
        }
    }
    let n = snapshots.len() as f64;
    let s_scale = batch_size as f64;

    let gg: f64 = g_full.iter().map(|v| v * v).sum();
    let mean_gigi: f64 = snapshots
        .iter()
        .map(|s| s.grad.iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        / n;
    let sigma = (mean_gigi - gg) / s_scale;

    // RGV route: per snapshot, (r ⊙ g)·(r ⊙ g) + (r ⊙ g)·g + g·(r ⊙ g),
    // averaged over snapshots. With exact division r ⊙ g is g_i - g and
    // the cross terms cancel against the mean.
    let mut acc = 0.0;
    for s in snapshots {
        let r = rgv(&s.grad, g_full, floor)?;
        let rg: Vec<f64> = r.values.iter().zip(g_full).map(|(rv, gv)| rv * gv).collect();
        let quad: f64 = rg.iter().map(|v| v * v).sum();
        let cross: f64 = rg.iter().zip(g_full).map(|(a, b)| a * b).sum();
        acc += quad + 2.0 * cross;
    }
    let sigma_via_rgv = acc / n / s_scale;

    Ok(SgnVariance {
        sigma,
        sigma_via_rgv,
        batch_size,
        batch_count: snapshots.len(),
    })
}

/// Sample `count` consecutive batch gradients of a fixed (optionally
/// masked) model without updating it. Gradients are restricted to the
/// prunable space; when a mask is given, its pruned coordinates have
/// their gradient entries zeroed and the snapshot density recorded.
pub fn snapshot_gradients(
    store: &ParamStore,
    cfg: &TransformerConfig,
    data: &Dataset,
    mask: Option<&Mask>,
    batch_size: usize,
    count: usize,
    seed: u64,
) -> Result<Vec<GradSnapshot>> {
    if count == 0 {
        return Err(Error::InvalidArgument("need at least one snapshot".into()));
    }
    if let Some(m) = mask {
        if !m.aligned_with(store) {
            return Err(Error::shape(
                "snapshot_gradients",
                "mask does not align with store",
            ));
        }
    }
    let density = mask.map(|m| m.density()).unwrap_or(1.0);
    let keep = mask.map(|m| m.flat());
    let mut stream = BatchStream::new(data, batch_size, seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let batch = stream.next_batch();
        let grad = prunable_gradient(store, cfg, &batch)?;
        let grad = match &keep {
            Some(bits) => grad
                .iter()
                .zip(bits)
                .map(|(g, &k)| if k { *g } else { 0.0 })
                .collect(),
            None => grad,
        };
        out.push(GradSnapshot {
            grad,
            batch_id: i,
            iteration: i,
            density,
        });
    }
    Ok(out)
}

fn prunable_gradient(store: &ParamStore, cfg: &TransformerConfig, batch: &Batch) -> Result<Vec<f64>> {
    let mut fp = forward_loss(store, cfg, batch)?;
    fp.backward()?;
    let full = fp.flat_grad(store);
    let coords = store.prunable_coords();
    Ok(full
        .iter()
        .zip(&coords)
        .filter_map(|(g, &p)| if p { Some(*g) } else { None })
        .collect())
}

/// Mean of the snapshot gradients, the stand-in for the full-data
/// gradient over the same sampled set.
pub fn mean_gradient(snapshots: &[GradSnapshot]) -> Result<Vec<f64>> {
    if snapshots.is_empty() {
        return Err(Error::InvalidArgument("no snapshots".into()));
    }
    let len = snapshots[0].grad.len();
    let mut mean = vec![0.0; len];
    for s in snapshots {
        if s.grad.len() != len {
            return Err(Error::shape("mean_gradient", "ragged snapshots"));
        }
        for (m, g) in mean.iter_mut().zip(&s.grad) {
            *m += g;
        }
    }
    for m in mean.iter_mut() {
        *m /= snapshots.len() as f64;
    }
    Ok(mean)
}

/// L1 norms of gradient differences between consecutive batches,
/// restricted to the kept coordinates of a fixed mask, with no
/// parameter updates in between. Returns `samples` values.
pub fn retained_grad_change(
    store: &ParamStore,
    cfg: &TransformerConfig,
    data: &Dataset,
    mask: &Mask,
    batch_size: usize,
    samples: usize,
    seed: u64,
) -> Result<Vec<f64>> {
    if samples < 1 {
        return Err(Error::InvalidArgument("need at least one sample".into()));
    }
    let snaps = snapshot_gradients(store, cfg, data, Some(mask), batch_size, samples + 1, seed)?;
    let keep = mask.flat();
    let mut out = Vec::with_capacity(samples);
    for pair in snaps.windows(2) {
        let l1 = pair[0]
            .grad
            .iter()
            .zip(&pair[1].grad)
            .zip(&keep)
            .filter(|(_, &k)| k)
            .map(|((a, b), _)| (b - a).abs())
            .sum();
        out.push(l1);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data;
    use crate::model::init_model;
    use crate::rng::SeedStream;

    #[test]
    fn rgv_identity_is_zero() {
        let g = [1.0, -2.0, 3.0];
        let r = rgv(&g, &g, 1e-12).unwrap();
        assert!(r.values.iter().all(|&v| v == 0.0));
        assert_eq!(r.l1, 0.0);
        assert_eq!(r.floored_count, 0);
    }

    #[test]
    fn rgv_doubling_gives_ones() {
        let g = [1.0, -2.0, 0.5];
        let gi: Vec<f64> = g.iter().map(|v| 2.0 * v).collect();
        let r = rgv(&gi, &g, 1e-12).unwrap();
        for v in &r.values {
            assert!((v - 1.0).abs() < 1e-12, "{v}");
        }
    }

    #[test]
    fn rgv_floors_zero_coordinates() {
        let g = [1.0, 0.0, -2.0];
        let gi = [1.5, 0.25, -2.0];
        let r = rgv(&gi, &g, 1e-12).unwrap();
        assert_eq!(r.floored_count, 1);
        assert!(r.values.iter().all(|v| v.is_finite()));
        assert!(r.values[1] > 0.0); // 0.25 / 1e-12, large but finite
    }

    #[test]
    fn rgv_is_scale_invariant_with_scaled_floor() {
        let mut rng = SeedStream::new(3);
        let g: Vec<f64> = (0..50).map(|_| rng.uniform_sym(1.0) + 2.0).collect();
        let gi: Vec<f64> = g.iter().map(|v| v + rng.uniform_sym(0.5)).collect();
        let a = rgv(&gi, &g, 1e-9).unwrap();
        for &c in &[37.5, -3.0] {
            let g_scaled: Vec<f64> = g.iter().map(|v| c * v).collect();
            let gi_scaled: Vec<f64> = gi.iter().map(|v| c * v).collect();
            let b = rgv(&gi_scaled, &g_scaled, 1e-9 * c.abs()).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!((x - y).abs() < 1e-12, "c = {c}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn rgv_mismatch_errors() {
        assert!(rgv(&[1.0], &[1.0, 2.0], 1e-12).is_err());
    }

    #[test]
    fn sgn_variance_of_identical_snapshots_is_zero() {
        let g = vec![0.5, -0.25, 1.0];
        let snaps: Vec<GradSnapshot> = (0..3)
            .map(|i| GradSnapshot {
                grad: g.clone(),
                batch_id: i,
                iteration: i,
                density: 1.0,
            })
            .collect();
        let v = sgn_variance(&snaps, &g, 4, 1e-12).unwrap();
        assert!(v.sigma.abs() < 1e-15);
    }

    #[test]
    fn sgn_variance_symmetric_pair() {
        // snapshots g + d and g - d with mean g: sigma = d.d / S.
        let g = vec![1.0, 2.0, -1.0];
        let d = vec![0.5, -0.25, 0.1];
        let plus: Vec<f64> = g.iter().zip(&d).map(|(a, b)| a + b).collect();
        let minus: Vec<f64> = g.iter().zip(&d).map(|(a, b)| a - b).collect();
        let snaps = vec![
            GradSnapshot { grad: plus, batch_id: 0, iteration: 0, density: 1.0 },
            GradSnapshot { grad: minus, batch_id: 1, iteration: 1, density: 1.0 },
        ];
        let s = 8;
        let v = sgn_variance(&snaps, &g, s, 1e-12).unwrap();
        let dd: f64 = d.iter().map(|x| x * x).sum();
        assert!((v.sigma - dd / s as f64).abs() < 1e-14, "{} vs {}", v.sigma, dd / s as f64);
    }

    #[test]
    fn variance_routes_agree_on_random_sets() {
        let mut rng = SeedStream::new(17);
        for trial in 0..100 {
            let w = 20 + rng.index(30);
            let n = 2 + rng.index(6);
            // zero-free base gradient
            let base: Vec<f64> = (0..w)
                .map(|_| {
                    let v = rng.uniform_sym(2.0);
                    if v >= 0.0 {
                        v + 0.1
                    } else {
                        v - 0.1
                    }
                })
                .collect();
            let snaps: Vec<GradSnapshot> = (0..n)
                .map(|i| GradSnapshot {
                    grad: base.iter().map(|v| v + rng.uniform_sym(0.5)).collect(),
                    batch_id: i,
                    iteration: i,
                    density: 1.0,
                })
                .collect();
            let mean = mean_gradient(&snaps).unwrap();
            let v = sgn_variance(&snaps, &mean, 4, 1e-12).unwrap();
            assert!(
                (v.sigma - v.sigma_via_rgv).abs() < 1e-10,
                "trial {trial}: {} vs {}",
                v.sigma,
                v.sigma_via_rgv
            );
        }
    }

    #[test]
    fn diagnostics_leave_model_untouched() {
        let cfg = TransformerConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ffn_hidden: 16,
            seq_len: 6,
            vocab: 2,
            classes: 2,
        };
        let store = init_model(&cfg, 5).unwrap();
        let before = store.flat_all();
        let d = data::parity(6, 32, 16, 1);
        let mask = Mask::all_ones(&store);
        let snaps = snapshot_gradients(&store, &cfg, &d, Some(&mask), 8, 3, 7).unwrap();
        let mean = mean_gradient(&snaps).unwrap();
        let _ = sgn_variance(&snaps, &mean, 8, 1e-12).unwrap();
        let _ = retained_grad_change(&store, &cfg, &d, &mask, 8, 2, 7).unwrap();
        let after = store.flat_all();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn identical_batches_give_zero_change() {
        // A dataset with a single training example repeats the same batch.
        let cfg = TransformerConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ffn_hidden: 16,
            seq_len: 4,
            vocab: 2,
            classes: 2,
        };
        let store = init_model(&cfg, 9).unwrap();
        let mut d = data::parity(4, 8, 8, 2);
        d.train.truncate(1);
        let mask = Mask::all_ones(&store);
        let changes = retained_grad_change(&store, &cfg, &d, &mask, 1, 2, 3).unwrap();
        assert!(changes.iter().all(|&c| c == 0.0), "{changes:?}");
    }

    #[test]
    fn dense_vs_sparse_change_recorded_not_ranked() {
        // Both series exist and are finite; no ordering between them is
        // asserted (a coordinate subset carries no norm guarantee).
        let cfg = TransformerConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ffn_hidden: 16,
            seq_len: 6,
            vocab: 2,
            classes: 2,
        };
        let store = init_model(&cfg, 11).unwrap();
        let d = data::parity(6, 64, 16, 4);
        let dense = Mask::all_ones(&store);
        let mut rng = SeedStream::new(13);
        let scores: Vec<f64> = (0..store.prunable_len()).map(|_| rng.uniform01()).collect();
        let sparse = crate::mask::build_mask(&scores, 0.5, None, false, &store).unwrap();
        let a = retained_grad_change(&store, &cfg, &d, &dense, 8, 3, 5).unwrap();
        let b = retained_grad_change(&store, &cfg, &d, &sparse, 8, 3, 5).unwrap();
        assert_eq!(a.len(), 3);
        assert_eq!(b.len(), 3);
        assert!(a.iter().chain(b.iter()).all(|v| v.is_finite()));
    }

    #[test]
    fn retained_change_rejects_zero_samples() {
        let cfg = TransformerConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ffn_hidden: 16,
            seq_len: 4,
            vocab: 2,
            classes: 2,
        };
        let store = init_model(&cfg, 1).unwrap();
        let d = data::parity(4, 8, 8, 1);
        let mask = Mask::all_ones(&store);
        assert!(retained_grad_change(&store, &cfg, &d, &mask, 4, 0, 1).is_err());
    }
}
