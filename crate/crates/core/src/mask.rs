//! Binary pruning masks: global percentile thresholding over the flat
//! prunable score vector, mask application, and the `SEVENMASK v1`
//! checkpoint format.
//!
//! Thresholding keeps HIGH scores: the bottom `floor(P*w)` coordinates
//! by (score, index) order are pruned, so ties resolve to pruning the
//! lower index first and the kept count is exact by construction.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::model::ParamStore;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// true = kept, false = pruned; row-major over the tensor.
    pub bits: Vec<bool>,
}

/// Per-parameter binary masks aligned with a store's prunable entries.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    entries: Vec<MaskEntry>,
}

impl Mask {
    /// All-ones mask matching a store's prunable layout.
    pub fn all_ones(store: &ParamStore) -> Mask {
        let entries = store
            .prunable_layout()
            .into_iter()
            .map(|(name, shape, numel)| MaskEntry {
                name,
                shape,
                bits: vec![true; numel],
            })
            .collect();
        Mask { entries }
    }

    /// Rebuild from a flat bit vector in prunable-parameter order.
    pub fn from_flat(store: &ParamStore, bits: &[bool]) -> Result<Mask> {
        if bits.len() != store.prunable_len() {
            return Err(Error::shape(
                "mask",
                format!(
                    "{} bits for {} prunable coordinates",
                    bits.len(),
                    store.prunable_len()
                ),
            ));
        }
        let mut entries = Vec::new();
        let mut off = 0;
        for (name, shape, numel) in store.prunable_layout() {
            entries.push(MaskEntry {
                name,
                shape,
                bits: bits[off..off + numel].to_vec(),
            });
            off += numel;
        }
        Ok(Mask { entries })
    }

    pub fn entries(&self) -> &[MaskEntry] {
        &self.entries
    }

    pub fn flat(&self) -> Vec<bool> {
        self.entries.iter().flat_map(|e| e.bits.iter().copied()).collect()
    }

    pub fn total(&self) -> usize {
        self.entries.iter().map(|e| e.bits.len()).sum()
    }

    pub fn kept(&self) -> usize {
        self.entries
            .iter()
            .map(|e| e.bits.iter().filter(|&&b| b).count())
            .sum()
    }

    pub fn pruned(&self) -> usize {
        self.total() - self.kept()
    }

    pub fn density(&self) -> f64 {
        self.kept() as f64 / self.total() as f64
    }

    pub fn aligned_with(&self, store: &ParamStore) -> bool {
        let layout = store.prunable_layout();
        layout.len() == self.entries.len()
            && layout
                .iter()
                .zip(&self.entries)
                .all(|((name, shape, numel), e)| {
                    e.name == *name && e.shape == *shape && e.bits.len() == *numel
                })
    }

    /// True when every coordinate pruned in `self` is also pruned in `other`.
    pub fn pruned_subset_of(&self, other: &Mask) -> bool {
        self.flat()
            .iter()
            .zip(other.flat())
            .all(|(&a, b)| a || !b)
    }

    // ---- checkpoint format -----------------------------------------------
    //
    //   SEVENMASK v1 <total> <kept>
    //   <name> <d0>x<d1>... <hex bitset>
    //
    // Bits pack little-endian within each byte (bit i of byte b is
    // element 8*b + i of the row-major tensor); bytes are lowercase hex.

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "SEVENMASK v1 {} {}", self.total(), self.kept())?;
        for e in &self.entries {
            let dims: Vec<String> = e.shape.iter().map(|d| d.to_string()).collect();
            write!(w, "{} {} ", e.name, dims.join("x"))?;
            let mut bytes = vec![0u8; e.bits.len().div_ceil(8)];
            for (i, &b) in e.bits.iter().enumerate() {
                if b {
                    bytes[i / 8] |= 1 << (i % 8);
                }
            }
            for byte in bytes {
                write!(w, "{byte:02x}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: BufRead>(r: R) -> Result<Mask> {
        let bad = |line: usize, msg: String| Error::Parse {
            path: "<mask checkpoint>".into(),
            line,
            msg,
        };
        let mut lines = r.lines().enumerate();
        let (_, header) = lines
            .next()
            .ok_or_else(|| bad(1, "empty checkpoint".into()))?;
        let header = header.map_err(|e| bad(1, e.to_string()))?;
        let mut it = header.split_whitespace();
        if it.next() != Some("SEVENMASK") || it.next() != Some("v1") {
            return Err(bad(1, "missing SEVENMASK v1 header".into()));
        }
        let total: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(1, "bad total".into()))?;
        let kept: usize = it
            .next()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad(1, "bad kept count".into()))?;

        let mut entries = Vec::new();
        for (lineno, line) in lines {
            let line = line.map_err(|e| bad(lineno + 1, e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            let name = parts
                .next()
                .ok_or_else(|| bad(lineno + 1, "missing name".into()))?
                .to_string();
            let shape_str = parts
                .next()
                .ok_or_else(|| bad(lineno + 1, "missing shape".into()))?;
            let hex = parts
                .next()
                .ok_or_else(|| bad(lineno + 1, "missing bitset".into()))?;
            let shape: Vec<usize> = shape_str
                .split('x')
                .map(|d| {
                    d.parse()
                        .map_err(|_| bad(lineno + 1, format!("bad extent {d:?}")))
                })
                .collect::<Result<_>>()?;
            let numel: usize = shape.iter().product();
            if hex.len() != numel.div_ceil(8) * 2 {
                return Err(bad(lineno + 1, format!("bitset length {} != expected", hex.len())));
            }
            let mut bits = Vec::with_capacity(numel);
            for i in 0..numel {
                let byte_hex = &hex[(i / 8) * 2..(i / 8) * 2 + 2];
                let byte = u8::from_str_radix(byte_hex, 16)
                    .map_err(|_| bad(lineno + 1, format!("bad hex {byte_hex:?}")))?;
                bits.push(byte & (1 << (i % 8)) != 0);
            }
            entries.push(MaskEntry { name, shape, bits });
        }
        let mask = Mask { entries };
        if mask.total() != total || mask.kept() != kept {
            return Err(bad(
                1,
                format!(
                    "header says {total}/{kept}, records hold {}/{}",
                    mask.total(),
                    mask.kept()
                ),
            ));
        }
        Ok(mask)
    }
}

/// Global percentile threshold: the score value at the boundary of the
/// kept set once `floor(P * w)` coordinates are pruned in (score, index)
/// order. `P = 0` yields negative infinity (nothing pruned), `P = 1`
/// positive infinity (everything pruned).
pub fn threshold(scores: &[f64], p: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::InvalidArgument("threshold over empty scores".into()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("pruning rate {p} outside [0,1]")));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            context: "threshold scores".into(),
        });
    }
    let w = scores.len();
    let k = prune_count(p, w);
    if k == 0 {
        return Ok(f64::NEG_INFINITY);
    }
    if k == w {
        return Ok(f64::INFINITY);
    }
    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by(|&a, &b| {
        scores[a]
            .partial_cmp(&scores[b])
            .expect("no NaN after check")
            .then(a.cmp(&b))
    });
    Ok(scores[order[k]])
}

fn prune_count(p: f64, w: usize) -> usize {
    ((p * w as f64).floor() as usize).min(w)
}

/// Build the mask keeping the top `1 - P` fraction by score. Under
/// `resurrection = false` previously pruned coordinates have their
/// scores forced to negative infinity first, so the pruned set can only
/// grow; if the requested rate would prune fewer coordinates than are
/// already gone, the previous mask is returned unchanged.
pub fn build_mask(
    scores: &[f64],
    p: f64,
    prev: Option<&Mask>,
    resurrection: bool,
    store: &ParamStore,
) -> Result<Mask> {
    let w = store.prunable_len();
    if scores.len() != w {
        return Err(Error::shape(
            "build_mask",
            format!("{} scores for {} prunable coordinates", scores.len(), w),
        ));
    }
    if scores.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            context: "build_mask scores".into(),
        });
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("pruning rate {p} outside [0,1]")));
    }
    if let Some(prev) = prev {
        if !prev.aligned_with(store) {
            return Err(Error::shape(
                "build_mask",
                "previous mask does not align with store",
            ));
        }
    }

    let k = prune_count(p, w);
    let mut effective: Vec<f64> = scores.to_vec();
    if !resurrection {
        if let Some(prev) = prev {
            let prev_bits = prev.flat();
            if k < prev.pruned() {
                log::warn!(
                    "pruning rate {p} asks for {k} pruned but {} are already pruned; keeping previous mask",
                    prev.pruned()
                );
                return Ok(prev.clone());
            }
            for (s, &keep) in effective.iter_mut().zip(&prev_bits) {
                if !keep {
                    *s = f64::NEG_INFINITY;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..w).collect();
    order.sort_by(|&a, &b| {
        effective[a]
            .partial_cmp(&effective[b])
            .expect("no NaN after check")
            .then(a.cmp(&b))
    });
    let mut bits = vec![true; w];
    for &idx in &order[..k] {
        bits[idx] = false;
    }
    Mask::from_flat(store, &bits)
}

/// Zero every pruned coordinate of the store's prunable parameters.
pub fn apply_mask(store: &mut ParamStore, mask: &Mask) -> Result<()> {
    if !mask.aligned_with(store) {
        return Err(Error::shape(
            "apply_mask",
            "mask does not align with store's prunable entries",
        ));
    }
    for entry in &mask.entries {
        let p = store.get_mut(&entry.name).expect("aligned mask");
        for (v, &keep) in p.tensor.data_mut().iter_mut().zip(&entry.bits) {
            if !keep {
                *v = 0.0;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_model, TransformerConfig};
    use crate::tensor::Tensor;

    fn small_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::new(vec![2, 2], vec![1.0, -2.0, 3.0, -4.0]).unwrap(), true)
            .unwrap();
        s.insert("b", Tensor::new(vec![2], vec![5.0, 6.0]).unwrap(), false)
            .unwrap();
        s.insert("c", Tensor::new(vec![2], vec![7.0, -8.0]).unwrap(), true)
            .unwrap();
        s
    }

    #[test]
    fn threshold_zero_rate_keeps_all() {
        let t = threshold(&[4.0, 1.0, 3.0, 2.0], 0.0).unwrap();
        assert_eq!(t, f64::NEG_INFINITY);
    }

    #[test]
    fn threshold_half_distinct() {
        // keep {4,3}, prune {1,2}: boundary is 3.
        let t = threshold(&[4.0, 1.0, 3.0, 2.0], 0.5).unwrap();
        assert_eq!(t, 3.0);
    }

    #[test]
    fn threshold_empty_errors() {
        assert!(threshold(&[], 0.5).is_err());
    }

    #[test]
    fn tie_break_prunes_lower_index_first() {
        let store = {
            let mut s = ParamStore::new();
            s.insert("w", Tensor::new(vec![4], vec![1.0; 4]).unwrap(), true).unwrap();
            s
        };
        let scores = [5.0; 4];
        let m = build_mask(&scores, 0.5, None, true, &store).unwrap();
        assert_eq!(m.flat(), vec![false, false, true, true]);
        assert_eq!(m.pruned(), 2);
    }

    #[test]
    fn build_mask_counts_exactly() {
        let mut store = ParamStore::new();
        store
            .insert("w", Tensor::zeros(vec![1000]), true)
            .unwrap();
        let mut rng = crate::rng::SeedStream::new(2);
        let scores: Vec<f64> = (0..1000).map(|_| rng.uniform01()).collect();
        let m = build_mask(&scores, 0.6, None, false, &store).unwrap();
        assert_eq!(m.kept(), 400);
        assert_eq!(m.pruned(), 600);
    }

    #[test]
    fn no_resurrection_keeps_pruned_pruned() {
        let store = {
            let mut s = ParamStore::new();
            s.insert("w", Tensor::new(vec![4], vec![1.0; 4]).unwrap(), true).unwrap();
            s
        };
        // First prune index 0 (lowest score).
        let m1 = build_mask(&[0.0, 5.0, 6.0, 7.0], 0.25, None, false, &store).unwrap();
        assert_eq!(m1.flat(), vec![false, true, true, true]);
        // Index 0 now has the top score, but stays pruned without resurrection.
        let m2 = build_mask(&[9.0, 1.0, 2.0, 3.0], 0.5, Some(&m1), false, &store).unwrap();
        assert_eq!(m2.flat(), vec![false, false, true, true]);
        assert!(m1.pruned_subset_of(&m2));
        // With resurrection it competes again and is revived.
        let m3 = build_mask(&[9.0, 1.0, 2.0, 3.0], 0.5, Some(&m1), true, &store).unwrap();
        assert_eq!(m3.flat(), vec![true, false, false, true]);
    }

    #[test]
    fn monotone_clamp_returns_previous_mask() {
        let store = {
            let mut s = ParamStore::new();
            s.insert("w", Tensor::new(vec![4], vec![1.0; 4]).unwrap(), true).unwrap();
            s
        };
        let m1 = build_mask(&[0.0, 0.1, 5.0, 6.0], 0.5, None, false, &store).unwrap();
        assert_eq!(m1.pruned(), 2);
        let m2 = build_mask(&[1.0, 2.0, 3.0, 4.0], 0.25, Some(&m1), false, &store).unwrap();
        assert_eq!(m2, m1);
    }

    #[test]
    fn shifting_scores_keeps_mask() {
        let store = {
            let mut s = ParamStore::new();
            s.insert("w", Tensor::zeros(vec![64]), true).unwrap();
            s
        };
        let mut rng = crate::rng::SeedStream::new(4);
        let scores: Vec<f64> = (0..64).map(|_| rng.uniform01()).collect();
        let shifted: Vec<f64> = scores.iter().map(|v| v + 123.25).collect();
        let a = build_mask(&scores, 0.4, None, false, &store).unwrap();
        let b = build_mask(&shifted, 0.4, None, false, &store).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn apply_mask_zeroes_and_is_idempotent() {
        let mut store = small_store();
        let m = Mask::from_flat(&store, &[true, false, true, false, false, true]).unwrap();
        apply_mask(&mut store, &m).unwrap();
        assert_eq!(store.get("a").unwrap().tensor.data(), &[1.0, 0.0, 3.0, 0.0]);
        assert_eq!(store.get("b").unwrap().tensor.data(), &[5.0, 6.0]); // untouched
        assert_eq!(store.get("c").unwrap().tensor.data(), &[0.0, -8.0]);
        let snapshot = store.flat_all();
        apply_mask(&mut store, &m).unwrap();
        assert_eq!(store.flat_all(), snapshot);
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let mut store = small_store();
        let before = store.flat_all();
        let m = Mask::all_ones(&store);
        apply_mask(&mut store, &m).unwrap();
        let after = store.flat_all();
        assert!(before.iter().zip(&after).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn misaligned_mask_errors() {
        let mut store = small_store();
        let other = {
            let mut s = ParamStore::new();
            s.insert("x", Tensor::zeros(vec![3]), true).unwrap();
            s
        };
        let m = Mask::all_ones(&other);
        assert!(apply_mask(&mut store, &m).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let cfg = TransformerConfig {
            layers: 1,
            d_model: 8,
            heads: 2,
            ffn_hidden: 16,
            seq_len: 4,
            vocab: 5,
            classes: 2,
        };
        let store = init_model(&cfg, 3).unwrap();
        let mut rng = crate::rng::SeedStream::new(6);
        let scores: Vec<f64> = (0..store.prunable_len()).map(|_| rng.uniform01()).collect();
        let mask = build_mask(&scores, 0.37, None, false, &store).unwrap();

        let mut buf = Vec::new();
        mask.write_checkpoint(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with(&format!("SEVENMASK v1 {} {}", mask.total(), mask.kept())));

        let loaded = Mask::read_checkpoint(std::io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(loaded, mask);
        assert!(loaded.aligned_with(&store));
    }

    #[test]
    fn checkpoint_rejects_corrupt_header() {
        let text = "SEVENMASK v2 1 1\nw 1 01\n";
        assert!(Mask::read_checkpoint(std::io::BufReader::new(text.as_bytes())).is_err());
        let text = "SEVENMASK v1 5 5\nw 4 0f\n";
        assert!(Mask::read_checkpoint(std::io::BufReader::new(text.as_bytes())).is_err());
    }
}
