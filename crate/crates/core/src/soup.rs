//! Weighted averaging of model checkpoints ("souping").
//!
//! Specialist checkpoints fine-tuned on different subdomains are folded
//! back into one set of weights by a convex combination, with weights
//! derived from the subdomain dataset sizes. Averaging runs in f64 per
//! element with a fixed input order, so a merge is deterministic and a
//! two-level merge with product weights reproduces the flat merge.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tensor_file, write_tensor_file};
use crate::tensor::Tensor;

/// Decay used for the running average of training checkpoints.
pub const EMA_DECAY: f64 = 0.9999;

/// One named checkpoint: tensors plus the provenance needed to weight it.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    pub subdomain: String,
    /// Number of training samples behind this checkpoint.
    pub dataset_size: u64,
    params: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new(subdomain: impl Into<String>, dataset_size: u64) -> Self {
        Self { subdomain: subdomain.into(), dataset_size, params: BTreeMap::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Parameter("parameter name must not be empty".into()));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    /// Parameter names in sorted order.
    pub fn names(&self) -> Vec<&str> {
        self.params.keys().map(String::as_str).collect()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// How dataset sizes turn into merge weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScheme {
    /// Every checkpoint counts the same.
    Equal,
    /// Weights follow dataset sizes linearly.
    Proportional,
    /// Weights follow the square roots of dataset sizes, damping the
    /// advantage of very large subdomains.
    Sqrt,
}

impl WeightScheme {
    pub fn as_str(&self) -> &'static str {
        match self {
            WeightScheme::Equal => "equal",
            WeightScheme::Proportional => "proportional",
            WeightScheme::Sqrt => "sqrt",
        }
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "equal" => Ok(WeightScheme::Equal),
            "proportional" => Ok(WeightScheme::Proportional),
            "sqrt" => Ok(WeightScheme::Sqrt),
            other => Err(Error::Parameter(format!(
                "unknown weight scheme {other:?}; expected equal, proportional, or sqrt"
            ))),
        }
    }
}

/// Normalized merge weights for the given dataset sizes. All sizes must
/// be positive; the result sums to one.
pub fn soup_weights(sizes: &[u64], scheme: WeightScheme) -> Result<Vec<f64>> {
    if sizes.is_empty() {
        return Err(Error::Parameter("cannot derive weights from zero checkpoints".into()));
    }
    if let Some(pos) = sizes.iter().position(|&s| s == 0) {
        return Err(Error::Parameter(format!(
            "dataset size at index {pos} is zero; every checkpoint needs provenance"
        )));
    }
    let raw: Vec<f64> = match scheme {
        WeightScheme::Equal => vec![1.0; sizes.len()],
        WeightScheme::Proportional => sizes.iter().map(|&s| s as f64).collect(),
        WeightScheme::Sqrt => sizes.iter().map(|&s| (s as f64).sqrt()).collect(),
    };
    let total: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / total).collect())
}

fn check_aligned(sets: &[ParamSet]) -> Result<()> {
    let first = &sets[0];
    for (idx, set) in sets.iter().enumerate().skip(1) {
        if set.params.len() != first.params.len() {
            return Err(Error::Alignment(format!(
                "checkpoint {idx} has {} parameters, checkpoint 0 has {}",
                set.params.len(),
                first.params.len()
            )));
        }
        for (name, tensor) in &first.params {
            let Some(other) = set.params.get(name) else {
                return Err(Error::Alignment(format!(
                    "checkpoint {idx} is missing parameter {name:?}"
                )));
            };
            if other.shape() != tensor.shape() {
                return Err(Error::Alignment(format!(
                    "parameter {name:?} is {:?} in checkpoint 0 but {:?} in checkpoint {idx}",
                    tensor.shape(),
                    other.shape()
                )));
            }
        }
    }
    Ok(())
}

fn weighted_sum(sets: &[ParamSet], weights: &[f64]) -> BTreeMap<String, Tensor> {
    let mut out = BTreeMap::new();
    for (name, first) in &sets[0].params {
        let mut acc = vec![0.0f64; first.len()];
        for (set, &w) in sets.iter().zip(weights) {
            for (a, &x) in acc.iter_mut().zip(set.params[name].data()) {
                *a += w * f64::from(x);
            }
        }
        let data: Vec<f32> = acc.into_iter().map(|x| x as f32).collect();
        out.insert(
            name.clone(),
            Tensor::new(first.shape(), data).expect("shape is unchanged"),
        );
    }
    out
}

/// Convex combination of aligned checkpoints. Weights must be
/// non-negative and sum to one (within 1e-9). The result's subdomain is
/// the inputs' joined with `+` and its dataset size is their sum, so
/// merges of merges compose naturally.
pub fn merge(sets: &[ParamSet], weights: &[f64]) -> Result<ParamSet> {
    if sets.is_empty() {
        return Err(Error::Parameter("merge needs at least one checkpoint".into()));
    }
    if sets.len() != weights.len() {
        return Err(Error::Parameter(format!(
            "{} checkpoints but {} weights",
            sets.len(),
            weights.len()
        )));
    }
    for &w in weights {
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Parameter(format!("weights must be non-negative, got {w}")));
        }
    }
    let total: f64 = weights.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::Parameter(format!("weights sum to {total}, expected 1")));
    }
    check_aligned(sets)?;
    let subdomain = sets.iter().map(|s| s.subdomain.as_str()).collect::<Vec<_>>().join("+");
    let dataset_size = sets.iter().fold(0u64, |acc, s| acc.saturating_add(s.dataset_size));
    Ok(ParamSet { subdomain, dataset_size, params: weighted_sum(sets, weights) })
}

/// One step of the running checkpoint average:
/// `decay * state + (1 - decay) * incoming`. Keeps the state's metadata.
pub fn ema_update(state: &ParamSet, incoming: &ParamSet, decay: f64) -> Result<ParamSet> {
    if !decay.is_finite() || !(0.0..1.0).contains(&decay) {
        return Err(Error::Parameter(format!("decay must lie in [0, 1), got {decay}")));
    }
    let pair = [state.clone(), incoming.clone()];
    check_aligned(&pair)?;
    Ok(ParamSet {
        subdomain: state.subdomain.clone(),
        dataset_size: state.dataset_size,
        params: weighted_sum(&pair, &[decay, 1.0 - decay]),
    })
}

/// On-disk index for a saved checkpoint: metadata plus one tensor file
/// per parameter, referenced relative to the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    subdomain: String,
    dataset_size: u64,
    params: BTreeMap<String, String>,
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' })
        .collect()
}

fn file_stem_for(set_name: &str, index: usize, param: &str) -> String {
    // Prefixing with the checkpoint name keeps several checkpoints in one
    // directory from clobbering each other's tensor files.
    format!("{}_{index:04}_{}.tbin", sanitize(set_name), sanitize(param))
}

/// Write `set` under `dir` as `<name>.json` plus one tensor file per
/// parameter, returning the manifest path.
pub fn save_param_set(dir: &Path, name: &str, set: &ParamSet) -> Result<PathBuf> {
    fs::create_dir_all(dir)?;
    let mut files = BTreeMap::new();
    for (i, (param, tensor)) in set.params.iter().enumerate() {
        let file = file_stem_for(name, i, param);
        write_tensor_file(dir.join(&file), tensor)?;
        files.insert(param.clone(), file);
    }
    let manifest = Manifest {
        subdomain: set.subdomain.clone(),
        dataset_size: set.dataset_size,
        params: files,
    };
    let path = dir.join(format!("{name}.json"));
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serialization cannot fail");
    fs::write(&path, text)?;
    Ok(path)
}

/// Load a checkpoint saved by [`save_param_set`].
pub fn load_param_set(manifest_path: &Path) -> Result<ParamSet> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)
        .map_err(|e| Error::Parse(format!("{}: {e}", manifest_path.display())))?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut set = ParamSet::new(manifest.subdomain, manifest.dataset_size);
    for (param, file) in manifest.params {
        let tensor = read_tensor_file(base.join(&file))?;
        set.insert(param, tensor)?;
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;
    use proptest::prelude::*;

    fn set_with(subdomain: &str, size: u64, values: &[(&str, Vec<f32>)]) -> ParamSet {
        let mut set = ParamSet::new(subdomain, size);
        for (name, data) in values {
            let t = Tensor::new(&[data.len()], data.clone()).unwrap();
            set.insert(*name, t).unwrap();
        }
        set
    }

    #[test]
    fn weight_schemes_match_hand_calculations() {
        let w = soup_weights(&[7, 7, 7], WeightScheme::Equal).unwrap();
        assert_eq!(w, vec![1.0 / 3.0; 3]);
        let w = soup_weights(&[100, 300], WeightScheme::Proportional).unwrap();
        assert_eq!(w, vec![0.25, 0.75]);
        let w = soup_weights(&[100, 400], WeightScheme::Sqrt).unwrap();
        assert!((w[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((w[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn weights_reject_missing_provenance() {
        assert_eq!(soup_weights(&[], WeightScheme::Equal).unwrap_err().kind(), "parameter");
        assert_eq!(
            soup_weights(&[10, 0], WeightScheme::Sqrt).unwrap_err().kind(),
            "parameter"
        );
    }

    #[test]
    fn scheme_names_round_trip() {
        for scheme in [WeightScheme::Equal, WeightScheme::Proportional, WeightScheme::Sqrt] {
            assert_eq!(scheme.as_str().parse::<WeightScheme>().unwrap(), scheme);
        }
        assert!("mean".parse::<WeightScheme>().is_err());
    }

    #[test]
    fn equal_merge_averages_elementwise() {
        let a = set_with("people", 10, &[("w", vec![1.0, 2.0, 3.0])]);
        let b = set_with("nature", 30, &[("w", vec![3.0, 6.0, 9.0])]);
        let merged = merge(&[a, b], &[0.5, 0.5]).unwrap();
        assert_eq!(merged.get("w").unwrap().data(), &[2.0, 4.0, 6.0]);
        assert_eq!(merged.subdomain, "people+nature");
        assert_eq!(merged.dataset_size, 40);
    }

    #[test]
    fn singleton_merge_is_the_identity() {
        let mut rng = Rng::new(4);
        let mut a = ParamSet::new("base", 5);
        a.insert("layer.w", rng.normal_tensor(&[3, 4]).unwrap()).unwrap();
        let merged = merge(std::slice::from_ref(&a), &[1.0]).unwrap();
        assert_eq!(merged.get("layer.w").unwrap().data(), a.get("layer.w").unwrap().data());
    }

    #[test]
    fn merge_validates_weights() {
        let a = set_with("a", 1, &[("w", vec![1.0])]);
        let b = set_with("b", 1, &[("w", vec![2.0])]);
        assert_eq!(
            merge(&[a.clone(), b.clone()], &[0.7, 0.7]).unwrap_err().kind(),
            "parameter"
        );
        assert_eq!(
            merge(&[a.clone(), b.clone()], &[1.5, -0.5]).unwrap_err().kind(),
            "parameter"
        );
        assert_eq!(merge(&[a.clone(), b], &[1.0]).unwrap_err().kind(), "parameter");
        assert_eq!(merge(&[], &[]).unwrap_err().kind(), "parameter");
    }

    #[test]
    fn merge_demands_aligned_checkpoints() {
        let a = set_with("a", 1, &[("w", vec![1.0, 2.0])]);
        let missing = set_with("b", 1, &[("v", vec![1.0, 2.0])]);
        assert_eq!(
            merge(&[a.clone(), missing], &[0.5, 0.5]).unwrap_err().kind(),
            "alignment"
        );
        let reshaped = set_with("b", 1, &[("w", vec![1.0, 2.0, 3.0])]);
        assert_eq!(
            merge(&[a, reshaped], &[0.5, 0.5]).unwrap_err().kind(),
            "alignment"
        );
    }

    #[test]
    fn two_level_merge_equals_flat_merge() {
        let mut rng = Rng::new(8);
        let mut sets = Vec::new();
        for (name, size) in [("people", 120u64), ("nature", 40), ("text", 240)] {
            let mut s = ParamSet::new(name, size);
            s.insert("w", rng.normal_tensor(&[64]).unwrap()).unwrap();
            s.insert("b", rng.normal_tensor(&[8]).unwrap()).unwrap();
            sets.push(s);
        }
        let flat_w = soup_weights(&[120, 40, 240], WeightScheme::Proportional).unwrap();
        let flat = merge(&sets, &flat_w).unwrap();
        // Level 1 merges the first two by their sizes; level 2 merges the
        // intermediate (carrying the summed size) with the third.
        let inner_w = soup_weights(&[120, 40], WeightScheme::Proportional).unwrap();
        let inner = merge(&sets[..2], &inner_w).unwrap();
        assert_eq!(inner.dataset_size, 160);
        let outer_w = soup_weights(&[inner.dataset_size, 240], WeightScheme::Proportional).unwrap();
        let two_level = merge(&[inner, sets[2].clone()], &outer_w).unwrap();
        for name in ["w", "b"] {
            let diff = flat.get(name).unwrap().max_abs_diff(two_level.get(name).unwrap()).unwrap();
            assert!(diff < 1e-6, "{name} differs by {diff}");
        }
        assert_eq!(two_level.dataset_size, flat.dataset_size);
    }

    #[test]
    fn ema_update_moves_by_one_minus_decay() {
        let state = set_with("run", 100, &[("w", vec![1.0, 1.0])]);
        let incoming = set_with("step", 1, &[("w", vec![0.0, 2.0])]);
        let next = ema_update(&state, &incoming, EMA_DECAY).unwrap();
        assert!((f64::from(next.get("w").unwrap().data()[0]) - 0.9999).abs() < 1e-7);
        assert!((f64::from(next.get("w").unwrap().data()[1]) - 1.0001).abs() < 1e-7);
        assert_eq!(next.subdomain, "run");
        assert_eq!(next.dataset_size, 100);
        assert_eq!(ema_update(&state, &incoming, 1.0).unwrap_err().kind(), "parameter");
        assert_eq!(ema_update(&state, &incoming, -0.1).unwrap_err().kind(), "parameter");
    }

    #[test]
    fn repeated_ema_decays_geometrically() {
        let mut state = set_with("run", 1, &[("w", vec![1.0])]);
        let target = set_with("step", 1, &[("w", vec![0.0])]);
        for _ in 0..10 {
            state = ema_update(&state, &target, 0.5).unwrap();
        }
        let got = f64::from(state.get("w").unwrap().data()[0]);
        assert!((got - 0.5f64.powi(10)).abs() < 1e-9);
    }

    #[test]
    fn save_and_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = Rng::new(12);
        let mut set = ParamSet::new("people", 77);
        set.insert("blocks.0/attn.w", rng.normal_tensor(&[4, 4]).unwrap()).unwrap();
        set.insert("blocks.0/mlp.w", rng.normal_tensor(&[4, 8]).unwrap()).unwrap();
        set.insert("head", rng.normal_tensor(&[4]).unwrap()).unwrap();
        let manifest = save_param_set(dir.path(), "people", &set).unwrap();
        assert!(manifest.ends_with("people.json"));
        let loaded = load_param_set(&manifest).unwrap();
        assert_eq!(loaded, set);
    }

    #[test]
    fn checkpoints_saved_into_one_directory_stay_distinct() {
        let dir = tempfile::tempdir().unwrap();
        let a = set_with("a", 1, &[("w", vec![1.0])]);
        let b = set_with("b", 1, &[("w", vec![2.0])]);
        let manifest_a = save_param_set(dir.path(), "a", &a).unwrap();
        let manifest_b = save_param_set(dir.path(), "b", &b).unwrap();
        assert_eq!(load_param_set(&manifest_a).unwrap(), a);
        assert_eq!(load_param_set(&manifest_b).unwrap(), b);
    }

    #[test]
    fn loading_reports_missing_pieces() {
        let dir = tempfile::tempdir().unwrap();
        let mut set = ParamSet::new("x", 1);
        set.insert("w", Tensor::full(&[2], 1.0).unwrap()).unwrap();
        let manifest = save_param_set(dir.path(), "x", &set).unwrap();
        std::fs::remove_file(dir.path().join("x_0000_w.tbin")).unwrap();
        assert_eq!(load_param_set(&manifest).unwrap_err().kind(), "io");
        std::fs::write(&manifest, "{not json").unwrap();
        assert_eq!(load_param_set(&manifest).unwrap_err().kind(), "parse");
    }

    proptest! {
        #[test]
        fn weights_always_form_a_distribution(
            sizes in proptest::collection::vec(1u64..1_000_000, 1..8),
            scheme_idx in 0usize..3,
        ) {
            let scheme = [WeightScheme::Equal, WeightScheme::Proportional, WeightScheme::Sqrt]
                [scheme_idx];
            let w = soup_weights(&sizes, scheme).unwrap();
            let sum: f64 = w.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(w.iter().all(|&x| x > 0.0));
        }

        #[test]
        fn merged_values_stay_inside_the_input_hull(seed in 0u64..500) {
            let mut rng = Rng::new(seed);
            let mut sets = Vec::new();
            let sizes = [3 + rng.range(100) as u64, 3 + rng.range(100) as u64, 3 + rng.range(100) as u64];
            for (i, &size) in sizes.iter().enumerate() {
                let mut s = ParamSet::new(format!("d{i}"), size);
                s.insert("w", rng.normal_tensor(&[16]).unwrap()).unwrap();
                sets.push(s);
            }
            let w = soup_weights(&sizes, WeightScheme::Sqrt).unwrap();
            let merged = merge(&sets, &w).unwrap();
            for i in 0..16 {
                let vals: Vec<f32> = sets.iter().map(|s| s.get("w").unwrap().data()[i]).collect();
                let lo = vals.iter().cloned().fold(f32::INFINITY, f32::min);
                let hi = vals.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
                let m = merged.get("w").unwrap().data()[i];
                prop_assert!(m >= lo - 1e-5 && m <= hi + 1e-5);
            }
        }
    }
}
