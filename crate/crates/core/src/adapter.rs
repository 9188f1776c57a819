//! LoRA delta application, weighted adapter ensembling and wise-ft.
//!
//! A target weight `W` (`d_out × d_in`) with factors `A` (`d_out × r`) and
//! `B` (`r × d_in`) merges as `W + weight · (alpha / r) · A·B`. Wise-ft
//! interpolation at `α` is realised by scaling both factors by `√α`, which
//! scales their product by `α`.

use std::collections::BTreeMap;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::archive::{ArchiveError, DType, Tensor, TensorArchive};
use crate::matrix::{Matrix, ShapeError};

pub const LORA_A_SUFFIX: &str = ".lora_A";
pub const LORA_B_SUFFIX: &str = ".lora_B";
pub const META_NAME: &str = "adapter_name";
pub const META_RANK: &str = "lora_rank";
pub const META_ALPHA: &str = "lora_alpha";
pub const META_MERGE_PLAN: &str = "merge_plan";
/// Weights above this are allowed but logged.
pub const WEIGHT_WARN_THRESHOLD: f32 = 1.5;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Archive(#[from] ArchiveError),
    #[error("adapter `{adapter}` targets `{target}`, which is not in the base archive")]
    MissingTarget { adapter: String, target: String },
    #[error("adapter `{adapter}` target `{target}`: delta is {delta:?}, base tensor is {base:?}")]
    TargetShape {
        adapter: String,
        target: String,
        delta: (usize, usize),
        base: Vec<usize>,
    },
    #[error("adapter `{adapter}` target `{target}`: factors have rank {found}, adapter declares {rank}")]
    RankMismatch {
        adapter: String,
        target: String,
        rank: usize,
        found: usize,
    },
    #[error("base tensor `{0}` is int4-quantized; merge before quantizing")]
    QuantizedBase(String),
    #[error("invalid merge weight {weight} for adapter `{adapter}`")]
    InvalidWeight { adapter: String, weight: f32 },
    #[error("wise-ft alpha must be finite and non-negative, got {0}")]
    InvalidAlpha(f32),
    #[error("scale must be finite, got {0}")]
    InvalidScale(f32),
    #[error("merge produced non-finite values in `{0}`")]
    NonFinite(String),
    #[error("adapter archive: {0}")]
    BadAdapterArchive(String),
}

pub type Result<T, E = AdapterError> = std::result::Result<T, E>;

/// Low-rank factor pair for one target tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactors {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraFactors {
    pub fn new(a: Matrix, b: Matrix) -> Result<Self> {
        if a.cols() != b.rows() {
            return Err(ShapeError(format!(
                "A is {:?} but B is {:?}; inner ranks differ",
                a.shape(),
                b.shape()
            ))
            .into());
        }
        Ok(Self { a, b })
    }

    pub fn rank(&self) -> usize {
        self.a.cols()
    }

    /// `(d_out, d_in)` of the delta `A·B`.
    pub fn delta_shape(&self) -> (usize, usize) {
        (self.a.rows(), self.b.cols())
    }

    pub fn product(&self) -> Result<Matrix> {
        Ok(self.a.matmul(&self.b)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub name: String,
    pub rank: usize,
    pub alpha: f32,
    pub targets: BTreeMap<String, LoraFactors>,
}

impl LoraAdapter {
    pub fn new(name: impl Into<String>, rank: usize, alpha: f32) -> Self {
        Self {
            name: name.into(),
            rank,
            alpha,
            targets: BTreeMap::new(),
        }
    }

    pub fn with_target(mut self, target: impl Into<String>, factors: LoraFactors) -> Self {
        self.targets.insert(target.into(), factors);
        self
    }

    /// Training-time multiplier `alpha / rank`.
    pub fn lora_scale(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(AdapterError::BadAdapterArchive(format!(
                "adapter `{}` has rank 0",
                self.name
            )));
        }
        if !self.alpha.is_finite() || self.alpha <= 0.0 {
            return Err(AdapterError::BadAdapterArchive(format!(
                "adapter `{}` has alpha {}",
                self.name, self.alpha
            )));
        }
        for (target, f) in &self.targets {
            let found = if f.a.cols() != self.rank { f.a.cols() } else { f.b.rows() };
            if found != self.rank {
                return Err(AdapterError::RankMismatch {
                    adapter: self.name.clone(),
                    target: target.clone(),
                    rank: self.rank,
                    found,
                });
            }
        }
        Ok(())
    }

    /// Checks every target against the base archive.
    pub fn check_compatible(&self, base: &TensorArchive) -> Result<()> {
        self.validate()?;
        for (target, f) in &self.targets {
            let tensor = base.get(target).ok_or_else(|| AdapterError::MissingTarget {
                adapter: self.name.clone(),
                target: target.clone(),
            })?;
            if tensor.dtype() == DType::I4 {
                return Err(AdapterError::QuantizedBase(target.clone()));
            }
            let (r, c) = f.delta_shape();
            if tensor.shape() != [r, c] {
                return Err(AdapterError::TargetShape {
                    adapter: self.name.clone(),
                    target: target.clone(),
                    delta: (r, c),
                    base: tensor.shape().to_vec(),
                });
            }
        }
        Ok(())
    }

    /// Archive layout: `<target>.lora_A`, `<target>.lora_B`, with name, rank
    /// and alpha in metadata.
    pub fn to_archive(&self) -> TensorArchive {
        let mut ar = TensorArchive::new();
        ar.metadata.insert(META_NAME.into(), self.name.clone());
        ar.metadata.insert(META_RANK.into(), self.rank.to_string());
        ar.metadata.insert(META_ALPHA.into(), self.alpha.to_string());
        for (target, f) in &self.targets {
            ar.insert(format!("{target}{LORA_A_SUFFIX}"), f.a.to_tensor());
            ar.insert(format!("{target}{LORA_B_SUFFIX}"), f.b.to_tensor());
        }
        ar
    }

    pub fn from_archive(ar: &TensorArchive) -> Result<Self> {
        let bad = |m: String| AdapterError::BadAdapterArchive(m);
        let meta = |key: &str| {
            ar.metadata
                .get(key)
                .ok_or_else(|| bad(format!("missing `{key}` metadata")))
        };
        let name = meta(META_NAME)?.clone();
        let rank: usize = meta(META_RANK)?
            .parse()
            .map_err(|e| bad(format!("`{META_RANK}`: {e}")))?;
        let alpha: f32 = meta(META_ALPHA)?
            .parse()
            .map_err(|e| bad(format!("`{META_ALPHA}`: {e}")))?;
        let mut targets = BTreeMap::new();
        for (key, a) in &ar.entries {
            if let Some(target) = key.strip_suffix(LORA_A_SUFFIX) {
                let b = ar
                    .get(&format!("{target}{LORA_B_SUFFIX}"))
                    .ok_or_else(|| bad(format!("`{target}` has A but no B factor")))?;
                let factors = LoraFactors::new(Matrix::from_tensor(a)?, Matrix::from_tensor(b)?)?;
                targets.insert(target.to_string(), factors);
            } else if let Some(target) = key.strip_suffix(LORA_B_SUFFIX) {
                if ar.get(&format!("{target}{LORA_A_SUFFIX}")).is_none() {
                    return Err(bad(format!("`{target}` has B but no A factor")));
                }
            } else {
                return Err(bad(format!("unexpected tensor `{key}`")));
            }
        }
        let adapter = Self {
            name,
            rank,
            alpha,
            targets,
        };
        adapter.validate()?;
        Ok(adapter)
    }
}

/// `base + scale · lora_scale · (A·B)`.
///
/// A zero `scale` returns `base` untouched, and elements whose scaled delta is
/// exactly zero keep their original bits.
pub fn apply_delta(base: &Matrix, factors: &LoraFactors, scale: f32, lora_scale: f32) -> Result<Matrix> {
    if !scale.is_finite() {
        return Err(AdapterError::InvalidScale(scale));
    }
    if !lora_scale.is_finite() {
        return Err(AdapterError::InvalidScale(lora_scale));
    }
    if factors.delta_shape() != base.shape() {
        return Err(ShapeError(format!(
            "delta {:?} does not match base {:?}",
            factors.delta_shape(),
            base.shape()
        ))
        .into());
    }
    if scale == 0.0 {
        return Ok(base.clone());
    }
    let delta = factors.product()?;
    let coef = scale * lora_scale;
    let data: Vec<f32> = base
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&w, &d)| add_scaled(w, coef, d))
        .collect();
    if data.iter().any(|x| !x.is_finite()) {
        return Err(AdapterError::NonFinite("<matrix>".into()));
    }
    Ok(Matrix::new(base.rows(), base.cols(), data)?)
}

#[inline]
fn add_scaled(w: f32, coef: f32, d: f32) -> f32 {
    let v = coef * d;
    if v == 0.0 {
        w
    } else {
        w + v
    }
}

/// Scales both factors of every target by `√alpha_interp`, so applying the
/// result at unit weight equals applying the original at `alpha_interp`.
pub fn wise_ft_rescale(adapter: &LoraAdapter, alpha_interp: f32) -> Result<LoraAdapter> {
    if !alpha_interp.is_finite() || alpha_interp < 0.0 {
        return Err(AdapterError::InvalidAlpha(alpha_interp));
    }
    let s = (alpha_interp as f64).sqrt() as f32;
    let targets = adapter
        .targets
        .iter()
        .map(|(name, f)| {
            (
                name.clone(),
                LoraFactors {
                    a: f.a.scaled(s),
                    b: f.b.scaled(s),
                },
            )
        })
        .collect();
    Ok(LoraAdapter {
        targets,
        ..adapter.clone()
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergeStep {
    pub adapter: LoraAdapter,
    pub weight: f32,
    /// Replaces `alpha / rank`; use `Some(1.0)` for adapters whose factors
    /// already carry the training scale.
    pub lora_scale_override: Option<f32>,
}

impl MergeStep {
    pub fn new(adapter: LoraAdapter, weight: f32) -> Self {
        Self {
            adapter,
            weight,
            lora_scale_override: None,
        }
    }

    pub fn lora_scale(&self) -> f32 {
        self.lora_scale_override
            .unwrap_or_else(|| self.adapter.lora_scale())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergePlan {
    pub base: TensorArchive,
    pub steps: Vec<MergeStep>,
    /// Wise-ft interpolation applied to every adapter via `√α` rescaling.
    pub wise_ft_alpha: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeProvenance {
    pub adapters: Vec<StepProvenance>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wise_ft_alpha: Option<f32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepProvenance {
    pub name: String,
    pub weight: f32,
    pub lora_scale: f32,
    pub rank: usize,
    pub alpha: f32,
}

impl MergePlan {
    pub fn new(base: TensorArchive) -> Self {
        Self {
            base,
            steps: Vec::new(),
            wise_ft_alpha: None,
        }
    }

    pub fn step(mut self, adapter: LoraAdapter, weight: f32) -> Self {
        self.steps.push(MergeStep::new(adapter, weight));
        self
    }

    pub fn with_wise_ft(mut self, alpha: f32) -> Self {
        self.wise_ft_alpha = Some(alpha);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(a) = self.wise_ft_alpha {
            if !a.is_finite() || a < 0.0 {
                return Err(AdapterError::InvalidAlpha(a));
            }
        }
        for step in &self.steps {
            if !step.weight.is_finite() || step.weight < 0.0 {
                return Err(AdapterError::InvalidWeight {
                    adapter: step.adapter.name.clone(),
                    weight: step.weight,
                });
            }
            if step.weight > WEIGHT_WARN_THRESHOLD {
                warn!(
                    "adapter `{}` merged at weight {} (above {WEIGHT_WARN_THRESHOLD})",
                    step.adapter.name, step.weight
                );
            }
            if !step.lora_scale().is_finite() {
                return Err(AdapterError::InvalidScale(step.lora_scale()));
            }
            step.adapter.check_compatible(&self.base)?;
        }
        Ok(())
    }

    pub fn provenance(&self) -> MergeProvenance {
        MergeProvenance {
            adapters: self
                .steps
                .iter()
                .map(|s| StepProvenance {
                    name: s.adapter.name.clone(),
                    weight: s.weight,
                    lora_scale: s.lora_scale(),
                    rank: s.adapter.rank,
                    alpha: s.adapter.alpha,
                })
                .collect(),
            wise_ft_alpha: self.wise_ft_alpha,
        }
    }
}

/// Folds every step into the base, in step order:
/// `W = B + Σ weight_i · s_i · (A_i·B_i)`. Non-target tensors are copied
/// unchanged; each output tensor is produced by exactly one worker.
pub fn execute_merge(plan: &MergePlan) -> Result<TensorArchive> {
    plan.validate()?;

    let steps: Vec<MergeStep> = match plan.wise_ft_alpha {
        Some(alpha) => plan
            .steps
            .iter()
            .map(|s| {
                Ok(MergeStep {
                    adapter: wise_ft_rescale(&s.adapter, alpha)?,
                    ..s.clone()
                })
            })
            .collect::<Result<_>>()?,
        None => plan.steps.clone(),
    };

    let merged: Vec<(String, Tensor)> = plan
        .base
        .entries
        .par_iter()
        .map(|(name, tensor)| {
            let active: Vec<&MergeStep> = steps
                .iter()
                .filter(|s| s.weight != 0.0 && s.adapter.targets.contains_key(name))
                .collect();
            if active.is_empty() {
                return Ok((name.clone(), tensor.clone()));
            }
            let mut current = Matrix::from_tensor(tensor)?;
            for step in active {
                let factors = &step.adapter.targets[name];
                current = apply_delta(&current, factors, step.weight, step.lora_scale())
                    .map_err(|e| match e {
                        AdapterError::NonFinite(_) => AdapterError::NonFinite(name.clone()),
                        other => other,
                    })?;
            }
            let out = tensor.with_values(current.into_data())?;
            if out.as_f32().is_some_and(|v| v.iter().any(|x| !x.is_finite())) {
                return Err(AdapterError::NonFinite(name.clone()));
            }
            Ok((name.clone(), out))
        })
        .collect::<Result<_>>()?;

    let mut metadata = plan.base.metadata.clone();
    if !plan.steps.is_empty() || plan.wise_ft_alpha.is_some() {
        metadata.insert(
            META_MERGE_PLAN.into(),
            serde_json::to_string(&plan.provenance()).expect("provenance serializes"),
        );
    }
    Ok(TensorArchive {
        entries: merged.into_iter().collect(),
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_pcg::Pcg64;

    fn rand_matrix(rng: &mut Pcg64, r: usize, c: usize) -> Matrix {
        Matrix::new(r, c, (0..r * c).map(|_| rng.random_range(-1.0f32..1.0)).collect()).unwrap()
    }

    /// Dense f64 oracle for `base + coef · A·B`.
    fn oracle(base: &Matrix, f: &LoraFactors, coef: f64) -> Vec<f64> {
        let (m, n) = base.shape();
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f64;
                for k in 0..f.rank() {
                    acc += f.a.get(i, k) as f64 * f.b.get(k, j) as f64;
                }
                out.push(base.get(i, j) as f64 + coef * acc);
            }
        }
        out
    }

    #[test]
    fn zero_scale_returns_base() {
        let mut rng = Pcg64::seed_from_u64(1);
        let base = rand_matrix(&mut rng, 4, 4);
        let f = LoraFactors::new(rand_matrix(&mut rng, 4, 2), rand_matrix(&mut rng, 2, 4)).unwrap();
        assert_eq!(apply_delta(&base, &f, 0.0, 0.5).unwrap(), base);
    }

    #[test]
    fn one_by_one_product() {
        let f = LoraFactors::new(Matrix::from_rows(&[&[2.0]]), Matrix::from_rows(&[&[3.0]])).unwrap();
        let out = apply_delta(&Matrix::zeros(1, 1), &f, 1.0, 1.0).unwrap();
        assert_eq!(out.data(), &[6.0]);
    }

    #[test]
    fn random_delta_matches_dense_oracle() {
        let mut rng = Pcg64::seed_from_u64(56);
        let base = rand_matrix(&mut rng, 8, 8);
        let f = LoraFactors::new(rand_matrix(&mut rng, 8, 2), rand_matrix(&mut rng, 2, 8)).unwrap();
        let s_lora = 32.0 / 64.0;
        let out = apply_delta(&base, &f, 0.56, s_lora).unwrap();
        let want = oracle(&base, &f, 0.56 * s_lora as f64);
        for (x, y) in out.data().iter().zip(want) {
            assert!((*x as f64 - y).abs() <= 1e-6);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let f = LoraFactors::new(Matrix::zeros(3, 1), Matrix::zeros(1, 3)).unwrap();
        assert!(matches!(
            apply_delta(&Matrix::zeros(2, 3), &f, 1.0, 1.0),
            Err(AdapterError::Shape(_))
        ));
        assert!(LoraFactors::new(Matrix::zeros(3, 2), Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn overflow_is_reported() {
        let f = LoraFactors::new(
            Matrix::from_rows(&[&[f32::MAX]]),
            Matrix::from_rows(&[&[f32::MAX]]),
        )
        .unwrap();
        assert!(matches!(
            apply_delta(&Matrix::zeros(1, 1), &f, 1.0, 1.0),
            Err(AdapterError::NonFinite(_))
        ));
    }

    #[test]
    fn rescale_by_one_is_identity() {
        let mut rng = Pcg64::seed_from_u64(2);
        let ad = LoraAdapter::new("v8", 2, 1.0).with_target(
            "w",
            LoraFactors::new(rand_matrix(&mut rng, 3, 2), rand_matrix(&mut rng, 2, 3)).unwrap(),
        );
        assert_eq!(wise_ft_rescale(&ad, 1.0).unwrap(), ad);
    }

    #[test]
    fn rescale_quarter_exact() {
        let ad = LoraAdapter::new("x", 1, 1.0).with_target(
            "w",
            LoraFactors::new(Matrix::from_rows(&[&[2.0]]), Matrix::from_rows(&[&[3.0]])).unwrap(),
        );
        let r = wise_ft_rescale(&ad, 0.25).unwrap();
        let f = &r.targets["w"];
        assert_eq!(f.a.data(), &[1.0]);
        assert_eq!(f.b.data(), &[1.5]);
        let out = apply_delta(&Matrix::zeros(1, 1), f, 1.0, 1.0).unwrap();
        assert_eq!(out.data(), &[1.5]);
    }

    #[test]
    fn rescale_rejects_negative() {
        let ad = LoraAdapter::new("x", 1, 1.0);
        assert!(matches!(wise_ft_rescale(&ad, -0.1), Err(AdapterError::InvalidAlpha(_))));
    }

    #[test]
    fn adapter_archive_round_trip() {
        let mut rng = Pcg64::seed_from_u64(3);
        let ad = LoraAdapter::new("v9b", 4, 32.0)
            .with_target(
                "layers.0.q",
                LoraFactors::new(rand_matrix(&mut rng, 6, 4), rand_matrix(&mut rng, 4, 5)).unwrap(),
            )
            .with_target(
                "layers.0.v",
                LoraFactors::new(rand_matrix(&mut rng, 6, 4), rand_matrix(&mut rng, 4, 6)).unwrap(),
            );
        let bytes = ad.to_archive().to_bytes().unwrap();
        let back = LoraAdapter::from_archive(&TensorArchive::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, ad);
    }

    #[test]
    fn plan_rejects_bad_weights_and_targets() {
        let mut base = TensorArchive::new();
        base.insert("w", Tensor::zeros(vec![2, 2]));
        let f = LoraFactors::new(Matrix::zeros(2, 1), Matrix::zeros(1, 2)).unwrap();
        let ad = LoraAdapter::new("a", 1, 1.0).with_target("w", f.clone());
        let plan = MergePlan::new(base.clone()).step(ad.clone(), f32::NAN);
        assert!(matches!(execute_merge(&plan), Err(AdapterError::InvalidWeight { .. })));
        let plan = MergePlan::new(base.clone()).step(ad.clone(), -1.0);
        assert!(matches!(execute_merge(&plan), Err(AdapterError::InvalidWeight { .. })));

        let missing = LoraAdapter::new("b", 1, 1.0).with_target("nope", f.clone());
        let plan = MergePlan::new(base.clone()).step(missing, 1.0);
        assert!(matches!(execute_merge(&plan), Err(AdapterError::MissingTarget { .. })));

        let wrong = LoraAdapter::new("c", 1, 1.0)
            .with_target("w", LoraFactors::new(Matrix::zeros(3, 1), Matrix::zeros(1, 2)).unwrap());
        let plan = MergePlan::new(base.clone()).step(wrong, 1.0);
        assert!(matches!(execute_merge(&plan), Err(AdapterError::TargetShape { .. })));

        let rank = LoraAdapter::new("d", 2, 1.0).with_target("w", f);
        let plan = MergePlan::new(base).step(rank, 1.0);
        assert!(matches!(execute_merge(&plan), Err(AdapterError::RankMismatch { .. })));
    }

    #[test]
    fn heavy_weight_is_allowed() {
        let mut base = TensorArchive::new();
        base.insert("w", Tensor::zeros(vec![1, 1]));
        let f = LoraFactors::new(Matrix::from_rows(&[&[1.0]]), Matrix::from_rows(&[&[1.0]])).unwrap();
        let plan = MergePlan::new(base).step(LoraAdapter::new("a", 1, 1.0).with_target("w", f), 2.0);
        let out = execute_merge(&plan).unwrap();
        assert_eq!(out.get("w").unwrap().as_f32().unwrap(), &[2.0]);
    }

    #[test]
    fn merge_records_provenance() {
        let mut base = TensorArchive::new();
        base.insert("w", Tensor::zeros(vec![1, 1]));
        base.metadata.insert("source".into(), "toy".into());
        let f = LoraFactors::new(Matrix::from_rows(&[&[1.0]]), Matrix::from_rows(&[&[1.0]])).unwrap();
        let plan = MergePlan::new(base)
            .step(LoraAdapter::new("v8", 1, 1.0).with_target("w", f), 0.56)
            .with_wise_ft(0.5);
        let out = execute_merge(&plan).unwrap();
        assert_eq!(out.metadata["source"], "toy");
        let prov: MergeProvenance = serde_json::from_str(&out.metadata[META_MERGE_PLAN]).unwrap();
        assert_eq!(prov.adapters[0].name, "v8");
        assert_eq!(prov.adapters[0].weight, 0.56);
        assert_eq!(prov.wise_ft_alpha, Some(0.5));
        let v = out.get("w").unwrap().as_f32().unwrap()[0];
        assert!((v - 0.28).abs() < 1e-6);
    }
}
