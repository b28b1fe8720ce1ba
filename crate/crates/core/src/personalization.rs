//! Fisher-based layer importance and personalization masks.
//!
//! A client scores each layer by its share of the diagonal empirical Fisher
//! information, keeps the layers whose share reaches `tau` as personalized,
//! and takes every other coordinate from the global model.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::model::{Batch, LayerLayout, Mlp, ParameterVector};

/// Diagonal empirical Fisher: entry `j` is the mean over samples of
/// `(d ln p(y_i | x_i, w) / d w_j)^2`.
pub fn fisher_diagonal(model: &Mlp, params: &ParameterVector, shard: &Batch) -> Result<Vec<f64>> {
    if shard.is_empty() {
        return Err(Error::Argument(
            "cannot estimate Fisher information on an empty shard".into(),
        ));
    }
    let mut fisher = vec![0.0; params.len()];
    model.for_each_sample_gradient(params, shard, |g| {
        for (f, gi) in fisher.iter_mut().zip(g) {
            *f += gi * gi;
        }
    })?;
    let n = shard.len() as f64;
    fisher.iter_mut().for_each(|f| *f /= n);
    Ok(fisher)
}

/// Per-layer share of the total Fisher information.
#[derive(Clone, Debug, PartialEq)]
pub struct ImportanceProfile {
    pub per_layer: Vec<(String, f64)>,
}

impl ImportanceProfile {
    pub fn shares(&self) -> impl Iterator<Item = f64> + '_ {
        self.per_layer.iter().map(|(_, s)| *s)
    }
}

pub fn layer_importance(fisher: &[f64], layout: &LayerLayout) -> Result<ImportanceProfile> {
    if fisher.len() != layout.total_dim() {
        return Err(Error::Config(format!(
            "fisher length {} does not match layout dimension {}",
            fisher.len(),
            layout.total_dim()
        )));
    }
    if fisher.iter().any(|f| !(f.is_finite() && *f >= 0.0)) {
        return Err(Error::Argument("fisher entries must be finite and non-negative".into()));
    }
    let layer_sums: Vec<f64> = layout.layers().iter().map(|l| fisher[l.range()].iter().sum()).collect();
    let total: f64 = layer_sums.iter().sum();
    if total <= 0.0 {
        return Err(Error::Degenerate("fisher information is zero everywhere".into()));
    }
    Ok(ImportanceProfile {
        per_layer: layout
            .layers()
            .iter()
            .zip(layer_sums)
            .map(|(l, s)| (l.name.clone(), s / total))
            .collect(),
    })
}

/// Layer-granular selector: `true` marks a personalized coordinate.
#[derive(Clone, Debug, PartialEq)]
pub struct PersonalizationMask {
    bits: Vec<bool>,
    layout: Arc<LayerLayout>,
    tau: f64,
}

impl PersonalizationMask {
    /// Fully shared mask; used before a client has any local model.
    pub fn all_shared(layout: Arc<LayerLayout>) -> Self {
        Self {
            bits: vec![false; layout.total_dim()],
            layout,
            tau: f64::INFINITY,
        }
    }

    pub fn all_personalized(layout: Arc<LayerLayout>) -> Self {
        Self {
            bits: vec![true; layout.total_dim()],
            layout,
            tau: 0.0,
        }
    }

    /// Marks the named layers as personalized.
    pub fn from_layers(layout: Arc<LayerLayout>, personalized: &[bool], tau: f64) -> Result<Self> {
        if personalized.len() != layout.num_layers() {
            return Err(Error::Config(format!(
                "{} layer flags for {} layers",
                personalized.len(),
                layout.num_layers()
            )));
        }
        let mut bits = vec![false; layout.total_dim()];
        for (l, &on) in layout.layers().iter().zip(personalized) {
            if on {
                bits[l.range()].iter_mut().for_each(|b| *b = true);
            }
        }
        Ok(Self { bits, layout, tau })
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn layout(&self) -> &Arc<LayerLayout> {
        &self.layout
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn personalized_count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Whether each layer is personalized, in layout order.
    pub fn layer_flags(&self) -> Vec<bool> {
        self.layout.layers().iter().map(|l| self.bits[l.offset]).collect()
    }
}

/// Personalizes layer `l` iff its share is at least `tau`.
pub fn build_mask(profile: &ImportanceProfile, layout: Arc<LayerLayout>, tau: f64) -> Result<PersonalizationMask> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Argument(format!("tau {tau} must be in (0, 1)")));
    }
    if profile.per_layer.len() != layout.num_layers()
        || profile
            .per_layer
            .iter()
            .zip(layout.layers())
            .any(|((n, _), l)| *n != l.name)
    {
        return Err(Error::Config("importance profile does not match layout".into()));
    }
    let flags: Vec<bool> = profile.shares().map(|s| s >= tau).collect();
    PersonalizationMask::from_layers(layout, &flags, tau)
}

/// Masked coordinates from `prev_local`, the rest from `global`.
pub fn merge_models(
    prev_local: &ParameterVector,
    global: &ParameterVector,
    mask: &PersonalizationMask,
) -> Result<ParameterVector> {
    prev_local.check_layout(global)?;
    if **mask.layout() != **global.layout() {
        return Err(Error::Config("mask layout does not match parameters".into()));
    }
    let values = mask
        .bits()
        .iter()
        .zip(prev_local.values().iter().zip(global.values()))
        .map(|(&m, (&u, &v))| if m { u } else { v })
        .collect();
    Ok(global.with_values(values))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MlpShape;

    fn layout(sizes: &[usize]) -> Arc<LayerLayout> {
        Arc::new(LayerLayout::from_sizes(sizes.iter().enumerate().map(|(i, &n)| (format!("l{i}"), n))).unwrap())
    }

    fn profile(shares: &[f64]) -> ImportanceProfile {
        ImportanceProfile {
            per_layer: shares.iter().enumerate().map(|(i, &s)| (format!("l{i}"), s)).collect(),
        }
    }

    #[test]
    fn uniform_fisher_equal_layers() {
        let p = layer_importance(&[1.0; 8], &layout(&[4, 4])).unwrap();
        assert_eq!(p.shares().collect::<Vec<_>>(), vec![0.5, 0.5]);
    }

    #[test]
    fn fisher_on_one_layer() {
        let p = layer_importance(&[0.0, 0.0, 3.0, 1.0, 0.0], &layout(&[2, 2, 1])).unwrap();
        assert_eq!(p.shares().collect::<Vec<_>>(), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn zero_fisher_is_degenerate() {
        assert!(matches!(
            layer_importance(&[0.0; 4], &layout(&[2, 2])),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn threshold_selects_layers() {
        let lay = layout(&[2, 3, 1]);
        let p = profile(&[0.6, 0.3, 0.1]);
        assert_eq!(
            build_mask(&p, lay.clone(), 0.5).unwrap().layer_flags(),
            vec![true, false, false]
        );
        assert_eq!(
            build_mask(&p, lay.clone(), 0.05).unwrap().layer_flags(),
            vec![true, true, true]
        );
        assert_eq!(build_mask(&p, lay.clone(), 0.7).unwrap().personalized_count(), 0);
        // ties at tau are personalized
        assert_eq!(build_mask(&p, lay, 0.3).unwrap().layer_flags(), vec![true, true, false]);
    }

    #[test]
    fn merge_extremes() {
        let lay = layout(&[2, 2]);
        let a = ParameterVector::new(vec![1.0, 2.0, 3.0, 4.0], lay.clone()).unwrap();
        let b = ParameterVector::new(vec![-1.0, -2.0, -3.0, -4.0], lay.clone()).unwrap();
        let none = PersonalizationMask::all_shared(lay.clone());
        let all = PersonalizationMask::all_personalized(lay.clone());
        assert_eq!(merge_models(&a, &b, &none).unwrap(), b);
        assert_eq!(merge_models(&a, &b, &all).unwrap(), a);
        let mixed = PersonalizationMask::from_layers(lay, &[false, true], 0.5).unwrap();
        assert_eq!(merge_models(&a, &b, &mixed).unwrap().values(), &[-1.0, -2.0, 3.0, 4.0]);
    }

    #[test]
    fn merge_rejects_layout_mismatch() {
        let a = ParameterVector::zeros(layout(&[2, 2]));
        let b = ParameterVector::zeros(layout(&[1, 3]));
        let m = PersonalizationMask::all_shared(layout(&[2, 2]));
        assert!(matches!(merge_models(&a, &b, &m), Err(Error::Config(_))));
    }

    #[test]
    fn fisher_duplicate_invariance_and_dead_feature() {
        let mlp = Mlp::new(MlpShape {
            input_dim: 3,
            hidden: 4,
            num_classes: 3,
        })
        .unwrap();
        let mut params = mlp.init(5);
        let inputs = vec![0.5, -1.0, 0.0, 1.5, 0.2, 0.0, -0.3, 0.9, 0.0];
        let batch = Batch::new(inputs.clone(), 3, vec![0, 2, 1]).unwrap();
        // feature 2 is always zero, so its weights carry no information
        let w1 = mlp.layout().layer("hidden.weight").unwrap().offset;
        for h in 0..4 {
            params.values_mut()[w1 + h * 3 + 2] = 0.0;
        }
        let f = fisher_diagonal(&mlp, &params, &batch).unwrap();
        for h in 0..4 {
            assert_eq!(f[w1 + h * 3 + 2], 0.0);
        }
        let mut doubled_inputs = inputs.clone();
        doubled_inputs.extend_from_slice(&inputs);
        let doubled = Batch::new(doubled_inputs, 3, vec![0, 2, 1, 0, 2, 1]).unwrap();
        let g = fisher_diagonal(&mlp, &params, &doubled).unwrap();
        for (a, b) in f.iter().zip(&g) {
            assert!((a - b).abs() <= 1e-15 * a.abs().max(1.0));
        }
    }
}
