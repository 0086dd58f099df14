//! End-to-end forward passes over bound parameters.

use crate::attention::attention_stack;
use crate::config::ModelConfig;
use crate::encoder::{encode_context, encode_features};
use crate::error::Result;
use crate::flow::{iterate, upsample_flow, RefinementTrace};
use crate::matching::{correlation_volume, dual_softmax, matching_loss, GtMatches, TEMPERATURE};
use crate::params::{ModelWeights, Params};
use matchflow_tensor::{Real, Tape, Tensor, Var};

/// Anything that maps an image pair to a full-resolution flow `[2×H×W]`.
pub trait FlowModel {
    fn predict(&self, i1: &Tensor<f32>, i2: &Tensor<f32>) -> Result<Tensor<f32>>;
}

/// Attention-refined feature maps of both images.
pub fn matching_features<T: Real>(g: &mut Tape<T>, p: &Params, cfg: &ModelConfig, i1: Var, i2: Var) -> Result<(Var, Var)> {
    let f1 = encode_features(g, p, i1)?;
    let f2 = encode_features(g, p, i2)?;
    attention_stack(g, p, &cfg.attention, f1, f2)
}

/// Stage-1 objective on one static pair.
pub fn matching_objective<T: Real>(g: &mut Tape<T>, p: &Params, cfg: &ModelConfig, i1: Var, i2: Var, gt: &GtMatches) -> Result<Var> {
    let (f1, f2) = matching_features(g, p, cfg, i1, i2)?;
    let c = correlation_volume(g, f1, f2, cfg.scale_corr)?;
    let prob = dual_softmax(g, c, T::lit(TEMPERATURE))?;
    matching_loss(g, prob, gt)
}

/// Coarse refinement trace for one pair.
pub fn flow_trace<T: Real>(g: &mut Tape<T>, p: &Params, cfg: &ModelConfig, i1: Var, i2: Var, iters: usize) -> Result<RefinementTrace> {
    let (f1, f2) = matching_features(g, p, cfg, i1, i2)?;
    let ctx = encode_context(g, p, cfg, i1)?;
    iterate(g, p, &cfg.flow, f1, f2, ctx, iters, cfg.scale_corr)
}

/// Inference wrapper around a set of weights.
#[derive(Clone, Debug)]
pub struct MatchFlow {
    pub weights: ModelWeights,
    pub iters: usize,
}

impl MatchFlow {
    pub fn new(weights: ModelWeights) -> Self {
        let iters = weights.config.flow.iters;
        Self { weights, iters }
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.iters = iters;
        self
    }

    /// Coarse correlation volume `[N×N]` of the attention-refined features.
    pub fn correlation(&self, i1: &Tensor<f32>, i2: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Tape::new();
        let p = self.weights.bind(&mut g, |_| false);
        let (a, b) = (g.constant(i1.clone()), g.constant(i2.clone()));
        let (f1, f2) = matching_features(&mut g, &p, &self.weights.config, a, b)?;
        let c = correlation_volume(&mut g, f1, f2, self.weights.config.scale_corr)?;
        Ok(g.value(c).clone())
    }

    /// Final coarse flow `[2×H/8×W/8]`.
    pub fn predict_coarse(&self, i1: &Tensor<f32>, i2: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Tape::new();
        let p = self.weights.bind(&mut g, |_| false);
        let (a, b) = (g.constant(i1.clone()), g.constant(i2.clone()));
        let trace = flow_trace(&mut g, &p, &self.weights.config, a, b, self.iters)?;
        Ok(g.value(*trace.flows.last().expect("iters >= 1")).clone())
    }
}

impl FlowModel for MatchFlow {
    fn predict(&self, i1: &Tensor<f32>, i2: &Tensor<f32>) -> Result<Tensor<f32>> {
        let mut g = Tape::new();
        let p = self.weights.bind(&mut g, |_| false);
        let (a, b) = (g.constant(i1.clone()), g.constant(i2.clone()));
        let trace = flow_trace(&mut g, &p, &self.weights.config, a, b, self.iters)?;
        let up = upsample_flow(&mut g, *trace.flows.last().expect("iters >= 1"))?;
        Ok(g.value(up).clone())
    }
}
