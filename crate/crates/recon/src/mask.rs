//! Stochastic binary masks from learnable weights as a graph operator.

use mcmap_core::sampling::{draw_mask, draw_mask_backward, prob_from_weights, ProbMap};
use mcmap_diffkit::{Array, CustomOp};
use rand::Rng;

/// Per-contrast sampling constraints shared by every mask draw.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub ny: usize,
    pub nz: usize,
    pub slope: f64,
    /// Target mean probability over the support (`1 / R`).
    pub ratio: f64,
    pub support: Vec<bool>,
    pub forced: Vec<bool>,
}

impl MaskSpec {
    pub fn probabilities(&self, w: &[f64]) -> ProbMap {
        prob_from_weights(w, self.slope, Some(self.ratio), &self.support, &self.forced)
    }
}

/// Forward: a fresh Bernoulli draw `U_j ~ P_j(w_j)` per contrast; backward:
/// straight-through `dL/dP = dL/dU` followed by the probability map's VJP.
pub struct MaskDrawOp {
    probs: Vec<ProbMap>,
    forced: Vec<bool>,
    drawn: Array,
}

impl MaskDrawOp {
    /// Draws masks for weights `w: [C, ny, nz]`.
    pub fn new<R: Rng>(w: &Array, spec: &MaskSpec, rng: &mut R) -> Self {
        let plane = spec.ny * spec.nz;
        let mut probs = Vec::with_capacity(w.shape[0]);
        let mut u = Vec::with_capacity(w.len());
        for wj in w.re().chunks(plane) {
            let pm = spec.probabilities(wj);
            u.extend(draw_mask(&pm.p, &spec.forced, rng));
            probs.push(pm);
        }
        Self { probs, forced: spec.forced.clone(), drawn: Array::real(&w.shape, u) }
    }

    pub fn probabilities(&self) -> &[ProbMap] {
        &self.probs
    }

    pub fn masks(&self) -> &Array {
        &self.drawn
    }
}

impl CustomOp for MaskDrawOp {
    fn name(&self) -> &'static str {
        "mask_draw"
    }

    fn forward(&mut self, inputs: &[&Array]) -> mcmap_diffkit::Result<Array> {
        if inputs[0].shape != self.drawn.shape {
            return Err(mcmap_diffkit::Error::Shape { op: "mask_draw", detail: format!("{:?} vs {:?}", inputs[0].shape, self.drawn.shape) });
        }
        Ok(self.drawn.clone())
    }

    fn backward(&self, _inputs: &[&Array], output: &Array, grad: &Array, needs: &[bool]) -> Vec<Option<Array>> {
        if !needs[0] {
            return vec![None];
        }
        let plane = output.plane();
        let gw: Vec<f64> = grad
            .re()
            .chunks(plane)
            .zip(&self.probs)
            .flat_map(|(gj, pm)| pm.backward(&draw_mask_backward(gj, &self.forced)))
            .collect();
        vec![Some(Array::real(&output.shape, gw))]
    }
}

/// Relaxed counterpart of [`MaskDrawOp`]: forward `P(w)` itself, backward the
/// probability map's VJP. Shares the weight path of the straight-through draw.
pub struct MaskProbOp {
    spec: MaskSpec,
    probs: Vec<ProbMap>,
}

impl MaskProbOp {
    pub fn new(spec: &MaskSpec) -> Self {
        Self { spec: spec.clone(), probs: Vec::new() }
    }
}

impl CustomOp for MaskProbOp {
    fn name(&self) -> &'static str {
        "mask_prob"
    }

    fn forward(&mut self, inputs: &[&Array]) -> mcmap_diffkit::Result<Array> {
        let w = inputs[0];
        let plane = self.spec.ny * self.spec.nz;
        if w.shape.len() != 3 || w.plane() != plane {
            return Err(mcmap_diffkit::Error::Shape { op: "mask_prob", detail: format!("{:?}", w.shape) });
        }
        self.probs = w.re().chunks(plane).map(|wj| self.spec.probabilities(wj)).collect();
        Ok(Array::real(&w.shape, self.probs.iter().flat_map(|p| p.p.iter().copied()).collect()))
    }

    fn backward(&self, _inputs: &[&Array], output: &Array, grad: &Array, needs: &[bool]) -> Vec<Option<Array>> {
        if !needs[0] {
            return vec![None];
        }
        let gw = grad.re().chunks(output.plane()).zip(&self.probs).flat_map(|(gj, pm)| pm.backward(gj)).collect();
        vec![Some(Array::real(&output.shape, gw))]
    }
}

/// Weights whose sigmoid reproduces `density` (clipped away from 0 and 1).
pub fn weights_for_density(density: &[f64], slope: f64) -> Vec<f64> {
    let eps = mcmap_core::sampling::PROB_EPS;
    density
        .iter()
        .map(|&d| {
            let p = d.clamp(eps, 1.0 - eps);
            (p / (1.0 - p)).ln() / slope
        })
        .collect()
}
