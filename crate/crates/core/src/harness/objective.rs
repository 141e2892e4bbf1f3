//! The full training objective for one frame and its gradient.

use ndarray::Array2;

use crate::autodiff::{Tape, Var};
use crate::deformation::{ForwardOptions, Model, Stage};
use crate::error::Result;
use crate::losses::{self, LossParts, LossWeights};
use crate::renderer::{RenderOptions, Rasterizer, RenderedImage};
use crate::scene::{CanonicalGaussian, Frame};

#[derive(Clone, Debug, PartialEq)]
pub struct Objective {
    pub weights: LossWeights,
    pub stage: Stage,
    pub hard_threshold: f64,
    /// Offset of the flow-guided temporal queries and the cycle loss.
    pub dt: f64,
    /// With deformation off the canonical scene is rendered at every time
    /// and only the Gaussians are optimized.
    pub deformation: bool,
    pub render: RenderOptions,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossEval {
    pub parts: LossParts,
    pub total: f64,
}

/// Tape state kept between the forward and backward halves.
struct Forward {
    tape: Tape,
    gaussians: Vec<CanonicalGaussian>,
    deformed: Option<(Var, Var)>,
    regularizer: Option<Var>,
    parts: LossParts,
}

fn concat(tape: &mut Tape, parts: &[Var]) -> Var {
    if parts.len() == 1 {
        parts[0]
    } else {
        tape.concat_rows(parts)
    }
}

impl Objective {
    pub fn forward_options(&self, t: f64) -> ForwardOptions {
        ForwardOptions::new(t, self.dt, self.stage, self.hard_threshold)
    }

    fn forward(&self, model: &Model, t: f64) -> Result<Forward> {
        self.forward_on(Tape::new(), model, t)
    }

    fn forward_on(&self, mut tape: Tape, model: &Model, t: f64) -> Result<Forward> {
        if !self.deformation {
            return Ok(Forward {
                tape,
                gaussians: model.canonical_gaussians(),
                deformed: None,
                regularizer: None,
                parts: LossParts::default(),
            });
        }
        let opts = self.forward_options(t);
        let out = model.forward(&mut tape, &opts)?;
        let gaussians = model.gaussians_from(&tape, &out);

        let alpha = concat(&mut tape, &out.alpha);
        let x = concat(&mut tape, &out.x);
        let flow = concat(&mut tape, &out.flow);
        let sparsity = tape.mean(alpha);
        let sq = tape.square(alpha);
        let ent = tape.sub(alpha, sq);
        let entropy = tape.mean(ent);
        // Soft: α-weighted mean. Hard: mean over anchors at or above the
        // threshold.
        let cycle_weights = match self.stage {
            Stage::Soft => alpha,
            Stage::Hard => {
                let thr = self.hard_threshold;
                let mask = tape.value(alpha).mapv(|a| f64::from(u8::from(a >= thr)));
                tape.constant(mask)
            }
        };
        let cycle = losses::cycle_loss_var(model, &mut tape, x, flow, cycle_weights, t, self.dt)?;
        let parts = LossParts {
            photo: 0.0,
            cycle: tape.scalar(cycle),
            entropy: tape.scalar(entropy),
            sparsity: tape.scalar(sparsity),
        };
        let w = &self.weights;
        let c = tape.scale(cycle, w.lambda_cycle);
        let e = tape.scale(entropy, w.lambda_entropy);
        let s = tape.scale(sparsity, w.lambda_sparsity);
        let r = tape.add(c, e);
        let r = tape.add(r, s);
        Ok(Forward {
            tape,
            gaussians,
            deformed: Some((out.mu, out.rot)),
            regularizer: Some(r),
            parts,
        })
    }

    /// Renders `model` at the frame's time and camera.
    pub fn render(&self, model: &Model, frame: &Frame) -> Result<RenderedImage> {
        let f = self.forward(model, frame.time)?;
        Ok(Rasterizer::new(&f.gaussians, &frame.camera, self.render).render())
    }

    /// Loss value only.
    pub fn loss(&self, model: &Model, frame: &Frame, iteration: usize) -> Result<LossEval> {
        self.loss_on(Tape::new(), model, frame, iteration)
    }

    /// Values the forward pass detaches from the gradient graph.
    pub fn detached_values(&self, model: &Model, frame: &Frame) -> Result<Vec<Array2<f64>>> {
        Ok(self.forward(model, frame.time)?.tape.detached_values().to_vec())
    }

    /// Loss value with the detached inputs replaced by `frozen` (from
    /// [`detached_values`](Self::detached_values)). This is the function
    /// whose gradient [`loss_and_grad`](Self::loss_and_grad) returns.
    pub fn loss_frozen(&self, model: &Model, frame: &Frame, iteration: usize, frozen: &[Array2<f64>]) -> Result<LossEval> {
        self.loss_on(Tape::with_frozen_detached(frozen.to_vec()), model, frame, iteration)
    }

    fn loss_on(&self, tape: Tape, model: &Model, frame: &Frame, iteration: usize) -> Result<LossEval> {
        let f = self.forward_on(tape, model, frame.time)?;
        let image = Rasterizer::new(&f.gaussians, &frame.camera, self.render).render();
        let mut parts = f.parts;
        parts.photo = losses::photometric_loss(&image.color, &frame.pixels, self.weights.lambda_photo)?;
        let total = losses::total_loss(&parts, &self.weights, iteration)?;
        Ok(LossEval { parts, total })
    }

    /// Loss value; its gradient is added to the model's parameter
    /// gradients.
    pub fn loss_and_grad(&self, model: &mut Model, frame: &Frame, iteration: usize) -> Result<LossEval> {
        let f = self.forward(model, frame.time)?;
        let rast = Rasterizer::new(&f.gaussians, &frame.camera, self.render);
        let image = rast.render();
        let mut parts = f.parts;
        let (photo, d_color) =
            losses::photometric_loss_with_grad(&image.color, &frame.pixels, self.weights.lambda_photo)?;
        parts.photo = photo;
        let total = losses::total_loss(&parts, &self.weights, iteration)?;

        let g = rast.backward(&d_color);
        let n = f.gaussians.len();
        let blocks = model.gaussians;
        let store = &mut model.store;
        {
            let ls = store.grad_mut(blocks.log_scale);
            for (j, v) in g.log_scale.iter().enumerate() {
                for k in 0..3 {
                    ls[[j, k]] += v[k];
                }
            }
        }
        {
            let op = store.grad_mut(blocks.logit_opacity);
            for (j, &v) in g.logit_opacity.iter().enumerate() {
                op[[j, 0]] += v;
            }
        }
        {
            let sh = store.grad_mut(blocks.sh);
            for (j, v) in g.sh.iter().enumerate() {
                for (k, &c) in v.iter().enumerate() {
                    sh[[j, k]] += c;
                }
            }
        }
        let d_mu = Array2::from_shape_fn((n, 3), |(j, k)| g.mu[j][k]);
        let d_rot = Array2::from_shape_fn((n, 4), |(j, k)| g.rot[j][k]);
        match (f.deformed, f.regularizer) {
            (Some((mu, rot)), Some(reg)) => {
                let seeds = [(mu, d_mu), (rot, d_rot), (reg, Array2::ones((1, 1)))];
                f.tape.backward_seeded(&seeds, store)?;
            }
            _ => {
                *store.grad_mut(blocks.mu) += &d_mu;
                *store.grad_mut(blocks.rot) += &d_rot;
            }
        }
        Ok(LossEval { parts, total })
    }
}
