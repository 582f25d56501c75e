//! Central finite-difference verification of every differentiable op.
//!
//! Each case builds a scalar loss `sum(op(inputs) * r)` with a fixed random
//! projection `r`, then compares the tape gradient of every input element
//! against `(f(x + h) - f(x - h)) / 2h` evaluated by forward passes alone.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::tensor::{Shape, Tensor};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Denominator floor so that gradients that are zero up to rounding compare
/// absolutely instead of relatively.
pub const REL_FLOOR: f64 = 1e-3;

type Builder = dyn Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>;

/// One finite-difference case: inputs plus a loss builder over them.
pub struct Case {
    pub name: &'static str,
    pub inputs: Vec<Tensor<f64>>,
    build: Box<Builder>,
}

impl Case {
    pub fn new(
        name: &'static str,
        inputs: Vec<Tensor<f64>>,
        build: impl Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId> + 'static,
    ) -> Self {
        Case {
            name,
            inputs,
            build: Box::new(build),
        }
    }

    fn eval(&self, inputs: &[Tensor<f64>]) -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = inputs.iter().map(|t| g.constant(t.clone())).collect();
        let loss = (self.build)(&mut g, &ids)?;
        Ok(g.value(loss).item())
    }

    /// Largest elementwise relative error over all inputs.
    pub fn max_relative_error(&self) -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self
            .inputs
            .iter()
            .enumerate()
            .map(|(i, t)| g.parameter(&format!("in{i}"), t.clone()))
            .collect::<Result<_>>()?;
        let loss = (self.build)(&mut g, &ids)?;
        let grads = g.backward(loss)?;

        let mut worst = 0.0f64;
        let mut probe = self.inputs.clone();
        for (slot, &id) in ids.iter().enumerate() {
            let analytic = grads.get_or_zeros(id, self.inputs[slot].shape());
            for e in 0..self.inputs[slot].len() {
                let orig = self.inputs[slot].data()[e];
                probe[slot].data_mut()[e] = orig + STEP;
                let up = self.eval(&probe)?;
                probe[slot].data_mut()[e] = orig - STEP;
                let down = self.eval(&probe)?;
                probe[slot].data_mut()[e] = orig;
                let numeric = (up - down) / (2.0 * STEP);
                worst = worst.max(relative_error(analytic.data()[e], numeric));
            }
        }
        Ok(worst)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// Values bounded away from zero so no probe straddles the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    rand_t(rng, shape).map(|v| if v.abs() < 0.05 { v + 0.1 * v.signum() + 0.05 } else { v })
}

/// Distinct values with gaps far larger than the probe step, so every 2x2
/// window has a unique maximum under perturbation.
fn well_separated(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    let n = shape.len();
    let mut ranks: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        ranks.swap(i, j);
    }
    let data = ranks
        .into_iter()
        .map(|r| r as f64 / n as f64 + rng.random_range(0.0..0.1 / n as f64))
        .collect();
    Tensor::from_vec(shape, data).expect("shape")
}

fn projected(g: &mut Graph<f64>, out: NodeId, proj: &Tensor<f64>) -> Result<NodeId> {
    let r = g.constant(proj.clone());
    let m = g.mul(out, r)?;
    Ok(g.sum(m))
}

/// The full per-op case list for one seed.
pub fn cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();

    let x = rand_t(rng, Shape::new(1, 6, 6, 3));
    let k = rand_t(rng, Shape::new(3, 3, 3, 4));
    let b = rand_t(rng, Shape::vector(4));
    let r = rand_t(rng, Shape::new(1, 6, 6, 4));
    out.push(Case::new("conv2d", vec![x, k, b], move |g, i| {
        let y = g.conv2d(i[0], i[1], i[2], 1)?;
        projected(g, y, &r)
    }));

    let x = rand_t(rng, Shape::new(1, 7, 5, 2));
    let k = rand_t(rng, Shape::new(3, 3, 2, 3));
    let b = rand_t(rng, Shape::vector(3));
    let r = rand_t(rng, Shape::new(1, 4, 3, 3));
    out.push(Case::new("conv2d_stride2", vec![x, k, b], move |g, i| {
        let y = g.conv2d(i[0], i[1], i[2], 2)?;
        projected(g, y, &r)
    }));

    let x = rand_t(rng, Shape::new(1, 4, 4, 3));
    let k = rand_t(rng, Shape::new(1, 1, 3, 4));
    let b = rand_t(rng, Shape::vector(4));
    let r = rand_t(rng, Shape::new(1, 4, 4, 4));
    out.push(Case::new("conv2d_1x1", vec![x, k, b], move |g, i| {
        let y = g.conv2d(i[0], i[1], i[2], 1)?;
        projected(g, y, &r)
    }));

    let x = rand_t(rng, Shape::new(1, 4, 3, 4));
    let k = rand_t(rng, Shape::new(2, 2, 3, 4));
    let b = rand_t(rng, Shape::vector(3));
    let r = rand_t(rng, Shape::new(1, 8, 6, 3));
    out.push(Case::new("conv_transpose2d", vec![x, k, b], move |g, i| {
        let y = g.conv_transpose2d(i[0], i[1], i[2])?;
        projected(g, y, &r)
    }));

    let x = well_separated(rng, Shape::new(1, 8, 7, 2));
    let r = rand_t(rng, Shape::new(1, 4, 3, 2));
    out.push(Case::new("maxpool2d", vec![x], move |g, i| {
        let y = g.maxpool2d(i[0])?;
        projected(g, y, &r)
    }));

    let x = rand_t(rng, Shape::new(2, 4, 4, 3)).map(|v| 3.0 * v + 1.0);
    let gamma = rand_t(rng, Shape::vector(3));
    let beta = rand_t(rng, Shape::vector(3));
    let r = rand_t(rng, Shape::new(2, 4, 4, 3));
    out.push(Case::new("batchnorm_train", vec![x, gamma, beta], move |g, i| {
        let (y, _) = g.batchnorm_train(i[0], i[1], i[2], 1e-5)?;
        projected(g, y, &r)
    }));

    let x = rand_t(rng, Shape::new(1, 5, 5, 3));
    let gamma = rand_t(rng, Shape::vector(3));
    let beta = rand_t(rng, Shape::vector(3));
    let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
    let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.2..2.0)).collect();
    let r = rand_t(rng, Shape::new(1, 5, 5, 3));
    out.push(Case::new("batchnorm_infer", vec![x, gamma, beta], move |g, i| {
        let y = g.batchnorm_infer(i[0], i[1], i[2], &mean, &var, 1e-5)?;
        projected(g, y, &r)
    }));

    let x = away_from_zero(rng, Shape::new(1, 6, 6, 4));
    let r = rand_t(rng, Shape::new(1, 6, 6, 4));
    out.push(Case::new("relu", vec![x], move |g, i| {
        let y = g.relu(i[0]);
        projected(g, y, &r)
    }));

    let x = rand_t(rng, Shape::new(1, 6, 6, 4)).map(|v| 4.0 * v);
    let r = rand_t(rng, Shape::new(1, 6, 6, 4));
    out.push(Case::new("sigmoid", vec![x], move |g, i| {
        let y = g.sigmoid(i[0]);
        projected(g, y, &r)
    }));

    let x = rand_t(rng, Shape::new(1, 8, 7, 3));
    let r = rand_t(rng, Shape::new(1, 4, 3, 3));
    out.push(Case::new("center_crop", vec![x], move |g, i| {
        let y = g.center_crop(i[0], 2)?;
        projected(g, y, &r)
    }));

    let x = rand_t(rng, Shape::new(1, 3, 2, 2));
    let r = rand_t(rng, Shape::new(1, 6, 4, 2));
    out.push(Case::new("bilinear_upsample_x2", vec![x], move |g, i| {
        let y = g.bilinear_upsample(i[0], 2)?;
        projected(g, y, &r)
    }));

    let x = rand_t(rng, Shape::new(1, 2, 2, 3));
    let r = rand_t(rng, Shape::new(1, 8, 8, 3));
    out.push(Case::new("bilinear_upsample_x4", vec![x], move |g, i| {
        let y = g.bilinear_upsample(i[0], 4)?;
        projected(g, y, &r)
    }));

    let a = rand_t(rng, Shape::new(1, 4, 4, 2));
    let b = rand_t(rng, Shape::new(1, 4, 4, 3));
    let r = rand_t(rng, Shape::new(1, 4, 4, 5));
    out.push(Case::new("concat_channels", vec![a, b], move |g, i| {
        let y = g.concat_channels(&[i[0], i[1]])?;
        projected(g, y, &r)
    }));

    let z = rand_t(rng, Shape::new(1, 6, 6, 1)).map(|v| 3.0 * v);
    let target = Tensor::from_fn(Shape::new(1, 6, 6, 1), |_| {
        if rng.random_bool(0.5) {
            1.0
        } else {
            0.0
        }
    });
    out.push(Case::new("bce_loss", vec![z], move |g, i| {
        let t = g.constant(target.clone());
        g.bce_loss(i[0], t)
    }));

    let w1 = rand_t(rng, Shape::new(3, 3, 2, 2));
    let w2 = rand_t(rng, Shape::new(2, 2, 3, 2));
    out.push(Case::new("l2_penalty", vec![w1, w2], move |g, i| {
        Ok(g.l2_penalty(&[i[0], i[1]]))
    }));

    // encoder block, pooling, transposed upscaling, crop/upscale fusion, loss
    let x = rand_t(rng, Shape::new(2, 8, 8, 2));
    let k1 = rand_t(rng, Shape::new(3, 3, 2, 3));
    let b1 = rand_t(rng, Shape::vector(3));
    let gm = rand_t(rng, Shape::vector(3)).map(|v| v + 1.5);
    let bt = rand_t(rng, Shape::vector(3));
    let kt = rand_t(rng, Shape::new(2, 2, 3, 3));
    let bt2 = rand_t(rng, Shape::vector(3));
    let kf = rand_t(rng, Shape::new(1, 1, 6, 1));
    let bf = rand_t(rng, Shape::vector(1));
    let target = Tensor::from_fn(Shape::new(2, 8, 8, 1), |[n, y, x, _]| ((n + y * x) % 2) as f64);
    out.push(Case::new(
        "composite",
        vec![x, k1, b1, gm, bt, kt, bt2, kf, bf],
        move |g, i| {
            let c = g.conv2d(i[0], i[1], i[2], 1)?;
            let (n, _) = g.batchnorm_train(c, i[3], i[4], 1e-5)?;
            let s = g.sigmoid(n);
            let p = g.maxpool2d(s)?;
            let u = g.conv_transpose2d(p, i[5], i[6])?;
            let cr = g.center_crop(s, 2)?;
            let up = g.bilinear_upsample(cr, 2)?;
            let cat = g.concat_channels(&[u, up])?;
            let logits = g.conv2d(cat, i[7], i[8], 1)?;
            let t = g.constant(target.clone());
            let bce = g.bce_loss(logits, t)?;
            let pen = g.l2_penalty(&[i[1], i[5]]);
            let pen = g.scale(pen, 0.005);
            g.add(bce, pen)
        },
    ));

    out
}

/// Per-op worst error across seeds.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub seeds: usize,
    pub max_relative_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.max_relative_error < TOLERANCE
    }
}

/// Runs every case for `seeds` consecutive seeds starting at `first_seed`.
pub fn run_suite(first_seed: u64, seeds: usize) -> Result<Vec<OpReport>> {
    let mut reports: Vec<OpReport> = Vec::new();
    for s in 0..seeds as u64 {
        for (idx, case) in cases(first_seed + s).into_iter().enumerate() {
            let err = case.max_relative_error()?;
            if idx == reports.len() {
                reports.push(OpReport {
                    op: case.name,
                    seeds: 0,
                    max_relative_error: 0.0,
                });
            }
            let r = &mut reports[idx];
            r.seeds += 1;
            r.max_relative_error = r.max_relative_error.max(err);
        }
    }
    Ok(reports)
}
