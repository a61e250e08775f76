//! Forward and backward passes through an [`ArchitectureSpec`].
//!
//! Each sample is processed on its own, so a tile's probability does not
//! depend on what else is in its batch. Gradients over a batch are summed in
//! sample order and then averaged.

use crate::error::{Error, Result};
use crate::exec::{self, Execution};

use super::arch::{ArchitectureSpec, LayerShape, Parameters};
use super::ops::{self, ConvGeometry};

/// Parameter gradients in parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f32>>,
}

impl Gradients {
    pub fn zeros_like(params: &Parameters) -> Self {
        Self {
            tensors: params.tensors.iter().map(|t| vec![0.0; t.tensor.len()]).collect(),
        }
    }

    pub fn fill_zero(&mut self) {
        for t in &mut self.tensors {
            t.fill(0.0);
        }
    }

    pub fn scale(&mut self, factor: f32) {
        for t in &mut self.tensors {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// A validated (spec, parameters) pair ready to run.
pub struct Network<'a> {
    pub spec: &'a ArchitectureSpec,
    pub params: &'a Parameters,
    shapes: Vec<LayerShape>,
    geoms: Vec<ConvGeometry>,
}

/// Reusable per-thread buffers for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Workspace {
    cols: Vec<Vec<f32>>,
    conv_out: Vec<Vec<f32>>,
    pooled: Vec<Vec<f32>>,
    argmax: Vec<Vec<u32>>,
    features: Vec<f32>,
    grad_a: Vec<f32>,
    grad_b: Vec<f32>,
    scratch: Vec<f32>,
}

impl<'a> Network<'a> {
    pub fn new(spec: &'a ArchitectureSpec, params: &'a Parameters) -> Result<Self> {
        params.check(spec)?;
        let shapes = spec.layer_shapes()?;
        let geoms = shapes
            .iter()
            .zip(&spec.layers)
            .map(|(s, l)| ConvGeometry::new(s.in_channels, s.in_side, s.in_side, l.kernel as usize, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            spec,
            params,
            shapes,
            geoms,
        })
    }

    pub fn input_len(&self) -> usize {
        let s = self.spec.input_side as usize;
        s * s
    }

    fn weight(&self, layer: usize) -> &[f32] {
        self.params.tensors[2 * layer].tensor.values()
    }

    fn bias(&self, layer: usize) -> &[f32] {
        self.params.tensors[2 * layer + 1].tensor.values()
    }

    fn head(&self) -> (&[f32], f32) {
        let n = self.params.tensors.len();
        (
            self.params.tensors[n - 2].tensor.values(),
            self.params.tensors[n - 1].tensor.values()[0],
        )
    }

    fn ensure(&self, ws: &mut Workspace) {
        let n = self.geoms.len();
        if ws.cols.len() != n {
            ws.cols = vec![Vec::new(); n];
            ws.conv_out = vec![Vec::new(); n];
            ws.pooled = vec![Vec::new(); n];
            ws.argmax = vec![Vec::new(); n];
        }
        for (i, (g, l)) in self.geoms.iter().zip(&self.spec.layers).enumerate() {
            let oc = l.out_channels as usize;
            ws.cols[i].resize(g.patch_len() * g.out_pixels(), 0.0);
            ws.conv_out[i].resize(oc * g.out_pixels(), 0.0);
            if l.pool {
                let pooled = oc * (g.out_h / 2) * (g.out_w / 2);
                ws.pooled[i].resize(pooled, 0.0);
                ws.argmax[i].resize(pooled, 0);
            }
        }
    }

    /// Runs the stack on one `input_side²` sample and returns the logit.
    pub fn forward_logit(&self, input: &[f32], ws: &mut Workspace) -> f32 {
        assert_eq!(input.len(), self.input_len());
        self.ensure(ws);
        for i in 0..self.geoms.len() {
            let g = self.geoms[i];
            let layer = self.spec.layers[i];
            let oc = layer.out_channels as usize;
            {
                let src: &[f32] = if i == 0 {
                    input
                } else if self.spec.layers[i - 1].pool {
                    &ws.pooled[i - 1]
                } else {
                    &ws.conv_out[i - 1]
                };
                ops::im2col(src, &g, &mut ws.cols[i]);
            }
            ops::conv_forward_cols(&g, &ws.cols[i], self.weight(i), self.bias(i), oc, &mut ws.conv_out[i]);
            for v in ws.conv_out[i].iter_mut() {
                *v = v.max(0.0);
            }
            if layer.pool {
                ops::maxpool_raw(&ws.conv_out[i], oc, g.out_h, g.out_w, &mut ws.pooled[i], &mut ws.argmax[i]);
            }
        }
        let last = self.geoms.len() - 1;
        let out: &[f32] = if self.spec.layers[last].pool {
            &ws.pooled[last]
        } else {
            &ws.conv_out[last]
        };
        let side = self.shapes[last].out_side;
        let hw = side * side;
        ws.features.clear();
        ws.features
            .extend(out.chunks_exact(hw).map(|plane| plane.iter().sum::<f32>() / hw as f32));
        let (w, b) = self.head();
        b + w.iter().zip(&ws.features).map(|(a, f)| a * f).sum::<f32>()
    }

    pub fn predict_one(&self, input: &[f32], ws: &mut Workspace) -> f32 {
        ops::sigmoid_scalar(self.forward_logit(input, ws))
    }

    /// Forward and backward for one labelled sample; adds the gradient of
    /// that sample's loss into `grads`. Returns (loss, probability).
    pub fn accumulate(&self, input: &[f32], label: f32, grads: &mut Gradients, ws: &mut Workspace) -> (f32, f32) {
        let logit = self.forward_logit(input, ws);
        let p = ops::sigmoid_scalar(logit);
        let pc = p.clamp(ops::BCE_CLAMP, 1.0 - ops::BCE_CLAMP);
        let loss = -(label * pc.ln() + (1.0 - label) * (1.0 - pc).ln());
        // d(loss)/d(logit) of the sigmoid + cross-entropy pair.
        let dlogit = p - label;

        let n = self.params.tensors.len();
        let (w_head, _) = self.head();
        for (g, f) in grads.tensors[n - 2].iter_mut().zip(&ws.features) {
            *g += dlogit * f;
        }
        grads.tensors[n - 1][0] += dlogit;

        let last = self.geoms.len() - 1;
        let side = self.shapes[last].out_side;
        let hw = side * side;
        let mut d_out = std::mem::take(&mut ws.grad_a);
        d_out.clear();
        for &w in w_head {
            d_out.extend(std::iter::repeat(dlogit * w / hw as f32).take(hw));
        }

        let mut d_conv = std::mem::take(&mut ws.grad_b);
        for i in (0..self.geoms.len()).rev() {
            let g = self.geoms[i];
            let layer = self.spec.layers[i];
            let oc = layer.out_channels as usize;
            if layer.pool {
                d_conv.clear();
                d_conv.resize(oc * g.out_pixels(), 0.0);
                for (&idx, &d) in ws.argmax[i].iter().zip(&d_out) {
                    d_conv[idx as usize] += d;
                }
            } else {
                std::mem::swap(&mut d_conv, &mut d_out);
            }
            for (d, &y) in d_conv.iter_mut().zip(&ws.conv_out[i]) {
                if y <= 0.0 {
                    *d = 0.0;
                }
            }
            let (gw_slot, rest) = grads.tensors.split_at_mut(2 * i + 1);
            let grad_weight = &mut gw_slot[2 * i];
            let grad_bias = &mut rest[0];
            let want_input = i > 0;
            if want_input {
                d_out.clear();
                d_out.resize(g.in_channels * g.height * g.width, 0.0);
            }
            ops::conv_backward_cols(
                &g,
                &ws.cols[i],
                self.weight(i),
                oc,
                &d_conv,
                grad_weight,
                grad_bias,
                if want_input {
                    Some((&mut d_out[..], &mut ws.scratch))
                } else {
                    None
                },
            );
        }
        ws.grad_a = d_out;
        ws.grad_b = d_conv;
        (loss, p)
    }
}

/// Probabilities for a batch of `input_side²` samples, in batch order.
pub fn forward(spec: &ArchitectureSpec, params: &Parameters, inputs: &[f32], input_side: u32) -> Result<Vec<f32>> {
    forward_with(spec, params, inputs, input_side, Execution::default())
}

pub fn forward_with(
    spec: &ArchitectureSpec,
    params: &Parameters,
    inputs: &[f32],
    input_side: u32,
    mode: Execution,
) -> Result<Vec<f32>> {
    if input_side != spec.input_side {
        return Err(Error::Shape(format!(
            "tiles of side {input_side} for a network expecting {}",
            spec.input_side
        )));
    }
    let net = Network::new(spec, params)?;
    let len = net.input_len();
    if inputs.len() % len != 0 {
        return Err(Error::Shape(format!(
            "batch of {} values is not a multiple of {len}",
            inputs.len()
        )));
    }
    let samples: Vec<&[f32]> = inputs.chunks_exact(len).collect();
    Ok(exec::map_slice(mode, &samples, |x| {
        let mut ws = Workspace::default();
        net.predict_one(x, &mut ws)
    }))
}

/// Mean loss and mean parameter gradient over a batch.
pub fn loss_and_gradients(
    spec: &ArchitectureSpec,
    params: &Parameters,
    inputs: &[f32],
    labels: &[f32],
) -> Result<(f32, Gradients)> {
    let net = Network::new(spec, params)?;
    let len = net.input_len();
    if inputs.len() != labels.len() * len || labels.is_empty() {
        return Err(Error::Shape(format!(
            "{} input values for {} labels of side {}",
            inputs.len(),
            labels.len(),
            spec.input_side
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y != 0.0 && y != 1.0) {
        return Err(Error::InvalidLabel(bad));
    }
    let mut grads = Gradients::zeros_like(params);
    let mut ws = Workspace::default();
    let mut total = 0.0f32;
    for (x, &y) in inputs.chunks_exact(len).zip(labels) {
        total += net.accumulate(x, y, &mut grads, &mut ws).0;
    }
    let n = labels.len() as f32;
    grads.scale(1.0 / n);
    Ok((total / n, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(side: usize, seed: u64) -> Vec<f32> {
        (0..side * side)
            .map(|i| (crate::seed::splitmix64(seed ^ i as u64) % 1000) as f32 / 1000.0)
            .collect()
    }

    #[test]
    fn zero_head_gives_one_half() {
        let spec = ArchitectureSpec::five_layer(80).unwrap();
        let mut params = Parameters::init(&spec, 1);
        params.zero_head();
        let batch: Vec<f32> = (0..3).flat_map(|s| sample(80, s)).collect();
        let p = forward(&spec, &params, &batch, 80).unwrap();
        assert_eq!(p, vec![0.5; 3]);
    }

    #[test]
    fn batch_independence_and_determinism() {
        let spec = ArchitectureSpec::five_layer(80).unwrap();
        let params = Parameters::init(&spec, 2);
        let one = sample(80, 9);
        let batch: Vec<f32> = [sample(80, 1), one.clone(), sample(80, 2)].concat();
        let alone = forward(&spec, &params, &one, 80).unwrap();
        let within = forward(&spec, &params, &batch, 80).unwrap();
        assert_eq!(alone[0].to_bits(), within[1].to_bits());
        let seq = forward_with(&spec, &params, &batch, 80, Execution::Sequential).unwrap();
        assert_eq!(within, seq);
        assert!(within.iter().all(|p| (0.0..=1.0).contains(p)));
    }

    #[test]
    fn wrong_input_side_is_rejected() {
        let spec = ArchitectureSpec::five_layer(80).unwrap();
        let params = Parameters::init(&spec, 2);
        assert!(forward(&spec, &params, &sample(90, 1), 90).is_err());
        assert!(forward(&spec, &params, &sample(80, 1)[1..], 80).is_err());
    }

    #[test]
    fn network_loss_matches_ops_loss() {
        let spec = ArchitectureSpec::five_layer(80).unwrap();
        let params = Parameters::init(&spec, 5);
        let batch: Vec<f32> = (0..4).flat_map(|s| sample(80, s)).collect();
        let labels = [0.0, 1.0, 1.0, 0.0];
        let probs = forward(&spec, &params, &batch, 80).unwrap();
        let (loss, grads) = loss_and_gradients(&spec, &params, &batch, &labels).unwrap();
        let reference = ops::binary_cross_entropy(&probs, &labels).unwrap();
        assert!((loss - reference).abs() < 1e-6);
        assert_eq!(grads.tensors.len(), params.tensors.len());
    }
}
