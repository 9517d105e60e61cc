use rayon::prelude::*;

use super::{Network, NetworkConfig, POOL};
use crate::dataset::LOC_DIM;
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{self, Tensor};

/// Network outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Pre-softmax class scores `[n, C]`.
    pub logits: Tensor,
    /// Softmax class probabilities `[n, C]`.
    pub class_probs: Tensor,
    /// Logistic location outputs `[n, 4]`.
    pub loc: Tensor,
}

impl Prediction {
    pub fn len(&self) -> usize {
        self.class_probs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub enum Mode<'a> {
    /// No dropout, no rescaling.
    Deterministic,
    /// Inverted dropout with masks drawn from the stream.
    Train(&'a mut RngStream),
}

/// Inverted-dropout masks, one `[n, width]` tensor per hidden dense layer. Entries are either `0`
/// or `1 / (1 - rate)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMasks {
    layers: Vec<Tensor>,
}

impl DropoutMasks {
    /// Mask rows for one sample, layer by layer.
    pub fn sample_row(config: &NetworkConfig, rng: &mut RngStream) -> Vec<Vec<f64>> {
        let keep = 1.0 - config.dropout;
        let scale = 1.0 / keep;
        config
            .fc_widths
            .iter()
            .map(|&w| {
                (0..w)
                    .map(|_| if rng.uniform() < keep { scale } else { 0.0 })
                    .collect()
            })
            .collect()
    }

    /// Masks for `n` samples drawn sample-major from one stream.
    pub fn sample(config: &NetworkConfig, n: usize, rng: &mut RngStream) -> Self {
        let rows: Vec<_> = (0..n).map(|_| Self::sample_row(config, rng)).collect();
        Self::from_sample_rows(config, &rows)
    }

    /// Assembles masks from per-sample rows as produced by [`sample_row`](Self::sample_row).
    pub fn from_sample_rows(config: &NetworkConfig, rows: &[Vec<Vec<f64>>]) -> Self {
        let layers = config
            .fc_widths
            .iter()
            .enumerate()
            .map(|(l, &w)| {
                let mut data = Vec::with_capacity(rows.len() * w);
                for r in rows {
                    data.extend_from_slice(&r[l]);
                }
                Tensor::new(vec![rows.len(), w], data).expect("mask row width")
            })
            .collect();
        Self { layers }
    }

    pub fn layers(&self) -> &[Tensor] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Tensor] {
        &mut self.layers
    }
}

#[derive(Clone, Debug)]
struct SampleTrace {
    /// Input of each conv layer.
    inputs: Vec<Tensor>,
    /// Pre-activation output of each conv layer.
    pre: Vec<Tensor>,
    /// `(pool input shape, argmax)` if the pool ran.
    pool: Option<(Vec<usize>, Vec<usize>)>,
}

/// Intermediate values recorded by a forward pass, consumed by [`backward`](super::backward).
#[derive(Clone, Debug)]
pub struct Trace {
    samples: Vec<SampleTrace>,
    pub(super) hidden_in: Vec<Tensor>,
    pub(super) hidden_pre: Vec<Tensor>,
    pub(super) masks: Option<DropoutMasks>,
    pub(super) head_in: Tensor,
    pub(super) prediction: Prediction,
}

impl Trace {
    pub fn prediction(&self) -> &Prediction {
        &self.prediction
    }

    pub fn len(&self) -> usize {
        self.prediction.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn relu(t: &Tensor) -> Tensor {
    Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| v.max(0.0)).collect())
        .expect("same shape")
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Network {
    fn check_batch(&self, batch: &Tensor) -> Result<usize> {
        let dims = self.config.input.dims();
        if batch.rank() != dims.len() + 1 || batch.shape()[1..] != dims[..] {
            return Err(Error::Dimension(format!(
                "batch shape {:?} does not match input {:?}",
                batch.shape(),
                dims
            )));
        }
        Ok(batch.rows())
    }

    fn trunk_sample(&self, x: Tensor, keep: bool) -> Result<(Tensor, Option<SampleTrace>)> {
        let mut st = SampleTrace {
            inputs: Vec::new(),
            pre: Vec::new(),
            pool: None,
        };
        let mut x = x;
        for (l, layer) in self.params.conv.iter().enumerate() {
            let z = tensor::conv2d_valid(&x, &layer.kernels, &layer.bias)?;
            let a = relu(&z);
            if keep {
                st.inputs.push(x);
                st.pre.push(z);
            }
            x = a;
            if self.config.pool_after == Some(l) {
                let p = tensor::maxpool2d(&x, POOL)?;
                if keep {
                    st.pool = Some((x.shape().to_vec(), p.argmax));
                }
                x = p.output;
            }
        }
        Ok((x, keep.then_some(st)))
    }

    /// Runs the conv trunk and flattens to `[n, trunk_dim]`.
    fn trunk(&self, batch: &Tensor, keep: bool) -> Result<(Tensor, Vec<SampleTrace>)> {
        let n = self.check_batch(batch)?;
        let d = self.config.trunk_dim();
        if self.params.conv.is_empty() {
            return Ok((batch.clone().reshape(vec![n, d])?, Vec::new()));
        }
        let sample_shape = self.config.input.dims();
        let outs: Vec<(Tensor, Option<SampleTrace>)> = (0..n)
            .into_par_iter()
            .map(|i| {
                let x = Tensor::new(sample_shape.clone(), batch.row(i).to_vec())?;
                self.trunk_sample(x, keep)
            })
            .collect::<Result<_>>()?;
        let mut flat = Vec::with_capacity(n * d);
        let mut traces = Vec::new();
        for (x, st) in outs {
            flat.extend_from_slice(x.data());
            traces.extend(st);
        }
        Ok((Tensor::new(vec![n, d], flat)?, traces))
    }

    /// Conv trunk output `[n, trunk_dim]` without dropout. Deterministic; used to share the trunk
    /// across repeated dropout passes.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.trunk(batch, false)?.0)
    }

    /// Dense stack and both heads applied to trunk features.
    pub(crate) fn head(
        &self,
        flat: Tensor,
        masks: Option<&DropoutMasks>,
        keep: bool,
    ) -> Result<(Prediction, Vec<Tensor>, Vec<Tensor>, Tensor)> {
        let n = flat.rows();
        if let Some(m) = masks {
            if m.layers.len() != self.params.hidden.len()
                || m.layers.iter().any(|t| t.rows() != n)
            {
                return Err(Error::Dimension("dropout masks do not match the batch".into()));
            }
        }
        let mut hidden_in = Vec::new();
        let mut hidden_pre = Vec::new();
        let mut x = flat;
        for (l, layer) in self.params.hidden.iter().enumerate() {
            let mut z = tensor::matmul(&x, &layer.weight)?;
            tensor::add_row_bias(&mut z, &layer.bias)?;
            let mut a = relu(&z);
            if let Some(m) = masks {
                for (v, k) in a.data_mut().iter_mut().zip(m.layers[l].data()) {
                    *v *= k;
                }
            }
            if keep {
                hidden_in.push(x);
                hidden_pre.push(z);
            }
            x = a;
        }
        let mut logits = tensor::matmul(&x, &self.params.class_head.weight)?;
        tensor::add_row_bias(&mut logits, &self.params.class_head.bias)?;
        let class_probs = tensor::softmax(&logits)?;
        let mut loc = tensor::matmul(&x, &self.params.loc_head.weight)?;
        tensor::add_row_bias(&mut loc, &self.params.loc_head.bias)?;
        loc.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        debug_assert_eq!(loc.shape(), [n, LOC_DIM]);
        let pred = Prediction {
            logits,
            class_probs,
            loc,
        };
        pred.class_probs.ensure_finite("class probabilities")?;
        pred.loc.ensure_finite("location outputs")?;
        Ok((pred, hidden_in, hidden_pre, x))
    }

    pub fn forward(&self, batch: &Tensor, mode: Mode<'_>) -> Result<Prediction> {
        let masks = self.masks_for(batch, mode)?;
        let (flat, _) = self.trunk(batch, false)?;
        Ok(self.head(flat, masks.as_ref(), false)?.0)
    }

    /// Forward pass that records what [`backward`](super::backward) needs.
    pub fn forward_traced(&self, batch: &Tensor, mode: Mode<'_>) -> Result<Trace> {
        let masks = self.masks_for(batch, mode)?;
        self.forward_with_masks(batch, masks)
    }

    /// Forward pass with caller-supplied dropout masks (`None` = deterministic).
    pub fn forward_with_masks(&self, batch: &Tensor, masks: Option<DropoutMasks>) -> Result<Trace> {
        let (flat, samples) = self.trunk(batch, true)?;
        let (prediction, hidden_in, hidden_pre, head_in) = self.head(flat, masks.as_ref(), true)?;
        Ok(Trace {
            samples,
            hidden_in,
            hidden_pre,
            masks,
            head_in,
            prediction,
        })
    }

    fn masks_for(&self, batch: &Tensor, mode: Mode<'_>) -> Result<Option<DropoutMasks>> {
        let n = self.check_batch(batch)?;
        Ok(match mode {
            Mode::Train(rng) if self.config.dropout > 0.0 => {
                Some(DropoutMasks::sample(&self.config, n, rng))
            }
            _ => None,
        })
    }

    /// Backpropagates a gradient w.r.t. the flattened trunk output through the conv stack,
    /// accumulating kernel and bias gradients.
    pub(super) fn trunk_backward(
        &self,
        trace: &Trace,
        grad_flat: &Tensor,
        grads: &mut super::NetworkParams,
    ) -> Result<()> {
        if self.params.conv.is_empty() {
            return Ok(());
        }
        let trunk_shape = self.config.trunk_shape()?;
        let per_sample: Vec<Vec<(Tensor, Tensor)>> = trace
            .samples
            .par_iter()
            .enumerate()
            .map(|(i, st)| -> Result<Vec<(Tensor, Tensor)>> {
                let mut g = Tensor::new(trunk_shape.clone(), grad_flat.row(i).to_vec())?;
                let mut layer_grads = Vec::with_capacity(self.params.conv.len());
                for l in (0..self.params.conv.len()).rev() {
                    if self.config.pool_after == Some(l) {
                        let (shape, argmax) = st.pool.as_ref().expect("pool trace");
                        g = tensor::maxpool2d_backward(shape, argmax, &g)?;
                    }
                    for (gv, &z) in g.data_mut().iter_mut().zip(st.pre[l].data()) {
                        if z <= 0.0 {
                            *gv = 0.0;
                        }
                    }
                    let cg = tensor::conv2d_valid_backward(
                        &st.inputs[l],
                        &self.params.conv[l].kernels,
                        &g,
                    )?;
                    layer_grads.push((cg.kernels, cg.bias));
                    g = cg.input;
                }
                layer_grads.reverse();
                Ok(layer_grads)
            })
            .collect::<Result<_>>()?;
        // Sum per-sample contributions in sample order for a schedule-independent result.
        for sample in per_sample {
            for (l, (gk, gb)) in sample.into_iter().enumerate() {
                for (a, b) in grads.conv[l].kernels.data_mut().iter_mut().zip(gk.data()) {
                    *a += b;
                }
                for (a, b) in grads.conv[l].bias.data_mut().iter_mut().zip(gb.data()) {
                    *a += b;
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{InputShape, NetworkConfig};

    fn conv_net(dropout: f64) -> Network {
        let mut c = NetworkConfig::desk(
            InputShape::Image {
                channels: 2,
                height: 9,
                width: 8,
            },
            3,
        );
        c.dropout = dropout;
        c.fc_widths = vec![10, 7];
        Network::init(c, &RngStream::new(4, 4)).unwrap()
    }

    fn batch(n: usize, net: &Network, seed: u64) -> Tensor {
        let mut rng = RngStream::new(seed, 0);
        let mut shape = vec![n];
        shape.extend(net.config().input.dims());
        Tensor::from_fn(&shape, |_| rng.uniform_range(-1.0, 1.0))
    }

    #[test]
    fn deterministic_is_repeatable_and_normalized() {
        let net = conv_net(0.5);
        let x = batch(5, &net, 1);
        let a = net.forward(&x, Mode::Deterministic).unwrap();
        let b = net.forward(&x, Mode::Deterministic).unwrap();
        assert_eq!(a, b);
        for r in 0..5 {
            let s: f64 = a.class_probs.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(a.loc.row(r).iter().all(|&v| v > 0.0 && v < 1.0));
        }
    }

    #[test]
    fn zero_dropout_train_equals_deterministic() {
        let net = conv_net(0.0);
        let x = batch(4, &net, 2);
        let mut rng = RngStream::new(1, 2);
        let a = net.forward(&x, Mode::Train(&mut rng)).unwrap();
        let b = net.forward(&x, Mode::Deterministic).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn dropout_changes_outputs() {
        let net = conv_net(0.5);
        let x = batch(4, &net, 2);
        let mut rng = RngStream::new(1, 2);
        let a = net.forward(&x, Mode::Train(&mut rng)).unwrap();
        let b = net.forward(&x, Mode::Deterministic).unwrap();
        assert_ne!(a.class_probs, b.class_probs);
    }

    #[test]
    fn batch_shape_checked() {
        let net = conv_net(0.5);
        let x = Tensor::zeros(&[2, 2, 8, 8]);
        assert!(matches!(
            net.forward(&x, Mode::Deterministic),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn masks_are_inverted_dropout() {
        let net = conv_net(0.25);
        let m = DropoutMasks::sample(net.config(), 200, &mut RngStream::new(3, 3));
        let vals = m.layers()[0].data();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 1.0 / 0.75));
        let kept = vals.iter().filter(|&&v| v > 0.0).count() as f64 / vals.len() as f64;
        assert!((kept - 0.75).abs() < 0.03);
    }

    #[test]
    fn inverted_dropout_expectation_matches_deterministic_logits() {
        let mut c = NetworkConfig::desk(InputShape::Flat { dim: 6 }, 4);
        c.fc_widths = vec![16];
        c.dropout = 0.5;
        let net = Network::init(c, &RngStream::new(8, 0)).unwrap();
        let x = Tensor::from_fn(&[1, 6], |i| (i as f64 * 0.7).sin());
        let det = net.forward(&x, Mode::Deterministic).unwrap().logits;
        let mut rng = RngStream::new(99, 0);
        let passes = 20_000;
        let mut mean = [0.0; 4];
        for _ in 0..passes {
            let p = net.forward(&x, Mode::Train(&mut rng)).unwrap();
            for (m, v) in mean.iter_mut().zip(p.logits.data()) {
                *m += v / passes as f64;
            }
        }
        let num: f64 = mean.iter().zip(det.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
        let den: f64 = det.data().iter().map(|b| b * b).sum::<f64>();
        assert!((num / den).sqrt() < 0.02, "relative deviation {}", (num / den).sqrt());
    }
}
