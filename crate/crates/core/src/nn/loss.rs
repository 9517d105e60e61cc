use super::{forward::Trace, Network, NetworkParams, Prediction};
use crate::dataset::{Batch, LOC_DIM};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

/// Supervision for one batch. Samples with a cleared mask bit have no location loss.
#[derive(Clone, Copy, Debug)]
pub struct Targets<'a> {
    pub labels: &'a [usize],
    pub locations: &'a Tensor,
    pub loc_mask: &'a [bool],
}

impl<'a> From<&'a Batch> for Targets<'a> {
    fn from(b: &'a Batch) -> Self {
        Targets {
            labels: &b.labels,
            locations: &b.locations,
            loc_mask: &b.loc_mask,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub cross_entropy: f64,
    /// Masked location MSE, already multiplied by `loc_weight`.
    pub localization: f64,
    pub weight_decay: f64,
    pub total: f64,
}

fn check_targets(net: &Network, n: usize, t: &Targets<'_>) -> Result<()> {
    if t.labels.len() != n || t.loc_mask.len() != n || t.locations.shape() != [n, LOC_DIM] {
        return Err(Error::Dimension(format!(
            "targets ({} labels, {} mask bits, locations {:?}) for {n} predictions",
            t.labels.len(),
            t.loc_mask.len(),
            t.locations.shape()
        )));
    }
    let c = net.config().num_classes;
    if let Some(&bad) = t.labels.iter().find(|&&l| l >= c) {
        return Err(Error::Contract(format!("label {bad} outside {c} classes")));
    }
    Ok(())
}

fn masked_count(mask: &[bool]) -> usize {
    mask.iter().filter(|&&m| m).count()
}

/// `mean CE + loc_weight * masked MSE + weight_decay * ||W||^2 / 2`.
///
/// The MSE averages over masked samples and the four location components; it is zero when no
/// sample in the batch carries a location target. Biases are not decayed.
pub fn loss(net: &Network, pred: &Prediction, targets: Targets<'_>) -> Result<LossBreakdown> {
    let n = pred.len();
    check_targets(net, n, &targets)?;
    if n == 0 {
        return Err(Error::Contract("loss of an empty batch".into()));
    }
    let mut ce = 0.0;
    for (i, &l) in targets.labels.iter().enumerate() {
        ce -= pred.class_probs.get2(i, l).max(f64::MIN_POSITIVE).ln();
    }
    ce /= n as f64;

    let n_masked = masked_count(targets.loc_mask);
    let mut mse = 0.0;
    if n_masked > 0 {
        for (i, _) in targets.loc_mask.iter().enumerate().filter(|(_, &m)| m) {
            for (p, t) in pred.loc.row(i).iter().zip(targets.locations.row(i)) {
                mse += (p - t) * (p - t);
            }
        }
        mse /= (LOC_DIM * n_masked) as f64;
    }
    let cfg = net.config();
    let localization = cfg.loc_weight * mse;
    let weight_decay = 0.5 * cfg.weight_decay * net.params().weight_norm_sq();
    Ok(LossBreakdown {
        cross_entropy: ce,
        localization,
        weight_decay,
        total: ce + localization + weight_decay,
    })
}

fn dense_grads(
    input: &Tensor,
    grad_out: &Tensor,
    weight: &Tensor,
    gw: &mut Tensor,
    gb: &mut Tensor,
) -> Result<Tensor> {
    *gw = tensor::matmul_tn(input, grad_out)?;
    let width = grad_out.row_len();
    let mut bias = vec![0.0; width];
    for r in 0..grad_out.rows() {
        for (b, g) in bias.iter_mut().zip(grad_out.row(r)) {
            *b += g;
        }
    }
    *gb = Tensor::new(vec![width], bias)?;
    tensor::matmul_nt(grad_out, weight)
}

/// Analytic gradient of [`loss`] with respect to every parameter, reusing the dropout masks and
/// pooling decisions recorded in `trace`.
pub fn backward(net: &Network, trace: &Trace, targets: Targets<'_>) -> Result<NetworkParams> {
    let pred = &trace.prediction;
    let n = pred.len();
    check_targets(net, n, &targets)?;
    if n == 0 {
        return Err(Error::Contract("backward over an empty batch".into()));
    }
    let cfg = net.config();
    let params = net.params();
    let mut grads = params.zeros_like();

    // Softmax + cross-entropy: d/dlogits = (p - onehot) / n.
    let c = cfg.num_classes;
    let mut d_logits = pred.class_probs.clone();
    for (i, &l) in targets.labels.iter().enumerate() {
        let row = d_logits.row_mut(i);
        row[l] -= 1.0;
        for v in row.iter_mut() {
            *v /= n as f64;
        }
    }
    debug_assert_eq!(d_logits.shape(), [n, c]);

    // Logistic head + masked MSE.
    let n_masked = masked_count(targets.loc_mask);
    let mut d_loc = Tensor::zeros(&[n, LOC_DIM]);
    if n_masked > 0 {
        let denom = (LOC_DIM * n_masked) as f64;
        for i in (0..n).filter(|&i| targets.loc_mask[i]) {
            let out = pred.loc.row(i);
            let tgt = targets.locations.row(i);
            let g = d_loc.row_mut(i);
            for k in 0..LOC_DIM {
                let s = out[k];
                g[k] = cfg.loc_weight * (2.0 * (s - tgt[k]) / denom) * (s * (1.0 - s));
            }
        }
    }

    let mut d_head = dense_grads(
        &trace.head_in,
        &d_logits,
        &params.class_head.weight,
        &mut grads.class_head.weight,
        &mut grads.class_head.bias,
    )?;
    let d_from_loc = dense_grads(
        &trace.head_in,
        &d_loc,
        &params.loc_head.weight,
        &mut grads.loc_head.weight,
        &mut grads.loc_head.bias,
    )?;
    for (a, b) in d_head.data_mut().iter_mut().zip(d_from_loc.data()) {
        *a += b;
    }

    let mut g = d_head;
    for l in (0..params.hidden.len()).rev() {
        if let Some(m) = &trace.masks {
            for (gv, k) in g.data_mut().iter_mut().zip(m.layers()[l].data()) {
                *gv *= k;
            }
        }
        for (gv, &z) in g.data_mut().iter_mut().zip(trace.hidden_pre[l].data()) {
            if z <= 0.0 {
                *gv = 0.0;
            }
        }
        let layer = &mut grads.hidden[l];
        g = dense_grads(
            &trace.hidden_in[l],
            &g,
            &params.hidden[l].weight,
            &mut layer.weight,
            &mut layer.bias,
        )?;
    }
    net.trunk_backward(trace, &g, &mut grads)?;

    if cfg.weight_decay > 0.0 {
        let decay = params.decay_mask();
        for ((gt, pt), d) in grads.tensors_mut().into_iter().zip(params.tensors()).zip(decay) {
            if d {
                for (gv, pv) in gt.data_mut().iter_mut().zip(pt.data()) {
                    *gv += cfg.weight_decay * pv;
                }
            }
        }
    }
    if !grads.is_finite() {
        return Err(Error::Numeric("non-finite gradient".into()));
    }
    Ok(grads)
}
