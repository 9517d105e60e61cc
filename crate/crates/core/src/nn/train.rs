use super::{backward, loss, Adam, DropoutMasks, Network, NetworkConfig, Targets};
use crate::dataset::Batch;
use crate::error::{Error, Result};
use crate::rng::RngStream;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Sample-weighted mean training loss of each epoch.
    pub epoch_loss: Vec<f64>,
}

/// Trains a freshly initialized network on `data` with minibatch Adam.
///
/// The stream is not consumed; initialization, per-epoch shuffling and dropout masks come from its
/// `init`, `shuffle` and `dropout` sub-streams.
pub fn train(config: &NetworkConfig, data: &Batch, stream: &RngStream) -> Result<(Network, TrainReport)> {
    config.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Contract("cannot train on an empty labeled set".into()));
    }
    let mut net = Network::init(config.clone(), &stream.named("init"))?;
    let mut shuffle = stream.named("shuffle");
    let mut dropout = stream.named("dropout");
    let mut adam = Adam::new(config.adam, net.params());
    let mut report = TrainReport::default();

    for epoch in 0..config.epochs {
        let order = shuffle.permutation(n);
        let mut total = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch = Batch {
                features: data.features.select_rows(chunk),
                labels: chunk.iter().map(|&i| data.labels[i]).collect(),
                locations: data.locations.select_rows(chunk),
                loc_mask: chunk.iter().map(|&i| data.loc_mask[i]).collect(),
            };
            let masks = (config.dropout > 0.0)
                .then(|| DropoutMasks::sample(config, chunk.len(), &mut dropout));
            let trace = net.forward_with_masks(&batch.features, masks)?;
            let targets = Targets::from(&batch);
            let l = loss(&net, trace.prediction(), targets)?;
            let grads = backward(&net, &trace, targets)?;
            adam.step(net.params_mut(), &grads);
            total += l.total * chunk.len() as f64;
        }
        let mean = total / n as f64;
        if !mean.is_finite() || !net.params().is_finite() {
            return Err(Error::Numeric(format!("training diverged in epoch {epoch}")));
        }
        report.epoch_loss.push(mean);
    }
    Ok((net, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{InputShape, Mode};
    use crate::tensor::Tensor;

    fn blobs(n: usize, seed: u64) -> Batch {
        let mut rng = RngStream::new(seed, 0);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let centre = if c == 0 { -2.0 } else { 2.0 };
            feats.push(centre + 0.5 * rng.normal());
            feats.push(centre + 0.5 * rng.normal());
            labels.push(c);
        }
        Batch {
            features: Tensor::new(vec![n, 2], feats).unwrap(),
            labels,
            locations: Tensor::full(&[n, 4], 0.5),
            loc_mask: vec![true; n],
        }
    }

    fn config() -> NetworkConfig {
        let mut c = NetworkConfig::desk(InputShape::Flat { dim: 2 }, 2);
        c.fc_widths = vec![16];
        c.epochs = 50;
        c
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = blobs(200, 3);
        let (net, report) = train(&config(), &data, &RngStream::new(1, 0)).unwrap();
        let pred = net.forward(&data.features, Mode::Deterministic).unwrap();
        let correct = (0..200)
            .filter(|&i| {
                let row = pred.class_probs.row(i);
                let argmax = if row[1] > row[0] { 1 } else { 0 };
                argmax == data.labels[i]
            })
            .count();
        assert!(correct as f64 / 200.0 >= 0.99, "accuracy {correct}/200");
        assert_eq!(report.epoch_loss.len(), 50);
        assert!(report.epoch_loss.iter().all(|l| l.is_finite()));
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = blobs(64, 4);
        let mut c = config();
        c.epochs = 5;
        let (a, _) = train(&c, &data, &RngStream::new(2, 0)).unwrap();
        let (b, _) = train(&c, &data, &RngStream::new(2, 0)).unwrap();
        assert_eq!(a, b);
        let (d, _) = train(&c, &data, &RngStream::new(3, 0)).unwrap();
        assert_ne!(a, d);
    }

    #[test]
    fn empty_set_rejected() {
        let data = blobs(0, 1);
        assert!(train(&config(), &data, &RngStream::new(2, 0)).is_err());
    }
}
