//! Two-stage training: softmax classification with a step learning-rate
//! schedule, then triplet-loss fine-tuning on L2-normalized features with
//! semi-hard negative mining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::softmax_cross_entropy;
use super::tensor::{Scalar, Tensor};
use super::{LayerParams, Mode, NetError, Network, TapedPass};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_stage1: usize,
    /// Initial learning rate, divided by 10 at every boundary.
    pub lr_initial: f64,
    /// Epochs between divisions.
    pub lr_decay_every: usize,
    pub lr_floor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dropout_ratio: f64,
    pub triplet_margin: f64,
    pub triplet_epochs: usize,
    pub triplet_lr: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs_stage1: 20,
            lr_initial: 0.01,
            lr_decay_every: 10,
            lr_floor: 0.001,
            momentum: 0.9,
            weight_decay: 5e-4,
            dropout_ratio: 0.4,
            triplet_margin: 0.2,
            triplet_epochs: 2,
            triplet_lr: 0.001,
            rng_seed: 1,
        }
    }
}

impl TrainConfig {
    /// Step schedule: initial rate divided by 10 every `lr_decay_every`
    /// epochs, clamped at the floor.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let steps = (epoch / self.lr_decay_every.max(1)) as i32;
        (self.lr_initial * 0.1f64.powi(steps)).max(self.lr_floor)
    }
}

/// Per-layer parameter gradient, aligned with `Network::params`.
#[derive(Debug, Clone)]
pub struct ParamGrad<T> {
    pub dw: Tensor<T>,
    pub db: Vec<T>,
}

#[derive(Debug, Clone)]
pub struct Gradients<T> {
    pub layers: Vec<Option<ParamGrad<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        let layers = net
            .params
            .iter()
            .map(|p| match p {
                LayerParams::Conv { w, b } | LayerParams::Fc { w, b } => Some(ParamGrad {
                    dw: Tensor::zeros(w.shape()),
                    db: vec![T::zero(); b.len()],
                }),
                LayerParams::None => None,
            })
            .collect();
        Gradients { layers }
    }

    /// self += other * s (layers missing in `other` are untouched).
    pub fn add_scaled(&mut self, other: &Gradients<T>, s: T) {
        for (dst, src) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some(d), Some(o)) = (dst.as_mut(), src.as_ref()) {
                d.dw.add_scaled(&o.dw, s);
                for (a, b) in d.db.iter_mut().zip(&o.db) {
                    *a += *b * s;
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers.iter().flatten().all(|g| {
            g.dw.all_finite() && g.db.iter().all(|v| v.is_finite())
        })
    }
}

/// Momentum buffers for SGD.
pub struct SgdState<T> {
    velocity: Vec<Option<ParamGrad<T>>>,
}

impl<T: Scalar> SgdState<T> {
    pub fn zeros_like(net: &Network<T>) -> Self {
        SgdState {
            velocity: Gradients::zeros_like(net).layers,
        }
    }
}

/// v <- momentum*v - lr*(g + weight_decay*w); w <- w + v
pub fn sgd_step<T: Scalar>(
    net: &mut Network<T>,
    state: &mut SgdState<T>,
    grads: &Gradients<T>,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    let lr = T::from_f64(lr);
    let mu = T::from_f64(momentum);
    let wd = T::from_f64(weight_decay);
    for ((param, vel), grad) in net
        .params
        .iter_mut()
        .zip(&mut state.velocity)
        .zip(&grads.layers)
    {
        let (LayerParams::Conv { w, b } | LayerParams::Fc { w, b }) = param else {
            continue;
        };
        let (Some(v), Some(g)) = (vel.as_mut(), grad.as_ref()) else {
            continue;
        };
        for ((wi, vi), gi) in w
            .data_mut()
            .iter_mut()
            .zip(v.dw.data_mut())
            .zip(g.dw.data())
        {
            *vi = mu * *vi - lr * (*gi + wd * *wi);
            *wi += *vi;
        }
        for ((bi, vi), gi) in b.iter_mut().zip(&mut v.db).zip(&g.db) {
            *vi = mu * *vi - lr * *gi;
            *bi += *vi;
        }
    }
}

/// Labeled image set; labels must be dense in [0, classCount).
pub struct Dataset<T> {
    pub samples: Vec<(Tensor<T>, usize)>,
}

impl<T> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Stage 1: softmax classification. Returns the mean loss per epoch.
pub fn train_stage_softmax<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<Vec<f64>, NetError> {
    let classes = net.spec.class_count();
    for (_, label) in &data.samples {
        if *label >= classes {
            return Err(NetError::LabelOutOfRange {
                label: *label,
                classes,
            });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut state = SgdState::zeros_like(net);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs_stage1);
    net.set_mode(Mode::Train);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs_stage1 {
        let lr = cfg.lr_at_epoch(epoch);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = Gradients::zeros_like(net);
            let scale = T::from_f64(1.0 / batch.len() as f64);
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let (x, label) = &data.samples[i];
                let pass = net.forward_train(x, cfg.dropout_ratio, &mut rng)?;
                let logits = pass.logits.as_ref().expect("trained through logits");
                let (loss, dlogits) = softmax_cross_entropy(logits, *label)?;
                batch_loss += loss.as_f64();
                let g = net.backward_from_logits(&pass, dlogits);
                grads.add_scaled(&g, scale);
            }
            if !batch_loss.is_finite() {
                net.set_mode(Mode::Eval);
                return Err(NetError::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            sgd_step(net, &mut state, &grads, lr, cfg.momentum, cfg.weight_decay);
            loss_sum += batch_loss;
        }
        epoch_losses.push(loss_sum / data.len().max(1) as f64);
    }
    net.set_mode(Mode::Eval);
    Ok(epoch_losses)
}

/// L2 normalization with the quantities needed for its backward pass.
pub fn l2_normalize_with_grad<T: Scalar>(x: &[T]) -> (Vec<T>, T) {
    let norm = x.iter().map(|&v| v * v).sum::<T>().sqrt();
    let safe = norm.max(T::from_f64(1e-12));
    (x.iter().map(|&v| v / safe).collect(), safe)
}

/// Backward of y = x/||x||: dx = (g - y*(y.g)) / ||x||.
pub fn l2_normalize_backward<T: Scalar>(y: &[T], norm: T, g: &[T]) -> Vec<T> {
    let yg: T = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
    y.iter()
        .zip(g)
        .map(|(&yi, &gi)| (gi - yi * yg) / norm)
        .collect()
}

/// Squared-distance triplet loss max(0, |a-p|^2 - |a-n|^2 + margin) with
/// gradients; all zero when the triplet is inactive.
#[allow(clippy::type_complexity)]
pub fn triplet_loss<T: Scalar>(
    anchor: &[T],
    positive: &[T],
    negative: &[T],
    margin: T,
) -> (T, Vec<T>, Vec<T>, Vec<T>) {
    assert_eq!(anchor.len(), positive.len());
    assert_eq!(anchor.len(), negative.len());
    let d_ap = dist2(anchor, positive);
    let d_an = dist2(anchor, negative);
    let viol = d_ap - d_an + margin;
    let dim = anchor.len();
    if viol <= T::zero() {
        return (
            T::zero(),
            vec![T::zero(); dim],
            vec![T::zero(); dim],
            vec![T::zero(); dim],
        );
    }
    let two = T::from_f64(2.0);
    let mut da = vec![T::zero(); dim];
    let mut dp = vec![T::zero(); dim];
    let mut dn = vec![T::zero(); dim];
    for i in 0..dim {
        da[i] = two * (negative[i] - positive[i]);
        dp[i] = two * (positive[i] - anchor[i]);
        dn[i] = two * (anchor[i] - negative[i]);
    }
    (viol, da, dp, dn)
}

fn dist2<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| (x - y) * (x - y))
        .sum()
}

/// Semi-hard triplet mining over one batch of (already normalized)
/// features.
///
/// For every ordered anchor-positive pair, picks the closest negative in
/// the semi-hard band d_ap < d_an < d_ap + margin; if the band is empty,
/// the hardest (closest) negative overall. Returns [anchor, positive,
/// negative] index triples; empty when no label occurs twice.
pub fn select_triplets<T: Scalar>(
    features: &[Vec<T>],
    labels: &[usize],
    margin: T,
) -> Vec<[usize; 3]> {
    assert_eq!(features.len(), labels.len());
    let n = features.len();
    let mut triplets = Vec::new();
    for a in 0..n {
        for p in 0..n {
            if a == p || labels[a] != labels[p] {
                continue;
            }
            let d_ap = dist2(&features[a], &features[p]);
            let mut semi_hard: Option<(T, usize)> = None;
            let mut hardest: Option<(T, usize)> = None;
            for neg in 0..n {
                if labels[neg] == labels[a] {
                    continue;
                }
                let d_an = dist2(&features[a], &features[neg]);
                if hardest.map(|(d, _)| d_an < d).unwrap_or(true) {
                    hardest = Some((d_an, neg));
                }
                if d_an > d_ap
                    && d_an < d_ap + margin
                    && semi_hard.map(|(d, _)| d_an < d).unwrap_or(true)
                {
                    semi_hard = Some((d_an, neg));
                }
            }
            if let Some((_, neg)) = semi_hard.or(hardest) {
                triplets.push([a, p, neg]);
            }
        }
    }
    triplets
}

/// Per-epoch log of the triplet fine-tuning stage.
#[derive(Debug, Clone, Default)]
pub struct TripletStageLog {
    pub mean_loss: Vec<f64>,
    pub active_fraction: Vec<f64>,
    pub triplet_count: Vec<usize>,
}

/// Stage 2: fine-tune with the triplet loss on L2-normalized feature-layer
/// outputs for `triplet_epochs` epochs at `triplet_lr`. Layers above the
/// feature layer are left untouched. Dropout is disabled in this stage.
pub fn finetune_stage_triplet<T: Scalar>(
    net: &mut Network<T>,
    data: &Dataset<T>,
    cfg: &TrainConfig,
) -> Result<TripletStageLog, NetError> {
    let margin = T::from_f64(cfg.triplet_margin);
    // Separate stream from stage 1 so the two stages stay independently
    // reproducible.
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed.wrapping_add(1));
    let mut state = SgdState::zeros_like(net);
    let mut log = TripletStageLog::default();
    net.set_mode(Mode::Train);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.triplet_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0f64;
        let mut epoch_triplets = 0usize;
        let mut epoch_active = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut passes: Vec<TapedPass<T>> = Vec::with_capacity(batch.len());
            let mut feats: Vec<Vec<T>> = Vec::with_capacity(batch.len());
            let mut norms: Vec<T> = Vec::with_capacity(batch.len());
            let mut labels: Vec<usize> = Vec::with_capacity(batch.len());
            for &i in batch {
                let (x, label) = &data.samples[i];
                let pass = net.forward_train_feature(x, 0.0, &mut rng)?;
                let (nf, norm) = l2_normalize_with_grad(&pass.feature);
                passes.push(pass);
                feats.push(nf);
                norms.push(norm);
                labels.push(*label);
            }
            let triplets = select_triplets(&feats, &labels, margin);
            if triplets.is_empty() {
                continue;
            }
            let mut feat_grads: Vec<Vec<T>> =
                feats.iter().map(|f| vec![T::zero(); f.len()]).collect();
            let mut batch_loss = 0.0f64;
            let mut active = 0usize;
            let scale = T::from_f64(1.0 / triplets.len() as f64);
            for &[a, p, n] in &triplets {
                let (loss, da, dp, dn) = triplet_loss(&feats[a], &feats[p], &feats[n], margin);
                if loss > T::zero() {
                    active += 1;
                }
                batch_loss += loss.as_f64();
                for i in 0..da.len() {
                    feat_grads[a][i] += da[i] * scale;
                    feat_grads[p][i] += dp[i] * scale;
                    feat_grads[n][i] += dn[i] * scale;
                }
            }
            if !batch_loss.is_finite() {
                net.set_mode(Mode::Eval);
                return Err(NetError::Divergence {
                    epoch,
                    batch: batch_idx,
                });
            }
            let mut grads = Gradients::zeros_like(net);
            for ((pass, fg), (nf, norm)) in passes
                .iter()
                .zip(&feat_grads)
                .zip(feats.iter().zip(&norms))
            {
                if fg.iter().all(|&v| v == T::zero()) {
                    continue;
                }
                let dfeature = l2_normalize_backward(nf, *norm, fg);
                let g = net.backward_from_feature(pass, dfeature);
                grads.add_scaled(&g, T::one());
            }
            sgd_step(
                net,
                &mut state,
                &grads,
                cfg.triplet_lr,
                cfg.momentum,
                cfg.weight_decay,
            );
            epoch_loss += batch_loss;
            epoch_triplets += triplets.len();
            epoch_active += active;
        }
        log.mean_loss
            .push(epoch_loss / epoch_triplets.max(1) as f64);
        log.active_fraction
            .push(epoch_active as f64 / epoch_triplets.max(1) as f64);
        log.triplet_count.push(epoch_triplets);
    }
    net.set_mode(Mode::Eval);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::super::{build_network, tiny_spec};
    use super::*;

    #[test]
    fn lr_schedule_steps_by_ten() {
        let cfg = TrainConfig::default();
        for e in 0..10 {
            assert_eq!(cfg.lr_at_epoch(e), 0.01);
        }
        for e in 10..25 {
            assert_eq!(cfg.lr_at_epoch(e), 0.001);
        }
    }

    #[test]
    fn sgd_plain_step_without_momentum() {
        let spec = tiny_spec(8, 8, 4, 2);
        let mut net: Network<f64> = build_network(&spec, 5).unwrap();
        let before: Vec<f64> = match &net.params[0] {
            LayerParams::Conv { w, .. } => w.data().to_vec(),
            _ => panic!(),
        };
        let mut grads = Gradients::zeros_like(&net);
        if let Some(g) = grads.layers[0].as_mut() {
            for v in g.dw.data_mut() {
                *v = 2.0;
            }
        }
        let mut state = SgdState::zeros_like(&net);
        sgd_step(&mut net, &mut state, &grads, 0.5, 0.0, 0.0);
        let after = match &net.params[0] {
            LayerParams::Conv { w, .. } => w.data().to_vec(),
            _ => panic!(),
        };
        for (a, b) in after.iter().zip(&before) {
            assert!((a - (b - 1.0)).abs() < 1e-12);
        }
    }

    #[test]
    fn sgd_zero_gradient_zero_velocity_is_identity() {
        let spec = tiny_spec(8, 8, 4, 2);
        let mut net: Network<f64> = build_network(&spec, 5).unwrap();
        let before: Vec<f64> = match &net.params[0] {
            LayerParams::Conv { w, .. } => w.data().to_vec(),
            _ => panic!(),
        };
        let grads = Gradients::zeros_like(&net);
        let mut state = SgdState::zeros_like(&net);
        sgd_step(&mut net, &mut state, &grads, 0.1, 0.9, 0.0);
        let after = match &net.params[0] {
            LayerParams::Conv { w, .. } => w.data().to_vec(),
            _ => panic!(),
        };
        assert_eq!(before, after);
    }

    #[test]
    fn sgd_two_momentum_steps_match_hand_recurrence() {
        // Scalar recurrence with w0=1, g=0.3, lr=0.1, mu=0.9, wd=0.01:
        // v1 = -lr*(g + wd*w0); w1 = w0 + v1
        // v2 = mu*v1 - lr*(g + wd*w1); w2 = w1 + v2
        let spec = tiny_spec(8, 8, 4, 2);
        let mut net: Network<f64> = build_network(&spec, 5).unwrap();
        if let LayerParams::Conv { w, .. } = &mut net.params[0] {
            for v in w.data_mut() {
                *v = 1.0;
            }
        }
        let mut grads = Gradients::zeros_like(&net);
        if let Some(g) = grads.layers[0].as_mut() {
            for v in g.dw.data_mut() {
                *v = 0.3;
            }
        }
        let (lr, mu, wd) = (0.1, 0.9, 0.01);
        let mut state = SgdState::zeros_like(&net);
        sgd_step(&mut net, &mut state, &grads, lr, mu, wd);
        sgd_step(&mut net, &mut state, &grads, lr, mu, wd);
        let w0: f64 = 1.0;
        let v1 = -lr * (0.3 + wd * w0);
        let w1 = w0 + v1;
        let v2 = mu * v1 - lr * (0.3 + wd * w1);
        let w2 = w1 + v2;
        if let LayerParams::Conv { w, .. } = &net.params[0] {
            for v in w.data() {
                assert!((v - w2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn triplet_loss_trivial_cases() {
        let a = vec![0.6f64, 0.8];
        let n = vec![-0.6f64, 0.8];
        // a == p and the negative is far: inactive.
        let (loss, da, _, _) = triplet_loss(&a, &a, &n, 0.2);
        assert_eq!(loss, 0.0);
        assert!(da.iter().all(|&v| v == 0.0));
        // a == p == n: loss equals the margin, all gradients vanish.
        let (loss, da, dp, dn) = triplet_loss(&a, &a, &a, 0.2);
        assert!((loss - 0.2).abs() < 1e-12);
        assert!(da.iter().chain(&dp).chain(&dn).all(|&v| v == 0.0));
    }

    #[test]
    fn mining_returns_empty_without_positive_pairs() {
        let feats = vec![vec![0.0f64, 1.0], vec![1.0, 0.0], vec![0.5, 0.5]];
        let labels = vec![0, 1, 2];
        assert!(select_triplets(&feats, &labels, 0.2).is_empty());
    }

    #[test]
    fn mining_separated_clusters_yields_inactive_triplets() {
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for i in 0..3 {
            feats.push(vec![0.0 + 0.01 * i as f64, 0.0]);
            labels.push(0);
            feats.push(vec![10.0 + 0.01 * i as f64, 0.0]);
            labels.push(1);
        }
        let triplets = select_triplets(&feats, &labels, 0.2);
        assert!(!triplets.is_empty());
        for [a, p, n] in triplets {
            let (loss, ..) = triplet_loss(&feats[a], &feats[p], &feats[n], 0.2);
            assert_eq!(loss, 0.0);
        }
    }

    #[test]
    fn mining_prefers_the_unique_semi_hard_negative() {
        // Anchor 0 and positive 1 share a label; d_ap = 1.
        // Negative 2 at d_an = 1.09 (semi-hard: 1 < 1.09 < 1.2);
        // negative 3 at d_an = 4 (easy). The semi-hard one must be chosen.
        let feats = vec![
            vec![0.0f64, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.044],  // d^2 = 1.09
            vec![0.0, 2.0],    // d^2 = 4
        ];
        let labels = vec![0, 0, 1, 1];
        let triplets = select_triplets(&feats, &labels, 0.2);
        let t = triplets
            .iter()
            .find(|t| t[0] == 0 && t[1] == 1)
            .expect("anchor/positive pair mined");
        assert_eq!(t[2], 2);
    }

    #[test]
    fn single_image_per_subject_leaves_network_unchanged() {
        let spec = tiny_spec(8, 8, 4, 3);
        let mut net: Network<f32> = build_network(&spec, 9).unwrap();
        let snapshot: Vec<Vec<f32>> = net
            .params
            .iter()
            .filter_map(|p| match p {
                LayerParams::Conv { w, .. } | LayerParams::Fc { w, .. } => Some(w.data().to_vec()),
                LayerParams::None => None,
            })
            .collect();
        let data = Dataset {
            samples: (0..3)
                .map(|i| {
                    (
                        Tensor::from_fn(&[1, 8, 8], |j| ((i * 64 + j) % 10) as f32 / 10.0),
                        i,
                    )
                })
                .collect(),
        };
        let cfg = TrainConfig {
            batch_size: 3,
            ..TrainConfig::default()
        };
        let log = finetune_stage_triplet(&mut net, &data, &cfg).unwrap();
        assert_eq!(log.triplet_count, vec![0, 0]);
        let after: Vec<Vec<f32>> = net
            .params
            .iter()
            .filter_map(|p| match p {
                LayerParams::Conv { w, .. } | LayerParams::Fc { w, .. } => Some(w.data().to_vec()),
                LayerParams::None => None,
            })
            .collect();
        assert_eq!(snapshot, after);
    }
}
