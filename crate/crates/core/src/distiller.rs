//! Student objective `L = L_S + L_U` and the shared training loop.
//!
//! `L_S` is the mean cross-entropy over non-void pixels. `L_U` is the
//! per-image root mean squared logarithmic error between the student's
//! uncertainty `q` and the teacher's `z`, computed over every pixel (void
//! included) and averaged over the batch.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::binio::write_file_atomic;
use crate::ensemble::{teacher_predict, Ensemble};
use crate::error::{Error, Result};
use crate::segnet::{record_forward, ModelParams, ParamGroup};
use crate::synthdata::{derive_seed, AugmentConfig, AugmentParams, Sample};
use crate::tensor::{Graph, LrSchedule, NodeId, OptimState, Scalar, Tensor};

/// Loss nodes recorded by [`record_total_loss`].
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub segmentation: NodeId,
    pub uncertainty: Option<NodeId>,
    pub total: NodeId,
    pub counted_pixels: usize,
}

/// Records `L_U` for `B x 1 x H x W` maps `q` (student) and `z` (teacher).
pub fn record_uncertainty_loss<T: Scalar>(g: &mut Graph<T>, q: NodeId, z: NodeId) -> Result<NodeId> {
    for (name, id) in [("student", q), ("teacher", z)] {
        if let Some(bad) = g.value(id).data().iter().find(|&&v| !(v >= T::zero())) {
            return Err(Error::Domain {
                op: "uncertainty_loss",
                detail: format!("{name} uncertainty {bad} is negative"),
            });
        }
    }
    let lq = g.log1p(q)?;
    let lz = g.log1p(z)?;
    let diff = g.sub(lz, lq)?;
    let sq = g.unary(diff, crate::tensor::UnaryKind::Square)?;
    let per_image = g.mean_per_item(sq)?;
    let rmsle = g.unary(per_image, crate::tensor::UnaryKind::Sqrt)?;
    g.mean_all(rmsle)
}

/// Records `L_S`, optionally `L_U`, and their plain sum.
pub fn record_total_loss<T: Scalar>(
    g: &mut Graph<T>,
    probs: NodeId,
    labels: &[u8],
    uncertainty: Option<(NodeId, NodeId)>,
) -> Result<LossNodes> {
    let (segmentation, counted_pixels) = g.cross_entropy(probs, labels)?;
    let (uncertainty, total) = match uncertainty {
        Some((q, z)) => {
            let lu = record_uncertainty_loss(g, q, z)?;
            (Some(lu), g.add(segmentation, lu)?)
        }
        None => (None, segmentation),
    };
    Ok(LossNodes {
        segmentation,
        uncertainty,
        total,
        counted_pixels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegmentationLoss {
    pub value: f64,
    pub counted_pixels: usize,
}

pub fn segmentation_loss<T: Scalar>(probs: &Tensor<T>, labels: &[u8]) -> Result<SegmentationLoss> {
    let mut g = Graph::new();
    let p = g.constant(probs.clone());
    let (l, counted_pixels) = g.cross_entropy(p, labels)?;
    Ok(SegmentationLoss {
        value: g.value(l).item().as_f64(),
        counted_pixels,
    })
}

pub fn uncertainty_loss<T: Scalar>(q: &Tensor<T>, z: &Tensor<T>) -> Result<f64> {
    if q.shape() != z.shape() {
        return Err(Error::shape("uncertainty_loss", q.shape().dims(), z.shape().dims()));
    }
    let mut g = Graph::new();
    let (qn, zn) = (g.constant(q.clone()), g.constant(z.clone()));
    let l = record_uncertainty_loss(&mut g, qn, zn)?;
    Ok(g.value(l).item().as_f64())
}

/// Inputs of the combined objective; `q`/`z` are `B x 1 x H x W`.
pub struct LossInputs<'a, T> {
    pub probs: &'a Tensor<T>,
    pub labels: &'a [u8],
    pub student_uncertainty: &'a Tensor<T>,
    pub teacher_uncertainty: &'a Tensor<T>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub segmentation: f64,
    pub uncertainty: f64,
    pub total: f64,
}

pub fn total_loss<T: Scalar>(inputs: &LossInputs<'_, T>) -> Result<LossBreakdown> {
    let q = inputs.student_uncertainty;
    let z = inputs.teacher_uncertainty;
    if q.shape() != z.shape() {
        return Err(Error::shape("total_loss", q.shape().dims(), z.shape().dims()));
    }
    let mut g = Graph::new();
    let p = g.constant(inputs.probs.clone());
    let (qn, zn) = (g.constant(q.clone()), g.constant(z.clone()));
    let nodes = record_total_loss(&mut g, p, inputs.labels, Some((qn, zn)))?;
    Ok(LossBreakdown {
        segmentation: g.value(nodes.segmentation).item().as_f64(),
        uncertainty: g.value(nodes.uncertainty.unwrap()).item().as_f64(),
        total: g.value(nodes.total).item().as_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Backbone learning rate at iteration 0.
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decoder_lr_multiplier: f64,
    pub lr_power: f64,
    pub seed: u64,
    /// Apply weight decay to bias tensors as well.
    pub decay_bias: bool,
    pub scale_min: f64,
    pub scale_max: f64,
    pub flip_probability: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 8,
            base_lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
            decoder_lr_multiplier: 10.0,
            lr_power: 0.9,
            seed: 0,
            decay_bias: true,
            scale_min: 0.5,
            scale_max: 2.0,
            flip_probability: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.base_lr > 0.0) || !(self.lr_power > 0.0) {
            return bad("learning rate and schedule power must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) || !(0.0..1.0).contains(&self.weight_decay) {
            return bad("momentum and weight decay must lie in [0, 1)");
        }
        if !(self.decoder_lr_multiplier >= 1.0) {
            return bad("decoder lr multiplier must be >= 1");
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max) {
            return bad("augmentation scale range is invalid");
        }
        Ok(())
    }

    fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            flip_probability: self.flip_probability,
        }
    }

    pub fn iterations_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }
}

/// One row per epoch; losses are means over the epoch's iterations and the
/// learning rates are those used by its last iteration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Iterations completed by the end of this epoch.
    pub iter: usize,
    pub lr_backbone: f64,
    pub lr_decoder: f64,
    pub seg_loss: f64,
    pub unc_loss: f64,
    pub total_loss: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,iter,lr_backbone,lr_decoder,L_S,L_U,L\n");
        for r in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
                r.epoch, r.iter, r.lr_backbone, r.lr_decoder, r.seg_loss, r.unc_loss, r.total_loss
            );
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_file_atomic(path, self.to_csv().as_bytes())
    }
}

/// Teacher uncertainty maps keyed by sample id, each at the sample's
/// resolution (row-major `H x W`).
pub type TargetMaps = HashMap<String, Vec<f32>>;

/// Where the student's uncertainty targets come from.
#[derive(Clone, Copy, Debug)]
pub enum Targets<'a> {
    /// Maps precomputed on clean samples, warped with each crop.
    Cached(&'a TargetMaps),
    /// The ensemble, rerun on every augmented batch.
    Teacher(&'a Ensemble),
}

const AUGMENT_STREAM: u64 = 0x6175_676d;
const SHUFFLE_STREAM: u64 = 0x7368_7566;

/// Minibatch SGD over `data` with per-image augmentation and the two-group
/// poly schedule. With `targets` the model must be dual-head and is trained
/// on `L_S + L_U`, the teacher maps being co-augmented with the image;
/// without it only `L_S` is used.
pub fn train(
    init: ModelParams,
    data: &[Sample],
    targets: Option<&TargetMaps>,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    train_with(init, data, targets.map(Targets::Cached), config)
}

/// [`train`] with an explicit target source.
pub fn train_with(
    init: ModelParams,
    data: &[Sample],
    targets: Option<Targets<'_>>,
    config: &TrainConfig,
) -> Result<(ModelParams, TrainLog)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    if targets.is_some() && !init.dual_head() {
        return Err(Error::Invalid("uncertainty targets require a dual-head model".into()));
    }
    if let Some(Targets::Cached(t)) = targets {
        if let Some(s) = data.iter().find(|s| !t.contains_key(&s.id)) {
            return Err(Error::MissingTarget(s.id.clone()));
        }
    }
    if config.epochs == 0 {
        return Ok((init, TrainLog::default()));
    }

    let mut params = init;
    let model_config = params.config().clone();
    let crop = model_config.input_size;
    let dual = params.dual_head();
    let per_epoch = config.iterations_per_epoch(data.len());
    let schedule = LrSchedule::new(config.base_lr, config.epochs * per_epoch, config.lr_power)?;
    let shapes: Vec<_> = params.tensors().iter().map(Tensor::shape).collect();
    let decay_mask = params.specs().iter().map(|s| config.decay_bias || !s.is_bias).collect();
    let mut optim = OptimState::<f32>::new(&shapes, config.momentum, config.weight_decay)?.with_decay_mask(decay_mask)?;
    let groups: Vec<ParamGroup> = params.specs().iter().map(|s| s.group).collect();
    let augment_config = config.augment();

    let mut log = TrainLog::default();
    let mut iteration = 0usize;
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(config.seed ^ SHUFFLE_STREAM, epoch as u64)));
        let (mut sum_s, mut sum_u, mut sum_t) = (0.0, 0.0, 0.0);
        let (mut lr_b, mut lr_d) = (0.0, 0.0);
        for batch in order.chunks(config.batch_size) {
            let mut images = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len() * crop * crop);
            let mut maps = Vec::new();
            for (slot, &idx) in batch.iter().enumerate() {
                let sample = &data[idx];
                let seed = derive_seed(config.seed ^ AUGMENT_STREAM, (iteration * config.batch_size + slot) as u64);
                let p = AugmentParams::draw(&augment_config, sample.height, sample.width, crop, seed);
                let aug = Sample {
                    id: sample.id.clone(),
                    height: crop,
                    width: crop,
                    image: p.apply_image(&sample.image, sample.height, sample.width, 3),
                    labels: Vec::new(),
                };
                images.push(aug.image_tensor());
                labels.extend(p.apply_labels(&sample.labels, sample.height, sample.width));
                if let Some(Targets::Cached(t)) = targets {
                    maps.extend(p.apply_map(&t[&sample.id], sample.height, sample.width));
                }
            }
            let images = Tensor::stack(&images)?;
            if let Some(Targets::Teacher(ensemble)) = targets {
                maps = teacher_predict(ensemble, &images)?.uncertainty.into_data();
            }

            let mut g = Graph::<f32>::new();
            let ids: Vec<NodeId> = params.tensors().iter().map(|t| g.param(t.clone())).collect();
            let x = g.constant(images);
            let out = record_forward(&mut g, &model_config, dual, &ids, x)?;
            let unc = match (targets, out.uncertainty) {
                (Some(_), Some(q)) => {
                    let z = g.constant(Tensor::from_vec([batch.len(), 1, crop, crop], std::mem::take(&mut maps))?);
                    Some((q, z))
                }
                _ => None,
            };
            let loss = record_total_loss(&mut g, out.probs, &labels, unc)?;
            let mut grads = g.backward(loss.total)?;
            let grads: Vec<Tensor<f32>> = ids
                .iter()
                .map(|&id| grads.take(id).expect("gradient for every parameter"))
                .collect();

            lr_b = schedule.at(iteration)?;
            lr_d = lr_b * config.decoder_lr_multiplier;
            let lrs: Vec<f32> = groups
                .iter()
                .map(|g| match g {
                    ParamGroup::Backbone => lr_b as f32,
                    ParamGroup::Decoder => lr_d as f32,
                })
                .collect();
            optim.step(params.tensors_mut(), &grads, &lrs)?;
            if params.tensors().iter().any(|t| !t.is_finite()) {
                return Err(Error::NonFinite { op: "sgd_momentum_step" });
            }

            sum_s += g.value(loss.segmentation).item() as f64;
            sum_u += loss.uncertainty.map_or(0.0, |u| g.value(u).item() as f64);
            sum_t += g.value(loss.total).item() as f64;
            iteration += 1;
        }
        let n = per_epoch as f64;
        let record = EpochRecord {
            epoch,
            iter: iteration,
            lr_backbone: lr_b,
            lr_decoder: lr_d,
            seg_loss: sum_s / n,
            unc_loss: sum_u / n,
            total_loss: sum_t / n,
        };
        log::debug!(
            "epoch {epoch}: L_S {:.4} L_U {:.4} lr {:.5}",
            record.seg_loss,
            record.unc_loss,
            record.lr_backbone
        );
        log.epochs.push(record);
    }
    Ok((params, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::{build, ModelConfig};
    use crate::synthdata::{generate_dataset, SceneConfig};
    use crate::tensor::grad_check;

    fn constant_map(v: f64, shape: [usize; 4]) -> Tensor<f64> {
        Tensor::full(shape, v)
    }

    #[test]
    fn segmentation_loss_examples() {
        let mut onehot = Tensor::<f64>::zeros([1, 3, 1, 3]);
        for (px, class) in [(0usize, 2usize), (1, 0), (2, 1)] {
            let i = onehot.index([0, class, 0, px]);
            onehot.data_mut()[i] = 1.0;
        }
        assert_eq!(segmentation_loss(&onehot, &[2, 0, 1]).unwrap().value, 0.0);

        let uniform = Tensor::<f64>::full([2, 4, 2, 2], 0.25);
        let labels = [0, 1, 2, 3, 3, 2, 1, 0];
        assert!((segmentation_loss(&uniform, &labels).unwrap().value - 1.386294).abs() < 1e-6);

        let all_void = segmentation_loss(&uniform, &[crate::VOID; 8]).unwrap();
        assert_eq!((all_void.value, all_void.counted_pixels), (0.0, 0));

        assert!(segmentation_loss(&uniform, &[0, 1, 2, 7, 0, 0, 0, 0]).is_err());
    }

    #[test]
    fn uncertainty_loss_examples() {
        let s = [2, 1, 3, 3];
        assert_eq!(uncertainty_loss(&constant_map(0.3, s), &constant_map(0.3, s)).unwrap(), 0.0);
        let l = uncertainty_loss(&constant_map(0.0, s), &constant_map(0.5, s)).unwrap();
        assert!((l - 0.405465).abs() < 1e-6);
        let l = uncertainty_loss(&constant_map(0.1, s), &constant_map(0.0, s)).unwrap();
        assert!((l - 0.095310).abs() < 1e-6);
        assert!(uncertainty_loss(&constant_map(-0.1, s), &constant_map(0.0, s)).is_err());
    }

    #[test]
    fn uncertainty_loss_is_per_image_then_batch_mean() {
        // Image 0 has q = z (loss 0), image 1 has the ln 1.5 field.
        let mut q = Tensor::<f64>::zeros([2, 1, 2, 2]);
        let z = Tensor::<f64>::from_fn([2, 1, 2, 2], |i| if i[0] == 0 { 0.0 } else { 0.5 });
        q.data_mut()[..4].fill(0.0);
        let l = uncertainty_loss(&q, &z).unwrap();
        assert!((l - 1.5f64.ln() / 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_loss_is_plain_sum() {
        let probs = Tensor::<f64>::full([1, 4, 2, 2], 0.25);
        let labels = [0, 1, 2, 3];
        let q = constant_map(0.0, [1, 1, 2, 2]);
        let z = constant_map(0.5, [1, 1, 2, 2]);
        let b = total_loss(&LossInputs {
            probs: &probs,
            labels: &labels,
            student_uncertainty: &q,
            teacher_uncertainty: &z,
        })
        .unwrap();
        assert!((b.total - 1.791759).abs() < 1e-6);
        assert_eq!(b.total, b.segmentation + b.uncertainty);

        let b = total_loss(&LossInputs {
            probs: &probs,
            labels: &[crate::VOID; 4],
            student_uncertainty: &q,
            teacher_uncertainty: &z,
        })
        .unwrap();
        assert_eq!(b.total, b.uncertainty);

        let b = total_loss(&LossInputs {
            probs: &probs,
            labels: &labels,
            student_uncertainty: &z,
            teacher_uncertainty: &z,
        })
        .unwrap();
        assert_eq!(b.total, b.segmentation);
    }

    #[test]
    fn uncertainty_loss_symmetric() {
        let q = Tensor::<f64>::from_fn([2, 1, 3, 3], |i| (i[2] * 3 + i[3]) as f64 * 0.07 + i[0] as f64 * 0.1);
        let z = Tensor::<f64>::from_fn([2, 1, 3, 3], |i| ((i[2] + 2 * i[3]) % 5) as f64 * 0.11);
        assert_eq!(uncertainty_loss(&q, &z).unwrap(), uncertainty_loss(&z, &q).unwrap());
    }

    #[test]
    fn total_loss_gradient_check() {
        let c = 3;
        let q = Tensor::<f64>::from_fn([2, 1, 4, 4], |i| 0.05 + 0.04 * ((i[0] + i[2] * 4 + i[3]) % 7) as f64);
        let z = Tensor::<f64>::from_fn([2, 1, 4, 4], |i| 0.02 + 0.05 * ((3 * i[2] + i[3] + i[0]) % 5) as f64);
        let logits = Tensor::<f64>::from_fn([2, c, 4, 4], |i| ((i[1] * 7 + i[2] * 3 + i[3] + i[0]) % 5) as f64 * 0.4 - 0.8);
        let labels: Vec<u8> = (0..32).map(|i| if i % 7 == 3 { crate::VOID } else { (i % 3) as u8 }).collect();
        let err = grad_check(
            |g, ids| {
                let p = g.softmax_channels(ids[0])?;
                let zc = g.constant(z.clone());
                let nodes = record_total_loss(g, p, &labels, Some((ids[1], zc)))?;
                Ok(nodes.total)
            },
            &[logits, q],
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-5, "{err}");
    }

    fn tiny_setup() -> (ModelConfig, Vec<Sample>, TrainConfig) {
        let mc = ModelConfig {
            classes: 4,
            encoder_widths: vec![4, 6],
            decoder_width: 6,
            kernel: 3,
            input_size: 16,
        };
        let data = generate_dataset(&SceneConfig::with_classes(32, 4), 1, 6, "t").unwrap();
        let tc = TrainConfig {
            epochs: 2,
            batch_size: 4,
            seed: 5,
            ..TrainConfig::default()
        };
        (mc, data, tc)
    }

    fn targets_for(data: &[Sample], v: f32) -> TargetMaps {
        data.iter().map(|s| (s.id.clone(), vec![v; s.height * s.width])).collect()
    }

    #[test]
    fn zero_epochs_returns_initialization() {
        let (mc, data, mut tc) = tiny_setup();
        tc.epochs = 0;
        let init = build(&mc, 1, true).unwrap();
        let (out, log) = train(init.clone(), &data, Some(&targets_for(&data, 0.1)), &tc).unwrap();
        assert_eq!(out, init);
        assert!(log.epochs.is_empty());
    }

    #[test]
    fn identical_seeds_give_identical_runs() {
        let (mc, data, tc) = tiny_setup();
        let t = targets_for(&data, 0.1);
        let a = train(build(&mc, 1, true).unwrap(), &data, Some(&t), &tc).unwrap();
        let b = train(build(&mc, 1, true).unwrap(), &data, Some(&t), &tc).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.1.epochs.len(), 2);
        assert_eq!(a.1.epochs[1].iter, 4);
    }

    #[test]
    fn decoder_rate_is_ten_times_backbone() {
        let (mc, data, tc) = tiny_setup();
        let (_, log) = train(build(&mc, 1, false).unwrap(), &data, None, &tc).unwrap();
        for r in &log.epochs {
            assert_eq!(r.lr_decoder, r.lr_backbone * 10.0);
            assert_eq!(r.unc_loss, 0.0);
        }
        assert!(log.to_csv().starts_with("epoch,iter,lr_backbone,lr_decoder,L_S,L_U,L\n"));
    }

    #[test]
    fn recomputed_targets_from_identical_members_are_zero() {
        let (mc, data, tc) = tiny_setup();
        let member = build(&mc, 9, false).unwrap();
        let teacher = Ensemble::new(vec![member.clone(), member], vec![9, 9]).unwrap();
        let a = train_with(build(&mc, 1, true).unwrap(), &data, Some(Targets::Teacher(&teacher)), &tc).unwrap();
        let b = train(build(&mc, 1, true).unwrap(), &data, Some(&targets_for(&data, 0.0)), &tc).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn missing_target_names_sample() {
        let (mc, data, tc) = tiny_setup();
        let mut t = targets_for(&data, 0.1);
        t.remove("t_00003");
        let err = train(build(&mc, 1, true).unwrap(), &data, Some(&t), &tc).unwrap_err();
        assert!(matches!(&err, Error::MissingTarget(id) if id == "t_00003"), "{err}");
    }

    #[test]
    fn segmentation_head_gradient_ignores_uncertainty_loss() {
        let (mc, data, _) = tiny_setup();
        let params = build(&mc, 3, true).unwrap();
        let s = &data[0];
        let img = crate::synthdata::augment_with(s, 0, 16, &AugmentConfig::default()).0;
        let head = params.specs().iter().position(|p| p.name == "seg_head.weight").unwrap();
        let grad = |with_unc: bool| {
            let mut g = Graph::<f32>::new();
            let ids: Vec<NodeId> = params.tensors().iter().map(|t| g.param(t.clone())).collect();
            let x = g.constant(img.image_tensor());
            let out = record_forward(&mut g, &mc, true, &ids, x).unwrap();
            let z = g.constant(Tensor::full([1, 1, 16, 16], 0.2));
            let unc = with_unc.then(|| (out.uncertainty.unwrap(), z));
            let loss = record_total_loss(&mut g, out.probs, &img.labels, unc).unwrap();
            let grads = g.backward(loss.total).unwrap();
            grads.get(ids[head]).unwrap().clone()
        };
        assert_eq!(grad(true), grad(false));
    }
}
