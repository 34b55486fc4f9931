//! Deep-ensemble teacher: independently initialized baseline members, their
//! mean prediction, and the per-pixel spread of the predicted class.

use std::collections::HashMap;
use std::path::Path;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::binio::{read_file, write_file_atomic, Reader, Writer};
use crate::distiller::{train, TargetMaps, TrainConfig};
use crate::error::{Error, Result};
use crate::segnet::{self, build, forward, ModelConfig, ModelParams};
use crate::synthdata::Sample;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Ensemble {
    members: Vec<ModelParams>,
    seeds: Vec<u64>,
}

impl Ensemble {
    pub fn new(members: Vec<ModelParams>, seeds: Vec<u64>) -> Result<Self> {
        let first = members
            .first()
            .ok_or_else(|| Error::Invalid("an ensemble needs at least one member".into()))?;
        if seeds.len() != members.len() {
            return Err(Error::Invalid("one seed per member required".into()));
        }
        for (i, m) in members.iter().enumerate() {
            if m.config() != first.config() {
                return Err(Error::Config(format!("member {i} has a different model config")));
            }
            if m.dual_head() {
                return Err(Error::Config(format!("member {i} is not a baseline model")));
            }
        }
        Ok(Ensemble { members, seeds })
    }

    pub fn members(&self) -> &[ModelParams] {
        &self.members
    }

    pub fn seeds(&self) -> &[u64] {
        &self.seeds
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn config(&self) -> &ModelConfig {
        self.members[0].config()
    }

    /// Sub-ensemble of the given member indices, in that order.
    pub fn select(&self, indices: &[usize]) -> Result<Ensemble> {
        Ensemble::new(
            indices.iter().map(|&i| self.members[i].clone()).collect(),
            indices.iter().map(|&i| self.seeds[i]).collect(),
        )
    }

    /// SHA-256 over the serialized members in order.
    pub fn content_hash(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for m in &self.members {
            h.update(segnet::checkpoint_bytes(m));
        }
        h.finalize().into()
    }
}

/// Trains one baseline member on `L_S` only. The member seed drives both
/// initialization and the data order/augmentation stream.
pub fn train_member(config: &ModelConfig, seed: u64, data: &[Sample], train_config: &TrainConfig) -> Result<ModelParams> {
    if data.is_empty() {
        return Err(Error::Invalid("training dataset is empty".into()));
    }
    let init = build(config, seed, false)?;
    let tc = TrainConfig {
        seed,
        ..train_config.clone()
    };
    Ok(train(init, data, None, &tc)?.0)
}

/// Trains members for every seed; members are independent and run in
/// parallel, results are kept in seed order.
pub fn train_ensemble(config: &ModelConfig, seeds: &[u64], data: &[Sample], train_config: &TrainConfig) -> Result<Ensemble> {
    let members = seeds
        .par_iter()
        .map(|&s| train_member(config, s, data, train_config))
        .collect::<Result<Vec<_>>>()?;
    Ensemble::new(members, seeds.to_vec())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOutput {
    /// `B x C x H x W` mean of member softmax outputs.
    pub mean_probs: Tensor<f32>,
    /// `B x H x W` argmax of `mean_probs`, ties to the lowest class.
    pub pred_map: Vec<u8>,
    /// `B x 1 x H x W` population standard deviation across members of the
    /// probability each member assigns to the predicted class.
    pub uncertainty: Tensor<f32>,
}

pub fn teacher_predict(ensemble: &Ensemble, images: &Tensor<f32>) -> Result<TeacherOutput> {
    let outputs = ensemble
        .members
        .iter()
        .map(|m| forward(m, images).map(|o| o.probs))
        .collect::<Result<Vec<_>>>()?;
    aggregate(&outputs)
}

/// Reduces member probability maps in member order.
pub fn aggregate(member_probs: &[Tensor<f32>]) -> Result<TeacherOutput> {
    let first = member_probs
        .first()
        .ok_or_else(|| Error::Invalid("no member outputs".into()))?;
    let shape = first.shape();
    if let Some(bad) = member_probs.iter().find(|p| p.shape() != shape) {
        return Err(Error::shape("teacher_predict", shape.dims(), bad.shape().dims()));
    }
    let [n, c, h, w] = shape.0;
    let plane = h * w;
    let m = member_probs.len() as f64;
    let mut mean = vec![0.0f64; shape.numel()];
    for p in member_probs {
        for (acc, &v) in mean.iter_mut().zip(p.data()) {
            *acc += v as f64;
        }
    }
    mean.iter_mut().for_each(|v| *v /= m);

    let mut pred = vec![0u8; n * plane];
    let mut unc = vec![0.0f32; n * plane];
    for b in 0..n {
        for px in 0..plane {
            let at = |k: usize| (b * c + k) * plane + px;
            let mut best = 0;
            for k in 1..c {
                if mean[at(k)] > mean[at(best)] {
                    best = k;
                }
            }
            let mu = mean[at(best)];
            let var = member_probs
                .iter()
                .map(|p| {
                    let d = p.data()[at(best)] as f64 - mu;
                    d * d
                })
                .sum::<f64>()
                / m;
            pred[b * plane + px] = best as u8;
            unc[b * plane + px] = (var.sqrt() as f32).clamp(0.0, 0.5);
        }
    }
    Ok(TeacherOutput {
        mean_probs: Tensor::from_vec(shape, mean.into_iter().map(|v| v as f32).collect())?,
        pred_map: pred,
        uncertainty: Tensor::from_vec([n, 1, h, w], unc)?,
    })
}

/// Cached teacher output for one training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherTarget {
    pub height: usize,
    pub width: usize,
    pub uncertainty: Vec<f32>,
    pub pred_map: Vec<u8>,
}

#[derive(Clone, Debug, Default)]
pub struct TargetSet {
    pub targets: HashMap<String, TeacherTarget>,
    /// Ids whose cache entry was (re)computed by this call.
    pub recomputed: Vec<String>,
}

impl TargetSet {
    pub fn uncertainty_maps(&self) -> TargetMaps {
        self.targets
            .iter()
            .map(|(id, t)| (id.clone(), t.uncertainty.clone()))
            .collect()
    }
}

pub const TARGET_MAGIC: &[u8; 4] = b"DUTG";
pub const TARGET_VERSION: u32 = 1;

pub fn sample_id_hash(id: &str) -> u64 {
    let d = Sha256::digest(id.as_bytes());
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

fn target_path(dir: &Path, id: &str) -> std::path::PathBuf {
    dir.join(format!("{id}.tgt"))
}

/// Target cache file (little-endian):
/// `"DUTG" | version u32 | sample-id hash u64 | ensemble hash [32] |
/// height u32 | width u32 | f32 uncertainty x H*W | u16 pred x H*W`.
fn encode_target(id: &str, ensemble_hash: &[u8; 32], t: &TeacherTarget) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(TARGET_MAGIC);
    w.u32(TARGET_VERSION);
    w.u64(sample_id_hash(id));
    w.bytes(ensemble_hash);
    w.u32(t.height as u32);
    w.u32(t.width as u32);
    for &v in &t.uncertainty {
        w.f32(v);
    }
    for &p in &t.pred_map {
        w.u16(p as u16);
    }
    w.into_inner()
}

/// Reads a cache file, returning `Ok(None)` when it belongs to another
/// sample or ensemble.
pub fn read_target(path: &Path, id: &str, ensemble_hash: &[u8; 32]) -> Result<Option<TeacherTarget>> {
    let bytes = read_file(path)?;
    let mut r = Reader::new(&bytes, path);
    if r.bytes(4)? != TARGET_MAGIC {
        return Err(r.fault(0, "bad magic (expected \"DUTG\")"));
    }
    let version = r.u32()?;
    if version != TARGET_VERSION {
        return Err(Error::Version {
            file: path.to_path_buf(),
            found: version,
            expected: TARGET_VERSION,
        });
    }
    if r.u64()? != sample_id_hash(id) || r.bytes(32)? != ensemble_hash {
        return Ok(None);
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let mut uncertainty = Vec::with_capacity(height * width);
    for _ in 0..height * width {
        uncertainty.push(r.f32()?);
    }
    let mut pred_map = Vec::with_capacity(height * width);
    for _ in 0..height * width {
        let at = r.offset();
        let p = r.u16()?;
        pred_map.push(u8::try_from(p).map_err(|_| r.fault(at, format!("class index {p} out of range")))?);
    }
    r.finish()?;
    Ok(Some(TeacherTarget {
        height,
        width,
        uncertainty,
        pred_map,
    }))
}

/// Computes (or loads from `cache_dir`) the teacher output for every sample.
/// Entries written for a different ensemble or sample are regenerated, as
/// are unreadable ones.
pub fn distill_targets(ensemble: &Ensemble, data: &[Sample], cache_dir: &Path) -> Result<TargetSet> {
    let hash = ensemble.content_hash();
    std::fs::create_dir_all(cache_dir).map_err(|e| Error::io(cache_dir, e))?;
    let results = data
        .par_iter()
        .map(|s| -> Result<(String, TeacherTarget, bool)> {
            let path = target_path(cache_dir, &s.id);
            if path.exists() {
                match read_target(&path, &s.id, &hash) {
                    Ok(Some(t)) if t.height == s.height && t.width == s.width => {
                        return Ok((s.id.clone(), t, false));
                    }
                    Ok(_) => log::info!("stale target cache for {}, regenerating", s.id),
                    Err(e) => log::warn!("unreadable target cache for {}: {e}", s.id),
                }
            }
            let out = teacher_predict(ensemble, &s.image_tensor())?;
            let t = TeacherTarget {
                height: s.height,
                width: s.width,
                uncertainty: out.uncertainty.into_data(),
                pred_map: out.pred_map,
            };
            write_file_atomic(&path, &encode_target(&s.id, &hash, &t))?;
            Ok((s.id.clone(), t, true))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut set = TargetSet::default();
    for (id, t, fresh) in results {
        if fresh {
            set.recomputed.push(id.clone());
        }
        set.targets.insert(id, t);
    }
    Ok(set)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_dataset, SceneConfig};

    fn probs(values: &[[f32; 2]]) -> Tensor<f32> {
        // One image, two classes, one pixel per entry.
        let n = values.len();
        let mut data = vec![0.0; 2 * n];
        for (px, v) in values.iter().enumerate() {
            data[px] = v[0];
            data[n + px] = v[1];
        }
        Tensor::from_vec([1, 2, 1, n], data).unwrap()
    }

    #[test]
    fn two_member_spread_examples() {
        let a = probs(&[[0.8, 0.2], [1.0, 0.0]]);
        let b = probs(&[[0.6, 0.4], [0.0, 1.0]]);
        let out = aggregate(&[a, b]).unwrap();
        assert_eq!(out.pred_map, vec![0, 0]);
        assert!((out.uncertainty.data()[0] - 0.1).abs() < 1e-6);
        assert!((out.uncertainty.data()[1] - 0.5).abs() < 1e-7);
    }

    #[test]
    fn identical_members_give_zero_spread() {
        let p = probs(&[[0.3, 0.7], [0.55, 0.45], [0.5, 0.5]]);
        let out = aggregate(&vec![p; 10]).unwrap();
        assert!(out.uncertainty.data().iter().all(|&u| u <= 1e-7));
        assert_eq!(out.pred_map, vec![1, 0, 0]);
    }

    #[test]
    fn member_config_mismatch_rejected() {
        let a = build(&ModelConfig { classes: 3, encoder_widths: vec![2], decoder_width: 2, kernel: 3, input_size: 8 }, 0, false).unwrap();
        let b = build(&ModelConfig { classes: 4, encoder_widths: vec![2], decoder_width: 2, kernel: 3, input_size: 8 }, 0, false).unwrap();
        assert!(Ensemble::new(vec![a, b], vec![0, 1]).is_err());
    }

    fn small_ensemble(members: usize) -> (Ensemble, Vec<Sample>) {
        let mc = ModelConfig {
            classes: 4,
            encoder_widths: vec![3, 4],
            decoder_width: 4,
            kernel: 3,
            input_size: 16,
        };
        let seeds: Vec<u64> = (0..members as u64).collect();
        let e = Ensemble::new(seeds.iter().map(|&s| build(&mc, s, false).unwrap()).collect(), seeds).unwrap();
        let data = generate_dataset(&SceneConfig::with_classes(32, 4), 3, 4, "c").unwrap();
        (e, data)
    }

    #[test]
    fn cache_hit_matches_recomputation_and_deletion_recomputes_one() {
        let dir = tempfile::tempdir().unwrap();
        let (e, data) = small_ensemble(3);
        let first = distill_targets(&e, &data, dir.path()).unwrap();
        assert_eq!(first.recomputed.len(), data.len());
        let second = distill_targets(&e, &data, dir.path()).unwrap();
        assert!(second.recomputed.is_empty());
        assert_eq!(first.targets, second.targets);

        std::fs::remove_file(dir.path().join("c_00002.tgt")).unwrap();
        let third = distill_targets(&e, &data, dir.path()).unwrap();
        assert_eq!(third.recomputed, vec!["c_00002".to_string()]);
        assert_eq!(third.targets, first.targets);
    }

    #[test]
    fn stale_cache_is_regenerated() {
        let dir = tempfile::tempdir().unwrap();
        let (e, data) = small_ensemble(3);
        distill_targets(&e, &data, dir.path()).unwrap();
        let other = e.select(&[2, 0]).unwrap();
        let set = distill_targets(&other, &data, dir.path()).unwrap();
        assert_eq!(set.recomputed.len(), data.len());
        let fresh = teacher_predict(&other, &data[0].image_tensor()).unwrap();
        assert_eq!(set.targets["c_00000"].uncertainty, fresh.uncertainty.into_data());
    }

    #[test]
    fn single_member_targets_are_zero() {
        let dir = tempfile::tempdir().unwrap();
        let (e, data) = small_ensemble(1);
        let set = distill_targets(&e, &data, dir.path()).unwrap();
        assert!(set.targets.values().all(|t| t.uncertainty.iter().all(|&u| u == 0.0)));
    }

    #[test]
    fn permutation_invariance() {
        let (e, data) = small_ensemble(4);
        let img = data[1].image_tensor();
        let a = teacher_predict(&e, &img).unwrap();
        let b = teacher_predict(&e.select(&[3, 1, 0, 2]).unwrap(), &img).unwrap();
        assert_eq!(a.pred_map, b.pred_map);
        for (x, y) in a.uncertainty.data().iter().zip(b.uncertainty.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
        for (x, y) in a.mean_probs.data().iter().zip(b.mean_probs.data()) {
            assert!((x - y).abs() <= 1e-6);
        }
        assert!(a.uncertainty.data().iter().all(|&u| (0.0..=0.5).contains(&u)));
    }

    #[test]
    fn member_training_is_deterministic_and_zero_epochs_is_init() {
        let (e, data) = small_ensemble(1);
        let mc = e.config().clone();
        let tc = TrainConfig { epochs: 1, batch_size: 2, ..TrainConfig::default() };
        let a = train_member(&mc, 9, &data, &tc).unwrap();
        assert_eq!(a, train_member(&mc, 9, &data, &tc).unwrap());
        let tc0 = TrainConfig { epochs: 0, ..tc };
        assert_eq!(train_member(&mc, 9, &data, &tc0).unwrap(), build(&mc, 9, false).unwrap());
    }
}
