//! Mini-batch SGD with momentum and weight decay on cross-entropy, a step
//! learning-rate schedule, per-epoch history and safetensors checkpoints.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::SIDE;
use crate::error::{Error, Result};
use crate::imageset::{ImageSet, Label};
use crate::models::{build_model_on, Model, ModelSpec};
use crate::util::mix_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// 0-indexed epochs from which the next decay applies.
    pub lr_decay_epochs: Vec<usize>,
    pub lr_decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Write a checkpoint every this many epochs (the final epoch is always written).
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 128,
            lr0: 0.1,
            lr_decay_epochs: vec![50, 100],
            lr_decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// Reduced schedule for desk-scale runs: 20 epochs with decays at 10 and 15.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 20,
            lr_decay_epochs: vec![10, 15],
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr0", self.lr0),
            ("lr_decay_factor", self.lr_decay_factor),
            ("momentum", self.momentum),
            ("weight_decay", self.weight_decay),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::spec(format!("{name} must be positive, got {v}")));
            }
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::spec("epochs and batch_size must be positive"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::spec("checkpoint_every must be positive"));
        }
        let mut prev = None;
        for &d in &self.lr_decay_epochs {
            if d == 0 || d >= self.epochs || prev.is_some_and(|p| p >= d) {
                return Err(Error::spec(format!(
                    "decay epochs {:?} must be strictly increasing within 1..{}",
                    self.lr_decay_epochs, self.epochs
                )));
            }
            prev = Some(d);
        }
        Ok(())
    }
}

/// Learning rate used throughout `epoch` (0-indexed).
pub fn lr_at(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::OutOfRange {
            what: "epoch".into(),
            index: epoch,
            len: config.epochs,
        });
    }
    let drops = config.lr_decay_epochs.iter().filter(|&&d| d <= epoch).count();
    Ok(config.lr0 * config.lr_decay_factor.powi(drops as i32))
}

/// Visit order of the training examples in `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, epoch as u64, 0x5348_5546]));
    order.shuffle(&mut rng);
    order
}

/// SGD with heavy-ball momentum and coupled L2 weight decay:
/// `g += wd·w; b = μ·b + g; w -= lr·b` (the buffer starts at the first gradient).
pub struct Sgd {
    momentum: f64,
    weight_decay: f64,
    buffers: Vec<Option<Tensor>>,
}

impl Sgd {
    pub fn new(num_params: usize, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            buffers: vec![None; num_params],
        }
    }

    pub fn step(&mut self, params: &[&Var], grads: &candle_core::backprop::GradStore, lr: f64) -> Result<()> {
        for (i, var) in params.iter().enumerate() {
            let Some(g) = grads.get(var) else { continue };
            // detached: the buffer must not keep earlier steps' graphs alive
            let w = var.as_tensor().detach();
            let g = (g.detach() + w.affine(self.weight_decay, 0.0)?)?;
            let buf = match &self.buffers[i] {
                Some(b) => (b.affine(self.momentum, 0.0)? + g)?,
                None => g,
            };
            var.set(&(&w - buf.affine(lr, 0.0)?)?)?;
            self.buffers[i] = Some(buf);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub train_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Number of times each example was drawn, summed over all epochs.
    #[serde(skip)]
    pub visits: Vec<u32>,
}

impl History {
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str("epoch,lr,loss,train_acc\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.loss, r.train_acc));
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss)
    }
}

/// Where and how checkpoints are written during training.
#[derive(Clone, Debug, Default)]
pub struct CheckpointPlan {
    pub dir: Option<PathBuf>,
    /// Extra metadata stored in every checkpoint (e.g. the config hash).
    pub metadata: HashMap<String, String>,
}

/// Converts `indices` of an image set into a (B, C, 32, 32) batch.
pub fn batch_tensor(images: &ImageSet, indices: &[usize], model: &Model) -> Result<Tensor> {
    let data = images.gather_f32(indices);
    let t = Tensor::from_vec(data, (indices.len(), images.channels(), SIDE, SIDE), model.device())?;
    Ok(t.to_dtype(model.dtype())?)
}

fn check_compatible(model: &Model, images: &ImageSet) -> Result<()> {
    let spec = model.spec();
    if spec.in_channels != images.channels() || spec.num_classes != images.num_labels() {
        return Err(Error::spec(format!(
            "model expects {} channels / {} classes, data has {} / {}",
            spec.in_channels,
            spec.num_classes,
            images.channels(),
            images.num_labels()
        )));
    }
    Ok(())
}

/// Trains `model` in place and returns the per-epoch history.
pub fn train(model: &Model, data: &ImageSet, config: &TrainConfig, plan: &CheckpointPlan) -> Result<History> {
    config.validate()?;
    check_compatible(model, data)?;
    if data.is_empty() {
        return Err(Error::data("empty training set"));
    }
    let params: Vec<&Var> = model.parameters().into_iter().map(|(_, v)| v).collect();
    let mut opt = Sgd::new(params.len(), config.momentum, config.weight_decay);
    let mut history = History {
        epochs: Vec::with_capacity(config.epochs),
        visits: vec![0; data.len()],
    };
    let mut last_finite = None;
    for epoch in 0..config.epochs {
        let lr = lr_at(config, epoch)?;
        let order = epoch_order(data.len(), config.seed, epoch);
        let (mut loss_sum, mut correct) = (0.0f64, 0usize);
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let x = batch_tensor(data, idx, model)?;
            let targets: Vec<u32> = idx.iter().map(|&i| data.labels()[i]).collect();
            let y = Tensor::new(targets.as_slice(), model.device())?;
            let logits = model.forward(&x, true)?;
            let loss = candle_nn::loss::cross_entropy(&logits, &y)?;
            let lv = loss.to_dtype(DType::F32)?.to_scalar::<f32>()?;
            if !lv.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    loss: lv,
                    lr,
                    last_finite,
                });
            }
            last_finite = Some(lv);
            let grads = loss.backward()?;
            opt.step(&params, &grads, lr)?;
            loss_sum += f64::from(lv) * idx.len() as f64;
            let pred = crate::models::argmax_rows(&logits)?;
            correct += pred.iter().zip(&targets).filter(|(p, t)| p == t).count();
            for &i in idx {
                history.visits[i] += 1;
            }
        }
        let record = EpochRecord {
            epoch,
            lr,
            loss: loss_sum / data.len() as f64,
            train_acc: correct as f64 / data.len() as f64,
        };
        log::info!(
            "epoch {epoch}: lr {lr} loss {:.5} train_acc {:.4}",
            record.loss,
            record.train_acc
        );
        history.epochs.push(record);
        if let Some(dir) = &plan.dir {
            let last = epoch + 1 == config.epochs;
            let due = config.checkpoint_every.is_some_and(|k| (epoch + 1) % k == 0);
            if last || due {
                std::fs::create_dir_all(dir)?;
                save_checkpoint(model, &dir.join(checkpoint_name(epoch + 1)), epoch + 1, &plan.metadata)?;
                if last {
                    save_checkpoint(model, &dir.join(FINAL_CHECKPOINT), epoch + 1, &plan.metadata)?;
                }
            }
        }
    }
    Ok(history)
}

pub const FINAL_CHECKPOINT: &str = "final.safetensors";

pub fn checkpoint_name(epochs_done: usize) -> String {
    format!("epoch_{epochs_done:04}.safetensors")
}

/// Metadata stored alongside the tensors of a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    pub spec: ModelSpec,
    pub epoch: usize,
    pub extra: HashMap<String, String>,
}

const META_SPEC: &str = "model_spec";
const META_EPOCH: &str = "epoch";

/// Writes the model state (parameters and batch-norm statistics) in
/// safetensors format, with the model spec and epoch in the header metadata.
pub fn save_checkpoint(model: &Model, path: &Path, epoch: usize, extra: &HashMap<String, String>) -> Result<()> {
    let mut meta = extra.clone();
    meta.insert(META_SPEC.into(), serde_json::to_string(model.spec())?);
    meta.insert(META_EPOCH.into(), epoch.to_string());
    let tensors: Vec<(String, Tensor)> = model
        .state()
        .into_iter()
        .map(|(n, v)| (n.to_string(), v.as_tensor().clone()))
        .collect();
    let tmp = path.with_extension("tmp");
    safetensors::serialize_to_file(tensors, Some(meta), &tmp)
        .map_err(|e| Error::data(format!("writing {}: {e}", path.display())))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn read_checkpoint_meta(bytes: &[u8], path: &Path) -> Result<CheckpointMeta> {
    let bad = |m: String| Error::data(format!("checkpoint {}: {m}", path.display()));
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes).map_err(|e| bad(e.to_string()))?;
    let mut extra = header.metadata().clone().unwrap_or_default();
    let spec = extra
        .remove(META_SPEC)
        .ok_or_else(|| bad("missing model spec".into()))?;
    let spec: ModelSpec = serde_json::from_str(&spec)?;
    let epoch = extra
        .remove(META_EPOCH)
        .and_then(|e| e.parse().ok())
        .ok_or_else(|| bad("missing epoch".into()))?;
    Ok(CheckpointMeta { spec, epoch, extra })
}

/// Rebuilds a model from a checkpoint file.
pub fn load_checkpoint(path: &Path) -> Result<(Model, CheckpointMeta)> {
    load_checkpoint_on(path, DType::F32, &Device::Cpu)
}

pub fn load_checkpoint_on(path: &Path, dtype: DType, device: &Device) -> Result<(Model, CheckpointMeta)> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::DataUnavailable {
                path: path.to_path_buf(),
                hint: "train the model first (checkpoint not found)".into(),
            }
        } else {
            e.into()
        }
    })?;
    let meta = read_checkpoint_meta(&bytes, path)?;
    let model = build_model_on(&meta.spec, 0, dtype, device)?;
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    model.load_state(&tensors)?;
    Ok((model, meta))
}

/// Evaluation-mode class scores for every image, as a (N, classes) f32 matrix.
pub fn scores(model: &Model, images: &ImageSet, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    map_batches(model, images, batch_size, |m, x| m.forward(x, false))
}

/// Evaluation-mode penultimate features for every image.
pub fn features(model: &Model, images: &ImageSet, batch_size: usize) -> Result<Vec<Vec<f32>>> {
    map_batches(model, images, batch_size, |m, x| m.features(x, false))
}

fn map_batches(
    model: &Model,
    images: &ImageSet,
    batch_size: usize,
    f: impl Fn(&Model, &Tensor) -> Result<Tensor>,
) -> Result<Vec<Vec<f32>>> {
    if images.channels() != model.spec().in_channels {
        return Err(Error::spec("image channels do not match the model"));
    }
    let all: Vec<usize> = (0..images.len()).collect();
    let mut out = Vec::with_capacity(images.len());
    for idx in all.chunks(batch_size.max(1)) {
        let x = batch_tensor(images, idx, model)?;
        out.extend(f(model, &x)?.to_dtype(DType::F32)?.to_vec2::<f32>()?);
    }
    Ok(out)
}

/// Evaluation-mode predicted labels (lowest index wins ties).
pub fn predict(model: &Model, images: &ImageSet, batch_size: usize) -> Result<Vec<Label>> {
    Ok(scores(model, images, batch_size)?
        .iter()
        .map(|row| {
            let mut best = 0;
            for (j, &s) in row.iter().enumerate() {
                if s > row[best] {
                    best = j;
                }
            }
            best as Label
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imageset::GroupKey;
    use crate::models::build_model;
    use proptest::prelude::*;

    fn tiny_spec(c: usize, k: usize) -> ModelSpec {
        ModelSpec {
            width: 16,
            depth: 2,
            ..ModelSpec::mlp10(c, k)
        }
    }

    /// Two classes told apart by which half of the image is bright.
    fn halves(n: usize) -> ImageSet {
        let mut pixels = Vec::new();
        let mut labels = Vec::new();
        for i in 0..n {
            let label = (i % 2) as u32;
            for r in 0..SIDE {
                for c in 0..SIDE {
                    let on = (c < SIDE / 2) == (label == 0);
                    pixels.push(if on { 200 + (r % 7) as u8 } else { (i % 11) as u8 });
                }
            }
            labels.push(label);
        }
        ImageSet::new(1, 2, pixels, labels, vec![GroupKey::default(); n]).unwrap()
    }

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(&c, 0).unwrap(), 0.1);
        assert_eq!(lr_at(&c, 49).unwrap(), 0.1);
        assert!((lr_at(&c, 50).unwrap() - 0.01).abs() < 1e-15);
        assert!((lr_at(&c, 100).unwrap() - 0.001).abs() < 1e-15);
        assert!(matches!(lr_at(&c, 150), Err(Error::OutOfRange { .. })));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        let bad = TrainConfig {
            lr_decay_epochs: vec![100, 50],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            lr_decay_epochs: vec![150],
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            momentum: 0.0,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn schedule_is_piecewise_constant(epochs in 2usize..200, raw in proptest::collection::btree_set(1usize..200, 0..4)) {
            let decays: Vec<usize> = raw.into_iter().filter(|&d| d < epochs).collect();
            let c = TrainConfig { epochs, lr_decay_epochs: decays.clone(), ..TrainConfig::default() };
            let lrs: Vec<f64> = (0..epochs).map(|e| lr_at(&c, e).unwrap()).collect();
            let drops = lrs.windows(2).filter(|w| w[1] < w[0]).count();
            prop_assert_eq!(drops, decays.len());
            prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
        }

        #[test]
        fn epoch_order_is_a_permutation(n in 0usize..500, seed: u64, epoch in 0usize..10) {
            let mut o = epoch_order(n, seed, epoch);
            o.sort_unstable();
            prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
        }
    }

    #[test]
    fn sgd_matches_hand_computation() {
        let w = Var::new(&[1.0f64, -2.0], &Device::Cpu).unwrap();
        let mut opt = Sgd::new(1, 0.9, 0.5);
        // loss = sum(w) → grad 1
        for _ in 0..2 {
            let grads = w.as_tensor().sum_all().unwrap().backward().unwrap();
            opt.step(&[&w], &grads, 0.1).unwrap();
        }
        // step 1: g = 1 + 0.5w = (1.5, 0); b = g; w = (0.85, -2)
        // step 2: g = (1.425, 0); b = 0.9·(1.5, 0) + g = (2.775, 0); w = (0.5725, -2)
        let got: Vec<f64> = w.as_tensor().to_vec1().unwrap();
        assert!((got[0] - 0.5725).abs() < 1e-12 && (got[1] + 2.0).abs() < 1e-12);
    }

    #[test]
    fn trains_covers_epochs_and_is_deterministic() {
        let data = halves(40);
        let cfg = TrainConfig {
            epochs: 3,
            batch_size: 16,
            lr_decay_epochs: vec![2],
            ..TrainConfig::default()
        };
        let m1 = build_model(&tiny_spec(1, 2), 3).unwrap();
        let h1 = train(&m1, &data, &cfg, &CheckpointPlan::default()).unwrap();
        assert!(h1.visits.iter().all(|&v| v == 3));
        assert_eq!(h1.epochs.len(), 3);
        assert!(h1.epochs[2].train_acc > 0.9, "{:?}", h1.epochs);
        let m2 = build_model(&tiny_spec(1, 2), 3).unwrap();
        let h2 = train(&m2, &data, &cfg, &CheckpointPlan::default()).unwrap();
        assert_eq!(h1.epochs, h2.epochs);
        assert_eq!(m1.state_hash(|_| true).unwrap(), m2.state_hash(|_| true).unwrap());
    }

    #[test]
    fn rejects_mismatched_data() {
        let m = build_model(&tiny_spec(2, 2), 0).unwrap();
        assert!(matches!(
            train(&m, &halves(4), &TrainConfig::desk(), &CheckpointPlan::default()),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn divergence_is_reported() {
        let data = halves(32);
        let cfg = TrainConfig {
            epochs: 3,
            lr0: 1e30,
            lr_decay_epochs: vec![],
            ..TrainConfig::default()
        };
        let m = build_model(&tiny_spec(1, 2), 0).unwrap();
        match train(&m, &data, &cfg, &CheckpointPlan::default()) {
            Err(Error::Divergence { last_finite, .. }) => assert!(last_finite.is_some()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let data = halves(16);
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 8,
            lr_decay_epochs: vec![],
            checkpoint_every: Some(1),
            ..TrainConfig::default()
        };
        let plan = CheckpointPlan {
            dir: Some(dir.path().to_path_buf()),
            metadata: HashMap::from([("config_hash".to_string(), "abc".to_string())]),
        };
        let m = build_model(&tiny_spec(1, 2), 1).unwrap();
        train(&m, &data, &cfg, &plan).unwrap();
        assert!(dir.path().join(checkpoint_name(1)).exists());
        let (back, meta) = load_checkpoint(&dir.path().join(FINAL_CHECKPOINT)).unwrap();
        assert_eq!(meta.epoch, 2);
        assert_eq!(meta.spec, *m.spec());
        assert_eq!(meta.extra["config_hash"], "abc");
        assert_eq!(scores(&m, &data, 5).unwrap(), scores(&back, &data, 5).unwrap());
        assert!(matches!(
            load_checkpoint(&dir.path().join("missing.safetensors")),
            Err(Error::DataUnavailable { .. })
        ));
    }
}
