//! Last-layer retraining on uncoupled data and the Spurious / DFR / Baseline
//! comparison.
//!
//! The reweighting data comes from a test-style (fully crossed) build: within
//! every (coarse group, label) combination, the first positions form the
//! reweight split and the rest the evaluation split. Because the k-th example
//! of a combination uses the k-th source image of each class, the two splits
//! draw on disjoint source images whenever each class has enough of them;
//! this is checked, not assumed.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::coupling::{ComposedDataset, Provenance};
use crate::error::{Error, Result};
use crate::evaluation::{accuracy, confusion, records, semantic_accuracy};
use crate::imageset::{ImageSet, Label};
use crate::logreg::{fit_multinomial, LinearClassifier, SolverOptions, Standardizer};
use crate::models::Model;
use crate::training;
use crate::util::mix_seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DfrConfig {
    /// Reweighting examples per class.
    pub reweight_per_class: usize,
    /// Candidate inverse regularisation strengths; the best on a held-out
    /// half of the reweight split is refit on all of it.
    pub c_grid: Vec<f64>,
    pub class_balancing: bool,
    pub seed: u64,
    /// Label groups for semantic accuracy.
    pub semantic_groups: Vec<Vec<Label>>,
    pub batch_size: usize,
    pub solver: SolverOptions,
}

impl Default for DfrConfig {
    fn default() -> Self {
        DfrConfig {
            reweight_per_class: 1000,
            c_grid: vec![1.0, 0.7, 0.3, 0.1, 0.07, 0.03, 0.01],
            class_balancing: true,
            seed: 0,
            // vehicles (automobile, truck) vs animals (cat, dog)
            semantic_groups: vec![vec![0, 3], vec![1, 2]],
            batch_size: 256,
            solver: SolverOptions::default(),
        }
    }
}

impl DfrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.reweight_per_class == 0 || self.batch_size == 0 {
            return Err(Error::spec("reweight_per_class and batch_size must be positive"));
        }
        if self.c_grid.is_empty() || self.c_grid.iter().any(|c| !(c.is_finite() && *c > 0.0)) {
            return Err(Error::spec("c_grid must hold positive values"));
        }
        Ok(())
    }
}

/// Indices of the reweight and evaluation examples in a test-style build.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DfrSplit {
    pub reweight: Vec<usize>,
    pub eval: Vec<usize>,
}

fn label_groups(images: &ImageSet) -> BTreeMap<Label, usize> {
    let mut groups: BTreeMap<Label, HashSet<_>> = BTreeMap::new();
    for (g, &l) in images.groups().iter().zip(images.labels()) {
        groups.entry(l).or_default().insert(g.clone());
    }
    groups.into_iter().map(|(l, s)| (l, s.len())).collect()
}

/// Splits a test-style build so that each class gets `reweight_per_class`
/// reweighting examples spread evenly over its coarse groups.
pub fn split_reweight_eval(target: &ComposedDataset, reweight_per_class: usize) -> Result<DfrSplit> {
    let images = target.images();
    let k = images.num_labels();
    let groups = label_groups(images);
    if groups.len() != k {
        return Err(Error::data("target data must contain every label"));
    }
    let per_group = groups.values().copied().max().unwrap_or(1);
    if groups.values().any(|&g| g != per_group) {
        return Err(Error::data("labels appear in unequal numbers of groups; not a crossed build"));
    }
    let cutoff = reweight_per_class / per_group;
    if cutoff < k {
        return Err(Error::data(format!(
            "reweight split of {cutoff} per combination is smaller than the {k} classes"
        )));
    }
    let positions = target.combination_positions();
    let mut split = DfrSplit {
        reweight: Vec::new(),
        eval: Vec::new(),
    };
    for (i, &p) in positions.iter().enumerate() {
        if p < cutoff {
            split.reweight.push(i);
        } else {
            split.eval.push(i);
        }
    }
    if split.eval.is_empty() {
        return Err(Error::data(format!(
            "no evaluation examples left after reserving {cutoff} per combination"
        )));
    }
    check_disjoint(target, &split)?;
    Ok(split)
}

/// Fails when the two splits share an example or a fine source image.
pub fn check_disjoint(target: &ComposedDataset, split: &DfrSplit) -> Result<()> {
    let fine = |i: usize| -> Provenance { *target.provenance(i).last().expect("at least two levels") };
    let ids: HashSet<usize> = split.reweight.iter().copied().collect();
    if let Some(i) = split.eval.iter().find(|i| ids.contains(i)) {
        return Err(Error::Protocol(format!("example {i} is in both reweight and eval splits")));
    }
    let used: HashSet<Provenance> = split.reweight.iter().map(|&i| fine(i)).collect();
    if let Some(&i) = split.eval.iter().find(|&&i| used.contains(&fine(i))) {
        let p = fine(i);
        return Err(Error::Protocol(format!(
            "{} class {} image {} is used for both reweighting and evaluation",
            p.source, p.class_id, p.index
        )));
    }
    Ok(())
}

/// Result of one last-layer refit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DfrFit {
    pub chosen_c: f64,
    /// Held-out accuracy for every candidate in the grid.
    pub validation: Vec<(f64, f64)>,
    pub reweight_size: usize,
    /// The new head, acting on raw (unstandardised) features.
    pub head: LinearClassifier,
}

fn to_f64(rows: Vec<Vec<f32>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| r.into_iter().map(f64::from).collect())
        .collect()
}

fn balanced(indices: &[usize], labels: &[Label], seed: u64, tag: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<Label, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let n = by_class.values().map(Vec::len).min().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[seed, tag]));
    let mut out = Vec::with_capacity(n * by_class.len());
    for v in by_class.values_mut() {
        v.shuffle(&mut rng);
        out.extend_from_slice(&v[..n]);
    }
    out.sort_unstable();
    out
}

/// Refits the final layer of `model` on penultimate features of the reweight
/// split and installs it. Only the final layer's weight and bias change.
pub fn run_dfr(model: &Model, target: &ComposedDataset, split: &DfrSplit, config: &DfrConfig) -> Result<DfrFit> {
    config.validate()?;
    check_disjoint(target, split)?;
    let images = target.images();
    let k = model.spec().num_classes;
    if images.num_labels() != k {
        return Err(Error::spec("target labels do not match the model's classes"));
    }
    let labels = images.labels();
    let idx = if config.class_balancing {
        balanced(&split.reweight, labels, config.seed, 1)
    } else {
        split.reweight.clone()
    };
    let mut per_class = vec![0usize; k];
    for &i in &idx {
        per_class[labels[i] as usize] += 1;
    }
    if per_class.iter().any(|&c| c < k) {
        return Err(Error::data(format!(
            "reweight split has {per_class:?} examples per class; need at least {k} each"
        )));
    }
    let subset = images.select(&idx);
    let feats = to_f64(training::features(model, &subset, config.batch_size)?);
    let y: Vec<Label> = subset.labels().to_vec();

    // model selection on a class-balanced half split
    let all: Vec<usize> = (0..y.len()).collect();
    let fit_half = balanced(&all, &y, config.seed, 2)
        .into_iter()
        .enumerate()
        .filter(|(j, _)| j % 2 == 0)
        .map(|(_, i)| i)
        .collect::<HashSet<_>>();
    let (mut xa, mut ya, mut xb, mut yb) = (vec![], vec![], vec![], vec![]);
    for i in 0..y.len() {
        if fit_half.contains(&i) {
            xa.push(feats[i].clone());
            ya.push(y[i]);
        } else {
            xb.push(feats[i].clone());
            yb.push(y[i]);
        }
    }
    let sa = Standardizer::fit(&xa)?;
    let (xa, xb) = (sa.transform(&xa), sa.transform(&xb));
    let mut validation = Vec::with_capacity(config.c_grid.len());
    for &c in &config.c_grid {
        let clf = fit_multinomial(&xa, &ya, k, c, &config.solver)?;
        validation.push((c, clf.accuracy(&xb, &yb)));
    }
    let mut chosen = validation[0];
    for &v in &validation[1..] {
        if v.1 > chosen.1 {
            chosen = v;
        }
    }
    log::info!("dfr: held-out accuracy per C {validation:?}; chose C={}", chosen.0);

    let s = Standardizer::fit(&feats)?;
    let clf = fit_multinomial(&s.transform(&feats), &y, k, chosen.0, &config.solver)?;
    let head = clf.fold_standardizer(&s);
    install_head(model, &head)?;
    Ok(DfrFit {
        chosen_c: chosen.0,
        validation,
        reweight_size: y.len(),
        head,
    })
}

fn install_head(model: &Model, head: &LinearClassifier) -> Result<()> {
    let dev = model.device();
    let (k, d) = (head.weight.len(), head.weight[0].len());
    let w: Vec<f32> = head.weight.iter().flatten().map(|&v| v as f32).collect();
    let b: Vec<f32> = head.bias.iter().map(|&v| v as f32).collect();
    model.set_head(
        &candle_core::Tensor::from_vec(w, (k, d), dev)?,
        &candle_core::Tensor::from_vec(b, k, dev)?,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelScore {
    pub model: String,
    pub standard_accuracy: f64,
    pub semantic_accuracy: f64,
}

/// The three-model comparison on the evaluation split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TripletReport {
    pub eval_size: usize,
    pub rows: Vec<ModelScore>,
}

impl TripletReport {
    pub fn get(&self, model: &str) -> Option<&ModelScore> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Percentages to two decimals, one row per model.
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<10} {:>9} {:>9}\n", "Model", "Standard", "Semantic");
        for r in &self.rows {
            out.push_str(&format!(
                "{:<10} {:>9.2} {:>9.2}\n",
                r.model,
                100.0 * r.standard_accuracy,
                100.0 * r.semantic_accuracy
            ));
        }
        out
    }
}

fn score(
    name: &str,
    model: &Model,
    images: &ImageSet,
    semantic: &[Vec<Label>],
    batch_size: usize,
) -> Result<ModelScore> {
    let pred = training::predict(model, images, batch_size)?;
    let cm = confusion(images.num_labels(), &records(images.groups(), images.labels(), &pred))?;
    Ok(ModelScore {
        model: name.to_string(),
        standard_accuracy: accuracy(&cm),
        semantic_accuracy: semantic_accuracy(&cm, semantic)?,
    })
}

/// Scores the coupled-trained model, its DFR refit and the fine-only baseline
/// on the evaluation split. The baseline sees only the fine source's channels.
pub fn evaluate_triplet(
    spurious: &Model,
    dfr_model: &Model,
    baseline: &Model,
    target: &ComposedDataset,
    split: &DfrSplit,
    config: &DfrConfig,
) -> Result<TripletReport> {
    check_disjoint(target, split)?;
    let eval = target.images().select(&split.eval);
    let tree = &target.tree;
    let fine = eval.select_channels(tree.channel_range(tree.num_levels() - 1))?;
    let sem = &config.semantic_groups;
    Ok(TripletReport {
        eval_size: eval.len(),
        rows: vec![
            score("Spurious", spurious, &eval, sem, config.batch_size)?,
            score("DFR", dfr_model, &eval, sem, config.batch_size)?,
            score("Baseline", baseline, &fine, sem, config.batch_size)?,
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coupling::{build_test_with, presets, Composition};
    use crate::datasets::SourceStore;
    use crate::models::{build_model, ModelSpec, HEAD};

    fn target(per_combination: usize, test_per_class: usize) -> ComposedDataset {
        let store = SourceStore::synthetic(1, 4, test_per_class);
        build_test_with(
            &store,
            &presets::mnist_cifar(),
            0,
            Composition {
                train_per_label: 4,
                test_per_combination: per_combination,
            },
        )
        .unwrap()
    }

    fn small(c: usize) -> Model {
        build_model(
            &ModelSpec {
                width: 16,
                depth: 1,
                ..ModelSpec::mlp10(c, 4)
            },
            3,
        )
        .unwrap()
    }

    #[test]
    fn split_is_balanced_and_disjoint() {
        let t = target(40, 40);
        let s = split_reweight_eval(&t, 40).unwrap();
        // 2 groups per label → 20 slots per combination
        assert_eq!(s.reweight.len(), 4 * 40);
        assert_eq!(s.eval.len(), 8 * 40 - 4 * 40);
        let mut per = [0; 4];
        for &i in &s.reweight {
            per[t.images().labels()[i] as usize] += 1;
        }
        assert_eq!(per, [40; 4]);
    }

    #[test]
    fn reused_source_images_are_a_protocol_error() {
        // only 25 test images per class: positions 25.. wrap onto reweight images
        let t = target(40, 25);
        assert!(matches!(split_reweight_eval(&t, 40), Err(Error::Protocol(_))));
        let t = target(40, 40);
        let mut s = split_reweight_eval(&t, 40).unwrap();
        s.eval.push(s.reweight[0]);
        assert!(matches!(check_disjoint(&t, &s), Err(Error::Protocol(_))));
    }

    #[test]
    fn too_small_reweight_split() {
        let t = target(40, 40);
        assert!(matches!(split_reweight_eval(&t, 6), Err(Error::Data(_))));
    }

    #[test]
    fn dfr_freezes_backbone_and_is_idempotent() {
        let t = target(40, 40);
        let s = split_reweight_eval(&t, 40).unwrap();
        let m = small(4);
        let backbone = |m: &Model| m.state_hash(|n| !n.starts_with(HEAD)).unwrap();
        let before = backbone(&m);
        let head_before = m.state_hash(|n| n.starts_with(HEAD)).unwrap();
        let cfg = DfrConfig::default();
        let fit = run_dfr(&m, &t, &s, &cfg).unwrap();
        assert_eq!(before, backbone(&m));
        assert_ne!(head_before, m.state_hash(|n| n.starts_with(HEAD)).unwrap());
        assert_eq!(fit.reweight_size, 160);
        assert_eq!(fit.validation.len(), cfg.c_grid.len());

        let eval = t.images().select(&s.eval);
        let acc = |m: &Model| {
            let p = training::predict(m, &eval, 64).unwrap();
            p.iter().zip(eval.labels()).filter(|(a, b)| a == b).count() as f64 / eval.len() as f64
        };
        let first = acc(&m);
        run_dfr(&m, &t, &s, &cfg).unwrap();
        assert!((acc(&m) - first).abs() < 0.01);
        // synthetic CIFAR classes are separable from random features
        assert!(first > 0.5, "{first}");
    }

    #[test]
    fn triplet_report_semantics() {
        let t = target(40, 40);
        let s = split_reweight_eval(&t, 40).unwrap();
        let cfg = DfrConfig::default();
        let (a, b, base) = (small(4), small(4), small(3));
        run_dfr(&b, &t, &s, &cfg).unwrap();
        let r = evaluate_triplet(&a, &b, &base, &t, &s, &cfg).unwrap();
        assert_eq!(r.eval_size, s.eval.len());
        assert_eq!(r.rows.len(), 3);
        for row in &r.rows {
            assert!(row.semantic_accuracy >= row.standard_accuracy);
        }
        let table = r.to_table();
        assert!(table.starts_with("Model"));
        assert_eq!(table.lines().count(), 4);
        let mut overlapping = s.clone();
        overlapping.eval.push(s.reweight[3]);
        assert!(matches!(
            evaluate_triplet(&a, &b, &base, &t, &overlapping, &cfg),
            Err(Error::Protocol(_))
        ));
    }
}
