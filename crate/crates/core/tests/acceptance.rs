//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any fail.
//!
//! Run with `cargo test -p hierbias-core --test acceptance`. Criteria that
//! train networks read MNIST/CIFAR-10 from `HIERBIAS_DATA_ROOT` (default:
//! `<workspace>/data`); missing data fails the criterion with the fetch hint.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use candle_core::{DType, Device, Tensor};
use hierbias_core::coupling::{presets, CouplingTree};
use hierbias_core::datasets::{SourceKind, SourceStore, DATA_ROOT_ENV};
use hierbias_core::evaluation::{self, GroupedConfusionMatrix, LabelHierarchy, Record, SubsetTable};
use hierbias_core::experiment::{run_experiment, ExperimentConfig, Profile, RunOutcome};
use hierbias_core::imageset::{GroupKey, Label};
use hierbias_core::models::{build_model_on, ModelSpec};
use hierbias_core::oracle::predict_scenario_a;
use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestCaseError, TestRng, TestRunner};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Verdict = Result<String, String>;

struct Line {
    id: u32,
    title: &'static str,
    pass: bool,
    detail: String,
    secs: f64,
}

fn check(id: u32, title: &'static str, f: impl FnOnce() -> Verdict) -> Line {
    let t0 = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        Err(format!("panicked: {msg}"))
    });
    let (pass, detail) = match r {
        Ok(d) => (true, d),
        Err(d) => (false, d),
    };
    let line = Line {
        id,
        title,
        pass,
        detail,
        secs: t0.elapsed().as_secs_f64(),
    };
    println!("{}", render(&line));
    line
}

fn render(l: &Line) -> String {
    format!(
        "C{:<2} {} {} — {} [{:.1}s]",
        l.id,
        if l.pass { "PASS" } else { "FAIL" },
        l.title,
        l.detail,
        l.secs
    )
}

/// Turns a measurement and its pass condition into a verdict.
fn verdict(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn workspace() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_root() -> PathBuf {
    std::env::var_os(DATA_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace().join("data"))
}

fn key(k: &[u32]) -> GroupKey {
    GroupKey(k.to_vec())
}

// ---------------------------------------------------------------------------
// Metric oracle: recomputes every metric straight from raw records.

#[derive(Debug, Clone)]
struct Instance {
    labels: usize,
    subsets: Vec<Vec<Label>>,
    records: Vec<(u32, Label, Label)>,
    semantic_of: Vec<usize>,
}

fn instance() -> impl Strategy<Value = Instance> {
    (2usize..=8, 1usize..=4)
        .prop_flat_map(|(l, g)| {
            let all: Vec<Label> = (0..l as Label).collect();
            (
                Just(l),
                proptest::collection::vec(proptest::sample::subsequence(all, 2..=l), g),
                proptest::collection::vec((0..g as u32, 0..l as Label, 0..l as Label), 0..=200),
                proptest::collection::vec(0usize..2, l),
            )
        })
        .prop_map(|(labels, subsets, records, semantic_of)| Instance {
            labels,
            subsets,
            records,
            semantic_of,
        })
}

struct Brute {
    hca: BTreeMap<(u32, Label), f64>,
    ahca: Option<f64>,
    pcs: Option<f64>,
    semantic: Option<f64>,
    containment: BTreeMap<u32, f64>,
}

fn brute_force(x: &Instance) -> Brute {
    let mut hca = BTreeMap::new();
    let mut containment = BTreeMap::new();
    for (g, sub) in x.subsets.iter().enumerate() {
        let g = g as u32;
        let in_g: Vec<_> = x.records.iter().filter(|r| r.0 == g).collect();
        if !in_g.is_empty() {
            let inside = in_g.iter().filter(|r| sub.contains(&r.2)).count();
            containment.insert(g, inside as f64 / in_g.len() as f64);
        }
        for y in 0..x.labels as Label {
            let cell: Vec<_> = in_g.iter().filter(|r| r.1 == y).collect();
            if cell.is_empty() {
                continue;
            }
            let best = sub
                .iter()
                .map(|&p| cell.iter().filter(|r| r.2 == p).count())
                .max()
                .unwrap();
            let k = sub.len() as f64;
            let acc = best as f64 / cell.len() as f64;
            hca.insert((g, y), (acc - 1.0 / k) / (1.0 - 1.0 / k));
        }
    }
    let ahca = (!hca.is_empty()).then(|| hca.values().sum::<f64>() / hca.len() as f64);
    let mut recalls = Vec::new();
    for y in 0..x.labels as Label {
        let of_y: Vec<_> = x.records.iter().filter(|r| r.1 == y).collect();
        if of_y.is_empty() {
            break;
        }
        recalls.push(of_y.iter().filter(|r| r.2 == y).count() as f64 / of_y.len() as f64);
    }
    let pcs = (recalls.len() == x.labels).then(|| recalls.iter().sum::<f64>() / x.labels as f64);
    let semantic = (!x.records.is_empty()).then(|| {
        let same = x
            .records
            .iter()
            .filter(|r| x.semantic_of[r.1 as usize] == x.semantic_of[r.2 as usize])
            .count();
        same as f64 / x.records.len() as f64
    });
    Brute {
        hca,
        ahca,
        pcs,
        semantic,
        containment,
    }
}

fn c1_metric_oracle() -> Verdict {
    let worst = Cell::new(0.0f64);
    let compared = Cell::new(0usize);
    let close = |what: &str, a: f64, b: f64| -> Result<(), TestCaseError> {
        let d = (a - b).abs();
        worst.set(worst.get().max(d));
        compared.set(compared.get() + 1);
        if d < 1e-9 {
            Ok(())
        } else {
            Err(TestCaseError::fail(format!("{what}: module {a} vs brute force {b}")))
        }
    };
    let both_undefined = |what: &str, module_ok: bool, brute: bool| -> Result<(), TestCaseError> {
        if module_ok == brute {
            Ok(())
        } else {
            Err(TestCaseError::fail(format!("{what}: definedness differs")))
        }
    };
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 200,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let res = runner.run(&instance(), |x| {
        let table = SubsetTable {
            num_labels: x.labels,
            subsets: x
                .subsets
                .iter()
                .enumerate()
                .map(|(g, s)| (key(&[g as u32]), s.clone()))
                .collect(),
        };
        let groups: Vec<GroupKey> = x.records.iter().map(|r| key(&[r.0])).collect();
        let truth: Vec<Label> = x.records.iter().map(|r| r.1).collect();
        let pred: Vec<Label> = x.records.iter().map(|r| r.2).collect();
        let cm = evaluation::confusion(x.labels, &evaluation::records(&groups, &truth, &pred)).unwrap();
        let b = brute_force(&x);

        let cells = evaluation::hca_cells(&cm, &table, 1).unwrap();
        prop_assert_eq!(cells.len(), b.hca.len());
        for (g, y, v) in &cells {
            close("hca cell", *v, b.hca[&(g.0[0], *y)])?;
            close("hca", evaluation::hca(&cm, &table, g, *y).unwrap(), b.hca[&(g.0[0], *y)])?;
        }
        let ahca = evaluation::ahca(&cm, &table, 1);
        both_undefined("ahca", ahca.is_ok(), b.ahca.is_some())?;
        if let (Ok(a), Some(e)) = (ahca, b.ahca) {
            close("ahca", a, e)?;
        }
        let pcs = evaluation::pcs(&cm);
        both_undefined("pcs", pcs.is_ok(), b.pcs.is_some())?;
        if let (Ok(a), Some(e)) = (pcs, b.pcs) {
            close("pcs", a, e)?;
        }
        let semantic: Vec<Vec<Label>> = (0..2)
            .map(|s| (0..x.labels as Label).filter(|&l| x.semantic_of[l as usize] == s).collect())
            .collect();
        let sem = evaluation::semantic_accuracy(&cm, &semantic);
        both_undefined("semantic", sem.is_ok(), b.semantic.is_some())?;
        if let (Ok(a), Some(e)) = (sem, b.semantic) {
            close("semantic accuracy", a, e)?;
        }
        for (g, v) in &b.containment {
            close("containment", evaluation::containment(&cm, &table, &key(&[*g])).unwrap(), *v)?;
        }
        Ok(())
    });
    let detail = format!(
        "200 instances, {} values compared, max |Δ| = {:.1e} (< 1e-9)",
        compared.get(),
        worst.get()
    );
    match res {
        Ok(()) => Ok(detail),
        Err(e) => Err(format!("{e}; {detail}")),
    }
}

// ---------------------------------------------------------------------------

/// Every label appears in every group and is always predicted correctly.
fn perfect_crossed(m: usize, k: usize) -> (SubsetTable, GroupedConfusionMatrix) {
    let labels = m * k;
    let table = SubsetTable {
        num_labels: labels,
        subsets: (0..m)
            .map(|g| (key(&[g as u32]), ((g * k) as Label..((g + 1) * k) as Label).collect()))
            .collect(),
    };
    let mut recs = Vec::new();
    for g in 0..m as u32 {
        for y in 0..labels as Label {
            for _ in 0..3 {
                recs.push(Record {
                    group: key(&[g]),
                    truth: y,
                    predicted: y,
                });
            }
        }
    }
    (table, evaluation::confusion(labels, &recs).unwrap())
}

fn c2_analytic_ahca() -> Verdict {
    let mut worst = 0.0f64;
    for m in 1..=5usize {
        for k in 2..=4usize {
            let (table, cm) = perfect_crossed(m, k);
            let got = evaluation::ahca(&cm, &table, 1).map_err(|e| e.to_string())?;
            let want = (1.0 - (m as f64 - 1.0) / (k as f64 - 1.0)) / m as f64;
            worst = worst.max((got - want).abs());
            if (got - want).abs() > 1e-12 {
                return Err(format!("m={m} k={k}: AHCA {got} vs {want}"));
            }
        }
    }
    // m = k = 2 through the bundled MNIST-Patch tree: exactly zero.
    let tree = presets::mnist_patch();
    let mut recs = Vec::new();
    for digit in [1u32, 2] {
        for y in 0..4 {
            recs.push(Record {
                group: key(&[digit]),
                truth: y,
                predicted: y,
            });
        }
    }
    let cm = evaluation::confusion(4, &recs).unwrap();
    let a = evaluation::ahca(&cm, &tree, 1).map_err(|e| e.to_string())?;
    let pcs = evaluation::pcs(&cm).map_err(|e| e.to_string())?;
    verdict(
        a == 0.0 && pcs == 1.0 && worst <= 1e-12,
        format!("15 (m,k) cases max |Δ| = {worst:.1e}; MNIST-Patch tree AHCA = {a:.2}, PCS = {:.2}", 100.0 * pcs),
    )
}

// ---------------------------------------------------------------------------

const SOURCES: [SourceKind; 3] = [SourceKind::Patch, SourceKind::Mnist, SourceKind::Cifar10];

/// A random valid tree of depth 2 or 3 whose coarse nodes couple ≥ 2 leaves.
fn random_tree(rng: &mut ChaCha8Rng) -> CouplingTree {
    loop {
        let depth = rng.random_range(2..=3usize);
        let sources: Vec<SourceKind> = (0..depth).map(|_| SOURCES[rng.random_range(0..3)]).collect();
        let mut pools: Vec<Vec<u32>> = sources
            .iter()
            .map(|s| {
                let mut p: Vec<u32> = (0..s.num_classes() as u32).collect();
                p.shuffle(rng);
                p
            })
            .collect();
        let mut paths: Vec<Vec<u32>> = Vec::new();
        let mut ok = true;
        let roots = rng.random_range(1..=3usize);
        for _ in 0..roots {
            let Some(r) = pools[0].pop() else {
                ok = false;
                break;
            };
            if depth == 2 {
                for _ in 0..rng.random_range(2..=3usize) {
                    match pools[1].pop() {
                        Some(f) => paths.push(vec![r, f]),
                        None => ok = false,
                    }
                }
            } else {
                for _ in 0..rng.random_range(1..=2usize) {
                    let Some(mid) = pools[1].pop() else {
                        ok = false;
                        break;
                    };
                    for _ in 0..rng.random_range(2..=3usize) {
                        match pools[2].pop() {
                            Some(f) => paths.push(vec![r, mid, f]),
                            None => ok = false,
                        }
                    }
                }
            }
        }
        if ok {
            if let Ok(t) = CouplingTree::new(sources, paths) {
                return t;
            }
        }
    }
}

fn c10_oracle_containment() -> Verdict {
    let predictions = Cell::new(0usize);
    let mut runner = TestRunner::new_with_rng(
        Config {
            cases: 10_000,
            failure_persistence: None,
            ..Config::default()
        },
        TestRng::deterministic_rng(RngAlgorithm::ChaCha),
    );
    let res = runner.run(&any::<u64>(), |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tree = random_tree(&mut rng);
        let l = tree.num_labels();
        let levels = tree.levels();
        // label-dependent scores whose maximum is the true label
        let perfect: Vec<Vec<f64>> = (0..l)
            .map(|y| {
                let mut s: Vec<f64> = (0..l).map(|_| rng.random_range(-3.0..3.0)).collect();
                s[y] = 4.0;
                s
            })
            .collect();
        // crossed combinations, as in a test set
        let mut recs = Vec::new();
        let mut choice = vec![0usize; levels.len()];
        loop {
            let classes: Vec<u32> = choice.iter().zip(levels).map(|(&c, lv)| lv.classes[c]).collect();
            let coarse = key(&classes[..1]);
            let y = tree.label_of_fine(*classes.last().unwrap()).unwrap();
            let subset = tree.subset(&coarse).unwrap();
            let noisy: Vec<f64> = (0..l).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p = predict_scenario_a(&tree, &coarse, &noisy).unwrap();
            prop_assert!(subset.contains(&p), "random scores: {p} outside {subset:?}");
            let p = predict_scenario_a(&tree, &coarse, &perfect[y as usize]).unwrap();
            prop_assert!(subset.contains(&p));
            predictions.set(predictions.get() + 2);
            for _ in 0..rng.random_range(1..=3) {
                recs.push(Record {
                    group: key(&classes[..tree.coarse_depth()]),
                    truth: y,
                    predicted: p,
                });
            }
            let Some(lvl) = (0..choice.len()).rev().find(|&i| choice[i] + 1 < levels[i].classes.len()) else {
                break;
            };
            choice[lvl] += 1;
            choice[lvl + 1..].iter_mut().for_each(|c| *c = 0);
        }
        let cm = evaluation::confusion(l, &recs).unwrap();
        let r = evaluation::report(&cm, &tree, &[1], None).unwrap();
        prop_assert!(r.depths[0].ahca == 1.0, "AHCA {}", r.depths[0].ahca);
        for c in &r.depths[0].containment {
            prop_assert!(c.value == 1.0, "containment {} in {}", c.value, c.group);
        }
        Ok(())
    });
    let detail = format!("10000 random trees, {} oracle predictions, AHCA = containment = 1 exactly", predictions.get());
    match res {
        Ok(()) => Ok(detail),
        Err(e) => Err(format!("{e}")),
    }
}

// ---------------------------------------------------------------------------

fn c12_gradient_check() -> Verdict {
    let dev = Device::Cpu;
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for batch_seed in 0..3u64 {
        let spec = ModelSpec {
            width: 16,
            depth: 3,
            ..ModelSpec::mlp10(1, 4)
        };
        let m = build_model_on(&spec, 11 + batch_seed, DType::F64, &dev).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(batch_seed);
        let n = 6;
        let x: Vec<f64> = (0..n * 1024).map(|_| rng.random_range(0.0..1.0)).collect();
        let x = Tensor::from_vec(x, (n, 1, 32, 32), &dev).unwrap();
        let y: Vec<u32> = (0..n).map(|i| (i % 4) as u32).collect();
        let y = Tensor::new(y.as_slice(), &dev).unwrap();
        let loss = || -> f64 {
            candle_nn::loss::cross_entropy(&m.forward(&x, true).unwrap(), &y)
                .unwrap()
                .to_scalar::<f64>()
                .unwrap()
        };
        let l = candle_nn::loss::cross_entropy(&m.forward(&x, true).unwrap(), &y).unwrap();
        let grads = l.backward().unwrap();
        for (name, var) in m.parameters() {
            let g: Vec<f64> = grads
                .get(var.as_tensor())
                .ok_or_else(|| format!("no gradient for {name}"))?
                .flatten_all()
                .unwrap()
                .to_vec1()
                .unwrap();
            let orig = var.as_tensor().copy().unwrap();
            let flat: Vec<f64> = orig.flatten_all().unwrap().to_vec1().unwrap();
            let step = (flat.len() / 12).max(1);
            let h = 1e-5;
            for i in (0..flat.len()).step_by(step) {
                let at = |d: f64| {
                    let mut p = flat.clone();
                    p[i] += d;
                    var.set(&Tensor::from_vec(p, orig.dims(), &dev).unwrap()).unwrap();
                    loss()
                };
                let fd = (at(h) - at(-h)) / (2.0 * h);
                var.set(&orig).unwrap();
                let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    verdict(
        worst < 1e-3,
        format!("{checked} parameter entries over 3 batches, max relative error {worst:.2e} (< 1e-3)"),
    )
}

// ---------------------------------------------------------------------------
// Desk runs

struct Desk {
    outcome: RunOutcome,
    elapsed: Duration,
    _out: tempfile::TempDir,
}

fn desk_run(config: &str) -> Result<Desk, String> {
    let path = workspace().join("configs").join(config);
    let cfg = ExperimentConfig::load(&path, Profile::Desk).map_err(|e| e.to_string())?;
    let store = SourceStore::open(data_root());
    let out = tempfile::tempdir().map_err(|e| e.to_string())?;
    let t0 = Instant::now();
    let outcome = run_experiment(&cfg, Profile::Desk, &store, out.path()).map_err(|e| e.to_string())?;
    Ok(Desk {
        outcome,
        elapsed: t0.elapsed(),
        _out: out,
    })
}

fn test_report<'a>(d: &'a Desk, name: &str) -> Result<&'a evaluation::MetricsReport, String> {
    d.outcome
        .metrics
        .evaluations
        .get(name)
        .ok_or_else(|| format!("no evaluation named {name}"))
}

fn pct(v: f64) -> String {
    format!("{:.2}", 100.0 * v)
}

fn c3_mnist_patch(d: &Result<Desk, String>) -> Verdict {
    let d = d.as_ref().map_err(Clone::clone)?;
    let r = test_report(d, "test")?;
    let pcs = r.pcs.ok_or("PCS undefined")?;
    let ahca = r.ahca(1).ok_or("AHCA undefined")?;
    let secs = d.elapsed.as_secs_f64();
    verdict(
        pcs >= 0.999 && ahca.abs() <= 0.01 && secs <= 600.0,
        format!(
            "PCS {} (≥ 99.90), AHCA {} (|·| ≤ 1.00), run {secs:.0}s (≤ 600s)",
            pct(pcs),
            pct(ahca)
        ),
    )
}

fn c4_patch_mnist() -> Verdict {
    let d = desk_run("patch_mnist/mlp10.toml")?;
    let r = test_report(&d, "test")?;
    let pcs = r.pcs.ok_or("PCS undefined")?;
    let ahca = r.ahca(1).ok_or("AHCA undefined")?;
    let cont: Vec<f64> = r.depths[0].containment.iter().map(|c| c.value).collect();
    let min_cont = cont.iter().copied().fold(f64::INFINITY, f64::min);
    let secs = d.elapsed.as_secs_f64();
    verdict(
        cont.len() == 2 && min_cont >= 0.99 && (0.40..=0.60).contains(&pcs) && ahca >= 0.60 && secs <= 1800.0,
        format!(
            "containment min {} over {} patch groups (≥ 99.00), PCS {} (∈ [40, 60]), AHCA {} (≥ 60.00), run {secs:.0}s (≤ 1800s)",
            pct(min_cont),
            cont.len(),
            pct(pcs),
            pct(ahca)
        ),
    )
}

fn c5_mnist_cifar() -> Verdict {
    let d = desk_run("mnist_cifar/resnet18.toml")?;
    let r = test_report(&d, "test")?;
    let pcs = r.pcs.ok_or("PCS undefined")?;
    let ahca = r.ahca(1).ok_or("AHCA undefined")?;
    let min_cont = r.depths[0].containment.iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
    verdict(
        min_cont >= 0.95 && (0.40..=0.60).contains(&pcs) && ahca >= 0.70,
        format!(
            "containment min {} (≥ 95.00), PCS {} (∈ [40, 60]), AHCA {} (≥ 70.00)",
            pct(min_cont),
            pct(pcs),
            pct(ahca)
        ),
    )
}

fn c6_cifar_mnist() -> Verdict {
    let d = desk_run("cifar_mnist/resnet18.toml")?;
    let r = test_report(&d, "test")?;
    let pcs = r.pcs.ok_or("PCS undefined")?;
    let ahca = r.ahca(1).ok_or("AHCA undefined")?;
    verdict(
        pcs >= 0.95 && ahca <= 0.10,
        format!("PCS {} (≥ 95.00), AHCA {} (≤ 10.00)", pct(pcs), pct(ahca)),
    )
}

fn c7_dfr_ordering() -> Verdict {
    let d = desk_run("mnist_cifar/dfr_resnet18.toml")?;
    let t = d.outcome.dfr.as_ref().ok_or("no DFR outcome")?;
    let get = |n: &str| t.report.get(n).cloned().ok_or(format!("no {n} row"));
    let (s, f, b) = (get("Spurious")?, get("DFR")?, get("Baseline")?);
    let ordered = s.standard_accuracy < f.standard_accuracy && f.standard_accuracy < b.standard_accuracy;
    let semantic_ok = [&s, &f, &b]
        .iter()
        .all(|r| r.semantic_accuracy >= 0.90 && r.semantic_accuracy >= r.standard_accuracy);
    verdict(
        ordered && semantic_ok,
        format!(
            "standard {}/{}/{} (strictly increasing), semantic {}/{}/{} (≥ 90.00 and ≥ standard)",
            pct(s.standard_accuracy),
            pct(f.standard_accuracy),
            pct(b.standard_accuracy),
            pct(s.semantic_accuracy),
            pct(f.semantic_accuracy),
            pct(b.semantic_accuracy)
        ),
    )
}

fn c8_half_inverted() -> Verdict {
    let d = desk_run("half_inverted_mnist/mlp10.toml")?;
    let e = d
        .outcome
        .evaluations
        .iter()
        .find(|e| e.name == "test_inverted")
        .ok_or("no test_inverted evaluation")?;
    let agg = e.confusion.aggregate();
    let high: u64 = (5..10).map(|t| agg.column_sum(t)).sum();
    let flipped: u64 = (5..10).flat_map(|t| (0..5).map(move |p| (p, t))).map(|(p, t)| agg.get(p, t)).sum();
    let frac = flipped as f64 / high as f64;
    // share of the pair's errors that land on the partner; uniform errors give 1/9
    let partner = |a: Label, b: Label| {
        let off = |t: Label| agg.column_sum(t) - agg.get(t, t);
        (agg.get(b, a) + agg.get(a, b)) as f64 / (off(a) + off(b)).max(1) as f64
    };
    let (p49, p35) = (partner(4, 9), partner(3, 5));
    verdict(
        frac >= 0.80 && p49 > 1.0 / 9.0 && p35 > 1.0 / 9.0,
        format!(
            "{} of true 5–9 predicted in 0–4 (≥ 80.00); partner share of errors 4↔9 {}, 3↔5 {} (> 11.11)",
            pct(frac),
            pct(p49),
            pct(p35)
        ),
    )
}

fn c9_corrupted_cifar() -> Verdict {
    let d = desk_run("corrupted_cifar/resnet18.toml")?;
    let r = test_report(&d, "test")?;
    let mut parts = Vec::new();
    let mut ok = true;
    for kind in 0..4u32 {
        let c = r.containment(&key(&[kind])).ok_or(format!("no group {kind}"))?;
        ok &= c >= 0.50;
        parts.push(pct(c));
    }
    verdict(ok, format!("in-pair prediction share per corruption {} (each ≥ 50.00)", parts.join("/")))
}

fn c11_determinism(first: &Result<Desk, String>) -> Verdict {
    let a = first.as_ref().map_err(|e| format!("first run failed: {e}"))?;
    let b = desk_run("mnist_patch/mlp10.toml")?;
    let ja = std::fs::read(a.outcome.run.metrics()).map_err(|e| e.to_string())?;
    let jb = std::fs::read(b.outcome.run.metrics()).map_err(|e| e.to_string())?;
    let same_data = a.outcome.metrics.dataset_hashes == b.outcome.metrics.dataset_hashes;
    verdict(
        same_data && ja == jb,
        format!(
            "MNIST-Patch desk config twice: dataset hashes {}, metrics.json {} ({} bytes)",
            if same_data { "identical" } else { "differ" },
            if ja == jb { "byte-identical" } else { "differ" },
            ja.len()
        ),
    )
}

fn main() {
    let mut lines = vec![
        check(1, "metric oracle equivalence", c1_metric_oracle),
        check(2, "analytic AHCA identity", c2_analytic_ahca),
        check(10, "oracle containment property", c10_oracle_containment),
        check(12, "gradient sanity", c12_gradient_check),
    ];
    let mnist_patch = desk_run("mnist_patch/mlp10.toml");
    lines.push(check(3, "MNIST-Patch desk run", || c3_mnist_patch(&mnist_patch)));
    lines.push(check(11, "determinism", || c11_determinism(&mnist_patch)));
    drop(mnist_patch);
    lines.push(check(4, "Patch-MNIST desk run", c4_patch_mnist));
    lines.push(check(8, "half-inverted MNIST desk run", c8_half_inverted));
    lines.push(check(5, "MNIST-CIFAR desk run", c5_mnist_cifar));
    lines.push(check(6, "CIFAR-MNIST desk run", c6_cifar_mnist));
    lines.push(check(7, "DFR ordering on MNIST-CIFAR", c7_dfr_ordering));
    lines.push(check(9, "corrupted CIFAR-10 desk run", c9_corrupted_cifar));

    lines.sort_by_key(|l| l.id);
    let passed = lines.iter().filter(|l| l.pass).count();
    println!("\nacceptance summary");
    for l in &lines {
        println!("{}", render(l));
    }
    println!("acceptance: {passed}/{} criteria passed", lines.len());
    if passed != lines.len() {
        std::process::exit(1);
    }
}
