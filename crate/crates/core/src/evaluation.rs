//! Grouped confusion matrices and the hierarchy metrics.
//!
//! Matrices are indexed `[predicted][true]`. A group is the coarse-feature
//! key of the samples; `Y_g` is the label subset the hierarchy couples to it.
//!
//! - HCA(g, y) = (max_{y'∈Y_g} CM_g[y', y] / N_{g,y} − 1/k) / (1 − 1/k), k = |Y_g|
//! - AHCA = unweighted mean of HCA over every (group, label) cell with N_{g,y} > 0
//! - PCS = mean per-label recall of the aggregate matrix

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageset::{GroupKey, Label};

/// Maps a coarse group to the labels coupled with it during training.
pub trait LabelHierarchy {
    fn num_labels(&self) -> usize;

    /// `Y_g`, or `None` when the key names no coarse node.
    fn subset(&self, group: &GroupKey) -> Option<Vec<Label>>;

    /// True for keys that combine valid coarse classes never coupled with
    /// each other (crossed test sets of deeper trees produce them). Such
    /// groups have no `Y_g` and are left out of HCA and containment.
    fn is_uncoupled(&self, _group: &GroupKey) -> bool {
        false
    }
}

/// An explicit group → subset table, for datasets without a coupling tree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetTable {
    pub num_labels: usize,
    pub subsets: BTreeMap<GroupKey, Vec<Label>>,
}

impl LabelHierarchy for SubsetTable {
    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn subset(&self, group: &GroupKey) -> Option<Vec<Label>> {
        self.subsets.get(group).cloned()
    }
}

/// One prediction with its group and ground truth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub group: GroupKey,
    pub truth: Label,
    pub predicted: Label,
}

/// Square count matrix, `[predicted][true]`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMatrix {
    n: usize,
    counts: Vec<u64>,
}

impl CountMatrix {
    pub fn zeros(n: usize) -> Self {
        CountMatrix {
            n,
            counts: vec![0; n * n],
        }
    }

    pub fn from_rows(rows: Vec<Vec<u64>>) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::data("confusion matrix must be square"));
        }
        Ok(CountMatrix {
            n,
            counts: rows.into_iter().flatten().collect(),
        })
    }

    pub fn size(&self) -> usize {
        self.n
    }

    pub fn get(&self, predicted: Label, truth: Label) -> u64 {
        self.counts[predicted as usize * self.n + truth as usize]
    }

    pub fn bump(&mut self, predicted: Label, truth: Label) {
        self.counts[predicted as usize * self.n + truth as usize] += 1;
    }

    /// N_y: samples with true label `truth`.
    pub fn column_sum(&self, truth: Label) -> u64 {
        (0..self.n).map(|p| self.get(p as Label, truth)).sum()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn add(&mut self, other: &CountMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.n).map(<[u64]>::to_vec).collect()
    }

    /// Most frequent prediction for `truth` (lowest label on ties) and its count.
    pub fn modal_prediction(&self, truth: Label) -> (Label, u64) {
        let mut best = (0, self.get(0, truth));
        for p in 1..self.n as Label {
            let c = self.get(p, truth);
            if c > best.1 {
                best = (p, c);
            }
        }
        best
    }

    /// CSV with rows = predicted label, columns = true label.
    pub fn to_csv(&self, header_comments: &[String]) -> String {
        let mut s = String::new();
        for c in header_comments {
            let _ = writeln!(s, "# {c}");
        }
        s.push_str("predicted\\true");
        for t in 0..self.n {
            let _ = write!(s, ",{t}");
        }
        s.push('\n');
        for (p, row) in self.rows().iter().enumerate() {
            let _ = write!(s, "{p}");
            for c in row {
                let _ = write!(s, ",{c}");
            }
            s.push('\n');
        }
        s
    }

    /// Parses [`CountMatrix::to_csv`] output; returns the matrix and the comment lines.
    pub fn from_csv(text: &str) -> Result<(Self, Vec<String>)> {
        let mut comments = Vec::new();
        let mut rows = Vec::new();
        let mut header_seen = false;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(c) = line.strip_prefix('#') {
                comments.push(c.trim().to_string());
                continue;
            }
            if !header_seen {
                header_seen = true;
                continue;
            }
            let row = line
                .split(',')
                .skip(1)
                .map(|v| v.trim().parse::<u64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| Error::data(format!("confusion csv line {}: {e}", lineno + 1)))?;
            rows.push(row);
        }
        Ok((CountMatrix::from_rows(rows)?, comments))
    }
}

/// Per-group count matrices plus their elementwise sum.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupedConfusionMatrix {
    num_labels: usize,
    groups: BTreeMap<GroupKey, CountMatrix>,
    aggregate: CountMatrix,
}

impl GroupedConfusionMatrix {
    pub fn empty(num_labels: usize) -> Self {
        GroupedConfusionMatrix {
            num_labels,
            groups: BTreeMap::new(),
            aggregate: CountMatrix::zeros(num_labels),
        }
    }

    pub fn from_groups(num_labels: usize, groups: BTreeMap<GroupKey, CountMatrix>) -> Result<Self> {
        let mut aggregate = CountMatrix::zeros(num_labels);
        for m in groups.values() {
            if m.size() != num_labels {
                return Err(Error::data("group matrix size differs from label count"));
            }
            aggregate.add(m);
        }
        Ok(GroupedConfusionMatrix {
            num_labels,
            groups: groups.into_iter().filter(|(_, m)| m.total() > 0).collect(),
            aggregate,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn groups(&self) -> &BTreeMap<GroupKey, CountMatrix> {
        &self.groups
    }

    pub fn group(&self, key: &GroupKey) -> Option<&CountMatrix> {
        self.groups.get(key)
    }

    pub fn aggregate(&self) -> &CountMatrix {
        &self.aggregate
    }

    /// Length of the group keys (0 when there are no groups).
    pub fn key_depth(&self) -> usize {
        self.groups.keys().next().map(GroupKey::depth).unwrap_or(0)
    }

    /// Merges groups by their first `depth` key entries.
    pub fn regroup(&self, depth: usize) -> Result<Self> {
        if self.groups.keys().any(|k| k.depth() < depth) {
            return Err(Error::spec(format!(
                "cannot regroup keys of depth {} at depth {depth}",
                self.key_depth()
            )));
        }
        let mut groups: BTreeMap<GroupKey, CountMatrix> = BTreeMap::new();
        for (k, m) in &self.groups {
            groups
                .entry(k.prefix(depth))
                .or_insert_with(|| CountMatrix::zeros(self.num_labels))
                .add(m);
        }
        Ok(GroupedConfusionMatrix {
            num_labels: self.num_labels,
            groups,
            aggregate: self.aggregate.clone(),
        })
    }

    fn at_depth(&self, depth: usize) -> Result<std::borrow::Cow<'_, Self>> {
        if self.groups.keys().all(|k| k.depth() == depth) {
            Ok(std::borrow::Cow::Borrowed(self))
        } else {
            Ok(std::borrow::Cow::Owned(self.regroup(depth)?))
        }
    }
}

/// Exact counts per group; groups without samples are absent.
pub fn confusion(num_labels: usize, records: &[Record]) -> Result<GroupedConfusionMatrix> {
    let mut groups: BTreeMap<GroupKey, CountMatrix> = BTreeMap::new();
    let mut aggregate = CountMatrix::zeros(num_labels);
    for r in records {
        for l in [r.truth, r.predicted] {
            if l as usize >= num_labels {
                return Err(Error::OutOfRange {
                    what: "label".into(),
                    index: l as usize,
                    len: num_labels,
                });
            }
        }
        groups
            .entry(r.group.clone())
            .or_insert_with(|| CountMatrix::zeros(num_labels))
            .bump(r.predicted, r.truth);
        aggregate.bump(r.predicted, r.truth);
    }
    Ok(GroupedConfusionMatrix {
        num_labels,
        groups,
        aggregate,
    })
}

/// Builds records from parallel slices.
pub fn records(groups: &[GroupKey], truth: &[Label], predicted: &[Label]) -> Vec<Record> {
    groups
        .iter()
        .zip(truth)
        .zip(predicted)
        .map(|((g, &t), &p)| Record {
            group: g.clone(),
            truth: t,
            predicted: p,
        })
        .collect()
}

fn subset_of(h: &dyn LabelHierarchy, group: &GroupKey) -> Result<Vec<Label>> {
    h.subset(group)
        .ok_or_else(|| Error::spec(format!("group {group} has no coupled label subset")))
}

fn hca_in(m: &CountMatrix, subset: &[Label], group: &GroupKey, y: Label) -> Result<f64> {
    let k = subset.len();
    if k < 2 {
        return Err(Error::spec(format!(
            "group {group} couples {k} label(s); HCA needs at least 2"
        )));
    }
    let n = m.column_sum(y);
    if n == 0 {
        return Err(Error::undefined(format!(
            "no samples with true label {y} in group {group}"
        )));
    }
    let max = subset.iter().map(|&p| m.get(p, y)).max().unwrap_or(0);
    let acc = max as f64 / n as f64;
    let chance = 1.0 / k as f64;
    Ok((acc - chance) / (1.0 - chance))
}

/// Chance-normalized modal accuracy within `Y_g` for true label `y`.
pub fn hca(
    cm: &GroupedConfusionMatrix,
    h: &dyn LabelHierarchy,
    group: &GroupKey,
    y: Label,
) -> Result<f64> {
    let cm = cm.at_depth(group.depth())?;
    let m = cm
        .group(group)
        .ok_or_else(|| Error::undefined(format!("group {group} has no samples")))?;
    let subset = subset_of(h, group)?;
    hca_in(m, &subset, group, y)
}

/// Every defined HCA cell at `depth`, in (group, label) order.
pub fn hca_cells(
    cm: &GroupedConfusionMatrix,
    h: &dyn LabelHierarchy,
    depth: usize,
) -> Result<Vec<(GroupKey, Label, f64)>> {
    let cm = cm.at_depth(depth)?;
    let mut out = Vec::new();
    for (g, m) in cm.groups() {
        if h.is_uncoupled(g) {
            continue;
        }
        let subset = subset_of(h, g)?;
        for y in 0..cm.num_labels() as Label {
            if m.column_sum(y) > 0 {
                out.push((g.clone(), y, hca_in(m, &subset, g, y)?));
            }
        }
    }
    Ok(out)
}

/// Unweighted mean HCA over all (group, label) cells with samples.
pub fn ahca(cm: &GroupedConfusionMatrix, h: &dyn LabelHierarchy, depth: usize) -> Result<f64> {
    let cells = hca_cells(cm, h, depth)?;
    if cells.is_empty() {
        return Err(Error::undefined("AHCA over zero cells"));
    }
    Ok(cells.iter().map(|c| c.2).sum::<f64>() / cells.len() as f64)
}

/// Mean per-label recall of the aggregate matrix.
pub fn pcs(cm: &GroupedConfusionMatrix) -> Result<f64> {
    let agg = cm.aggregate();
    let n = cm.num_labels();
    let mut sum = 0.0;
    for y in 0..n as Label {
        let ny = agg.column_sum(y);
        if ny == 0 {
            return Err(Error::undefined(format!("no samples with true label {y}")));
        }
        sum += agg.get(y, y) as f64 / ny as f64;
    }
    Ok(sum / n as f64)
}

/// Fraction of all samples whose predicted label shares the true label's
/// semantic group.
pub fn semantic_accuracy(cm: &GroupedConfusionMatrix, semantic: &[Vec<Label>]) -> Result<f64> {
    let n = cm.num_labels();
    let mut group_of = vec![None; n];
    for (gi, members) in semantic.iter().enumerate() {
        for &l in members {
            let slot = group_of.get_mut(l as usize).ok_or(Error::OutOfRange {
                what: "semantic label".into(),
                index: l as usize,
                len: n,
            })?;
            *slot = Some(gi);
        }
    }
    let agg = cm.aggregate();
    let (mut hit, mut total) = (0u64, 0u64);
    for t in 0..n {
        for p in 0..n {
            let c = agg.get(p as Label, t as Label);
            if c == 0 {
                continue;
            }
            let (gt, gp) = match (group_of[t], group_of[p]) {
                (Some(a), Some(b)) => (a, b),
                _ => {
                    let l = if group_of[t].is_none() { t } else { p };
                    return Err(Error::spec(format!("label {l} has no semantic group")));
                }
            };
            total += c;
            if gt == gp {
                hit += c;
            }
        }
    }
    if total == 0 {
        return Err(Error::undefined("semantic accuracy over zero samples"));
    }
    Ok(hit as f64 / total as f64)
}

/// Fraction of a group's predictions (over all true labels) inside `Y_g`.
pub fn containment(
    cm: &GroupedConfusionMatrix,
    h: &dyn LabelHierarchy,
    group: &GroupKey,
) -> Result<f64> {
    let cm = cm.at_depth(group.depth())?;
    let m = cm
        .group(group)
        .filter(|m| m.total() > 0)
        .ok_or_else(|| Error::undefined(format!("group {group} has no samples")))?;
    let subset = subset_of(h, group)?;
    let inside: u64 = subset
        .iter()
        .map(|&p| (0..m.size() as Label).map(|t| m.get(p, t)).sum::<u64>())
        .sum();
    Ok(inside as f64 / m.total() as f64)
}

/// Overall accuracy of the aggregate matrix.
pub fn accuracy(cm: &GroupedConfusionMatrix) -> f64 {
    let agg = cm.aggregate();
    let total = agg.total();
    if total == 0 {
        return 0.0;
    }
    let diag: u64 = (0..agg.size() as Label).map(|y| agg.get(y, y)).sum();
    diag as f64 / total as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HcaEntry {
    pub group: GroupKey,
    pub label: Label,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContainmentEntry {
    pub group: GroupKey,
    pub value: f64,
}

/// Metrics at one grouping depth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DepthMetrics {
    pub depth: usize,
    pub ahca: f64,
    pub hca: Vec<HcaEntry>,
    pub containment: Vec<ContainmentEntry>,
}

/// Everything computed from one grouped confusion matrix.
///
/// JSON schema: `{ "num_labels", "samples", "accuracy", "pcs"?,
/// "semantic_accuracy"?, "depths": [{ "depth", "ahca", "hca": [{ "group",
/// "label", "value" }], "containment": [{ "group", "value" }] }] }`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub num_labels: usize,
    pub samples: u64,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub pcs: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub semantic_accuracy: Option<f64>,
    pub depths: Vec<DepthMetrics>,
}

impl MetricsReport {
    pub fn ahca(&self, depth: usize) -> Option<f64> {
        self.depths.iter().find(|d| d.depth == depth).map(|d| d.ahca)
    }

    pub fn containment(&self, group: &GroupKey) -> Option<f64> {
        self.depths
            .iter()
            .flat_map(|d| &d.containment)
            .find(|c| &c.group == group)
            .map(|c| c.value)
    }
}

/// Computes the report for every requested depth.
pub fn report(
    cm: &GroupedConfusionMatrix,
    h: &dyn LabelHierarchy,
    depths: &[usize],
    semantic: Option<&[Vec<Label>]>,
) -> Result<MetricsReport> {
    let mut out = Vec::with_capacity(depths.len());
    for &depth in depths {
        let at = cm.at_depth(depth)?;
        let hca = hca_cells(&at, h, depth)?
            .into_iter()
            .map(|(group, label, value)| HcaEntry {
                group,
                label,
                value,
            })
            .collect::<Vec<_>>();
        if hca.is_empty() {
            return Err(Error::undefined("AHCA over zero cells"));
        }
        let ahca = hca.iter().map(|e| e.value).sum::<f64>() / hca.len() as f64;
        let containment = at
            .groups()
            .keys()
            .filter(|g| !h.is_uncoupled(g))
            .map(|g| {
                Ok(ContainmentEntry {
                    group: g.clone(),
                    value: containment(&at, h, g)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(DepthMetrics {
            depth,
            ahca,
            hca,
            containment,
        });
    }
    Ok(MetricsReport {
        num_labels: cm.num_labels(),
        samples: cm.aggregate().total(),
        accuracy: accuracy(cm),
        pcs: pcs(cm).ok(),
        semantic_accuracy: semantic.map(|s| semantic_accuracy(cm, s)).transpose()?,
        depths: out,
    })
}
