//! The decision tree a trained network implicitly follows, read off its
//! grouped confusion matrices.
//!
//! Coarse nodes mirror the coupling tree and carry the share of their group's
//! predictions that land inside the coupled label subset. Under each deepest
//! coarse node sits one leaf per true label with samples: the modal predicted
//! label (over all labels, so leakage outside the subset stays visible) and
//! its share of N_{g,y}.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::coupling::CouplingTree;
use crate::error::{Error, Result};
use crate::evaluation::{containment, GroupedConfusionMatrix, LabelHierarchy};
use crate::imageset::{GroupKey, Label};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub truth: Label,
    /// Whether `truth` belongs to the node's coupled subset.
    pub coupled: bool,
    pub modal: Label,
    pub fraction: f64,
    pub samples: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoarseNode {
    pub level: usize,
    pub class_id: u32,
    pub name: String,
    pub key: GroupKey,
    pub subset: Vec<Label>,
    pub containment: f64,
    pub samples: u64,
    pub children: Vec<CoarseNode>,
    pub leaves: Vec<Leaf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub label_names: Vec<String>,
    pub roots: Vec<CoarseNode>,
}

impl DecisionTree {
    /// Depth-first iteration over coarse nodes.
    pub fn nodes(&self) -> Vec<&CoarseNode> {
        fn walk<'a>(n: &'a CoarseNode, out: &mut Vec<&'a CoarseNode>) {
            out.push(n);
            for c in &n.children {
                walk(c, out);
            }
        }
        let mut out = Vec::new();
        for r in &self.roots {
            walk(r, &mut out);
        }
        out
    }

    pub fn find(&self, key: &GroupKey) -> Option<&CoarseNode> {
        self.nodes().into_iter().find(|n| &n.key == key)
    }
}

impl CoarseNode {
    pub fn leaf(&self, truth: Label) -> Option<&Leaf> {
        self.leaves.iter().find(|l| l.truth == truth)
    }
}

/// Builds the tree from matrices grouped at the full coarse depth.
pub fn infer_tree(cm: &GroupedConfusionMatrix, tree: &CouplingTree) -> Result<DecisionTree> {
    let full = tree.coarse_depth();
    if cm.groups().is_empty() {
        return Err(Error::undefined("no groups to build a tree from"));
    }
    if cm.groups().keys().any(|k| k.depth() != full) {
        return Err(Error::spec(format!(
            "tree inference needs groups keyed by all {full} coarse levels"
        )));
    }
    let by_depth = (1..=full)
        .map(|d| cm.regroup(d))
        .collect::<Result<Vec<_>>>()?;

    fn build(
        prefix: Vec<u32>,
        tree: &CouplingTree,
        by_depth: &[GroupedConfusionMatrix],
    ) -> Result<CoarseNode> {
        let depth = prefix.len();
        let level = depth - 1;
        let key = GroupKey(prefix.clone());
        let at = &by_depth[depth - 1];
        let m = at
            .group(&key)
            .ok_or_else(|| Error::undefined(format!("group {key} has no samples")))?;
        let subset = tree.subset(&key).unwrap_or_default();
        let mut node = CoarseNode {
            level,
            class_id: prefix[level],
            name: tree.class_name(level, prefix[level]),
            key: key.clone(),
            subset: subset.clone(),
            containment: containment(at, tree, &key)?,
            samples: m.total(),
            children: Vec::new(),
            leaves: Vec::new(),
        };
        if depth < tree.coarse_depth() {
            for child in tree.children(&prefix) {
                let mut p = prefix.clone();
                p.push(child);
                node.children.push(build(p, tree, by_depth)?);
            }
        } else {
            for y in 0..at.num_labels() as Label {
                let n = m.column_sum(y);
                if n == 0 {
                    continue;
                }
                let (modal, count) = m.modal_prediction(y);
                node.leaves.push(Leaf {
                    truth: y,
                    coupled: subset.contains(&y),
                    modal,
                    fraction: count as f64 / n as f64,
                    samples: n,
                });
            }
        }
        Ok(node)
    }

    let roots = tree
        .children(&[])
        .into_iter()
        .map(|c| build(vec![c], tree, &by_depth))
        .collect::<Result<Vec<_>>>()?;
    Ok(DecisionTree {
        label_names: (0..tree.num_labels() as Label)
            .map(|l| tree.label_name(l))
            .collect(),
        roots,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TreeFormat {
    Text,
    Dot,
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn node_id(prefix: &str, key: &GroupKey) -> String {
    let parts: Vec<String> = key.0.iter().map(u32::to_string).collect();
    format!("{prefix}_{}", parts.join("_"))
}

fn escape(s: &str) -> String {
    s.replace('\\', "\\\\").replace('"', "\\\"")
}

impl DecisionTree {
    fn subset_names(&self, subset: &[Label]) -> String {
        let names: Vec<&str> = subset
            .iter()
            .map(|&l| self.label_names[l as usize].as_str())
            .collect();
        format!("{{{}}}", names.join(", "))
    }

    fn name(&self, l: Label) -> &str {
        &self.label_names[l as usize]
    }
}

/// Deterministic plain-text or DOT rendering. `comments` go to the top as
/// `#`/`//` lines.
pub fn render_tree(t: &DecisionTree, format: TreeFormat, comments: &[String]) -> String {
    match format {
        TreeFormat::Text => render_text(t, comments),
        TreeFormat::Dot => render_dot(t, comments),
    }
}

fn render_text(t: &DecisionTree, comments: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        let _ = writeln!(s, "# {c}");
    }
    fn walk(t: &DecisionTree, n: &CoarseNode, indent: usize, s: &mut String) {
        let pad = "  ".repeat(indent);
        let _ = writeln!(
            s,
            "{pad}{} -> {} within {} (n={})",
            n.name,
            pct(n.containment),
            t.subset_names(&n.subset),
            n.samples
        );
        for c in &n.children {
            walk(t, c, indent + 1, s);
        }
        for l in &n.leaves {
            let _ = writeln!(
                s,
                "{pad}  {}true {} -> {} {}",
                if l.coupled { "" } else { "[off-subset] " },
                t.name(l.truth),
                t.name(l.modal),
                pct(l.fraction)
            );
        }
    }
    for r in &t.roots {
        walk(t, r, 0, &mut s);
    }
    s
}

fn render_dot(t: &DecisionTree, comments: &[String]) -> String {
    let mut s = String::new();
    for c in comments {
        let _ = writeln!(s, "// {c}");
    }
    s.push_str("digraph decision_tree {\n");
    s.push_str("  rankdir=TB;\n  node [shape=box, fontname=\"Helvetica\"];\n");
    s.push_str("  root [label=\"input\", shape=ellipse];\n");
    fn walk(t: &DecisionTree, n: &CoarseNode, parent: &str, s: &mut String) {
        let id = node_id("n", &n.key);
        let _ = writeln!(
            s,
            "  {id} [label=\"{}\\n{} within {}\"];",
            escape(&n.name),
            pct(n.containment),
            escape(&t.subset_names(&n.subset))
        );
        let _ = writeln!(s, "  {parent} -> {id};");
        for c in &n.children {
            walk(t, c, &id, s);
        }
        for l in &n.leaves {
            let (prefix, style) = if l.coupled {
                ("c", "")
            } else {
                ("x", ", style=dashed")
            };
            let mut key = n.key.clone();
            key.0.push(l.truth);
            let lid = node_id(prefix, &key);
            let _ = writeln!(
                s,
                "  {lid} [label=\"true {}\\n-> {} {}\"{style}];",
                escape(t.name(l.truth)),
                escape(t.name(l.modal)),
                pct(l.fraction)
            );
            let _ = writeln!(s, "  {id} -> {lid} [label=\"{}\"{style}];", pct(l.fraction));
        }
    }
    for r in &t.roots {
        walk(t, r, "root", &mut s);
    }
    s.push_str("}\n");
    s
}
