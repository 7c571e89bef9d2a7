//! Decision-path extraction and static exports (JSON, SVG).

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::tensor::Tensor;
use crate::tree::{num_branches, num_leaves, Side};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub i: usize,
    pub similarity: f64,
    pub to_left: f64,
    pub side: Side,
    pub patch_index: usize,
    /// Half-open `[start, end)` in raw timestamps, clipped to the
    /// unpadded series.
    pub span: [usize; 2],
    /// Matching signal the prototype slid over; kept for replay checks.
    #[serde(skip)]
    pub signal: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionPath {
    pub sample_id: usize,
    pub predicted: usize,
    #[serde(rename = "true")]
    pub true_class: usize,
    /// Hard path from the root, one record per level.
    pub nodes: Vec<NodeRecord>,
    pub rho: Vec<f64>,
    pub leaf_distribution: Vec<f64>,
}

/// Routing records for every branch node (heap order) plus the leaf
/// scores and final distribution of one instance.
pub struct FullTrace {
    pub branches: Vec<NodeRecord>,
    pub rho: Vec<f64>,
    pub leaf_probs: Vec<Vec<f64>>,
    pub distribution: Vec<f64>,
}

fn check_finite(model: &Model) -> Result<()> {
    for (_, name, t) in model.store.iter() {
        if !t.is_finite() {
            return Err(Error::Explain(format!("parameter {name} is not finite")));
        }
    }
    Ok(())
}

/// `values` is one channel-major `[C, L]` series (already normalized and
/// padded as during training); `raw_len` bounds the reported spans.
pub fn full_trace(model: &Model, values: &[f64], raw_len: usize) -> Result<FullTrace> {
    let tree = model
        .tree
        .as_ref()
        .ok_or_else(|| Error::Explain("model was trained without a tree".into()))?;
    check_finite(model)?;
    let c = model.config.num_channels;
    let len = values.len() / c;
    let width = model.config.encoder.patch_width();
    let mut tape = Tape::new();
    let x = Tensor::new(vec![1, c, len], values.to_vec())?;
    let f = model.forward(&mut tape, x)?;
    let trav = f.traversal.expect("tree present");
    let distribution = tape.data(f.probs).to_vec();
    if distribution.iter().any(|v| !v.is_finite()) {
        return Err(Error::Explain("prediction is not finite".into()));
    }
    let branches = trav
        .nodes
        .iter()
        .map(|n| {
            let to_left = tape.data(n.routing.to_left)[0];
            let to_right = tape.data(n.routing.to_right)[0];
            let j = n.routing.best_patch[0];
            let end = (width * (j + tree.proto_size)).min(raw_len);
            NodeRecord {
                i: n.index,
                similarity: tape.data(n.routing.similarity)[0],
                to_left,
                side: if to_left >= to_right { Side::Left } else { Side::Right },
                patch_index: j,
                span: [(width * j).min(end), end],
                signal: tape.data(n.signal).to_vec(),
            }
        })
        .collect();
    Ok(FullTrace {
        branches,
        rho: trav.path_scores(&tape).remove(0),
        leaf_probs: trav.leaves.iter().map(|&l| tape.data(l).to_vec()).collect(),
        distribution,
    })
}

impl FullTrace {
    /// Heap indices of the hard path, root first, ending at a leaf.
    pub fn hard_path(&self) -> Vec<usize> {
        let mut path = vec![1];
        let mut i = 1;
        while i <= self.branches.len() {
            i = match self.branches[i - 1].side {
                Side::Left => 2 * i,
                Side::Right => 2 * i + 1,
            };
            path.push(i);
        }
        path
    }
}

pub fn explain(model: &Model, values: &[f64], raw_len: usize, label: usize, sample_id: usize) -> Result<DecisionPath> {
    let trace = full_trace(model, values, raw_len)?;
    let path = trace.hard_path();
    let nodes = path[..path.len() - 1]
        .iter()
        .map(|&i| trace.branches[i - 1].clone())
        .collect();
    Ok(DecisionPath {
        sample_id,
        predicted: argmax(&trace.distribution),
        true_class: label,
        nodes,
        rho: trace.rho,
        leaf_distribution: trace.distribution,
    })
}

pub fn to_json(path: &DecisionPath) -> String {
    let mut s = serde_json::to_string_pretty(path).expect("decision path serializes");
    s.push('\n');
    s
}

pub fn from_json(text: &str) -> Result<DecisionPath> {
    Ok(serde_json::from_str(text)?)
}

pub fn export_json(path: &DecisionPath, file: &std::path::Path) -> Result<()> {
    std::fs::write(file, to_json(path))?;
    Ok(())
}

/// Figure geometry, in SVG user units.
pub mod layout {
    pub const MARGIN: f64 = 20.0;
    pub const PANEL_W: f64 = 180.0;
    pub const PANEL_H: f64 = 90.0;
    pub const H_GAP: f64 = 20.0;
    /// Vertical room between tree levels, holding the edge labels.
    pub const LEVEL_GAP: f64 = 50.0;
    pub const PLOT_PAD: f64 = 6.0;
    pub const LEAF_H: f64 = 36.0;
    /// Title line above each instance's tree.
    pub const TITLE_H: f64 = 24.0;

    pub fn tree_width(depth: usize) -> f64 {
        (1usize << (depth - 1)) as f64 * (PANEL_W + H_GAP)
    }

    pub fn tree_height(depth: usize) -> f64 {
        TITLE_H + depth as f64 * (PANEL_H + LEVEL_GAP) + LEAF_H + MARGIN
    }

    /// Top-left corner of the panel for heap node `index` of instance
    /// number `row`.
    pub fn panel_origin(index: usize, depth: usize, row: usize) -> (f64, f64) {
        let level = usize::BITS as usize - 1 - index.leading_zeros() as usize;
        let pos = index - (1 << level);
        let slot = tree_width(depth) / (1usize << level) as f64;
        let cx = MARGIN + (pos as f64 + 0.5) * slot;
        let y = MARGIN + row as f64 * tree_height(depth) + TITLE_H + level as f64 * (PANEL_H + LEVEL_GAP);
        (cx - PANEL_W / 2.0, y)
    }

    pub fn leaf_center_x(leaf: usize, depth: usize) -> f64 {
        let pos = leaf - (1 << depth);
        let slot = tree_width(depth) / (1usize << depth) as f64;
        MARGIN + (pos as f64 + 0.5) * slot
    }

    /// Top of the leaf-label row of instance number `row`.
    pub fn leaf_top(depth: usize, row: usize) -> f64 {
        MARGIN + row as f64 * tree_height(depth) + TITLE_H + depth as f64 * (PANEL_H + LEVEL_GAP)
    }

    /// Horizontal position of timestamp `t` (may equal `len`) in a panel.
    pub fn time_x(panel_left: f64, t: usize, len: usize) -> f64 {
        panel_left + PLOT_PAD + t as f64 * (PANEL_W - 2.0 * PLOT_PAD) / len.max(1) as f64
    }
}

const SERIES_COLORS: [&str; 6] = ["#1f77b4", "#2ca02c", "#9467bd", "#8c564b", "#17becf", "#7f7f7f"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// One instance to draw: raw (unnormalized, unpadded) series for the
/// panels and the model input used to trace it.
pub struct FigureInput<'a> {
    pub sample_id: usize,
    pub raw: &'a [f64],
    pub raw_len: usize,
    pub model_input: &'a [f64],
}

/// Draws one tree per instance, stacked vertically. Every branch panel
/// shows the series with the best-matching window shaded orange; edges
/// carry routing probabilities and the hard path is drawn bold.
pub fn render_tree_svg(model: &Model, inputs: &[FigureInput<'_>], class_names: &[String]) -> Result<String> {
    use layout::*;
    if inputs.is_empty() {
        return Err(Error::Explain("no instances to draw".into()));
    }
    let depth = model.config.tree.depth;
    let c = model.config.num_channels;
    let width = 2.0 * MARGIN + tree_width(depth);
    let height = MARGIN + inputs.len() as f64 * tree_height(depth);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#);

    for (row, inp) in inputs.iter().enumerate() {
        let trace = full_trace(model, inp.model_input, inp.raw_len)?;
        let hard = trace.hard_path();
        let predicted = argmax(&trace.distribution);
        let title_y = MARGIN + row as f64 * tree_height(depth) + 14.0;
        let _ = writeln!(
            s,
            r#"<text x="{MARGIN}" y="{title_y}" font-weight="bold">sample {}: predicted {}</text>"#,
            inp.sample_id,
            escape(class_names.get(predicted).map_or("?", String::as_str))
        );
        let _ = writeln!(s, r#"<g id="sample-{}">"#, inp.sample_id);

        let len = inp.raw_len.max(1);
        let raw_stride = inp.raw.len() / c;
        let (lo, hi) = (0..c)
            .flat_map(|ch| inp.raw[ch * raw_stride..ch * raw_stride + len].iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = if hi > lo { hi - lo } else { 1.0 };

        for idx in 1..=num_branches(depth) {
            let rec = &trace.branches[idx - 1];
            let (px, py) = panel_origin(idx, depth, row);
            let _ = writeln!(
                s,
                r##"<g class="branch-panel" id="panel-s{}-node-{idx}"><rect x="{px}" y="{py}" width="{PANEL_W}" height="{PANEL_H}" fill="#fafafa" stroke="#444"/>"##,
                inp.sample_id
            );
            let (x0, x1) = (time_x(px, rec.span[0], len), time_x(px, rec.span[1], len));
            let _ = writeln!(
                s,
                r##"<rect id="span-s{}-node-{idx}" x="{x0}" y="{py}" width="{}" height="{PANEL_H}" fill="#ff7f0e" fill-opacity="0.35"/>"##,
                inp.sample_id,
                x1 - x0
            );
            for ch in 0..c {
                let series = &inp.raw[ch * raw_stride..ch * raw_stride + len];
                let pts: Vec<String> = series
                    .iter()
                    .enumerate()
                    .map(|(t, &v)| {
                        let x = time_x(px, t, len);
                        let y = py + PLOT_PAD + (hi - v) / range * (PANEL_H - 2.0 * PLOT_PAD);
                        format!("{x:.2},{y:.2}")
                    })
                    .collect();
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{}" stroke-width="0.8" points="{}"/>"#,
                    SERIES_COLORS[ch % SERIES_COLORS.len()],
                    pts.join(" ")
                );
            }
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}">node {idx}  sim {:.3}</text></g>"#,
                px + 4.0,
                py + PANEL_H + 13.0,
                rec.similarity
            );

            for (child, prob) in [(2 * idx, rec.to_left), (2 * idx + 1, 1.0 - rec.to_left)] {
                let on_path = hard.contains(&idx) && hard.contains(&child);
                let (cx, cy) = if child <= num_branches(depth) {
                    let (x, y) = panel_origin(child, depth, row);
                    (x + PANEL_W / 2.0, y)
                } else {
                    (leaf_center_x(child, depth), leaf_top(depth, row))
                };
                let (sx, sy) = (px + PANEL_W / 2.0, py + PANEL_H + 16.0);
                let _ = writeln!(
                    s,
                    r##"<line class="edge" x1="{sx}" y1="{sy}" x2="{cx}" y2="{cy}" stroke="#333" stroke-width="{}"/>"##,
                    if on_path { 2.5 } else { 0.8 }
                );
                let _ = writeln!(
                    s,
                    r#"<text class="edge-label" x="{}" y="{}" text-anchor="middle">{prob:.3}</text>"#,
                    (sx + cx) / 2.0,
                    (sy + cy) / 2.0
                );
            }
        }

        for j in 0..num_leaves(depth) {
            let leaf = num_leaves(depth) + j;
            let cls = argmax(&trace.leaf_probs[j]);
            let y = leaf_top(depth, row);
            let weight = if hard.last() == Some(&leaf) { "bold" } else { "normal" };
            let _ = writeln!(
                s,
                r#"<text class="leaf-label" x="{}" y="{}" text-anchor="middle" font-weight="{weight}">{} ({:.3})</text>"#,
                leaf_center_x(leaf, depth),
                y + 14.0,
                escape(class_names.get(cls).map_or("?", String::as_str)),
                trace.rho[j]
            );
        }
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}
