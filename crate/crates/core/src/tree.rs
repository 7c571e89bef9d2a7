//! Perfect binary tree of prototypes with soft, differentiable routing.
//!
//! Nodes use heap addressing: the root is 1 and node `i` has children
//! `2i` (left) and `2i + 1` (right). For depth `d` the branch nodes are
//! `1..2^d` and the leaves `2^d..2^(d+1)`, the leftmost leaf being `2^d`.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_apply, AttentionParams};
use crate::autodiff::{Padding, Tape, Var, Window};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

/// Guards the pole of the log similarity at zero distance.
pub const SIMILARITY_EPS: f64 = 1e-4;

/// Initial offset of the matching signal. Prototypes start in (0, 1);
/// starting the signal below that range keeps the initial best-match
/// similarities under the clamp ceiling of 1, where routing still has a
/// gradient.
pub const PROJECTION_BIAS_INIT: f64 = -1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TreeConfig {
    pub depth: usize,
    /// Prototype length `k`, in patch positions.
    pub proto_size: usize,
    pub attention_kernel: usize,
}

impl Default for TreeConfig {
    fn default() -> Self {
        Self {
            depth: 3,
            proto_size: 3,
            attention_kernel: 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Left,
    Right,
}

pub fn num_leaves(depth: usize) -> usize {
    1 << depth
}

pub fn num_branches(depth: usize) -> usize {
    (1 << depth) - 1
}

pub fn is_leaf(index: usize, depth: usize) -> bool {
    index >= num_leaves(depth)
}

/// Branch decisions from the root down to heap node `index`.
pub fn path_to(index: usize) -> Vec<(usize, Side)> {
    let mut path = Vec::new();
    let mut i = index;
    while i > 1 {
        let side = if i.is_multiple_of(2) { Side::Left } else { Side::Right };
        path.push((i / 2, side));
        i /= 2;
    }
    path.reverse();
    path
}

#[derive(Debug, Clone)]
pub struct BranchNode {
    pub index: usize,
    /// Position in a depth-first, left-first enumeration of all nodes.
    pub preorder: usize,
    pub edge_left: AttentionParams,
    pub edge_right: AttentionParams,
}

#[derive(Debug, Clone)]
pub struct LeafNode {
    pub index: usize,
    pub preorder: usize,
    pub classifier: Linear,
}

#[derive(Debug, Clone)]
pub struct TreeParams {
    pub depth: usize,
    pub proto_size: usize,
    /// `[num_branches, k]`; row `i - 1` belongs to branch `i`.
    pub prototypes: ParamId,
    /// Maps each `D`-dim patch feature to one scalar so prototypes can
    /// slide over patch positions.
    pub projection: Linear,
    pub branches: Vec<BranchNode>,
    pub leaves: Vec<LeafNode>,
}

enum Built {
    Branch(usize, usize),
    Leaf(usize, usize),
}

/// Depth-first construction: a subtree rooted at preorder index `pre`
/// puts its left subtree at `pre + 1` and its right subtree right after
/// the left one ends. Returns the subtree size.
fn build(pre: usize, heap: usize, level: usize, depth: usize, out: &mut Vec<Built>) -> usize {
    if level == depth {
        out.push(Built::Leaf(heap, pre));
        return 1;
    }
    out.push(Built::Branch(heap, pre));
    let left = build(pre + 1, 2 * heap, level + 1, depth, out);
    let right = build(pre + left + 1, 2 * heap + 1, level + 1, depth, out);
    left + right + 1
}

/// `(heap index, preorder index)` for every node, in preorder.
pub fn preorder_layout(depth: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    build(0, 1, 0, depth, &mut out);
    out.into_iter()
        .map(|b| match b {
            Built::Branch(h, p) | Built::Leaf(h, p) => (h, p),
        })
        .collect()
}

impl TreeParams {
    pub fn register(store: &mut ParamStore, cfg: &TreeConfig, embed_dim: usize, classes: usize, seed: u64) -> Result<Self> {
        if cfg.depth == 0 {
            return Err(Error::DegenerateTree);
        }
        if cfg.proto_size == 0 {
            return Err(Error::Config("tree.proto_size must be positive".into()));
        }
        let d = cfg.depth;
        let name = "tree.prototypes".to_string();
        let mut r = rng::stream(seed, rng::name_hash(&name));
        let prototypes = store.insert(name, rng::uniform(&[num_branches(d), cfg.proto_size], 0.0, 1.0, &mut r));
        let projection = Linear::register(store, "tree.projection", embed_dim, 1, seed);
        store.get_mut(projection.bias).data_mut()[0] = PROJECTION_BIAS_INIT;

        let mut built = Vec::new();
        build(0, 1, 0, d, &mut built);
        let mut branches = Vec::new();
        let mut leaves = Vec::new();
        for b in &built {
            if let Built::Branch(heap, pre) = *b {
                branches.push((heap, pre));
            } else if let Built::Leaf(heap, pre) = *b {
                leaves.push((heap, pre));
            }
        }
        branches.sort_unstable();
        leaves.sort_unstable();
        let a = cfg.attention_kernel;
        let branches = branches
            .into_iter()
            .map(|(index, preorder)| {
                Ok(BranchNode {
                    index,
                    preorder,
                    edge_left: AttentionParams::register(store, &format!("tree.node{index}.left"), a, seed)?,
                    edge_right: AttentionParams::register(store, &format!("tree.node{index}.right"), a, seed)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let leaves = leaves
            .into_iter()
            .map(|(index, preorder)| LeafNode {
                index,
                preorder,
                classifier: Linear::register(store, &format!("tree.leaf{index}"), embed_dim, classes, seed),
            })
            .collect();
        Ok(Self {
            depth: d,
            proto_size: cfg.proto_size,
            prototypes,
            projection,
            branches,
            leaves,
        })
    }

    pub fn branch(&self, index: usize) -> &BranchNode {
        &self.branches[index - 1]
    }

    pub fn leaf(&self, index: usize) -> &LeafNode {
        &self.leaves[index - num_leaves(self.depth)]
    }

    /// Prototype of branch `index` as a `[1, 1, k]` tape value.
    pub fn prototype(&self, tape: &mut Tape, store: &ParamStore, index: usize) -> Result<Var> {
        let all = tape.param(store, self.prototypes);
        let row = tape.index_select(all, 0, &[index - 1])?;
        tape.reshape(row, &[1, 1, self.proto_size])
    }
}

/// `[B, D, P]` node feature → `[B, 1, P]` matching signal.
pub fn project_signal(tape: &mut Tape, store: &ParamStore, projection: &Linear, feature: Var) -> Result<Var> {
    let ft = tape.transpose(feature)?;
    let s = projection.forward(tape, store, ft)?;
    tape.transpose(s)
}

/// Sliding L2 distance between `signal: [B, 1, P]` and `proto: [1, 1, k]`
/// expanded as `Σz² + Σp² − 2 z⋆p`, clipped at zero before the root.
pub fn proto_l2_distance_map(tape: &mut Tape, signal: Var, proto: Var) -> Result<Var> {
    let k = tape.shape(proto)[2];
    let sq = tape.mul(signal, signal)?;
    let ones = tape.constant(Tensor::full(&[1, 1, k], 1.0));
    let window_sq = tape.conv1d(sq, ones, Padding::Valid)?;
    let psq = tape.mul(proto, proto)?;
    let psq = tape.sum(psq);
    let psq = tape.reshape(psq, &[1, 1, 1])?;
    let dot = tape.conv1d(signal, proto, Padding::Valid)?;
    let dot2 = tape.scale(dot, 2.0);
    let d2 = tape.add(window_sq, psq)?;
    let d2 = tape.sub(d2, dot2)?;
    let d2 = tape.relu(d2);
    tape.sqrt(d2)
}

/// `log(1 + 1/(d + ε))`, computed as `log(d + ε + 1) − log(d + ε)`.
pub fn similarity_map(tape: &mut Tape, distances: Var) -> Result<Var> {
    let shifted = tape.add_scalar(distances, SIMILARITY_EPS);
    let num = tape.add_scalar(shifted, 1.0);
    let a = tape.log(num)?;
    let b = tape.log(shifted)?;
    tape.sub(a, b)
}

pub struct Routing {
    /// Global max similarity, `[B, 1, 1]`.
    pub similarity: Var,
    pub to_left: Var,
    pub to_right: Var,
    /// Start position of the best-matching window per sample.
    pub best_patch: Vec<usize>,
}

pub fn routing(tape: &mut Tape, similarity: Var) -> Result<Routing> {
    let best = tape.maxpool1d(similarity, Window::Global)?;
    let best_patch = tape.pool_argmax(best).expect("maxpool node");
    let to_left = tape.clamp(best, 0.0, 1.0);
    let to_right = tape.rsub_scalar(1.0, to_left);
    Ok(Routing {
        similarity: best,
        to_left,
        to_right,
        best_patch,
    })
}

pub fn edge_transform(
    tape: &mut Tape,
    store: &ParamStore,
    branch: &BranchNode,
    side: Side,
    feature: Var,
    use_attention: bool,
) -> Result<Var> {
    if !use_attention {
        return Ok(feature);
    }
    let p = match side {
        Side::Left => &branch.edge_left,
        Side::Right => &branch.edge_right,
    };
    attention_apply(tape, store, p, feature)
}

/// Class distribution at a leaf: `softmax(classifier(maxpool(z)) + logits)`.
pub fn leaf_predict(tape: &mut Tape, store: &ParamStore, leaf: &LeafNode, feature: Var, logits: Var) -> Result<Var> {
    let s = tape.shape(feature).to_vec();
    let pooled = tape.maxpool1d(feature, Window::Global)?;
    let pooled = tape.reshape(pooled, &[s[0], s[1]])?;
    let scores = leaf.classifier.forward(tape, store, pooled)?;
    let scores = tape.add(scores, logits)?;
    tape.softmax(scores, 1)
}

pub struct NodeTrace {
    pub index: usize,
    /// `[B, 1, P]` signal the prototype was matched against.
    pub signal: Var,
    pub routing: Routing,
}

pub struct Traversal {
    /// `[B, M]` mixture of leaf distributions.
    pub y_hat: Var,
    /// Branch traces in heap order (`nodes[i - 1]` is node `i`).
    pub nodes: Vec<NodeTrace>,
    /// `[B, M]` leaf distributions, leftmost leaf first.
    pub leaves: Vec<Var>,
}

impl Traversal {
    pub fn node(&self, index: usize) -> &NodeTrace {
        &self.nodes[index - 1]
    }

    /// Cumulative routing score of every leaf: `rho[b][leaf]`, the
    /// product of the routing probabilities along its root path.
    pub fn path_scores(&self, tape: &Tape) -> Vec<Vec<f64>> {
        let depth = self.leaves.len().trailing_zeros() as usize;
        let batch = tape.shape(self.y_hat)[0];
        (0..batch)
            .map(|b| {
                (0..self.leaves.len())
                    .map(|j| {
                        path_to(num_leaves(depth) + j)
                            .iter()
                            .map(|&(i, side)| {
                                let r = &self.node(i).routing;
                                let v = match side {
                                    Side::Left => r.to_left,
                                    Side::Right => r.to_right,
                                };
                                tape.data(v)[b]
                            })
                            .product()
                    })
                    .collect()
            })
            .collect()
    }

    /// `Σ_l ρ_l · g_l` built from explicit path products on the tape.
    pub fn flat_mixture(&self, tape: &mut Tape) -> Result<Var> {
        let depth = self.leaves.len().trailing_zeros() as usize;
        let batch = tape.shape(self.y_hat)[0];
        let mut total = None;
        for (j, &g) in self.leaves.iter().enumerate() {
            let mut rho = None;
            for (i, side) in path_to(num_leaves(depth) + j) {
                let r = &self.node(i).routing;
                let step = match side {
                    Side::Left => r.to_left,
                    Side::Right => r.to_right,
                };
                rho = Some(match rho {
                    None => step,
                    Some(acc) => tape.mul(acc, step)?,
                });
            }
            let rho = tape.reshape(rho.expect("depth >= 1"), &[batch, 1])?;
            let term = tape.mul(rho, g)?;
            total = Some(match total {
                None => term,
                Some(acc) => tape.add(acc, term)?,
            });
        }
        Ok(total.expect("at least two leaves"))
    }
}

/// Soft descent from the root. The root sees `sigmoid(z₀)`; each child
/// sees its parent's feature after that edge's attention transform, and
/// each branch returns `to_left · left + to_right · right`.
pub fn traverse(
    tape: &mut Tape,
    store: &ParamStore,
    tree: &TreeParams,
    patches: Var,
    logits: Var,
    use_attention: bool,
) -> Result<Traversal> {
    let squashed = tape.sigmoid(patches);
    let root = tape.transpose(squashed)?;
    let mut nodes: Vec<Option<NodeTrace>> = (0..num_branches(tree.depth)).map(|_| None).collect();
    let mut leaves: Vec<Option<Var>> = vec![None; num_leaves(tree.depth)];
    let y_hat = descend(
        tape,
        store,
        tree,
        1,
        root,
        logits,
        use_attention,
        &mut nodes,
        &mut leaves,
    )?;
    Ok(Traversal {
        y_hat,
        nodes: nodes.into_iter().map(|n| n.expect("every branch visited")).collect(),
        leaves: leaves.into_iter().map(|l| l.expect("every leaf visited")).collect(),
    })
}

#[allow(clippy::too_many_arguments)]
fn descend(
    tape: &mut Tape,
    store: &ParamStore,
    tree: &TreeParams,
    index: usize,
    feature: Var,
    logits: Var,
    use_attention: bool,
    nodes: &mut [Option<NodeTrace>],
    leaves: &mut [Option<Var>],
) -> Result<Var> {
    if is_leaf(index, tree.depth) {
        let g = leaf_predict(tape, store, tree.leaf(index), feature, logits)?;
        leaves[index - num_leaves(tree.depth)] = Some(g);
        return Ok(g);
    }
    let branch = tree.branch(index);
    let signal = project_signal(tape, store, &tree.projection, feature)?;
    let proto = tree.prototype(tape, store, index)?;
    let dist = proto_l2_distance_map(tape, signal, proto)?;
    let sim = similarity_map(tape, dist)?;
    let r = routing(tape, sim)?;
    let batch = tape.shape(feature)[0];
    let to_left = tape.reshape(r.to_left, &[batch, 1])?;
    let to_right = tape.reshape(r.to_right, &[batch, 1])?;
    nodes[index - 1] = Some(NodeTrace {
        index,
        signal,
        routing: r,
    });

    let left_in = edge_transform(tape, store, branch, Side::Left, feature, use_attention)?;
    let left = descend(tape, store, tree, 2 * index, left_in, logits, use_attention, nodes, leaves)?;
    let right_in = edge_transform(tape, store, branch, Side::Right, feature, use_attention)?;
    let right = descend(tape, store, tree, 2 * index + 1, right_in, logits, use_attention, nodes, leaves)?;
    let l = tape.mul(to_left, left)?;
    let r = tape.mul(to_right, right)?;
    tape.add(l, r)
}
