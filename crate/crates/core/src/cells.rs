//! Searchable mixed-operation cells and their discretized genotypes.
//!
//! A cell is a five-node acyclic graph: node 0 is the input and every later
//! node receives one edge from each of its predecessors, giving ten edges.
//! Each edge carries a softmax-weighted mixture over seven shape-preserving
//! candidate operators; the mixture logits are the architecture parameters
//! `alpha`, stored separately from the operator weights so the two can be
//! optimized by different loops.
//!
//! Forward evaluation is read-only with respect to parameters and may run
//! concurrently across inputs; the training loop is the single writer.

use std::fmt;
use std::str::FromStr;

use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::params::{kaiming_uniform, ParamStore};
use crate::tensor::Tensor;

/// Number of nodes in a communal cell.
pub const CELL_NODES: usize = 5;
/// Fully connected predecessor structure: 4 + 3 + 2 + 1 edges.
pub const CELL_EDGES: usize = 10;
/// Instance-norm epsilon used inside candidate operators.
pub const NORM_EPS: f64 = 1e-5;

/// The seven candidate operators. All preserve spatial size and channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CandidateOp {
    Skip,
    AvgPool,
    MaxPool,
    SepConv3,
    SepConv5,
    DilConv3,
    DilConv5,
}

pub const CANDIDATE_OPS: [CandidateOp; 7] = [
    CandidateOp::Skip,
    CandidateOp::AvgPool,
    CandidateOp::MaxPool,
    CandidateOp::SepConv3,
    CandidateOp::SepConv5,
    CandidateOp::DilConv3,
    CandidateOp::DilConv5,
];

impl CandidateOp {
    pub fn index(&self) -> usize {
        CANDIDATE_OPS.iter().position(|o| o == self).unwrap()
    }

    /// (kernel size, dilation) for the convolution operators.
    pub fn kernel(&self) -> Option<(usize, usize)> {
        match self {
            CandidateOp::SepConv3 => Some((3, 1)),
            CandidateOp::SepConv5 => Some((5, 1)),
            CandidateOp::DilConv3 => Some((3, 2)),
            CandidateOp::DilConv5 => Some((5, 2)),
            _ => None,
        }
    }
}

impl fmt::Display for CandidateOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CandidateOp::Skip => "skip",
            CandidateOp::AvgPool => "avg_pool",
            CandidateOp::MaxPool => "max_pool",
            CandidateOp::SepConv3 => "sep_conv_3",
            CandidateOp::SepConv5 => "sep_conv_5",
            CandidateOp::DilConv3 => "dil_conv_3",
            CandidateOp::DilConv5 => "dil_conv_5",
        };
        f.write_str(s)
    }
}

impl FromStr for CandidateOp {
    type Err = CoreError;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "skip" => CandidateOp::Skip,
            "avg_pool" => CandidateOp::AvgPool,
            "max_pool" => CandidateOp::MaxPool,
            "sep_conv_3" => CandidateOp::SepConv3,
            "sep_conv_5" => CandidateOp::SepConv5,
            "dil_conv_3" => CandidateOp::DilConv3,
            "dil_conv_5" => CandidateOp::DilConv5,
            other => {
                return Err(CoreError::Parse {
                    what: "candidate op".into(),
                    reason: format!("unknown operator '{other}'"),
                })
            }
        })
    }
}

/// The `(from, to)` pairs of the ten cell edges, ordered by target node then
/// source node. This ordering defines row `e` of the `[10, 7]` alpha matrix.
pub fn cell_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(CELL_EDGES);
    for to in 1..CELL_NODES {
        for from in 0..to {
            edges.push((from, to));
        }
    }
    edges
}

/// Handle to one mixed cell's parameters inside a [`ParamStore`].
///
/// Parameter names are `"<prefix>.alpha"` for the `[10, 7]` architecture
/// logits and `"<prefix>.e<edge>.<op>.dw"` / `".pw"` for the separable
/// convolution weights on each edge.
#[derive(Debug, Clone)]
pub struct MixedCell {
    pub prefix: String,
    pub channels: usize,
}

impl MixedCell {
    /// Registers all parameters for a cell with `channels` channels.
    ///
    /// Convolution weights are Kaiming-initialized from `rng`; alpha starts
    /// at zero, which makes every mixture uniform.
    pub fn init(store: &mut ParamStore, prefix: &str, channels: usize, rng: &mut ChaCha8Rng) -> Self {
        store.insert(&format!("{prefix}.alpha"), Tensor::zeros(&[CELL_EDGES, 7]));
        for e in 0..CELL_EDGES {
            for op in CANDIDATE_OPS {
                if let Some((k, _)) = op.kernel() {
                    let dw = kaiming_uniform(rng, &[channels, 1, k, k], k * k);
                    store.insert(&format!("{prefix}.e{e}.{op}.dw"), dw);
                    let pw = kaiming_uniform(rng, &[channels, channels, 1, 1], channels);
                    store.insert(&format!("{prefix}.e{e}.{op}.pw"), pw);
                }
            }
        }
        MixedCell {
            prefix: prefix.to_string(),
            channels,
        }
    }

    pub fn alpha_name(&self) -> String {
        format!("{}.alpha", self.prefix)
    }

    /// Names of the operator-weight parameters (everything except alpha).
    pub fn weight_names(&self, store: &ParamStore) -> Vec<String> {
        store
            .names_with_prefix(&format!("{}.", self.prefix))
            .filter(|n| !n.ends_with(".alpha"))
            .map(|n| n.to_string())
            .collect()
    }

    /// Evaluates the full mixture: node `j` sums, over every predecessor
    /// `i`, the softmax-weighted combination of all seven operators applied
    /// to node `i`. The cell output is the final node's feature map.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        leaves: &mut LeafCache,
        input: NodeId,
    ) -> Result<NodeId> {
        let (c, h, w) = g.value(input).chw();
        if c != self.channels {
            return Err(CoreError::ShapeMismatch {
                expected: vec![self.channels],
                got: vec![c],
            });
        }
        if h < 5 || w < 5 {
            return Err(CoreError::BadShape(format!(
                "cell input must be at least 5x5, got {h}x{w}"
            )));
        }
        let alpha = leaves.leaf(g, store, &self.alpha_name());
        let weights = g.softmax_rows(alpha);
        let mut nodes: Vec<NodeId> = vec![input];
        for (e, (from, to)) in cell_edges().into_iter().enumerate() {
            debug_assert!(from < nodes.len());
            let mut mixed: Option<NodeId> = None;
            for op in CANDIDATE_OPS {
                let y = self.apply_op(g, store, leaves, e, op, nodes[from]);
                let scaled = g.scale_by_elem(y, weights, e * 7 + op.index());
                mixed = Some(match mixed {
                    Some(acc) => g.add(acc, scaled),
                    None => scaled,
                });
            }
            let contribution = mixed.unwrap();
            if to == nodes.len() {
                nodes.push(contribution);
            } else {
                nodes[to] = g.add(nodes[to], contribution);
            }
        }
        Ok(nodes[CELL_NODES - 1])
    }

    /// Evaluates a discretized cell: only retained edges, fixed operators.
    pub fn forward_genotype(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        leaves: &mut LeafCache,
        genotype: &Genotype,
        input: NodeId,
    ) -> Result<NodeId> {
        let edge_index: std::collections::BTreeMap<(usize, usize), usize> = cell_edges()
            .into_iter()
            .enumerate()
            .map(|(e, k)| (k, e))
            .collect();
        let mut nodes: Vec<Option<NodeId>> = vec![None; CELL_NODES];
        nodes[0] = Some(input);
        for to in 1..CELL_NODES {
            let mut acc: Option<NodeId> = None;
            for edge in genotype.edges.iter().filter(|ed| ed.to == to) {
                let from = nodes[edge.from].ok_or_else(|| CoreError::Parse {
                    what: "genotype".into(),
                    reason: format!("edge {}->{} uses an unset node", edge.from, edge.to),
                })?;
                let e = edge_index[&(edge.from, edge.to)];
                let y = self.apply_op(g, store, leaves, e, edge.op, from);
                acc = Some(match acc {
                    Some(a) => g.add(a, y),
                    None => y,
                });
            }
            nodes[to] = Some(acc.ok_or_else(|| CoreError::Parse {
                what: "genotype".into(),
                reason: format!("node {to} has no incoming edges"),
            })?);
        }
        Ok(nodes[CELL_NODES - 1].unwrap())
    }

    fn apply_op(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        leaves: &mut LeafCache,
        edge: usize,
        op: CandidateOp,
        x: NodeId,
    ) -> NodeId {
        match op {
            CandidateOp::Skip => x,
            CandidateOp::AvgPool => g.avg_pool(x, 3, 1, 1),
            CandidateOp::MaxPool => g.max_pool(x, 3, 1, 1),
            conv => {
                let (_, dilation) = conv.kernel().unwrap();
                let dw = leaves.leaf(g, store, &format!("{}.e{edge}.{conv}.dw", self.prefix));
                let pw = leaves.leaf(g, store, &format!("{}.e{edge}.{conv}.pw", self.prefix));
                // depthwise -> ReLU -> pointwise -> instance norm -> ReLU
                let y = g.conv2d(x, dw, dilation, self.channels);
                let y = g.relu(y);
                let y = g.conv2d(y, pw, 1, 1);
                let y = g.instance_norm(y, NORM_EPS);
                g.relu(y)
            }
        }
    }

    /// Discretizes trained alpha into a fixed genotype, keeping the `k`
    /// strongest incoming edges per node (by max-over-ops softmax weight)
    /// and the argmax operator on each. Ties break toward the lower source
    /// node and the lower operator index.
    pub fn discretize(&self, store: &ParamStore, k: usize) -> Genotype {
        assert!(k >= 1, "every node needs at least one retained edge");
        let alpha = store.get(&self.alpha_name());
        let softmax = softmax_rows_plain(alpha);
        let edges = cell_edges();
        let mut retained = Vec::new();
        for to in 1..CELL_NODES {
            let mut incoming: Vec<(usize, usize)> = edges
                .iter()
                .enumerate()
                .filter(|(_, (_, t))| *t == to)
                .map(|(e, (f, _))| (e, *f))
                .collect();
            // strongest first; ties go to the lower source node
            incoming.sort_by(|&(ea, fa), &(eb, fb)| {
                let wa = row_max(&softmax, ea);
                let wb = row_max(&softmax, eb);
                wb.partial_cmp(&wa).unwrap().then(fa.cmp(&fb))
            });
            for &(e, from) in incoming.iter().take(k.min(incoming.len())) {
                let row = &softmax[e * 7..(e + 1) * 7];
                let mut best = 0;
                for (j, v) in row.iter().enumerate() {
                    if *v > row[best] {
                        best = j;
                    }
                }
                retained.push(GenotypeEdge {
                    from,
                    to,
                    op: CANDIDATE_OPS[best],
                });
            }
        }
        retained.sort_by_key(|e| (e.to, e.from));
        Genotype {
            nodes: CELL_NODES,
            k,
            edges: retained,
        }
    }
}

fn row_max(softmax: &[f64], row: usize) -> f64 {
    softmax[row * 7..(row + 1) * 7]
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max)
}

fn softmax_rows_plain(t: &Tensor) -> Vec<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        let row = &t.data()[i * c..(i + 1) * c];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (j, v) in row.iter().enumerate() {
            let e = (v - m).exp();
            out[i * c + j] = e;
            denom += e;
        }
        for j in 0..c {
            out[i * c + j] /= denom;
        }
    }
    out
}

/// Caches parameter leaves so one graph references each parameter exactly
/// once, which is what lets gradients from multiple uses accumulate.
#[derive(Default)]
pub struct LeafCache {
    map: std::collections::BTreeMap<String, NodeId>,
}

impl LeafCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn leaf(&mut self, g: &mut Graph, store: &ParamStore, name: &str) -> NodeId {
        if let Some(&id) = self.map.get(name) {
            return id;
        }
        let id = g.leaf(store.get(name).clone());
        self.map.insert(name.to_string(), id);
        id
    }

    /// Node ids of every cached parameter, keyed by name.
    pub fn entries(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.map.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<NodeId> {
        self.map.get(name).copied()
    }
}

/// One retained edge of a discretized cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GenotypeEdge {
    pub from: usize,
    pub to: usize,
    pub op: CandidateOp,
}

/// A discretized cell architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Genotype {
    pub nodes: usize,
    pub k: usize,
    pub edges: Vec<GenotypeEdge>,
}

impl Genotype {
    /// Serializes to the text record format: a header line with the node
    /// count and k, then one `from,to,op` line per retained edge.
    pub fn to_text(&self) -> String {
        let mut s = format!("nodes={} k={}\n", self.nodes, self.k);
        for e in &self.edges {
            s.push_str(&format!("{},{},{}\n", e.from, e.to, e.op));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Genotype> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| CoreError::Parse {
            what: "genotype".into(),
            reason: "empty file".into(),
        })?;
        let mut nodes = None;
        let mut k = None;
        for tok in header.split_whitespace() {
            if let Some(v) = tok.strip_prefix("nodes=") {
                nodes = v.parse::<usize>().ok();
            } else if let Some(v) = tok.strip_prefix("k=") {
                k = v.parse::<usize>().ok();
            }
        }
        let (nodes, k) = match (nodes, k) {
            (Some(n), Some(k)) => (n, k),
            _ => {
                return Err(CoreError::Parse {
                    what: "genotype".into(),
                    reason: format!("bad header '{header}'"),
                })
            }
        };
        let mut edges = Vec::new();
        for line in lines {
            let parts: Vec<&str> = line.trim().split(',').collect();
            if parts.len() != 3 {
                return Err(CoreError::Parse {
                    what: "genotype".into(),
                    reason: format!("bad edge line '{line}'"),
                });
            }
            let from = parts[0].parse::<usize>().map_err(|e| CoreError::Parse {
                what: "genotype".into(),
                reason: e.to_string(),
            })?;
            let to = parts[1].parse::<usize>().map_err(|e| CoreError::Parse {
                what: "genotype".into(),
                reason: e.to_string(),
            })?;
            let op = parts[2].parse::<CandidateOp>()?;
            if from >= to || to >= nodes {
                return Err(CoreError::Parse {
                    what: "genotype".into(),
                    reason: format!("edge {from}->{to} violates the acyclic node order"),
                });
            }
            edges.push(GenotypeEdge { from, to, op });
        }
        Ok(Genotype { nodes, k, edges })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_gradients, GradCheckConfig};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot_alpha(op: CandidateOp) -> Tensor {
        let mut t = Tensor::zeros(&[CELL_EDGES, 7]);
        for e in 0..CELL_EDGES {
            t.data_mut()[e * 7 + op.index()] = 40.0; // softmax saturates to one-hot
        }
        t
    }

    fn rand_input(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(
            &[c, h, w],
            (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
    }

    /// Number of monotone paths from node 0 to the final node when every
    /// node sums all predecessors: enumerate them explicitly.
    fn count_paths() -> usize {
        fn rec(node: usize) -> usize {
            if node == CELL_NODES - 1 {
                return 1;
            }
            ((node + 1)..CELL_NODES).map(rec).sum()
        }
        rec(0)
    }

    #[test]
    fn all_skip_cell_multiplies_by_path_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let cell = MixedCell::init(&mut store, "cell", 3, &mut rng);
        *store.get_mut("cell.alpha") = one_hot_alpha(CandidateOp::Skip);
        let x = rand_input(&mut rng, 3, 6, 6);
        let mut g = Graph::new();
        let input = g.leaf(x.clone());
        let mut leaves = LeafCache::new();
        let out = cell.forward(&mut g, &store, &mut leaves, input).unwrap();
        let paths = count_paths() as f64;
        assert_eq!(count_paths(), 8);
        for (o, i) in g.value(out).data().iter().zip(x.data()) {
            assert!(
                (o - paths * i).abs() < 1e-9,
                "expected {} got {o}",
                paths * i
            );
        }
    }

    #[test]
    fn uniform_alpha_zero_input_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let cell = MixedCell::init(&mut store, "cell", 2, &mut rng);
        let mut g = Graph::new();
        let input = g.leaf(Tensor::zeros(&[2, 8, 8]));
        let mut leaves = LeafCache::new();
        let out = cell.forward(&mut g, &store, &mut leaves, input).unwrap();
        assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn avg_pool_of_constant_is_constant() {
        let mut g = Graph::new();
        let input = g.leaf(Tensor::full(&[2, 6, 6], 0.35));
        let out = g.avg_pool(input, 3, 1, 1);
        for v in g.value(out).data() {
            assert!((v - 0.35).abs() < 1e-15);
        }
    }

    #[test]
    fn all_ops_preserve_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(h, w) in &[(8usize, 8usize), (16, 16), (32, 32)] {
            for &c in &[4usize, 8] {
                let mut store = ParamStore::new();
                let cell = MixedCell::init(&mut store, "c", c, &mut rng);
                let x = rand_input(&mut rng, c, h, w);
                let mut g = Graph::new();
                let input = g.leaf(x);
                let mut leaves = LeafCache::new();
                for op in CANDIDATE_OPS {
                    let y = cell.apply_op(&mut g, &store, &mut leaves, 0, op, input);
                    assert_eq!(g.value(y).shape(), &[c, h, w], "{op} at {h}x{w} c{c}");
                }
            }
        }
    }

    #[test]
    fn rejects_too_small_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let cell = MixedCell::init(&mut store, "c", 2, &mut rng);
        let mut g = Graph::new();
        let input = g.leaf(Tensor::zeros(&[2, 4, 4]));
        let mut leaves = LeafCache::new();
        assert!(matches!(
            cell.forward(&mut g, &store, &mut leaves, input),
            Err(CoreError::BadShape(_))
        ));
    }

    #[test]
    fn discretize_one_hot_picks_those_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut store = ParamStore::new();
        let cell = MixedCell::init(&mut store, "c", 2, &mut rng);
        *store.get_mut("c.alpha") = one_hot_alpha(CandidateOp::DilConv5);
        let genotype = cell.discretize(&store, 2);
        assert!(genotype.edges.iter().all(|e| e.op == CandidateOp::DilConv5));
        // nodes 2..5 keep k=2 edges; node 1 has only one predecessor
        assert_eq!(genotype.edges.len(), 1 + 2 + 2 + 2);
    }

    #[test]
    fn discretize_breaks_ties_toward_lower_source() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut store = ParamStore::new();
        let cell = MixedCell::init(&mut store, "c", 2, &mut rng);
        // all-zero alpha: every edge weight ties
        let genotype = cell.discretize(&store, 1);
        for e in &genotype.edges {
            assert_eq!(e.from, 0, "tie should go to the lowest source node");
            assert_eq!(e.op, CandidateOp::Skip, "op tie goes to the lowest index");
        }
    }

    #[test]
    fn discretize_invariant_under_logit_shifts() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..20 {
            let mut store = ParamStore::new();
            let cell = MixedCell::init(&mut store, "c", 2, &mut rng);
            let alpha = Tensor::from_vec(
                &[CELL_EDGES, 7],
                (0..CELL_EDGES * 7).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            );
            *store.get_mut("c.alpha") = alpha.clone();
            let before = cell.discretize(&store, 2);
            let mut shifted = alpha;
            for e in 0..CELL_EDGES {
                let shift = rng.gen_range(-5.0..5.0);
                for j in 0..7 {
                    shifted.data_mut()[e * 7 + j] += shift;
                }
            }
            *store.get_mut("c.alpha") = shifted;
            let after = cell.discretize(&store, 2);
            assert_eq!(before, after);
        }
    }

    #[test]
    fn one_hot_mixed_equals_genotype_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for op in [CandidateOp::Skip, CandidateOp::SepConv3, CandidateOp::MaxPool] {
            let mut store = ParamStore::new();
            let cell = MixedCell::init(&mut store, "c", 3, &mut rng);
            // One-hot alpha with k covering every predecessor, so the
            // genotype keeps the same support as the saturated mixture.
            *store.get_mut("c.alpha") = one_hot_alpha(op);
            let genotype = cell.discretize(&store, 4);
            let x = rand_input(&mut rng, 3, 8, 8);
            let mut g = Graph::new();
            let input = g.leaf(x);
            let mut leaves = LeafCache::new();
            let mixed = cell.forward(&mut g, &store, &mut leaves, input).unwrap();
            let fixed = cell
                .forward_genotype(&mut g, &store, &mut leaves, &genotype, input)
                .unwrap();
            let diff = g.value(mixed).linf_distance(g.value(fixed));
            assert!(diff < 1e-5, "{op}: diff {diff}");
        }
    }

    #[test]
    fn all_skip_genotype_is_integer_multiple_of_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cell = MixedCell::init(&mut store, "c", 2, &mut rng);
        // keep all 4 incoming edges per node: path count follows the DAG
        let genotype = Genotype {
            nodes: CELL_NODES,
            k: 4,
            edges: cell_edges()
                .into_iter()
                .map(|(from, to)| GenotypeEdge {
                    from,
                    to,
                    op: CandidateOp::Skip,
                })
                .collect(),
        };
        let x = rand_input(&mut rng, 2, 6, 6);
        let mut g = Graph::new();
        let input = g.leaf(x.clone());
        let mut leaves = LeafCache::new();
        let out = cell
            .forward_genotype(&mut g, &store, &mut leaves, &genotype, input)
            .unwrap();
        for (o, i) in g.value(out).data().iter().zip(x.data()) {
            assert!((o - 8.0 * i).abs() < 1e-9);
        }
    }

    #[test]
    fn genotype_text_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut store = ParamStore::new();
        let cell = MixedCell::init(&mut store, "c", 2, &mut rng);
        *store.get_mut("c.alpha") = Tensor::from_vec(
            &[CELL_EDGES, 7],
            (0..CELL_EDGES * 7).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        );
        let genotype = cell.discretize(&store, 2);
        let text = genotype.to_text();
        let parsed = Genotype::from_text(&text).unwrap();
        assert_eq!(genotype, parsed);
    }

    #[test]
    fn genotype_rejects_cycles_and_garbage() {
        assert!(Genotype::from_text("nodes=5 k=2\n3,1,skip\n").is_err());
        assert!(Genotype::from_text("nodes=5 k=2\n0,1,warp9000\n").is_err());
        assert!(Genotype::from_text("").is_err());
    }

    #[test]
    fn alpha_gradient_matches_finite_differences_on_reduced_cell() {
        // A 2-node cell is a single mixed edge; check d(loss)/d(alpha) and
        // the operator weights together.
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let c = 2;
        let x = rand_input(&mut rng, c, 6, 6);
        let alpha0 = Tensor::from_vec(&[1, 7], (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect());
        let dws: Vec<Tensor> = CANDIDATE_OPS
            .iter()
            .filter_map(|op| op.kernel())
            .map(|(k, _)| kaiming_uniform(&mut rng, &[c, 1, k, k], k * k))
            .collect();
        let pws: Vec<Tensor> = (0..4)
            .map(|_| kaiming_uniform(&mut rng, &[c, c, 1, 1], c))
            .collect();
        let mut tensors = vec![alpha0, x];
        tensors.extend(dws);
        tensors.extend(pws);
        let report = check_gradients(
            &tensors,
            |g, ids| {
                let weights = g.softmax_rows(ids[0]);
                let input = ids[1];
                let mut acc: Option<NodeId> = None;
                let mut conv_i = 0;
                for op in CANDIDATE_OPS {
                    let y = match op {
                        CandidateOp::Skip => input,
                        CandidateOp::AvgPool => g.avg_pool(input, 3, 1, 1),
                        CandidateOp::MaxPool => g.max_pool(input, 3, 1, 1),
                        conv => {
                            let (_, dil) = conv.kernel().unwrap();
                            let y = g.conv2d(input, ids[2 + conv_i], dil, c);
                            let y = g.relu(y);
                            let y = g.conv2d(y, ids[6 + conv_i], 1, 1);
                            let y = g.instance_norm(y, NORM_EPS);
                            conv_i += 1;
                            g.relu(y)
                        }
                    };
                    let s = g.scale_by_elem(y, weights, op.index());
                    acc = Some(match acc {
                        Some(a) => g.add(a, s),
                        None => s,
                    });
                }
                g.l2_norm(acc.unwrap())
            },
            &GradCheckConfig {
                max_checks_per_input: 16,
                ..GradCheckConfig::default()
            },
        );
        assert!(
            report.max_rel_error < 1e-3,
            "alpha/theta rel err {}",
            report.max_rel_error
        );
    }
}
