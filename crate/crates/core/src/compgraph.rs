//! Bipartite primitive → composition graph and linear two-layer propagation.
//!
//! Node order is `[attributes, objects, compositions]`. Composition nodes start
//! at zero and receive their features from their attribute and object
//! neighbours through `Â X Θ₁` then `Â (·) Θ₂`, with no nonlinearity.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{contract_err, shape_err, Result};
use crate::numgrad::{Tape, Tensor, Var};
use crate::synthdata::{CompositionalLabel, PrimitiveVocab};

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionGraph {
    pub n_attr: usize,
    pub n_obj: usize,
    pub comps: Vec<CompositionalLabel>,
    /// Undirected `(primitive node, composition node)` pairs.
    pub edges: Vec<(usize, usize)>,
    /// Symmetric 0/1 `[n, n]`, no self-loops.
    pub adjacency: Tensor,
}

impl CompositionGraph {
    pub fn n_nodes(&self) -> usize {
        self.n_attr + self.n_obj + self.comps.len()
    }

    pub fn attr_node(&self, a: usize) -> usize {
        a
    }

    pub fn obj_node(&self, o: usize) -> usize {
        self.n_attr + o
    }

    pub fn comp_node(&self, y: usize) -> usize {
        self.n_attr + self.n_obj + y
    }

    /// One line per edge: `attr:<name> comp:<attr,obj>` or `obj:<name> comp:<attr,obj>`.
    pub fn edge_list(&self, vocab: &PrimitiveVocab) -> String {
        let mut out = String::new();
        for (y, c) in self.comps.iter().enumerate() {
            let (an, on) = (&vocab.attributes[c.attr].name, &vocab.objects[c.obj].name);
            let _ = writeln!(out, "attr:{an} comp:{an},{on}");
            let _ = writeln!(out, "obj:{on} comp:{an},{on}");
            debug_assert!(self.edges.contains(&(self.attr_node(c.attr), self.comp_node(y))));
        }
        out
    }
}

/// Connects every composition to its attribute and its object.
pub fn build_graph(vocab: &PrimitiveVocab, comps: &[CompositionalLabel]) -> Result<CompositionGraph> {
    let (na, no) = (vocab.n_attr(), vocab.n_obj());
    let mut seen = HashSet::new();
    for c in comps {
        if c.attr >= na || c.obj >= no {
            return Err(contract_err!("composition ({}, {}) outside the vocabulary", c.attr, c.obj));
        }
        if !seen.insert(*c) {
            return Err(contract_err!("duplicate composition ({}, {})", c.attr, c.obj));
        }
    }
    let n = na + no + comps.len();
    let mut adjacency = Tensor::zeros(&[n, n]);
    let mut edges = Vec::with_capacity(2 * comps.len());
    for (y, c) in comps.iter().enumerate() {
        let cn = na + no + y;
        for p in [c.attr, na + c.obj] {
            edges.push((p, cn));
            adjacency.data_mut()[p * n + cn] = 1.0;
            adjacency.data_mut()[cn * n + p] = 1.0;
        }
    }
    Ok(CompositionGraph { n_attr: na, n_obj: no, comps: comps.to_vec(), edges, adjacency })
}

/// `D̂^{-1/2} (A + I) D̂^{-1/2}` with `D̂ᵢᵢ = Σⱼ (A + I)ᵢⱼ`.
pub fn normalize_adjacency(g: &CompositionGraph) -> Tensor {
    let n = g.n_nodes();
    let a = g.adjacency.data();
    let inv_sqrt: Vec<f64> = (0..n).map(|i| 1.0 / (1.0 + a[i * n..(i + 1) * n].iter().sum::<f64>()).sqrt()).collect();
    Tensor::from_fn(&[n, n], |idx| {
        let (i, j) = (idx / n, idx % n);
        let hat = a[idx] + if i == j { 1.0 } else { 0.0 };
        hat * inv_sqrt[i] * inv_sqrt[j]
    })
}

/// Largest absolute eigenvalue of a symmetric matrix by power iteration.
pub fn spectral_radius(m: &Tensor, iters: usize) -> f64 {
    let n = m.rows();
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut lambda = 0.0;
    for _ in 0..iters {
        let w: Vec<f64> = (0..n).map(|i| m.row(i).iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        lambda = norm;
        v = w.into_iter().map(|x| x / norm).collect();
    }
    lambda
}

/// Trainable `Θ₁: [C, d_h]` and `Θ₂: [d_h, C_out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationWeights {
    pub theta1: Tensor,
    pub theta2: Tensor,
}

impl PropagationWeights {
    /// Uniform in `±sqrt(6 / (fan_in + fan_out))`.
    pub fn init(c: usize, hidden: usize, c_out: usize, rng: &mut impl Rng) -> Self {
        let mut glorot = |r: usize, k: usize| {
            let a = (6.0 / (r + k) as f64).sqrt();
            Tensor::from_fn(&[r, k], |_| rng.random_range(-a..a))
        };
        PropagationWeights { theta1: glorot(c, hidden), theta2: glorot(hidden, c_out) }
    }
}

/// `[n, C]` node features: attribute prototypes, object prototypes, then zeros.
pub fn init_node_features(tape: &mut Tape, g: &CompositionGraph, attr_protos: Var, obj_protos: Var) -> Result<Var> {
    let (a, o) = (tape.shape(attr_protos).to_vec(), tape.shape(obj_protos).to_vec());
    if a.len() != 2 || o.len() != 2 || a[1] != o[1] {
        return Err(shape_err!("prototype widths differ: {a:?} vs {o:?}"));
    }
    if a[0] != g.n_attr || o[0] != g.n_obj {
        return Err(shape_err!("{} attribute and {} object prototypes for graph {}x{}", a[0], o[0], g.n_attr, g.n_obj));
    }
    if g.comps.is_empty() {
        return tape.concat_rows(&[attr_protos, obj_protos]);
    }
    let zeros = tape.constant(Tensor::zeros(&[g.comps.len(), a[1]]));
    tape.concat_rows(&[attr_protos, obj_protos, zeros])
}

/// `Â (Â X Θ₁) Θ₂`, returning the composition rows `[|Y|, C_out]`.
pub fn propagate(tape: &mut Tape, g: &CompositionGraph, x: Var, a_norm: Var, theta1: Var, theta2: Var) -> Result<Var> {
    let n = g.n_nodes();
    if tape.shape(a_norm) != [n, n] || tape.shape(x).first() != Some(&n) {
        return Err(shape_err!(
            "propagate: adjacency {:?}, features {:?}, {n} nodes",
            tape.shape(a_norm),
            tape.shape(x)
        ));
    }
    let h = tape.matmul(x, theta1)?;
    let h = tape.matmul(a_norm, h)?;
    let h = tape.matmul(h, theta2)?;
    let h = tape.matmul(a_norm, h)?;
    let first = g.n_attr + g.n_obj;
    let rows: Vec<usize> = (first..n).collect();
    tape.gather_rows(h, &rows)
}

/// `[N, C] x [|Y|, C] -> [N, |Y|]` dot products.
pub fn comp_scores(tape: &mut Tape, comp_protos: Var, pooled: Var) -> Result<Var> {
    let (cs, ps) = (tape.shape(comp_protos).to_vec(), tape.shape(pooled).to_vec());
    if cs.len() != 2 || ps.len() != 2 || cs[1] != ps[1] {
        return Err(shape_err!("comp_scores: prototypes {cs:?}, features {ps:?}"));
    }
    let t = tape.transpose(comp_protos)?;
    tape.matmul(pooled, t)
}

/// Index of the largest score; ties go to the lowest index.
pub fn classify(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}
