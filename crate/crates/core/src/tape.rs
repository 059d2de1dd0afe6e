//! Tape-based reverse-mode differentiation over vector-valued nodes.
//!
//! The node set is small: affine layers, elementwise activation
//! derivatives of a given order, elementwise products, linear
//! combinations, inner products and scalar combinations. Input
//! derivatives of the network (Jacobian and Hessian slices) are built
//! as ordinary nodes via forward jet propagation, so a single reverse
//! pass over a graph containing `d^alpha s(x)` yields the mixed
//! derivatives `d_theta d^alpha s(x)` needed by the gradient control
//! variates. Backpropagating through an order-m activation node uses
//! the order-(m+1) derivative, which is why activations provide
//! derivatives up to order 3.

use crate::error::CoreError;
use crate::network::ScoreNetwork;

pub type NodeId = usize;

#[derive(Debug, Clone, Copy)]
enum Op {
    /// Value fixed at construction; no backward.
    Const,
    /// W_l * input + b_l
    Affine { layer: usize, input: NodeId },
    /// W_l * input (derivative path, no bias)
    Linear { layer: usize, input: NodeId },
    /// phi^(order)(pre), elementwise
    ActDeriv { order: u8, pre: NodeId },
    /// a ⊙ b, elementwise
    Mul { a: NodeId, b: NodeId },
    /// sum_i c_i * v_i over equal-length vector nodes
    Comb { terms_start: u32, terms_len: u32 },
    /// <a, b>, scalar output
    Dot { a: NodeId, b: NodeId },
    /// bias + sum_i c_i * s_i over scalar nodes
    ScalarComb { bias: f64, terms_start: u32, terms_len: u32 },
}

/// Network output together with its input derivatives, all as tape
/// nodes (hence differentiable with respect to the parameters).
///
/// `second` is packed over index pairs p <= q.
#[derive(Debug, Clone)]
pub struct InputJet {
    pub dim: usize,
    pub value: NodeId,
    pub first: Vec<NodeId>,
    pub second: Vec<NodeId>,
}

impl InputJet {
    /// Packed index of the (p, q) Hessian slice, order-insensitive.
    pub fn pair_index(dim: usize, p: usize, q: usize) -> usize {
        let (p, q) = if p <= q { (p, q) } else { (q, p) };
        p * dim - p * (p + 1) / 2 + q
    }

    pub fn second_node(&self, p: usize, q: usize) -> NodeId {
        self.second[Self::pair_index(self.dim, p, q)]
    }
}

pub struct Tape<'a> {
    net: &'a ScoreNetwork,
    ops: Vec<Op>,
    spans: Vec<(usize, usize)>,
    vals: Vec<f64>,
    adj: Vec<f64>,
    terms: Vec<(f64, NodeId)>,
    param_grad: Vec<f64>,
}

impl<'a> Tape<'a> {
    pub fn new(net: &'a ScoreNetwork) -> Self {
        Tape {
            net,
            ops: Vec::new(),
            spans: Vec::new(),
            vals: Vec::new(),
            adj: Vec::new(),
            terms: Vec::new(),
            param_grad: vec![0.0; net.param_count()],
        }
    }

    /// Drops all nodes but keeps allocations for reuse.
    pub fn clear(&mut self) {
        self.ops.clear();
        self.spans.clear();
        self.vals.clear();
        self.terms.clear();
    }

    pub fn network(&self) -> &ScoreNetwork {
        self.net
    }

    pub fn node_count(&self) -> usize {
        self.ops.len()
    }

    #[inline]
    pub fn value(&self, node: NodeId) -> &[f64] {
        let (off, len) = self.spans[node];
        &self.vals[off..off + len]
    }

    #[inline]
    pub fn scalar_value(&self, node: NodeId) -> f64 {
        let (off, len) = self.spans[node];
        debug_assert_eq!(len, 1);
        self.vals[off]
    }

    /// Parameter gradient produced by the latest [`Tape::backward`].
    pub fn param_grad(&self) -> &[f64] {
        &self.param_grad
    }

    fn push(&mut self, op: Op, len: usize) -> NodeId {
        let id = self.ops.len();
        let off = self.vals.len();
        self.ops.push(op);
        self.spans.push((off, len));
        self.vals.resize(off + len, 0.0);
        id
    }

    pub fn constant(&mut self, v: &[f64]) -> NodeId {
        let id = self.push(Op::Const, v.len());
        let (off, len) = self.spans[id];
        self.vals[off..off + len].copy_from_slice(v);
        id
    }

    pub fn affine(&mut self, layer: usize, input: NodeId) -> NodeId {
        let spec = self.net.layer(layer);
        let (in_off, in_len) = self.spans[input];
        assert_eq!(in_len, spec.in_dim, "affine input width mismatch");
        let id = self.push(Op::Affine { layer, input }, spec.out_dim);
        let (off, _) = self.spans[id];
        let w = self.net.weights(layer);
        let b = self.net.bias(layer);
        let (head, out) = self.vals.split_at_mut(off);
        let x = &head[in_off..in_off + in_len];
        for r in 0..spec.out_dim {
            let row = &w[r * spec.in_dim..(r + 1) * spec.in_dim];
            let mut acc = b[r];
            for c in 0..spec.in_dim {
                acc += row[c] * x[c];
            }
            out[r] = acc;
        }
        id
    }

    pub fn linear(&mut self, layer: usize, input: NodeId) -> NodeId {
        let spec = self.net.layer(layer);
        let (in_off, in_len) = self.spans[input];
        assert_eq!(in_len, spec.in_dim, "linear input width mismatch");
        let id = self.push(Op::Linear { layer, input }, spec.out_dim);
        let (off, _) = self.spans[id];
        let w = self.net.weights(layer);
        let (head, out) = self.vals.split_at_mut(off);
        let x = &head[in_off..in_off + in_len];
        for r in 0..spec.out_dim {
            let row = &w[r * spec.in_dim..(r + 1) * spec.in_dim];
            let mut acc = 0.0;
            for c in 0..spec.in_dim {
                acc += row[c] * x[c];
            }
            out[r] = acc;
        }
        id
    }

    pub fn act(&mut self, order: u8, pre: NodeId) -> NodeId {
        assert!(order <= 2, "activation nodes stop at order 2");
        let (pre_off, len) = self.spans[pre];
        let id = self.push(Op::ActDeriv { order, pre }, len);
        let (off, _) = self.spans[id];
        let act = self.net.config.activation;
        let (head, out) = self.vals.split_at_mut(off);
        let u = &head[pre_off..pre_off + len];
        for i in 0..len {
            out[i] = act.eval(order, u[i]);
        }
        id
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (a_off, len) = self.spans[a];
        let (b_off, b_len) = self.spans[b];
        assert_eq!(len, b_len, "elementwise product length mismatch");
        let id = self.push(Op::Mul { a, b }, len);
        let (off, _) = self.spans[id];
        let (head, out) = self.vals.split_at_mut(off);
        for i in 0..len {
            out[i] = head[a_off + i] * head[b_off + i];
        }
        id
    }

    pub fn comb(&mut self, terms: &[(f64, NodeId)]) -> NodeId {
        assert!(!terms.is_empty());
        let len = self.spans[terms[0].1].1;
        for &(_, n) in terms {
            assert_eq!(self.spans[n].1, len, "combination length mismatch");
        }
        let terms_start = self.terms.len() as u32;
        self.terms.extend_from_slice(terms);
        let id = self.push(Op::Comb { terms_start, terms_len: terms.len() as u32 }, len);
        let (off, _) = self.spans[id];
        let spans = &self.spans;
        let terms_arena = &self.terms;
        let (head, out) = self.vals.split_at_mut(off);
        for &(c, n) in &terms_arena[terms_start as usize..terms_start as usize + terms.len()] {
            let (n_off, _) = spans[n];
            for i in 0..len {
                out[i] += c * head[n_off + i];
            }
        }
        id
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (a_off, len) = self.spans[a];
        let (b_off, b_len) = self.spans[b];
        assert_eq!(len, b_len, "inner product length mismatch");
        let id = self.push(Op::Dot { a, b }, 1);
        let (off, _) = self.spans[id];
        let (head, out) = self.vals.split_at_mut(off);
        out[0] = crate::linalg::dot(&head[a_off..a_off + len], &head[b_off..b_off + len]);
        id
    }

    pub fn scalar_comb(&mut self, bias: f64, terms: &[(f64, NodeId)]) -> NodeId {
        for &(_, n) in terms {
            assert_eq!(self.spans[n].1, 1, "scalar combination over non-scalar node");
        }
        let terms_start = self.terms.len() as u32;
        self.terms.extend_from_slice(terms);
        let id = self.push(Op::ScalarComb { bias, terms_start, terms_len: terms.len() as u32 }, 1);
        let (off, _) = self.spans[id];
        let mut acc = bias;
        for &(c, n) in &self.terms[terms_start as usize..terms_start as usize + terms.len()] {
            acc += c * self.vals[self.spans[n].0];
        }
        self.vals[off] = acc;
        id
    }

    /// Plain network evaluation s(x) as tape nodes.
    pub fn forward_network(&mut self, x: &[f64]) -> NodeId {
        assert_eq!(x.len(), self.net.input_dim());
        let layers = self.net.layer_count();
        let mut h = self.constant(x);
        for l in 0..layers - 1 {
            let u = self.affine(l, h);
            h = self.act(0, u);
        }
        self.affine(layers - 1, h)
    }

    /// Network value together with input derivatives up to `max_order`
    /// (0, 1 or 2), propagated as forward jets. Values agree with
    /// finite differences of [`Tape::forward_network`]; being tape
    /// nodes, they stay differentiable with respect to the parameters.
    pub fn input_jet(&mut self, x: &[f64], max_order: u8) -> Result<InputJet, CoreError> {
        let d = self.net.input_dim();
        assert_eq!(x.len(), d);
        if max_order > 2 {
            return Err(CoreError::InvalidConfig(format!(
                "input derivatives available up to order 2, requested {max_order}"
            )));
        }
        let act = self.net.config.activation;
        if max_order > act.max_jet_order() {
            return Err(CoreError::InvalidConfig(format!(
                "activation {} does not support input derivatives of order {max_order}",
                act.name()
            )));
        }
        let layers = self.net.layer_count();
        let npairs = d * (d + 1) / 2;

        let mut h = self.constant(x);
        let mut dh: Vec<NodeId> = Vec::new();
        if max_order >= 1 {
            let mut basis = vec![0.0; d];
            for p in 0..d {
                basis[p] = 1.0;
                dh.push(self.constant(&basis));
                basis[p] = 0.0;
            }
        }
        // None marks a slice that is identically zero (true at the input).
        let mut d2h: Vec<Option<NodeId>> = vec![None; if max_order >= 2 { npairs } else { 0 }];

        for l in 0..layers {
            let u = self.affine(l, h);
            let du: Vec<NodeId> = dh.iter().map(|&n| self.linear(l, n)).collect();
            let d2u: Vec<Option<NodeId>> =
                d2h.iter().map(|o| o.map(|n| self.linear(l, n))).collect();
            if l == layers - 1 {
                h = u;
                dh = du;
                d2h = d2u;
            } else {
                let f1 = if max_order >= 1 { Some(self.act(1, u)) } else { None };
                let f2 = if max_order >= 2 { Some(self.act(2, u)) } else { None };
                h = self.act(0, u);
                if let Some(f1) = f1 {
                    dh = du.iter().map(|&n| self.mul(f1, n)).collect();
                    if let Some(f2) = f2 {
                        for p in 0..d {
                            for q in p..d {
                                let idx = InputJet::pair_index(d, p, q);
                                let dupq = self.mul(du[p], du[q]);
                                let curv = self.mul(f2, dupq);
                                d2h[idx] = Some(match d2u[idx] {
                                    Some(prev) => {
                                        let lin = self.mul(f1, prev);
                                        self.comb(&[(1.0, curv), (1.0, lin)])
                                    }
                                    None => curv,
                                });
                            }
                        }
                    }
                }
            }
        }

        let second = if max_order >= 2 {
            let mut zero_node = None;
            d2h.into_iter()
                .map(|o| {
                    o.unwrap_or_else(|| {
                        *zero_node.get_or_insert_with(|| {
                            // materialized only for purely linear networks
                            self.constant(&vec![0.0; d])
                        })
                    })
                })
                .collect()
        } else {
            Vec::new()
        };

        Ok(InputJet { dim: d, value: h, first: dh, second })
    }

    /// First non-finite entry, reported with its node index.
    pub fn assert_finite(&self, context: &str) -> Result<(), CoreError> {
        for (node, &(off, len)) in self.spans.iter().enumerate() {
            if self.vals[off..off + len].iter().any(|v| !v.is_finite()) {
                return Err(CoreError::NonFinite { node, context: context.to_string() });
            }
        }
        Ok(())
    }

    /// Reverse pass from a scalar node. Fills the parameter gradient
    /// (readable via [`Tape::param_grad`]); the adjoint buffer is
    /// re-zeroed at the start of every call, so repeated backward
    /// passes from different outputs on one tape are independent.
    pub fn backward(&mut self, out: NodeId) -> Result<(), CoreError> {
        let (out_off, out_len) = self.spans[out];
        if out_len != 1 {
            return Err(CoreError::Contract(format!(
                "backward requires a scalar output node, got length {out_len}"
            )));
        }
        self.adj.clear();
        self.adj.resize(self.vals.len(), 0.0);
        for g in self.param_grad.iter_mut() {
            *g = 0.0;
        }
        self.adj[out_off] = 1.0;

        let net = self.net;
        for idx in (0..=out).rev() {
            let (o_off, o_len) = self.spans[idx];
            match self.ops[idx] {
                Op::Const => {}
                Op::Affine { layer, input } | Op::Linear { layer, input } => {
                    let with_bias = matches!(self.ops[idx], Op::Affine { .. });
                    let spec = net.layer(layer);
                    let w = net.weights(layer);
                    let (in_off, _) = self.spans[input];
                    for r in 0..spec.out_dim {
                        let dr = self.adj[o_off + r];
                        if dr == 0.0 {
                            continue;
                        }
                        let row = &w[r * spec.in_dim..(r + 1) * spec.in_dim];
                        let grad_row = spec.w_offset + r * spec.in_dim;
                        for c in 0..spec.in_dim {
                            self.adj[in_off + c] += row[c] * dr;
                            self.param_grad[grad_row + c] += dr * self.vals[in_off + c];
                        }
                        if with_bias {
                            self.param_grad[spec.b_offset + r] += dr;
                        }
                    }
                }
                Op::ActDeriv { order, pre } => {
                    let act = net.config.activation;
                    let (p_off, _) = self.spans[pre];
                    for i in 0..o_len {
                        let d = self.adj[o_off + i];
                        if d != 0.0 {
                            self.adj[p_off + i] += act.eval(order + 1, self.vals[p_off + i]) * d;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (a_off, _) = self.spans[a];
                    let (b_off, _) = self.spans[b];
                    for i in 0..o_len {
                        let d = self.adj[o_off + i];
                        if d != 0.0 {
                            let av = self.vals[a_off + i];
                            let bv = self.vals[b_off + i];
                            self.adj[a_off + i] += bv * d;
                            self.adj[b_off + i] += av * d;
                        }
                    }
                }
                Op::Comb { terms_start, terms_len } => {
                    for t in terms_start..terms_start + terms_len {
                        let (c, n) = self.terms[t as usize];
                        let (n_off, _) = self.spans[n];
                        for i in 0..o_len {
                            self.adj[n_off + i] += c * self.adj[o_off + i];
                        }
                    }
                }
                Op::Dot { a, b } => {
                    let d = self.adj[o_off];
                    if d != 0.0 {
                        let (a_off, len) = self.spans[a];
                        let (b_off, _) = self.spans[b];
                        for i in 0..len {
                            let av = self.vals[a_off + i];
                            let bv = self.vals[b_off + i];
                            self.adj[a_off + i] += bv * d;
                            self.adj[b_off + i] += av * d;
                        }
                    }
                }
                Op::ScalarComb { terms_start, terms_len, .. } => {
                    let d = self.adj[o_off];
                    if d != 0.0 {
                        for t in terms_start..terms_start + terms_len {
                            let (c, n) = self.terms[t as usize];
                            let (n_off, _) = self.spans[n];
                            self.adj[n_off] += c * d;
                        }
                    }
                }
            }
        }
        Ok(())
    }
}
