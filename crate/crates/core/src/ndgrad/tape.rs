//! Append-only operation tape with a reverse sweep.
//!
//! Nodes hold whole batch matrices. Network parameters enter the tape as
//! registered sources; a source is either trainable (its gradient is
//! accumulated) or frozen (gradient flows through it to its inputs only).

use super::mat::Mat;
use super::net::{affine_backward, affine_forward, Activation, NetworkParams};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct SourceId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Affine {
        input: NodeId,
        source: SourceId,
        layer: usize,
    },
    Activation {
        input: NodeId,
        act: Activation,
    },
    Add(NodeId, NodeId),
    Scale {
        input: NodeId,
        factor: f64,
    },
    RowScale {
        input: NodeId,
        factors: Vec<f64>,
    },
    ColScale {
        input: NodeId,
        factors: Vec<f64>,
    },
    Concat(Vec<NodeId>),
    Slice {
        input: NodeId,
        start: usize,
    },
    Mean(NodeId),
    SquaredDistance(NodeId, NodeId),
    PseudoHuber {
        a: NodeId,
        b: NodeId,
        c: f64,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Mat,
    tracked: bool,
}

struct Source<'p> {
    params: &'p NetworkParams,
    trainable: bool,
}

/// Single-use recording of one loss computation.
#[derive(Default)]
pub struct Tape<'p> {
    nodes: Vec<Node>,
    sources: Vec<Source<'p>>,
}

/// Result of one reverse sweep.
#[derive(Debug)]
pub struct Gradients {
    params: Vec<Option<Vec<f64>>>,
    adjoints: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient for a trainable source; `None` for frozen sources.
    pub fn params(&self, source: SourceId) -> Option<&[f64]> {
        self.params[source.0].as_deref()
    }

    pub fn take_params(&mut self, source: SourceId) -> Option<Vec<f64>> {
        self.params[source.0].take()
    }

    /// Adjoint of a tracked leaf; `None` if nothing reached it. Interior
    /// adjoints are released during the sweep.
    pub fn wrt(&self, node: NodeId) -> Option<&Mat> {
        self.adjoints[node.0].as_ref()
    }
}

impl<'p> Tape<'p> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            sources: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Mat, tracked: bool) -> NodeId {
        self.nodes.push(Node { op, value, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        self.nodes[id.0].value.data()[0]
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf whose adjoint is kept and readable from [`Gradients::wrt`].
    pub fn input(&mut self, value: Mat) -> NodeId {
        self.push(Op::Leaf, value, true)
    }

    pub fn register(&mut self, params: &'p NetworkParams, trainable: bool) -> SourceId {
        self.sources.push(Source { params, trainable });
        SourceId(self.sources.len() - 1)
    }

    pub fn affine(&mut self, source: SourceId, layer: usize, input: NodeId) -> Result<NodeId> {
        let src = &self.sources[source.0];
        let params = src.params;
        let spec = *params
            .layers()
            .get(layer)
            .ok_or_else(|| Error::InvalidArgument(format!("network has no layer {layer}")))?;
        let x = &self.nodes[input.0].value;
        if x.cols() != spec.fan_in {
            return Err(Error::LayerDimension {
                layer,
                expected: spec.fan_in,
                got: x.cols(),
            });
        }
        let value = affine_forward(params.weights(), params.offsets()[layer], &spec, x);
        let tracked = src.trainable || self.tracked(input);
        Ok(self.push(
            Op::Affine {
                input,
                source,
                layer,
            },
            value,
            tracked,
        ))
    }

    pub fn activation(&mut self, input: NodeId, act: Activation) -> NodeId {
        if act == Activation::Identity {
            return input;
        }
        let value = self.nodes[input.0].value.map(|v| act.apply(v));
        let tracked = self.tracked(input);
        self.push(Op::Activation { input, act }, value, tracked)
    }

    fn same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        for (v, w) in value.data_mut().iter_mut().zip(self.value(b).data()) {
            *v += w;
        }
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::Add(a, b), value, tracked))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn scale(&mut self, input: NodeId, factor: f64) -> NodeId {
        let value = self.value(input).map(|v| v * factor);
        let tracked = self.tracked(input);
        self.push(Op::Scale { input, factor }, value, tracked)
    }

    /// Multiplies row `i` by `factors[i]`.
    pub fn row_scale(&mut self, input: NodeId, factors: &[f64]) -> Result<NodeId> {
        let x = self.value(input);
        if factors.len() != x.rows() {
            return Err(Error::Shape(format!(
                "row_scale: {} factors for {} rows",
                factors.len(),
                x.rows()
            )));
        }
        let mut value = x.clone();
        for (i, &f) in factors.iter().enumerate() {
            value.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        let tracked = self.tracked(input);
        Ok(self.push(
            Op::RowScale {
                input,
                factors: factors.to_vec(),
            },
            value,
            tracked,
        ))
    }

    /// Multiplies column `j` by `factors[j]`.
    pub fn col_scale(&mut self, input: NodeId, factors: &[f64]) -> Result<NodeId> {
        let x = self.value(input);
        if factors.len() != x.cols() {
            return Err(Error::Shape(format!(
                "col_scale: {} factors for {} columns",
                factors.len(),
                x.cols()
            )));
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            value
                .row_mut(i)
                .iter_mut()
                .zip(factors)
                .for_each(|(v, f)| *v *= f);
        }
        let tracked = self.tracked(input);
        Ok(self.push(
            Op::ColScale {
                input,
                factors: factors.to_vec(),
            },
            value,
            tracked,
        ))
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::hcat(&mats)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(Op::Concat(parts.to_vec()), value, tracked))
    }

    /// Column block `[start, start + len)`.
    pub fn slice(&mut self, input: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let x = self.value(input);
        if start + len > x.cols() {
            return Err(Error::Shape(format!(
                "slice [{start}, {}) of {} columns",
                start + len,
                x.cols()
            )));
        }
        let value = x.slice_cols(start, len);
        let tracked = self.tracked(input);
        Ok(self.push(Op::Slice { input, start }, value, tracked))
    }

    /// Mean over every entry; produces a 1x1 node.
    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let n = x.data().len().max(1) as f64;
        let value = Mat::scalar(x.data().iter().sum::<f64>() / n);
        let tracked = self.tracked(input);
        self.push(Op::Mean(input), value, tracked)
    }

    /// Per-row squared Euclidean distance, `rows x 1`.
    pub fn squared_distance(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b, "squared_distance")?;
        let (va, vb) = (self.value(a), self.value(b));
        let d: Vec<f64> = va
            .iter_rows()
            .zip(vb.iter_rows())
            .map(|(ra, rb)| ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum())
            .collect();
        let value = Mat::from_vec(d.len(), 1, d)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::SquaredDistance(a, b), value, tracked))
    }

    /// Per-row `sqrt(|a - b|^2 + c^2) - c`, `rows x 1`.
    pub fn pseudo_huber(&mut self, a: NodeId, b: NodeId, c: f64) -> Result<NodeId> {
        self.same_shape(a, b, "pseudo_huber")?;
        if !(c > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "pseudo-Huber constant must be positive, got {c}"
            )));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let d: Vec<f64> = va
            .iter_rows()
            .zip(vb.iter_rows())
            .map(|(ra, rb)| {
                let sq: f64 = ra.iter().zip(rb).map(|(x, y)| (x - y) * (x - y)).sum();
                (sq + c * c).sqrt() - c
            })
            .collect();
        let value = Mat::from_vec(d.len(), 1, d)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(Op::PseudoHuber { a, b, c }, value, tracked))
    }

    /// Records a full dense network: each layer sees `[h, condition]`.
    pub fn mlp(&mut self, source: SourceId, input: NodeId, condition: NodeId) -> Result<NodeId> {
        let params = self.sources[source.0].params;
        params.check_inputs(self.value(input), self.value(condition))?;
        let with_cond = params.cond_dim() > 0;
        let mut h = input;
        for (l, spec) in params.layers().iter().enumerate() {
            let x = if with_cond {
                self.concat(&[h, condition])?
            } else {
                h
            };
            let z = self.affine(source, l, x)?;
            h = self.activation(z, spec.activation);
        }
        Ok(h)
    }

    /// Reverse sweep from a scalar root. Tape values are left untouched, so
    /// the same tape can be swept again from a different root.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.shape() != (1, 1) {
            return Err(Error::NotScalar {
                rows: rv.rows(),
                cols: rv.cols(),
            });
        }
        let mut params: Vec<Option<Vec<f64>>> = self
            .sources
            .iter()
            .map(|s| s.trainable.then(|| vec![0.0; s.params.len()]))
            .collect();
        let mut adj: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[root.0] = Some(Mat::scalar(1.0));

        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.tracked {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            match &node.op {
                Op::Leaf => adj[id] = Some(g),
                Op::Affine {
                    input,
                    source,
                    layer,
                } => {
                    let src = &self.sources[source.0];
                    let spec = src.params.layers()[*layer];
                    let off = src.params.offsets()[*layer];
                    let want_dx = self.tracked(*input);
                    let dx = affine_backward(
                        src.params.weights(),
                        off,
                        &spec,
                        self.value(*input),
                        &g,
                        params[source.0].as_deref_mut(),
                        want_dx,
                    );
                    if let Some(dx) = dx {
                        accumulate(&mut adj, *input, dx);
                    }
                }
                Op::Activation { input, act } => {
                    let x = self.value(*input);
                    let mut d = g;
                    for (v, &xi) in d.data_mut().iter_mut().zip(x.data()) {
                        *v *= act.derivative(xi);
                    }
                    accumulate(&mut adj, *input, d);
                }
                Op::Add(a, b) => {
                    if self.tracked(*a) {
                        accumulate(&mut adj, *a, g.clone());
                    }
                    if self.tracked(*b) {
                        accumulate(&mut adj, *b, g);
                    }
                }
                Op::Scale { input, factor } => {
                    accumulate(&mut adj, *input, g.map(|v| v * factor));
                }
                Op::RowScale { input, factors } => {
                    let mut d = g;
                    for (i, &f) in factors.iter().enumerate() {
                        d.row_mut(i).iter_mut().for_each(|v| *v *= f);
                    }
                    accumulate(&mut adj, *input, d);
                }
                Op::ColScale { input, factors } => {
                    let mut d = g;
                    for i in 0..d.rows() {
                        d.row_mut(i)
                            .iter_mut()
                            .zip(factors)
                            .for_each(|(v, f)| *v *= f);
                    }
                    accumulate(&mut adj, *input, d);
                }
                Op::Concat(parts) => {
                    let mut at = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.tracked(p) {
                            accumulate(&mut adj, p, g.slice_cols(at, w));
                        }
                        at += w;
                    }
                }
                Op::Slice { input, start } => {
                    let x = self.value(*input);
                    let mut d = Mat::zeros(x.rows(), x.cols());
                    let w = g.cols();
                    for i in 0..x.rows() {
                        d.row_mut(i)[*start..start + w].copy_from_slice(g.row(i));
                    }
                    accumulate(&mut adj, *input, d);
                }
                Op::Mean(input) => {
                    let x = self.value(*input);
                    let n = x.data().len().max(1) as f64;
                    accumulate(
                        &mut adj,
                        *input,
                        Mat::filled(x.rows(), x.cols(), g.data()[0] / n),
                    );
                }
                Op::SquaredDistance(a, b) => {
                    self.distance_backward(&mut adj, *a, *b, &g, |diff, _| 2.0 * diff);
                }
                Op::PseudoHuber { a, b, c } => {
                    let c = *c;
                    let out = &node.value;
                    self.distance_backward(&mut adj, *a, *b, &g, |diff, row| {
                        diff / (out.data()[row] + c)
                    });
                }
            }
        }
        Ok(Gradients {
            params,
            adjoints: adj,
        })
    }

    /// Shared backward for per-row distances; `dfd(diff, row)` is the
    /// partial derivative with respect to `a` for one coordinate.
    fn distance_backward(
        &self,
        adj: &mut [Option<Mat>],
        a: NodeId,
        b: NodeId,
        g: &Mat,
        dfd: impl Fn(f64, usize) -> f64,
    ) {
        let (va, vb) = (self.value(a), self.value(b));
        let mut da = Mat::zeros(va.rows(), va.cols());
        for i in 0..va.rows() {
            let gi = g.data()[i];
            let (ra, rb) = (va.row(i), vb.row(i));
            for (j, d) in da.row_mut(i).iter_mut().enumerate() {
                *d = gi * dfd(ra[j] - rb[j], i);
            }
        }
        if self.tracked(b) {
            accumulate(adj, b, da.map(|v| -v));
        }
        if self.tracked(a) {
            accumulate(adj, a, da);
        }
    }
}

fn accumulate(adj: &mut [Option<Mat>], id: NodeId, g: Mat) {
    match &mut adj[id.0] {
        Some(existing) => {
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        slot @ None => *slot = Some(g),
    }
}
