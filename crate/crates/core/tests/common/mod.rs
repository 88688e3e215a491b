//! Helpers shared by the property and acceptance suites.

#![allow(dead_code)]

use epitwin::autodiff::{Tape, Tensor, Var};
use epitwin::mechdsl::{Channel, NUM_CHANNELS};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// One recorded operation of a random graph; operands index earlier nodes.
#[derive(Debug, Clone)]
pub enum GraphOp {
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `a / (b^2 + 1)`, keeping the divisor away from zero.
    SafeDiv(usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Square(usize),
    /// `sqrt(a^2 + 1)`.
    SafeSqrt(usize),
    Affine(usize, f64, f64),
    Sum(usize),
    Mean(usize),
    Select(usize, usize),
    Slice(usize, usize, usize),
    Stack(usize, usize),
}

/// A random differentiable expression over a few leaf tensors.
#[derive(Debug, Clone)]
pub struct RandomGraph {
    pub leaves: Vec<Tensor>,
    pub ops: Vec<GraphOp>,
    /// Output weights, one per node, combined into the scalar root.
    pub weights: Vec<f64>,
}

const SHAPES: &[&[usize]] = &[&[4], &[2, 2], &[2, 3], &[3, 2], &[3], &[2, 4], &[4, 4], &[1, 3]];

fn shape_of(shapes: &[Vec<usize>], i: usize) -> &[usize] {
    &shapes[i]
}

impl RandomGraph {
    /// Up to `max_ops` operations on 2 to 3 leaves of at most 16 elements.
    pub fn sample(rng: &mut ChaCha8Rng, max_ops: usize) -> Self {
        let n_leaves = rng.random_range(2..=3);
        let mut leaves = Vec::new();
        let mut shapes: Vec<Vec<usize>> = Vec::new();
        for _ in 0..n_leaves {
            let shape = SHAPES[rng.random_range(0..SHAPES.len())].to_vec();
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| rng.random_range(-1.5..1.5)).collect();
            leaves.push(Tensor::new(shape.clone(), data).unwrap());
            shapes.push(shape);
        }
        let mut ops = Vec::new();
        let n_ops = rng.random_range(3..=max_ops);
        while ops.len() < n_ops {
            let k = shapes.len();
            let a = rng.random_range(0..k);
            let sa = shape_of(&shapes, a).to_vec();
            let same: Vec<usize> = (0..k).filter(|&j| shapes[j] == sa).collect();
            let b = same[rng.random_range(0..same.len())];
            let (op, shape) = match rng.random_range(0..17) {
                0 => (GraphOp::Add(a, b), sa.clone()),
                1 => (GraphOp::Sub(a, b), sa.clone()),
                2 => (GraphOp::Mul(a, b), sa.clone()),
                3 => (GraphOp::SafeDiv(a, b), sa.clone()),
                4 if sa.len() == 2 => {
                    let fits: Vec<usize> = (0..k)
                        .filter(|&j| shapes[j].len() == 2 && shapes[j][0] == sa[1])
                        .collect();
                    if fits.is_empty() {
                        continue;
                    }
                    let c = fits[rng.random_range(0..fits.len())];
                    (GraphOp::MatMul(a, c), vec![sa[0], shapes[c][1]])
                }
                5 if sa.len() == 2 => (GraphOp::Transpose(a), vec![sa[1], sa[0]]),
                6 => (GraphOp::Sigmoid(a), sa.clone()),
                7 => (GraphOp::Tanh(a), sa.clone()),
                8 => (GraphOp::Softplus(a), sa.clone()),
                9 => (GraphOp::Square(a), sa.clone()),
                10 => (GraphOp::SafeSqrt(a), sa.clone()),
                11 => {
                    let s = rng.random_range(-2.0..2.0);
                    let t = rng.random_range(-1.0..1.0);
                    (GraphOp::Affine(a, s, t), sa.clone())
                }
                12 => (GraphOp::Sum(a), vec![]),
                13 => (GraphOp::Mean(a), vec![]),
                14 if !sa.is_empty() && sa[0] > 1 => {
                    let i = rng.random_range(0..sa[0]);
                    (GraphOp::Select(a, i), sa[1..].to_vec())
                }
                15 if !sa.is_empty() && sa[0] > 1 => {
                    let start = rng.random_range(0..sa[0] - 1);
                    let end = rng.random_range(start + 1..=sa[0]);
                    let mut s = sa.clone();
                    s[0] = end - start;
                    (GraphOp::Slice(a, start, end), s)
                }
                16 if sa.iter().product::<usize>() <= 8 => {
                    let mut s = vec![2];
                    s.extend(&sa);
                    (GraphOp::Stack(a, b), s)
                }
                _ => continue,
            };
            ops.push(op);
            shapes.push(shape);
        }
        let weights = (0..shapes.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        Self { leaves, ops, weights }
    }

    /// Records the graph on the leaves' tape and returns the scalar root.
    pub fn build<'t>(&self, leaves: &[Var<'t>]) -> Var<'t> {
        let mut nodes: Vec<Var<'t>> = leaves.to_vec();
        for op in &self.ops {
            let n = &nodes;
            let v = match *op {
                GraphOp::Add(a, b) => n[a].add(n[b]).unwrap(),
                GraphOp::Sub(a, b) => n[a].sub(n[b]).unwrap(),
                GraphOp::Mul(a, b) => n[a].mul(n[b]).unwrap(),
                GraphOp::SafeDiv(a, b) => n[a].div(n[b].square().affine(1.0, 1.0)).unwrap(),
                GraphOp::MatMul(a, b) => n[a].matmul(n[b]).unwrap(),
                GraphOp::Transpose(a) => n[a].transpose().unwrap(),
                GraphOp::Sigmoid(a) => n[a].sigmoid(),
                GraphOp::Tanh(a) => n[a].tanh(),
                GraphOp::Softplus(a) => n[a].softplus(),
                GraphOp::Square(a) => n[a].square(),
                GraphOp::SafeSqrt(a) => n[a].square().affine(1.0, 1.0).sqrt().unwrap(),
                GraphOp::Affine(a, s, t) => n[a].affine(s, t),
                GraphOp::Sum(a) => n[a].sum(),
                GraphOp::Mean(a) => n[a].mean(),
                GraphOp::Select(a, i) => n[a].select(0, i).unwrap(),
                GraphOp::Slice(a, s, e) => n[a].slice(0, s, e).unwrap(),
                GraphOp::Stack(a, b) => Var::stack(&[n[a], n[b]], 0).unwrap(),
            };
            nodes.push(v);
        }
        let mut terms = nodes.iter().zip(&self.weights).map(|(v, w)| v.sum().affine(*w, 0.0));
        let first = terms.next().expect("graph has leaves");
        terms.fold(first, |acc, t| acc.add(t).unwrap())
    }

    /// Value of the root at the given leaf values.
    pub fn eval(&self, leaves: &[Tensor]) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|l| tape.constant(l.clone())).collect();
        self.build(&vars).item().unwrap()
    }

    /// Largest relative error between reverse-mode and central-difference
    /// gradients over every leaf entry. The error of one entry is
    /// `|ad - fd| / max(|ad|, |fd|, 1)`.
    pub fn max_gradient_error(&self, h: f64) -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = self.leaves.iter().map(|l| tape.leaf(l.clone())).collect();
        let grads = self.build(&vars).backward().unwrap();
        let mut worst: f64 = 0.0;
        for (li, leaf) in self.leaves.iter().enumerate() {
            let ad = grads.wrt(vars[li]);
            for k in 0..leaf.numel() {
                let mut plus = self.leaves.clone();
                plus[li].data_mut()[k] += h;
                let mut minus = self.leaves.clone();
                minus[li].data_mut()[k] -= h;
                let fd = (self.eval(&plus) - self.eval(&minus)) / (2.0 * h);
                let a = ad.data()[k];
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1.0));
            }
        }
        worst
    }
}

/// Per-channel parameter row in channel storage order.
pub fn channel_row(values: &[(Channel, f64)]) -> [f64; NUM_CHANNELS] {
    let mut row = [0.0; NUM_CHANNELS];
    for (c, v) in values {
        row[c.index()] = *v;
    }
    row
}

/// Single-patch SEIRM Euler step on plain floats, written out by hand:
/// new infections `beta * I / N * S`, progression `alpha * E`, recovery
/// `gamma * I`, death `mor * I`, waning `delta * R`.
pub fn seirm_oracle_step(s: [f64; 5], n: f64, beta: f64, alpha: f64, gamma: f64, mor: f64, delta: f64) -> [f64; 5] {
    let [sv, e, i, r, m] = s;
    let infect = beta * i / n * sv;
    let progress = alpha * e;
    let recover = gamma * i;
    let die = mor * i;
    let wane = delta * r;
    [
        sv - infect + wane,
        e + infect - progress,
        i + progress - recover - die,
        r + recover - wane,
        m + die,
    ]
}
