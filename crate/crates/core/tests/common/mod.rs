#![allow(dead_code)]

use fairdd::{OpKind, Tape, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

#[derive(Debug, Clone)]
enum Step {
    /// `op(cur, extra...)`
    Left(OpKind, Vec<Tensor>),
    /// `op(extra, cur)`
    Right(OpKind, Tensor),
}

/// A random chain of tape operations ending in a scalar loss.
#[derive(Debug, Clone)]
pub struct OpGraph {
    pub input: Tensor,
    steps: Vec<Step>,
    head: (OpKind, Tensor),
}

impl OpGraph {
    pub fn random(rng: &mut ChaCha8Rng) -> Self {
        let mut shape: Vec<usize> = if rng.gen_bool(0.5) {
            vec![rng.gen_range(1..=4), rng.gen_range(2..=6)]
        } else {
            let side = |r: &mut ChaCha8Rng| if r.gen_bool(0.5) { 2 } else { 4 };
            vec![rng.gen_range(1..=3), rng.gen_range(1..=3), side(rng), side(rng)]
        };
        let input = normal(rng, &shape);
        let mut steps = Vec::new();
        for _ in 0..rng.gen_range(1..=5) {
            let nd = shape.len();
            match rng.gen_range(0..9) {
                0 => steps.push(Step::Left(OpKind::Add, vec![normal(rng, &shape)])),
                1 => steps.push(Step::Right(OpKind::Sub, normal(rng, &shape))),
                2 => steps.push(Step::Left(OpKind::ScalarMul(rng.gen_range(-2.0..2.0)), vec![])),
                3 => steps.push(Step::Left(OpKind::Relu, vec![])),
                4 if nd == 2 => {
                    if rng.gen_bool(0.5) {
                        let m = rng.gen_range(1..=5);
                        steps.push(Step::Left(OpKind::MatMul, vec![normal(rng, &[shape[1], m])]));
                        shape[1] = m;
                    } else {
                        let m = rng.gen_range(1..=4);
                        steps.push(Step::Right(OpKind::MatMul, normal(rng, &[m, shape[0]])));
                        shape[0] = m;
                    }
                }
                5 if nd == 4 => {
                    let out = rng.gen_range(1..=3);
                    let k = if rng.gen_bool(0.5) { 1 } else { 3 };
                    let pool = shape[2] % 2 == 0 && shape[3] % 2 == 0 && rng.gen_bool(0.5);
                    steps.push(Step::Left(OpKind::Conv2d { pool }, vec![normal(rng, &[out, shape[1], k, k])]));
                    shape[1] = out;
                    if pool {
                        shape[2] /= 2;
                        shape[3] /= 2;
                    }
                }
                6 if nd >= 2 => {
                    let axis = rng.gen_range(0..nd);
                    steps.push(Step::Left(OpKind::MeanAxis(axis), vec![]));
                    shape.remove(axis);
                }
                7 if nd >= 3 => {
                    steps.push(Step::Left(OpKind::Flatten, vec![]));
                    shape = vec![shape[0], shape[1..].iter().product()];
                }
                8 => {
                    let mut other = shape.clone();
                    other[0] = rng.gen_range(1..=3);
                    steps.push(Step::Left(OpKind::Concat, vec![normal(rng, &other)]));
                    shape[0] += other[0];
                }
                _ => steps.push(Step::Left(OpKind::ScalarMul(0.5), vec![])),
            }
        }
        let head = match rng.gen_range(0..4) {
            0 => (OpKind::Mse, normal(rng, &shape)),
            1 => (OpKind::Mae, normal(rng, &shape)),
            2 => (OpKind::CosineDistance, normal(rng, &shape)),
            _ if shape.len() == 2 => {
                let mut t: Vec<f64> = (0..shape[0] * shape[1]).map(|_| rng.gen_range(0.01..1.0)).collect();
                for row in t.chunks_mut(shape[1]) {
                    let s: f64 = row.iter().sum();
                    row.iter_mut().for_each(|v| *v /= s);
                }
                (OpKind::SoftmaxCrossEntropy, Tensor::new(shape.clone(), t).unwrap())
            }
            _ => (OpKind::Mse, normal(rng, &shape)),
        };
        Self { input, steps, head }
    }

    /// Like [`OpGraph::random`], but keeps every relu input and mae residual at
    /// least `margin` away from its kink.
    pub fn random_smooth(rng: &mut ChaCha8Rng, margin: f64) -> Self {
        loop {
            let g = Self::random(rng);
            if g.min_kink_distance() > margin {
                return g;
            }
        }
    }

    pub fn build(&self, tape: &Tape, x: Var) -> Result<Var, TensorError> {
        self.build_inner(tape, x, &mut |_, _| {})
    }

    fn build_inner(
        &self,
        tape: &Tape,
        x: Var,
        seen: &mut dyn FnMut(&Tape, f64),
    ) -> Result<Var, TensorError> {
        let mut cur = x;
        for step in &self.steps {
            cur = match step {
                Step::Left(kind, extra) => {
                    if *kind == OpKind::Relu {
                        tape.value(cur).data().iter().for_each(|v| seen(tape, v.abs()));
                    }
                    let mut inputs = vec![cur];
                    inputs.extend(extra.iter().map(|t| tape.constant(t.clone())));
                    tape.apply(*kind, &inputs)?
                }
                Step::Right(kind, extra) => {
                    let c = tape.constant(extra.clone());
                    tape.apply(*kind, &[c, cur])?
                }
            };
        }
        let (kind, target) = &self.head;
        if *kind == OpKind::Mae {
            let v = tape.value(cur);
            v.data().iter().zip(target.data()).for_each(|(a, b)| seen(tape, (a - b).abs()));
        }
        let t = tape.constant(target.clone());
        tape.apply(*kind, &[cur, t])
    }

    pub fn min_kink_distance(&self) -> f64 {
        let tape = Tape::new();
        let x = tape.constant(self.input.clone());
        let mut worst = f64::INFINITY;
        match self.build_inner(&tape, x, &mut |_, d| worst = worst.min(d)) {
            Ok(_) => worst,
            Err(_) => 0.0,
        }
    }
}
