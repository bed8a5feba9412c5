//! Random-call fuzzing of every exposed numeric operation. A call passes when
//! it returns an error or a fully finite result; panics and non-finite
//! outputs are escapes.

use std::panic::{catch_unwind, AssertUnwindSafe};

use capgen_core::numerics::{log_softmax, softmax, GradTape, Tensor, Var};
use capgen_core::transformer::{scaled_dot_attention, Mask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const SOFTMAX_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Default)]
pub struct FuzzReport {
    pub calls: usize,
    pub ok: usize,
    pub rejected: usize,
    pub escapes: Vec<String>,
}

fn value(rng: &mut ChaCha8Rng, regime: u8) -> f32 {
    match regime {
        0 => rng.gen_range(-1.0..1.0),
        1 => rng.gen_range(-1e4..1e4),
        2 => if rng.gen_bool(0.5) { 3e30 } else { -3e30 },
        3 => rng.gen_range(-1e-30..1e-30),
        _ => 0.5,
    }
}

fn values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    // mostly moderate; sometimes huge, denormal-scale or constant rows
    let regime = match rng.gen_range(0..20) {
        0..=9 => 0,
        10..=15 => 1,
        16 => 2,
        17 => 3,
        _ => 4,
    };
    (0..n).map(|_| value(rng, regime)).collect()
}

fn shape(rng: &mut ChaCha8Rng) -> Vec<usize> {
    let rank = rng.gen_range(1..=4);
    (0..rank).map(|_| rng.gen_range(1..5)).collect()
}

fn tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, values(rng, n)).expect("finite fuzz data")
}

fn finite(t: &Tensor) -> bool {
    t.data().iter().all(|v| v.is_finite())
}

struct State {
    rng: ChaCha8Rng,
    tape: GradTape,
    pool: Vec<Var>,
}

impl State {
    fn pick(&mut self) -> Var {
        self.pool[self.rng.gen_range(0..self.pool.len())]
    }

    fn fresh(&mut self, shape: Vec<usize>) -> Var {
        let t = tensor(&mut self.rng, shape);
        let v = if self.rng.gen_bool(0.7) { self.tape.param(t) } else { self.tape.constant(t) };
        self.pool.push(v);
        v
    }

    /// A pool var half the time, otherwise a fresh one of `shape`.
    fn operand(&mut self, shape: Vec<usize>) -> Var {
        if self.rng.gen_bool(0.5) { self.pick() } else { self.fresh(shape) }
    }

    fn shape_of(&self, v: Var) -> Vec<usize> {
        self.tape.value(v).shape().to_vec()
    }
}

/// `Ok(true)` for a finite success, `Ok(false)` for an error return,
/// `Err` describing an escape.
fn one_call(s: &mut State, op: usize) -> Result<bool, String> {
    let tape_result = |s: &mut State, r: Result<Var, capgen_core::numerics::NumericsError>, name: &str| match r {
        Ok(v) if finite(s.tape.value(v)) => {
            s.pool.push(v);
            Ok(true)
        }
        Ok(_) => Err(format!("{name}: non-finite output")),
        Err(_) => Ok(false),
    };
    match op {
        0 => {
            let a = s.pick();
            let sa = s.shape_of(a);
            let n = s.rng.gen_range(1..5);
            let b = s.operand(vec![*sa.last().unwrap(), n]);
            let r = s.tape.matmul(a, b);
            tape_result(s, r, "matmul")
        }
        1 | 2 => {
            let a = s.pick();
            let sa = s.shape_of(a);
            let b = s.operand(sa);
            let r = if op == 1 { s.tape.add(a, b) } else { s.tape.mul(a, b) };
            tape_result(s, r, "add/mul")
        }
        3 => {
            let a = s.pick();
            let n = *s.shape_of(a).last().unwrap();
            let b = s.operand(vec![n]);
            let r = s.tape.add_row(a, b);
            tape_result(s, r, "add_row")
        }
        4 => {
            let a = s.pick();
            let c = match s.rng.gen_range(0..4) {
                0 => 1e35,
                1 => f32::NAN,
                _ => s.rng.gen_range(-10.0..10.0),
            };
            let r = s.tape.scale(a, c);
            tape_result(s, r, "scale")
        }
        5 => {
            let a = s.pick();
            let r = s.tape.relu(a);
            tape_result(s, r, "relu")
        }
        6 => {
            let a = s.pick();
            let r = s.tape.softmax_rows(a);
            if let Ok(v) = r {
                let t = s.tape.value(v).clone();
                let n = *t.shape().last().unwrap();
                for row in t.data().chunks(n) {
                    let sum: f64 = row.iter().map(|&x| x as f64).sum();
                    if (sum - 1.0).abs() > SOFTMAX_SUM_TOL {
                        return Err(format!("softmax_rows: row sums to {sum}"));
                    }
                }
            }
            tape_result(s, r, "softmax_rows")
        }
        7 => {
            let a = s.pick();
            let r = s.tape.transpose_last_two(a);
            tape_result(s, r, "transpose_last_two")
        }
        8 | 9 => {
            let a = s.pick();
            let mut sh = s.shape_of(a);
            let last = sh.len() - 1;
            if op == 8 { sh[last] = s.rng.gen_range(1..4) } else { sh[0] = s.rng.gen_range(1..4) }
            let b = s.operand(sh);
            let r = if op == 8 { s.tape.concat_last_axis(&[a, b]) } else { s.tape.concat_rows(&[a, b]) };
            tape_result(s, r, "concat")
        }
        10 => {
            let a = s.pick();
            let (lo, hi) = (s.rng.gen_range(0..5), s.rng.gen_range(0..6));
            let r = s.tape.slice_rows(a, lo, hi);
            tape_result(s, r, "slice_rows")
        }
        11 => {
            let a = s.pick();
            let n: usize = s.shape_of(a).iter().product();
            let sh = if s.rng.gen_bool(0.7) { vec![1, n] } else { shape(&mut s.rng) };
            let r = s.tape.reshape(a, sh);
            tape_result(s, r, "reshape")
        }
        12 => {
            let a = s.pick();
            let ids: Vec<usize> = (0..s.rng.gen_range(0..4)).map(|_| s.rng.gen_range(0..6)).collect();
            let r = s.tape.embedding_lookup(a, &ids);
            tape_result(s, r, "embedding_lookup")
        }
        13 => {
            let a = s.pick();
            let n = *s.shape_of(a).last().unwrap();
            let (g, b) = (s.operand(vec![n]), s.operand(vec![n]));
            let r = s.tape.layer_norm(a, g, b);
            tape_result(s, r, "layer_norm")
        }
        14 | 15 => {
            let a = s.pick();
            let r = if op == 14 { s.tape.sum(a) } else { s.tape.mean(a) };
            tape_result(s, r, "sum/mean")
        }
        16 => {
            let a = s.pick();
            let sh = s.shape_of(a);
            let (m, v) = (sh[0], *sh.last().unwrap());
            let targets: Vec<Option<usize>> =
                (0..m).map(|_| if s.rng.gen_bool(0.2) { None } else { Some(s.rng.gen_range(0..v + 1)) }).collect();
            let r = s.tape.cross_entropy_rows(a, &targets);
            tape_result(s, r, "cross_entropy_rows")
        }
        17 => {
            let sh = vec![s.rng.gen_range(1..3), s.rng.gen_range(1..5), s.rng.gen_range(1..5)];
            let x = s.operand(sh);
            let c = s.shape_of(x)[0];
            let o = s.rng.gen_range(1..3);
            let (k, b) = (s.fresh(vec![o, c, 3, 3]), s.fresh(vec![o]));
            let r = s.tape.conv2d_3x3(x, k, b);
            tape_result(s, r, "conv2d_3x3")
        }
        18 | 19 => {
            let x = s.pick();
            let r = if op == 18 { s.tape.maxpool2(x) } else { s.tape.global_avg_pool(x) };
            tape_result(s, r, "pool")
        }
        20 => {
            let a = s.pick();
            let loss = match s.tape.sum(a) {
                Ok(l) => l,
                Err(_) => return Ok(false),
            };
            match s.tape.backward(loss) {
                Ok(()) => {
                    for v in &s.pool {
                        if let Some(g) = s.tape.grad(*v) {
                            if g.iter().any(|x| !x.is_finite()) {
                                return Err("backward: non-finite gradient".into());
                            }
                        }
                    }
                    Ok(true)
                }
                Err(_) => Ok(false),
            }
        }
        21 => {
            let n = s.rng.gen_range(1..6);
            let mut data = values(&mut s.rng, n);
            if s.rng.gen_bool(0.5) {
                data[s.rng.gen_range(0..n)] = [f32::NAN, f32::INFINITY, f32::NEG_INFINITY][s.rng.gen_range(0..3)];
            }
            match Tensor::new(vec![n], data) {
                Ok(t) if finite(&t) => Ok(true),
                Ok(_) => Err("Tensor::new accepted a non-finite value".into()),
                Err(_) => Ok(false),
            }
        }
        22 => {
            let n = s.rng.gen_range(1..8);
            let row = values(&mut s.rng, n);
            let p = softmax(&row);
            let sum: f64 = p.iter().map(|&x| x as f64).sum();
            let lp = log_softmax(&row);
            if p.iter().any(|x| !x.is_finite()) || lp.iter().any(|x| !x.is_finite()) {
                return Err("softmax/log_softmax: non-finite".into());
            }
            if (sum - 1.0).abs() > SOFTMAX_SUM_TOL {
                return Err(format!("softmax: row sums to {sum}"));
            }
            Ok(true)
        }
        _ => {
            let (n, m, dk) = (s.rng.gen_range(1..4), s.rng.gen_range(1..4), s.rng.gen_range(1..4));
            let q = tensor(&mut s.rng, vec![n, dk]);
            let k = tensor(&mut s.rng, vec![m, dk]);
            let dv = s.rng.gen_range(1..4);
            let v = tensor(&mut s.rng, vec![m, dv]);
            let mask = (n == m && s.rng.gen_bool(0.5)).then(|| Mask::causal(n));
            match scaled_dot_attention(&q, &k, &v, mask.as_ref()) {
                Ok((o, w)) if finite(&o) && finite(&w) => Ok(true),
                Ok(_) => Err("scaled_dot_attention: non-finite output".into()),
                Err(_) => Ok(false),
            }
        }
    }
}

pub const OPS: usize = 24;

pub fn run_fuzz(calls: usize, seed: u64) -> FuzzReport {
    let mut s = State { rng: ChaCha8Rng::seed_from_u64(seed), tape: GradTape::new(), pool: Vec::new() };
    let mut report = FuzzReport::default();
    for call in 0..calls {
        if call % 40 == 0 {
            s.tape = GradTape::new();
            s.pool.clear();
            for _ in 0..3 {
                let sh = shape(&mut s.rng);
                s.fresh(sh);
            }
        }
        let op = s.rng.gen_range(0..OPS);
        report.calls += 1;
        match catch_unwind(AssertUnwindSafe(|| one_call(&mut s, op))) {
            Ok(Ok(true)) => report.ok += 1,
            Ok(Ok(false)) => report.rejected += 1,
            Ok(Err(e)) => report.escapes.push(format!("call {call}: {e}")),
            Err(_) => {
                report.escapes.push(format!("call {call}: op {op} panicked"));
                // the tape may be mid-update; start afresh
                s.tape = GradTape::new();
                s.pool.clear();
                let sh = shape(&mut s.rng);
                s.fresh(sh);
            }
        }
    }
    report
}
