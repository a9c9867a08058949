//! Finite-difference oracle shared by the integration tests.

#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use selfablate::model::{AblationMode, Model, ModelConfig, NoHook, TokenBatch};
use selfablate::{Result, Tape, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Values bounded away from zero, for ops with a kink there.
pub fn randn_off_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    randn(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

pub type Graph<'a> = &'a dyn for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

/// Worst elementwise error `|a - n| / max(|a|, |n|, floor)` over every input.
pub struct Report {
    pub max_rel: f64,
    pub checked: usize,
}

fn projected(out: &Tensor<f64>, proj: &Tensor<f64>) -> f64 {
    out.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum()
}

/// Compares tape gradients of `sum(f(inputs) * R)` for a fixed random `R`
/// with central differences. `limit` caps the elements probed per input.
pub fn check_gradients(inputs: &[Tensor<f64>], f: Graph<'_>, limit: usize, seed: u64) -> Report {
    let h = 1e-5;
    let floor = 1e-6;
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&tape, &vars).unwrap();
    let proj = randn(&mut rng(seed), &out.shape());
    let loss = out.mul(tape.constant(proj.clone())).unwrap().sum().unwrap();
    let grads = tape.backward(loss).unwrap();

    let eval = |xs: &[Tensor<f64>]| -> f64 {
        let tape = Tape::inference();
        let vars: Vec<_> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        projected(&f(&tape, &vars).unwrap().value(), &proj)
    };
    let mut report = Report {
        max_rel: 0.0,
        checked: 0,
    };
    let mut pick = rng(seed ^ 0x5eed);
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads
            .get(vars[i])
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(input.shape().to_vec()));
        let n = input.numel();
        let idx: Vec<usize> = if n <= limit {
            (0..n).collect()
        } else {
            rand::seq::index::sample(&mut pick, n, limit).into_vec()
        };
        for j in idx {
            let mut xs = inputs.to_vec();
            xs[i].data_mut()[j] += h;
            let up = eval(&xs);
            xs[i].data_mut()[j] -= 2.0 * h;
            let down = eval(&xs);
            let numeric = (up - down) / (2.0 * h);
            let a = analytic.data()[j];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
            report.max_rel = report.max_rel.max(rel);
            report.checked += 1;
        }
    }
    report
}

pub const OP_RTOL: f64 = 1e-4;
pub const BLOCK_RTOL: f64 = 1e-3;

/// One finite-difference comparison.
pub struct Check {
    pub name: String,
    pub max_rel: f64,
    pub checked: usize,
    pub tol: f64,
}

impl Check {
    pub fn passed(&self) -> bool {
        self.checked > 0 && self.max_rel <= self.tol
    }
}

struct Suite(Vec<Check>);

impl Suite {
    fn op(&mut self, name: &str, inputs: &[Tensor<f64>], f: Graph<'_>) {
        let seed = self.0.len() as u64;
        let r = check_gradients(inputs, f, 64, seed);
        self.0.push(Check {
            name: name.into(),
            max_rel: r.max_rel,
            checked: r.checked,
            tol: OP_RTOL,
        });
    }
}

fn block_model(seed: u64) -> Model<f64> {
    let mut c = ModelConfig::desk(AblationMode::None, 1);
    c.vocab_size = 11;
    c.d_model = 8;
    c.n_heads = 2;
    c.d_mlp = 16;
    c.max_pos = 6;
    c.seed = seed;
    let mut m = Model::<f64>::new(c).unwrap();
    // larger weights than the 0.02 init so every term carries signal
    let mut g = rng(seed);
    for t in m.params_mut().tensors_mut() {
        let noise = randn(&mut g, t.shape());
        *t = t.zip_map(&noise, "perturb", |a, b| a + 0.3 * b).unwrap();
    }
    m
}

/// Every differentiable op, then two whole-model losses.
pub fn autodiff_suite() -> Vec<Check> {
    let mut s = Suite(Vec::new());
    let mut g = rng(1);
    for (ta, tb) in [(false, false), (false, true), (true, false), (true, true)] {
        let a = if ta {
            randn(&mut g, &[2, 4, 3])
        } else {
            randn(&mut g, &[2, 3, 4])
        };
        let b = if tb {
            randn(&mut g, &[2, 5, 4])
        } else {
            randn(&mut g, &[2, 4, 5])
        };
        s.op(&format!("matmul(ta={ta}, tb={tb})"), &[a, b], &move |_, v| {
            v[0].matmul_ex(v[1], ta, tb)
        });
    }
    let shared = [randn(&mut g, &[2, 3, 4]), randn(&mut g, &[4, 5])];
    s.op("matmul shared rhs", &shared, &|_, v| v[0].matmul(v[1]));
    let shared_t = [randn(&mut g, &[2, 3, 4]), randn(&mut g, &[5, 4])];
    s.op("matmul_t shared rhs", &shared_t, &|_, v| v[0].matmul_t(v[1]));

    let xs = [randn(&mut g, &[3, 4]), randn(&mut g, &[3, 4])];
    s.op("add", &xs, &|_, v| v[0].add(v[1]));
    s.op("sub", &xs, &|_, v| v[0].sub(v[1]));
    s.op("mul", &xs, &|_, v| v[0].mul(v[1]));
    let bias = [randn(&mut g, &[2, 3, 4]), randn(&mut g, &[4])];
    s.op("add_bias", &bias, &|_, v| v[0].add_bias(v[1]));
    let groups = [randn(&mut g, &[2, 3, 6]), randn(&mut g, &[2, 3, 2])];
    s.op("mul_groups", &groups, &|_, v| v[0].mul_groups(v[1], 3));

    let x = [randn_off_zero(&mut g, &[4, 5])];
    s.op("scale", &x, &|_, v| v[0].scale(-1.7));
    s.op("gelu", &x, &|_, v| v[0].gelu());
    s.op("relu", &x, &|_, v| v[0].relu());
    s.op("abs", &x, &|_, v| v[0].abs());

    let ln = [
        randn(&mut g, &[2, 3, 6]),
        randn(&mut g, &[6]),
        randn(&mut g, &[6]),
    ];
    s.op("layer_norm", &ln, &|_, v| v[0].layer_norm(v[1], v[2], 1e-5));
    let x3 = [randn(&mut g, &[3, 4, 5])];
    for axis in 0..3 {
        s.op(&format!("softmax(axis={axis})"), &x3, &move |_, v| {
            v[0].softmax(axis)
        });
    }
    let scores = [randn(&mut g, &[2, 4, 4])];
    s.op("causal_softmax", &scores, &|_, v| v[0].causal_softmax());

    let x = [randn(&mut g, &[2, 3, 4])];
    s.op("reshape", &x, &|_, v| v[0].reshape(&[6, 4]));
    s.op("permute", &x, &|_, v| v[0].permute(&[2, 0, 1]));
    s.op("sum", &x, &|_, v| v[0].sum());
    s.op("mean", &x, &|_, v| v[0].mean());
    let table = [randn(&mut g, &[5, 3])];
    s.op("embedding", &table, &|_, v| {
        v[0].embedding(&[4, 0, 4, 2, 1, 4], &[2, 3])
    });
    let logits = [randn(&mut g, &[2, 3, 7])];
    s.op("cross_entropy", &logits, &|_, v| {
        v[0].cross_entropy(&[0, 6, 3, 3, 1, 5])
    });

    let model = block_model(8);
    let tokens = TokenBatch::new(vec![1, 4, 9, 2, 0, 10, 3, 3, 7, 5], 2, 5).unwrap();
    let targets = [4, 9, 2, 0, 10, 3, 3, 7, 5, 1];
    let r = check_gradients(
        model.params().tensors(),
        &|tape, p| {
            let logits = model.forward_hooked(tape, p, &tokens, &mut NoHook)?;
            logits.reshape(&[10, 11])?.cross_entropy(&targets)
        },
        12,
        9,
    );
    s.0.push(Check {
        name: "whole model, clean loss".into(),
        max_rel: r.max_rel,
        checked: r.checked,
        tol: BLOCK_RTOL,
    });

    let model = block_model(10);
    let tokens = TokenBatch::new(vec![3, 1, 4, 1, 5, 9], 1, 6).unwrap();
    let targets = [1, 4, 1, 5, 9, 2];
    let r = check_gradients(
        model.params().tensors(),
        &|tape, p| {
            let out = model.forward_dual(tape, p, &tokens)?;
            let clean = out.clean_logits.reshape(&[6, 11])?.cross_entropy(&targets)?;
            let ablated = out.ablated_logits.reshape(&[6, 11])?.cross_entropy(&targets)?;
            clean.add(ablated)
        },
        8,
        11,
    );
    s.0.push(Check {
        name: "whole model, dual loss".into(),
        max_rel: r.max_rel,
        checked: r.checked,
        tol: BLOCK_RTOL,
    });
    s.0
}
