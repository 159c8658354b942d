//! Helpers shared by the criss-cross tests and the acceptance run.
#![allow(dead_code)]

use densecc::ccnet::{cca_layer, dense_forward, DenseBlock, DenseConfig};
use densecc::pair_matrix::EntityPairMatrix;
use densecc::tensor::init::{self, Rng64};
use densecc::tensor::{Graph, ParamStore, Tensor};
use rand::Rng;

pub const D: usize = 4;

pub fn config(layers: usize, expanded: bool, dense: bool) -> DenseConfig {
    DenseConfig {
        layers,
        dim: D,
        attn_dim: 3,
        bias_hidden: 3,
        expanded,
        use_bias: true,
        dense,
    }
}

pub fn block(seed: u64, cfg: DenseConfig) -> (DenseBlock, ParamStore) {
    let mut store = ParamStore::new();
    let mut rng = init::rng(seed);
    let b = DenseBlock::new(&mut store, &mut rng, cfg);
    randomize_biases(&mut store, &mut rng);
    (b, store)
}

pub fn randomize_biases(store: &mut ParamStore, rng: &mut Rng64) {
    for (name, p) in store.iter_mut() {
        if name.ends_with(".b") {
            for x in p.value.data_mut() {
                *x = rng.gen_range(-0.5..0.5);
            }
        }
    }
}

pub fn random_matrix(rng: &mut Rng64, n: usize) -> Tensor {
    init::normal(rng, &[n * n, D], 1.0)
}

pub fn run_layer(store: &ParamStore, b: &DenseBlock, m: &Tensor, n: usize) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(m.clone());
    let o = cca_layer(&mut g, store, &b.layers[0], x, n, b.config.expanded, b.config.use_bias).unwrap();
    g.value(o.out).clone()
}

pub fn run_block(store: &ParamStore, b: &DenseBlock, m: &Tensor, n: usize) -> Tensor {
    let mut g = Graph::new();
    let x = g.constant(m.clone());
    let out = dense_forward(&mut g, store, b, EntityPairMatrix { n, d: D, m: x }).unwrap();
    g.value(out.m.m).clone()
}

pub fn linear(m: &Tensor, w: &Tensor, b: &Tensor) -> Vec<Vec<f64>> {
    let (rows, inn, out) = (m.shape()[0], w.shape()[0], w.shape()[1]);
    (0..rows)
        .map(|r| {
            (0..out)
                .map(|j| b.data()[j] + (0..inn).map(|i| m.row(r)[i] * w.data()[i * out + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

/// Full `N² × N²` attention with every non-criss-cross key masked out.
pub fn masked_full_attention(store: &ParamStore, b: &DenseBlock, m: &Tensor, n: usize) -> Tensor {
    let p = |s: &str| store.value(&format!("ccnet.layer0.{s}")).unwrap().clone();
    let mut g = Graph::new();
    let x = g.constant(m.clone());
    let lin = |g: &mut Graph, name: &str| {
        let w = g.constant(p(&format!("{name}.w")));
        let y = g.matmul(x, w).unwrap();
        match store.value(&format!("ccnet.layer0.{name}.b")) {
            Some(b) => {
                let bias = g.constant(b.clone());
                g.add(y, bias).unwrap()
            }
            None => y,
        }
    };
    let q = lin(&mut g, "q");
    let k = lin(&mut g, "k");
    let v = lin(&mut g, "v");
    let res = lin(&mut g, "res");
    let h = lin(&mut g, "bias.l1");
    let h = g.relu(h).unwrap();
    let w2 = g.constant(p("bias.l2.w"));
    let b2 = g.constant(p("bias.l2.b"));
    let bias = g.matmul(h, w2).unwrap();
    let bias = g.add(bias, b2).unwrap();
    let bias_row = g.transpose(bias).unwrap();

    let kt = g.transpose(k).unwrap();
    let scores = g.matmul(q, kt).unwrap();
    let scores = g.scale(scores, 1.0 / 3f64.sqrt()).unwrap();
    let scores = g.add(scores, bias_row).unwrap();
    let nn = n * n;
    let mut mask = vec![0.0; nn * nn];
    for p in 0..nn {
        let (s, o) = (p / n, p % n);
        for r in 0..nn {
            let (a, c) = (r / n, r % n);
            let allowed = a == s || c == o || (b.config.expanded && (c == s || a == o));
            if !allowed {
                mask[p * nn + r] = -1e30;
            }
        }
    }
    let mask = g.constant(Tensor::matrix(nn, nn, mask).unwrap());
    let scores = g.add(scores, mask).unwrap();
    let attn = g.softmax(scores, 1).unwrap();
    let out = g.matmul(attn, v).unwrap();
    let out = g.add(out, res).unwrap();
    g.value(out).clone()
}

pub fn influence(run: impl Fn(&Tensor) -> Tensor, m: &Tensor, n: usize, a: usize, c: usize, delta: f64) -> Vec<f64> {
    let base = run(m);
    let mut bumped = m.clone();
    for x in &mut bumped.data_mut()[(a * n + c) * D..(a * n + c + 1) * D] {
        *x += delta;
    }
    let moved = run(&bumped);
    (0..n * n)
        .map(|p| {
            base.row(p)
                .iter()
                .zip(moved.row(p))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max)
        })
        .collect()
}

