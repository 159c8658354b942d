use densecc::ccnet::{
    cca_layer, cca_positions, clustering_stats, dense_forward, pair_bias, AttentionTrace, DenseBlock,
    Transition,
};
use densecc::document::PairLabels;
use densecc::pair_matrix::EntityPairMatrix;
use densecc::tensor::gradcheck::grad_check;
use densecc::tensor::init;
use densecc::tensor::{Graph, ParamStore, Tensor, Var};
use rand::Rng;

mod common;
use common::*;

#[test]
fn position_enumeration() {
    assert_eq!(cca_positions(0, 0, 1, false).unwrap(), vec![(0, 0)]);
    assert_eq!(cca_positions(0, 0, 1, true).unwrap(), vec![(0, 0)]);
    assert_eq!(
        cca_positions(0, 1, 3, false).unwrap(),
        vec![(0, 0), (0, 1), (0, 2), (1, 1), (2, 1)]
    );
    let exp = cca_positions(0, 1, 3, true).unwrap();
    assert_eq!(exp.len(), 8);
    assert_eq!(&exp[5..], &[(1, 0), (2, 0), (1, 2)]);
    assert!(cca_positions(3, 0, 3, false).is_err());
    // Independent set oracle over every pair.
    for n in 1..6 {
        for s in 0..n {
            for o in 0..n {
                for expanded in [false, true] {
                    let got = cca_positions(s, o, n, expanded).unwrap();
                    let mut want = Vec::new();
                    for a in 0..n {
                        for b in 0..n {
                            let std = a == s || b == o;
                            let ext = b == s || a == o;
                            if std || (expanded && ext) {
                                want.push((a, b));
                            }
                        }
                    }
                    let mut sorted = got.clone();
                    sorted.sort_unstable();
                    assert_eq!(sorted, want);
                    assert_eq!(got.len(), want.len());
                }
            }
        }
    }
}

#[test]
fn matches_masked_full_attention() {
    let mut rng = init::rng(100);
    for n in 2..=6 {
        for expanded in [false, true] {
            let (b, store) = block(n as u64, config(1, expanded, true));
            let m = random_matrix(&mut rng, n);
            let got = run_layer(&store, &b, &m, n);
            let want = masked_full_attention(&store, &b, &m, n);
            let diff = got.max_abs_diff(&want);
            assert!(diff < 1e-9, "n={n} expanded={expanded}: {diff}");
        }
    }
}

#[test]
fn single_layer_receptive_field() {
    let n = 4;
    let mut rng = init::rng(7);
    for draw in 0..20 {
        for expanded in [false, true] {
            let (b, store) = block(200 + draw, config(1, expanded, true));
            let m = random_matrix(&mut rng, n);
            let (a, c) = (rng.gen_range(0..n), rng.gen_range(0..n));
            let delta = rng.gen_range(0.5..1.5);
            let resp = influence(|x| run_layer(&store, &b, x, n), &m, n, a, c, delta);
            for p in 0..n * n {
                let (s, o) = (p / n, p % n);
                let inside = cca_positions(s, o, n, expanded).unwrap().contains(&(a, c));
                if inside {
                    assert!(resp[p] > 1e-12, "draw {draw}: ({a},{c}) should reach ({s},{o})");
                } else {
                    assert_eq!(resp[p], 0.0, "draw {draw}: ({a},{c}) leaked into ({s},{o})");
                }
            }
        }
    }
}

#[test]
fn one_expanded_block_layer_stays_local() {
    let n = 4;
    let mut rng = init::rng(8);
    let (b, store) = block(9, config(1, true, true));
    let m = random_matrix(&mut rng, n);
    for a in 0..n {
        for c in 0..n {
            let resp = influence(|x| run_block(&store, &b, x, n), &m, n, a, c, 0.7);
            for p in 0..n * n {
                let (s, o) = (p / n, p % n);
                let field = a == s || c == o || c == s || a == o;
                assert_eq!(resp[p] > 0.0, field, "({a},{c}) -> ({s},{o})");
            }
        }
    }
}

#[test]
fn two_standard_layers_reach_everything() {
    let n = 4;
    let mut rng = init::rng(10);
    for dense in [true, false] {
        let (b, store) = block(11, config(2, false, dense));
        let m = random_matrix(&mut rng, n);
        for a in 0..n {
            for c in 0..n {
                let resp = influence(|x| run_block(&store, &b, x, n), &m, n, a, c, 0.7);
                assert!(resp.iter().all(|&r| r > 1e-12), "({a},{c}) dense={dense}");
            }
        }
    }
}

#[test]
fn uniform_bias_shift_is_invisible() {
    let n = 4;
    let mut rng = init::rng(12);
    let (b, mut store) = block(13, config(1, true, true));
    let m = random_matrix(&mut rng, n);
    let before = run_layer(&store, &b, &m, n);
    let mut shifted = store.value("ccnet.layer0.bias.l2.b").unwrap().clone();
    shifted.data_mut()[0] += 3.7;
    store.set_value("ccnet.layer0.bias.l2.b", shifted).unwrap();
    let after = run_layer(&store, &b, &m, n);
    assert!(before.max_abs_diff(&after) < 1e-9);
}

#[test]
fn layer_is_permutation_equivariant() {
    let n = 4;
    let perm = [3, 1, 0, 2];
    let mut rng = init::rng(14);
    for expanded in [false, true] {
        let (b, store) = block(15, config(1, expanded, true));
        let m = random_matrix(&mut rng, n);
        let mut pm = Tensor::zeros(&[n * n, D]);
        for s in 0..n {
            for o in 0..n {
                let src = m.row(perm[s] * n + perm[o]).to_vec();
                pm.data_mut()[(s * n + o) * D..(s * n + o + 1) * D].copy_from_slice(&src);
            }
        }
        let out = run_layer(&store, &b, &m, n);
        let pout = run_layer(&store, &b, &pm, n);
        for s in 0..n {
            for o in 0..n {
                for (x, y) in pout.row(s * n + o).iter().zip(out.row(perm[s] * n + perm[o])) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn zero_layers_is_identity() {
    let mut rng = init::rng(16);
    let (b, store) = block(17, config(0, true, true));
    assert_eq!(store.len(), 0);
    let m = random_matrix(&mut rng, 3);
    assert_eq!(run_block(&store, &b, &m, 3), m);
}

#[test]
fn single_entity_attends_to_itself() {
    let mut rng = init::rng(18);
    let (b, store) = block(19, config(1, true, true));
    let m = random_matrix(&mut rng, 1);
    let mut g = Graph::new();
    let x = g.constant(m.clone());
    let o = cca_layer(&mut g, &store, &b.layers[0], x, 1, true, true).unwrap();
    assert_eq!(g.attention_weights(o.attention).unwrap(), &[vec![1.0]]);
    let v = linear(&m, store.value("ccnet.layer0.v.w").unwrap(), store.value("ccnet.layer0.v.b").unwrap());
    let r = linear(&m, store.value("ccnet.layer0.res.w").unwrap(), store.value("ccnet.layer0.res.b").unwrap());
    for k in 0..D {
        assert!((g.value(o.out).data()[k] - v[0][k] - r[0][k]).abs() < 1e-12);
    }
}

#[test]
fn dense_and_recurrent_agree_for_one_layer() {
    let n = 3;
    let mut rng = init::rng(20);
    let (dense, mut dstore) = block(21, config(1, true, true));
    let (rec, mut rstore) = block(99, config(1, true, false));
    let names: Vec<String> = rstore.names().map(String::from).collect();
    for name in names {
        rstore.set_value(&name, dstore.value(&name).unwrap().clone()).unwrap();
    }
    // Final transition that selects the layer output block.
    let mut w = Tensor::zeros(&[2 * D, D]);
    for i in 0..D {
        w.data_mut()[(D + i) * D + i] = 1.0;
    }
    dstore.set_value("ccnet.trans_final.w", w).unwrap();
    dstore.set_value("ccnet.trans_final.b", Tensor::zeros(&[D])).unwrap();
    let m = random_matrix(&mut rng, n);
    let a = run_block(&dstore, &dense, &m, n);
    let b = run_block(&rstore, &rec, &m, n);
    for (x, y) in a.data().iter().zip(b.data()) {
        assert!((x - y.tanh()).abs() < 1e-12);
    }
}

#[test]
fn transition_contract() {
    let mut store = ParamStore::new();
    let mut rng = init::rng(22);
    let t = Transition::new(&mut store, &mut rng, "t", D, D);
    store.set_value("t.w", Tensor::eye(D)).unwrap();
    let x = random_matrix(&mut rng, 2);
    let mut g = Graph::new();
    let xv = g.constant(x.clone());
    let y = t.forward(&mut g, &store, xv).unwrap();
    for (a, b) in g.value(y).data().iter().zip(x.data()) {
        assert!((a - b.tanh()).abs() < 1e-15);
    }
    let wide = g.constant(Tensor::zeros(&[4, D + 1]));
    assert!(t.forward(&mut g, &store, wide).is_err());

    // Every transition maps back to width d and passes gradient to every block.
    let (b, store) = block(23, config(3, false, true));
    for (i, t) in b.transitions.iter().chain(b.final_transition.iter()).enumerate() {
        let blocks = i + 2;
        let mut g = Graph::new();
        let x = g.leaf(init::normal(&mut rng, &[4, D * blocks], 1.0));
        let y = t.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(y), &[4, D]);
        let l = g.sum_all(y).unwrap();
        g.backward(l).unwrap();
        let gx = g.grad(x).unwrap();
        for blk in 0..blocks {
            let any = (0..4).any(|r| gx.row(r)[blk * D..(blk + 1) * D].iter().any(|&v| v != 0.0));
            assert!(any, "block {blk} of transition {i}");
        }
    }
}

#[test]
fn zero_weight_bias_is_neutral() {
    let (b, mut store) = block(24, config(1, false, true));
    let names: Vec<String> = store.names().filter(|n| n.contains(".bias.")).map(String::from).collect();
    for name in names {
        let shape = store.value(&name).unwrap().shape().to_vec();
        store.set_value(&name, Tensor::zeros(&shape)).unwrap();
    }
    let mut g = Graph::new();
    let f = g.constant(Tensor::full(&[2, D], 0.3));
    let (bias, prob) = pair_bias(&mut g, &store, &b.layers[0], f).unwrap();
    assert_eq!(g.value(bias).data(), &[0.0, 0.0]);
    assert_eq!(g.value(prob).data(), &[0.5, 0.5]);
}

#[test]
fn trace_distributions_are_normalized() {
    let n = 3;
    let mut rng = init::rng(25);
    let (b, store) = block(26, config(2, true, true));
    let mut g = Graph::new();
    let x = g.constant(random_matrix(&mut rng, n));
    let out = dense_forward(&mut g, &store, &b, EntityPairMatrix { n, d: D, m: x }).unwrap();
    let trace = AttentionTrace::from_output(&g, &out);
    assert_eq!(trace.records.len(), 2 * n * n);
    for r in &trace.records {
        assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-8);
        assert!(r.weights.iter().all(|&w| w >= 0.0));
        assert_eq!(r.positions, cca_positions(r.s, r.o, n, true).unwrap());
    }
    let jsonl = trace.to_jsonl();
    assert_eq!(jsonl.lines().count(), 2 * n * n);
    let first: serde_json::Value = serde_json::from_str(jsonl.lines().next().unwrap()).unwrap();
    assert_eq!(first["layer"], 0);
    assert!(trace.get(1, 2, 0).is_some());
}

#[test]
fn non_finite_input_names_the_pair() {
    let (b, store) = block(27, config(1, false, true));
    let mut m = Tensor::zeros(&[4, D]);
    m.data_mut()[2 * D + 1] = f64::NAN;
    let mut g = Graph::new();
    let x = g.constant(m);
    let err = cca_layer(&mut g, &store, &b.layers[0], x, 2, false, true).unwrap_err();
    assert!(err.to_string().contains("(1, 0)"), "{err}");
}

fn labels(n: usize, facts: &[(usize, usize)]) -> PairLabels {
    let mut relations = vec![Vec::new(); n * n];
    for &(s, o) in facts {
        relations[s * n + o].push(0);
    }
    PairLabels { n, relations }
}

#[test]
fn cluster_centres() {
    let mut rng = init::rng(28);
    let m = random_matrix(&mut rng, 3);
    let mut g = Graph::new();
    let x = g.constant(m.clone());
    let st = clustering_stats(&mut g, x, &labels(3, &[(0, 2)])).unwrap().unwrap();
    assert_eq!(g.value(st.v1).data(), m.row(2));
    for k in 0..D {
        let want: f64 = [1, 3, 5, 6, 7].iter().map(|&p| m.row(p)[k]).sum::<f64>() / 5.0;
        assert!((g.value(st.v0).data()[k] - want).abs() < 1e-12);
    }
    let st = clustering_stats(&mut g, x, &labels(3, &[(0, 1), (2, 1)])).unwrap().unwrap();
    for k in 0..D {
        let want = (m.row(1)[k] + m.row(7)[k]) / 2.0;
        assert!((g.value(st.v1).data()[k] - want).abs() < 1e-12);
    }
    assert!(clustering_stats(&mut g, x, &labels(3, &[])).unwrap().is_none());

    let same = g.constant(Tensor::full(&[9, D], 0.4));
    let st = clustering_stats(&mut g, same, &labels(3, &[(1, 0)])).unwrap().unwrap();
    let cos = g.cosine(st.v0, st.v1).unwrap();
    assert!((g.value(cos).data()[0] - 1.0).abs() < 1e-12);
}

fn block_loss(g: &mut Graph, store: &ParamStore, b: &DenseBlock, x: Var, n: usize) -> Var {
    let out = dense_forward(g, store, b, EntityPairMatrix { n, d: D, m: x }).unwrap();
    let mut total = g.sum_all(out.m.m).unwrap();
    for l in &out.layers {
        let p = g.sigmoid(l.bias_logits.unwrap()).unwrap();
        let s = g.sum_all(p).unwrap();
        total = g.add(total, s).unwrap();
    }
    let sq = g.square(total).unwrap();
    g.scale(sq, 0.1).unwrap()
}

#[test]
fn block_gradients_match_finite_differences() {
    let n = 3;
    let mut rng = init::rng(29);
    for (dense, expanded) in [(true, true), (false, false)] {
        let (b, store) = block(30, config(2, expanded, dense));
        let m = init::normal(&mut rng, &[n * n, D], 0.5);
        let err = grad_check(|g, x| Ok(block_loss(g, &store, &b, x, n)), &m).unwrap();
        assert!(err < 1e-5, "dense={dense}: {err}");
    }
}
