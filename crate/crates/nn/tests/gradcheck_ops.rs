use anytime4d_nn::{AttnGroup, Graph, Tensor, Unary, Var};
use rand::Rng;
use rand_pcg::Pcg64;

fn rng(seed: u64) -> Pcg64 {
    anytime4d_core::rng::stream(seed, 99)
}

fn random(r: &mut Pcg64, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(rows, cols, |_, _| r.gen_range(lo..hi))
}

/// Checks analytic input gradients of `f` against central differences and
/// returns the largest normwise relative error over the inputs.
fn check(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let out = f(&mut g, &vars);
    let grads = g.backward(out);
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars);
        g.value(out).item()
    };
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(t.rows, t.cols));
        let mut num = vec![0.0; t.len()];
        for i in 0..t.len() {
            let mut xs = inputs.clone();
            xs[k].data[i] += h;
            let up = eval(&xs);
            xs[k].data[i] -= 2.0 * h;
            let down = eval(&xs);
            num[i] = (up - down) / (2.0 * h);
        }
        let diff: f64 = analytic.data.iter().zip(&num).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let scale = analytic.sq_norm().sqrt().max(num.iter().map(|x| x * x).sum::<f64>().sqrt());
        if scale > 0.0 {
            worst = worst.max(diff / scale);
        }
    }
    worst
}

/// Weighted sum so every output element carries a distinct gradient.
fn reduce(g: &mut Graph<f64>, v: Var) -> Var {
    let (r, c) = g.shape(v);
    let w = g.constant(Tensor::from_fn(r, c, |i, j| ((i * 31 + j * 17) % 13) as f64 / 6.0 - 1.0));
    let m = g.mul(v, w);
    g.sum(m)
}

#[test]
fn matmul_linear_and_elementwise() {
    let mut r = rng(1);
    let e = check(vec![random(&mut r, 3, 4, -1.0, 1.0), random(&mut r, 4, 5, -1.0, 1.0)], |g, v| {
        let m = g.matmul(v[0], v[1]);
        reduce(g, m)
    });
    assert!(e < 1e-7, "matmul {e}");
    let e = check(
        vec![random(&mut r, 3, 4, -1.0, 1.0), random(&mut r, 4, 2, -1.0, 1.0), random(&mut r, 1, 2, -1.0, 1.0)],
        |g, v| {
            let m = g.linear(v[0], v[1], Some(v[2]));
            reduce(g, m)
        },
    );
    assert!(e < 1e-7, "linear {e}");
    let e = check(vec![random(&mut r, 3, 4, -1.0, 1.0), random(&mut r, 3, 4, -1.0, 1.0)], |g, v| {
        let a = g.add(v[0], v[1]);
        let s = g.sub(a, v[1]);
        let m = g.mul(s, v[1]);
        let sc = g.scale(m, 1.7);
        let t = g.add_scalar(sc, 0.3);
        let t2 = g.mul(t, a);
        reduce(g, t2)
    });
    assert!(e < 1e-7, "elementwise {e}");
    let e = check(vec![random(&mut r, 3, 4, -1.0, 1.0), random(&mut r, 1, 4, -1.0, 1.0)], |g, v| {
        let a = g.add_row(v[0], v[1]);
        let m = g.mul_row(a, v[1]);
        reduce(g, m)
    });
    assert!(e < 1e-7, "row broadcast {e}");
}

#[test]
fn unary_kinds() {
    let mut r = rng(2);
    for k in [Unary::Exp, Unary::Gelu, Unary::Silu, Unary::Softplus, Unary::Sigmoid, Unary::Tanh, Unary::Abs] {
        let e = check(vec![random(&mut r, 4, 5, -3.0, 3.0)], |g, v| {
            let u = g.unary(v[0], k);
            reduce(g, u)
        });
        assert!(e < 1e-7, "{k:?} {e}");
    }
    let e = check(vec![random(&mut r, 4, 5, 0.0, 3.0)], |g, v| {
        let u = g.unary(v[0], Unary::Ratio);
        reduce(g, u)
    });
    assert!(e < 1e-7, "ratio {e}");
}

#[test]
fn layer_norm_with_and_without_affine() {
    let mut r = rng(3);
    let e = check(
        vec![random(&mut r, 5, 6, -2.0, 2.0), random(&mut r, 1, 6, 0.5, 1.5), random(&mut r, 1, 6, -1.0, 1.0)],
        |g, v| {
            let y = g.layer_norm(v[0], Some(v[1]), Some(v[2]));
            reduce(g, y)
        },
    );
    assert!(e < 1e-6, "affine {e}");
    let e = check(vec![random(&mut r, 5, 6, -2.0, 2.0)], |g, v| {
        let y = g.layer_norm(v[0], None, None);
        reduce(g, y)
    });
    assert!(e < 1e-6, "plain {e}");
}

#[test]
fn attention_global_grouped_and_causal() {
    let mut r = rng(4);
    let inputs = vec![random(&mut r, 6, 8, -1.0, 1.0), random(&mut r, 6, 8, -1.0, 1.0), random(&mut r, 6, 8, -1.0, 1.0)];
    let global = vec![AttnGroup { q: 0..6, kv: 0..6 }];
    let framewise = vec![AttnGroup { q: 0..3, kv: 0..3 }, AttnGroup { q: 3..6, kv: 3..6 }];
    let causal = vec![AttnGroup { q: 0..3, kv: 0..3 }, AttnGroup { q: 3..6, kv: 0..6 }];
    for groups in [global, framewise, causal] {
        let e = check(inputs.clone(), |g, v| {
            let a = g.attention(v[0], v[1], v[2], 2, groups.clone());
            reduce(g, a)
        });
        assert!(e < 1e-6, "{groups:?} {e}");
    }
    // Cross attention with a different key count.
    let e = check(
        vec![random(&mut r, 4, 6, -1.0, 1.0), random(&mut r, 5, 6, -1.0, 1.0), random(&mut r, 5, 6, -1.0, 1.0)],
        |g, v| {
            let a = g.attention(v[0], v[1], v[2], 3, vec![AttnGroup { q: 0..4, kv: 1..5 }]);
            reduce(g, a)
        },
    );
    assert!(e < 1e-6, "cross {e}");
    // Same tensor feeding q, k and v.
    let e = check(vec![random(&mut r, 4, 6, -1.0, 1.0)], |g, v| {
        let a = g.attention(v[0], v[0], v[0], 1, vec![AttnGroup { q: 0..4, kv: 0..4 }]);
        reduce(g, a)
    });
    assert!(e < 1e-6, "shared {e}");
}

#[test]
fn slicing_concat_and_gathers() {
    let mut r = rng(5);
    let e = check(vec![random(&mut r, 4, 6, -1.0, 1.0), random(&mut r, 2, 6, -1.0, 1.0)], |g, v| {
        let a = g.slice_cols(v[0], 1, 3);
        let b = g.slice_rows(v[0], 2, 2);
        let c = g.concat_rows(&[b, v[1]]);
        let c = g.slice_cols(c, 0, 3);
        let d = g.concat_cols(&[a, a]);
        let e = g.gather_rows(c, vec![3, 0, 0, 2]);
        let f = g.gather(d, vec![0, 5, 7, 7, 23, 11, 2, 19], 2, 4);
        let s1 = reduce(g, e);
        let s2 = reduce(g, f);
        let t = g.add(s1, s2);
        let m = g.mean(c);
        g.add(t, m)
    });
    assert!(e < 1e-8, "{e}");
}

#[test]
fn normalize_and_losses() {
    let mut r = rng(6);
    let e = check(vec![random(&mut r, 3, 4, -1.0, 1.0)], |g, v| {
        let n = g.normalize_rows(v[0]);
        reduce(g, n)
    });
    assert!(e < 1e-7, "normalize {e}");
    let gt = random(&mut r, 5, 3, -1.0, 1.0);
    let e = check(vec![random(&mut r, 5, 3, -1.0, 1.0), random(&mut r, 5, 1, -1.0, 1.0)], |g, v| {
        g.aleatoric_l1(v[0], gt.clone(), v[1], vec![true, false, true, true, false]).unwrap()
    });
    assert!(e < 1e-7, "aleatoric {e}");
    let q = random(&mut r, 3, 4, -1.0, 1.0);
    let gq = {
        let mut t = random(&mut r, 3, 4, -1.0, 1.0);
        for row in t.data.chunks_exact_mut(4) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            row.iter_mut().for_each(|x| *x /= n);
        }
        t
    };
    let e = check(vec![q], |g, v| {
        let n = g.normalize_rows(v[0]);
        let a = g.quat_geodesic(n, gq.clone());
        reduce(g, a)
    });
    assert!(e < 1e-6, "geodesic {e}");
}

#[test]
fn aleatoric_optimum_matches_residual() {
    // For a fixed residual r the minimizing log-sigma satisfies exp(s) = r.
    for &res in &[0.05, 0.3, 1.0, 2.5] {
        let loss = |s: f64| {
            let mut g = Graph::<f64>::new();
            let p = g.constant(Tensor::from_f64(1, 1, &[res]));
            let ls = g.constant(Tensor::from_f64(1, 1, &[s]));
            let l = g.aleatoric_l1(p, Tensor::zeros(1, 1), ls, vec![true]).unwrap();
            g.value(l).item()
        };
        let best = (0..20001)
            .map(|i| -5.0 + i as f64 * 5e-4)
            .min_by(|a, b| loss(*a).total_cmp(&loss(*b)))
            .unwrap();
        assert!((best.exp() - res).abs() < 1e-3 * res.max(1.0), "{res} {best}");
    }
}
