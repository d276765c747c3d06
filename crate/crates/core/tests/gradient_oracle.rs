//! Central finite-difference oracle for the autodiff engine.
//!
//! Every check builds a scalar loss twice: once through the graph's backward
//! pass and once by perturbing each parameter coordinate by +/- h and
//! differencing the loss. The two gradient vectors must agree to 1e-3
//! relative error (vector norm), the tightest tolerance 32-bit forward
//! evaluation supports at h = 1e-3.

use meg_core::numerics::graph::CeReduction;
use meg_core::{Graph, Rng, Tensor, Var};

/// Builds the loss from leaves registered in `g`; the harness owns the leaves.
type BuildFn = dyn Fn(&mut Graph, &[Var]) -> Var;

fn autodiff_grads(build: &BuildFn, params: &[Tensor]) -> (f32, Vec<Tensor>) {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    let loss_val = g.value(loss).item();
    g.backward(loss).unwrap();
    let grads = vars.iter().map(|&v| g.grad_or_zeros(v)).collect();
    (loss_val, grads)
}

fn loss_at(build: &BuildFn, params: &[Tensor]) -> f32 {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|t| g.param(t.clone())).collect();
    let loss = build(&mut g, &vars);
    g.value(loss).item()
}

/// Asserts autodiff and finite differences agree within `tol` relative error.
fn check_grads(name: &str, build: &BuildFn, params: Vec<Tensor>, h: f32, tol: f32) {
    let total: usize = params.iter().map(Tensor::numel).sum();
    assert!(total <= 64, "{name}: oracle meant for graphs with <= 64 inputs, got {total}");
    let (_, ad) = autodiff_grads(build, &params);

    let mut fd_all = Vec::with_capacity(total);
    let mut ad_all = Vec::with_capacity(total);
    for (pi, base) in params.iter().enumerate() {
        for j in 0..base.numel() {
            let mut plus = params.clone();
            let mut minus = params.clone();
            plus[pi].data_mut()[j] += h;
            minus[pi].data_mut()[j] -= h;
            let fd = (loss_at(build, &plus) as f64 - loss_at(build, &minus) as f64) / (2.0 * h as f64);
            fd_all.push(fd);
            ad_all.push(ad[pi].data()[j] as f64);
        }
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = fd_all.iter().zip(ad_all.iter()).map(|(a, b)| a - b).collect();
    let denom = norm(&fd_all).max(norm(&ad_all)).max(1e-8);
    let rel = norm(&diff) / denom;
    assert!(
        rel <= tol as f64,
        "{name}: gradient mismatch, relative error {rel:.3e} (tolerance {tol:.0e})"
    );
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = Rng::seeded(11);
    // x[1,3] -> 4 -> 4 -> 2, GELU between layers, squared-error loss.
    let params = vec![
        rng.normal_tensor(vec![1, 3], 0.8),  // input treated as trainable too
        rng.normal_tensor(vec![3, 4], 0.7),
        rng.normal_tensor(vec![4], 0.3),
        rng.normal_tensor(vec![4, 4], 0.7),
        rng.normal_tensor(vec![4], 0.3),
        rng.normal_tensor(vec![4, 2], 0.7),
        rng.normal_tensor(vec![2], 0.3),
    ];
    let build = move |g: &mut Graph, vars: &[Var]| {
        let (x, w1, b1, w2, b2, w3, b3) =
            (vars[0], vars[1], vars[2], vars[3], vars[4], vars[5], vars[6]);
        let h1 = g.matmul(x, w1);
        let h1 = g.add(h1, b1);
        let h1 = g.gelu(h1);
        let h2 = g.matmul(h1, w2);
        let h2 = g.add(h2, b2);
        let h2 = g.gelu(h2);
        let y = g.matmul(h2, w3);
        let y = g.add(y, b3);
        let target = g.input(Tensor::new(vec![1, 2], vec![0.5, -1.0]));
        g.mse(y, target)
    };
    check_grads("mlp", &build, params, 1e-3, 1e-3);
}

#[test]
fn attention_block_matches_finite_differences() {
    let mut rng = Rng::seeded(23);
    // Tiny single-head-pair attention: [1, 3 tokens, 4 dims], 2 heads.
    let params = vec![
        rng.normal_tensor(vec![1, 3, 4], 0.8),
        rng.normal_tensor(vec![4, 4], 0.6), // packed qkv is exercised via two mms
        rng.normal_tensor(vec![4, 4], 0.6),
    ];
    let causal = {
        // upper triangle blocked
        let mut m = vec![0.0f32; 9];
        for i in 0..3 {
            for j in 0..3 {
                if j > i {
                    m[i * 3 + j] = -1e9;
                }
            }
        }
        Tensor::new(vec![3, 3], m)
    };
    let build = move |g: &mut Graph, vars: &[Var]| {
        let (x, wq, wv) = (vars[0], vars[1], vars[2]);
        let flat = g.reshape(x, vec![3, 4]);
        let q = g.matmul(flat, wq);
        let v = g.matmul(flat, wv);
        let q3 = g.reshape(q, vec![1, 3, 4]);
        let v3 = g.reshape(v, vec![1, 3, 4]);
        let qh = g.split_heads(q3, 2);
        let kh = g.split_heads(x, 2);
        let vh = g.split_heads(v3, 2);
        let scores = g.matmul_nt(qh, kh);
        let scores = g.scale(scores, 1.0 / (2.0f32).sqrt());
        let mask = g.input(causal.clone());
        let scores = g.add(scores, mask);
        let attn = g.softmax_last(scores);
        let ctx = g.matmul(attn, vh);
        let merged = g.merge_heads(ctx);
        let normed = g.layer_norm(merged, 1e-5);
        let cls = g.select_pos(normed, 2);
        let unit = g.l2_normalize(cls, 1e-8);
        let refs = g.input(Tensor::new(
            vec![3, 4],
            vec![0.3, -0.6, 0.2, 0.9, -0.5, 0.1, 0.8, -0.2, 0.4, 0.4, -0.7, 0.1],
        ));
        let sims = g.matmul_nt(unit, refs);
        let target = g.input(Tensor::new(vec![1, 3], vec![1.0, -0.5, 0.25]));
        g.mse(sims, target)
    };
    check_grads("attention", &build, params, 1e-3, 1e-3);
}

#[test]
fn cross_entropy_paths_match_finite_differences() {
    let mut rng = Rng::seeded(37);
    let params = vec![
        rng.normal_tensor(vec![4, 5], 0.9),
        rng.normal_tensor(vec![5, 5], 0.5),
    ];
    let build = move |g: &mut Graph, vars: &[Var]| {
        let (x, w) = (vars[0], vars[1]);
        let logits = g.matmul(x, w);
        g.cross_entropy(logits, &[1, 4, 0, 2], &[1.0, 0.0, 1.0, 1.0], CeReduction::Mean)
    };
    check_grads("cross_entropy_mean", &build, params, 1e-3, 1e-3);

    let mut rng = Rng::seeded(41);
    let params = vec![rng.normal_tensor(vec![3, 4], 1.0)];
    let build = move |g: &mut Graph, vars: &[Var]| {
        let loss = g.cross_entropy(vars[0], &[0, 1, 2], &[1.0, 2.0, 0.5], CeReduction::Sum);
        g.scale(loss, 0.25)
    };
    check_grads("cross_entropy_sum", &build, params, 1e-3, 1e-3);
}

#[test]
fn embedding_and_elementwise_chain_matches_finite_differences() {
    let mut rng = Rng::seeded(53);
    let params = vec![
        rng.normal_tensor(vec![6, 4], 0.8), // embedding table
        rng.normal_tensor(vec![4], 0.5),    // broadcast bias
        rng.normal_tensor(vec![3, 4], 0.5),
    ];
    let build = move |g: &mut Graph, vars: &[Var]| {
        let (table, bias, other) = (vars[0], vars[1], vars[2]);
        let e = g.embedding(table, &[2, 0, 5]);
        let shifted = g.add(e, bias);
        let mixed = g.mul(shifted, other);
        let bumped = g.add_scalar(mixed, 2.5);
        let lively = g.exp(bumped);
        let tamed = g.ln(lively);
        let smooth = g.gelu(tamed);
        let s = g.sum_all(smooth);
        g.scale(s, 0.1)
    };
    check_grads("embedding_chain", &build, params, 1e-3, 1e-3);
}

#[test]
fn broadcast_over_middle_axis_matches_finite_differences() {
    let mut rng = Rng::seeded(67);
    // The modulation pattern: [batch, tokens, width] scaled and shifted
    // by per-batch vectors reshaped to [batch, 1, width].
    let params = vec![
        rng.normal_tensor(vec![2, 3, 4], 0.7),
        rng.normal_tensor(vec![2, 4], 0.6),
        rng.normal_tensor(vec![2, 4], 0.6),
    ];
    let build = move |g: &mut Graph, vars: &[Var]| {
        let (x, scale, shift) = (vars[0], vars[1], vars[2]);
        let scale = g.reshape(scale, vec![2, 1, 4]);
        let shift = g.reshape(shift, vec![2, 1, 4]);
        let one_plus = g.add_scalar(scale, 1.0);
        let scaled = g.mul(x, one_plus);
        let modulated = g.add(scaled, shift);
        let sq = g.mul(modulated, modulated);
        g.mean_all(sq)
    };
    check_grads("modulation", &build, params, 1e-3, 1e-3);
}
