//! Cross-view joint-token interaction: confidence-augmented tokens, adaptive
//! GCN over the joint graph, confidence-aware self-attention (CASA), and the
//! fused per-view conditioning feature.

use crate::diff::{Array, DiffError, ParamStore, Tape, Var};
use crate::nn::{linear, register_linear, Init};
use crate::skeleton::{JOINT_COUNT, PARENTS};

/// Feature layout of the joint graph.
#[derive(Clone, Copy, Debug)]
pub struct GraphDims {
    /// Width of the sinusoidal 2D position embedding (multiple of 2).
    pub d_pos: usize,
    /// Width of the learned joint-id embedding.
    pub d_id: usize,
    /// Width of the fused per-view conditioning feature.
    pub d_fuse: usize,
    /// Number of (agcn -> casa) layer pairs.
    pub layers: usize,
}

impl Default for GraphDims {
    fn default() -> Self {
        GraphDims {
            d_pos: 32,
            d_id: 32,
            d_fuse: 64,
            layers: 2,
        }
    }
}

impl GraphDims {
    /// Token width: position embedding, joint-id embedding, confidence.
    pub fn token_dim(&self) -> usize {
        self.d_pos + self.d_id + 1
    }
}

/// Kinematic-tree adjacency (bones + self loops) used to seed the adaptive
/// adjacency.
pub fn kinematic_adjacency() -> Array {
    let k = JOINT_COUNT;
    let mut a = vec![0.0; k * k];
    for j in 0..k {
        a[j * k + j] = 1.0;
    }
    for (child, &parent) in PARENTS.iter().enumerate() {
        if parent >= 0 {
            let p = parent as usize;
            a[child * k + p] = 1.0;
            a[p * k + child] = 1.0;
        }
    }
    Array::matrix(k, k, a).expect("adjacency shape")
}

pub fn register_graph_params(
    store: &mut ParamStore,
    dims: &GraphDims,
    init: &mut Init,
) -> Result<(), DiffError> {
    let d = dims.token_dim();
    store.register("graph.joint_embed", init.weight(JOINT_COUNT, dims.d_id))?;
    for l in 0..dims.layers {
        let mut adj = kinematic_adjacency();
        let noise = init.noise(&[JOINT_COUNT, JOINT_COUNT], 0.01);
        for (a, n) in adj.data_mut().iter_mut().zip(noise.data().iter()) {
            *a += n;
        }
        store.register(&format!("graph.l{l}.adj"), adj)?;
        store.register(&format!("graph.l{l}.w"), init.weight(d, d))?;
        store.register(&format!("graph.l{l}.wq"), init.weight(d, d))?;
        store.register(&format!("graph.l{l}.wk"), init.weight(d, d))?;
        store.register(&format!("graph.l{l}.wv"), init.weight(d, d))?;
    }
    register_linear(store, "graph.fuse.l1", d, dims.d_fuse, init, false)?;
    register_linear(store, "graph.fuse.l2", dims.d_fuse, dims.d_fuse, init, false)?;
    Ok(())
}

/// Sinusoidal embedding of positions in [0,1]^2 into `d_pos` channels.
pub fn sinusoidal_embed(tape: &mut Tape, pos01: Var, d_pos: usize) -> Result<Var, DiffError> {
    let half = d_pos / 2;
    let per_coord = half / 2;
    // Frequencies pi * 2^j per coordinate, x frequencies then y frequencies.
    let mut f = vec![0.0; 2 * half];
    for j in 0..per_coord {
        let w = std::f64::consts::PI * (1 << j) as f64;
        f[j] = w; // x row
        f[half + per_coord + j] = w; // y row
    }
    let f = tape.constant(Array::matrix(2, half, f)?);
    let phases = tape.matmul(pos01, f)?;
    let s = tape.sin(phases);
    let c = tape.cos(phases);
    tape.concat_cols(&[s, c])
}

/// Confidence-augmented joint tokens for one frame, stacked view-major:
/// row `v*k + j` holds `[pos-embed || joint-id embed || conf]`.
pub fn build_tokens(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &GraphDims,
    views: &[(Var, Var)],
    frame_size: f64,
) -> Result<Var, DiffError> {
    let embed = tape.param(store, "graph.joint_embed")?;
    let mut blocks = Vec::with_capacity(views.len());
    for &(decoded_px, conf) in views {
        let pos01 = tape.scale(decoded_px, 1.0 / frame_size);
        let pe = sinusoidal_embed(tape, pos01, dims.d_pos)?;
        let tok = tape.concat_cols(&[pe, embed, conf])?;
        blocks.push(tok);
    }
    tape.concat_rows(&blocks)
}

/// One message-passing step with residual: `G + blockdiag(N) G W` where `N`
/// is applied per view over the joint axis.
pub fn agcn_apply(
    tape: &mut Tape,
    norm_adj: Var,
    tokens: Var,
    views: usize,
    w: Var,
) -> Result<Var, DiffError> {
    let k = tape.value(norm_adj).rows();
    let mut mixed = Vec::with_capacity(views);
    for v in 0..views {
        let idx: Vec<usize> = (v * k..(v + 1) * k).collect();
        let block = tape.gather(tokens, &idx)?;
        mixed.push(tape.matmul(norm_adj, block)?);
    }
    let mixed = tape.concat_rows(&mixed)?;
    let prop = tape.matmul(mixed, w)?;
    tape.add(tokens, prop)
}

/// Adaptive-GCN layer: row-softmax the learnable adjacency and propagate.
pub fn agcn_layer(
    tape: &mut Tape,
    store: &ParamStore,
    layer: usize,
    tokens: Var,
    views: usize,
) -> Result<Var, DiffError> {
    let adj = tape.param(store, &format!("graph.l{layer}.adj"))?;
    let norm = tape.softmax(adj);
    let w = tape.param(store, &format!("graph.l{layer}.w"))?;
    agcn_apply(tape, norm, tokens, views, w)
}

/// Scaled dot-product self-attention over all view-joint tokens with a
/// residual connection. Returns the new tokens and the attention matrix.
pub fn casa_layer(
    tape: &mut Tape,
    store: &ParamStore,
    layer: usize,
    tokens: Var,
) -> Result<(Var, Var), DiffError> {
    let wq = tape.param(store, &format!("graph.l{layer}.wq"))?;
    let wk = tape.param(store, &format!("graph.l{layer}.wk"))?;
    let wv = tape.param(store, &format!("graph.l{layer}.wv"))?;
    let d = tape.value(tokens).cols();
    let q = tape.matmul(tokens, wq)?;
    let k = tape.matmul(tokens, wk)?;
    let v = tape.matmul(tokens, wv)?;
    let k_t = tape.transpose(k)?;
    let logits = tape.matmul(q, k_t)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax(logits);
    let ctx = tape.matmul(attn, v)?;
    let out = tape.add(tokens, ctx)?;
    Ok((out, attn))
}

/// Per-view mean pooling over joints followed by a two-layer MLP.
pub fn fuse(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &GraphDims,
    tokens: Var,
    views: usize,
) -> Result<Var, DiffError> {
    let k = tape.value(tokens).rows() / views;
    let d = tape.value(tokens).cols();
    let mut pool = vec![0.0; views * views * k];
    for v in 0..views {
        for j in 0..k {
            pool[v * views * k + v * k + j] = 1.0 / k as f64;
        }
    }
    let pool = tape.constant(Array::matrix(views, views * k, pool)?);
    let pooled = tape.matmul(pool, tokens)?;
    debug_assert_eq!(tape.value(pooled).shape(), &[views, d]);
    let h = linear(tape, store, "graph.fuse.l1", pooled)?;
    let h = tape.relu(h);
    let out = linear(tape, store, "graph.fuse.l2", h)?;
    debug_assert_eq!(tape.value(out).shape(), &[views, dims.d_fuse]);
    Ok(out)
}

/// Full interaction stack: alternating agcn/casa layers, then fusion.
/// Returns the fused per-view feature and the attention matrices.
pub fn interact(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &GraphDims,
    views: &[(Var, Var)],
    frame_size: f64,
) -> Result<(Var, Vec<Var>), DiffError> {
    let mut tokens = build_tokens(tape, store, dims, views, frame_size)?;
    let mut attns = Vec::with_capacity(dims.layers);
    for l in 0..dims.layers {
        tokens = agcn_layer(tape, store, l, tokens, views.len())?;
        let (t, a) = casa_layer(tape, store, l, tokens)?;
        tokens = t;
        attns.push(a);
    }
    let fused = fuse(tape, store, dims, tokens, views.len())?;
    Ok((fused, attns))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_chacha::rand_core::SeedableRng as _;

    fn test_store(dims: &GraphDims, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        register_graph_params(&mut store, dims, &mut init).unwrap();
        store
    }

    fn obs_consts(
        tape: &mut Tape,
        rng: &mut StdRng,
        views: usize,
    ) -> Vec<(Var, Var)> {
        (0..views)
            .map(|_| {
                let px: Vec<f64> = (0..JOINT_COUNT * 2)
                    .map(|_| rng.random_range(0.0..256.0))
                    .collect();
                let conf: Vec<f64> = (0..JOINT_COUNT).map(|_| rng.random_range(0.05..1.0)).collect();
                let p = tape.constant(Array::matrix(JOINT_COUNT, 2, px).unwrap());
                let c = tape.constant(Array::matrix(JOINT_COUNT, 1, conf).unwrap());
                (p, c)
            })
            .collect()
    }

    #[test]
    fn identical_views_give_identical_token_blocks() {
        let dims = GraphDims::default();
        let store = test_store(&dims, 1);
        let mut tape = Tape::new();
        let px: Vec<f64> = (0..JOINT_COUNT * 2).map(|i| 30.0 + i as f64).collect();
        let conf = vec![0.8; JOINT_COUNT];
        let p = tape.constant(Array::matrix(JOINT_COUNT, 2, px).unwrap());
        let c = tape.constant(Array::matrix(JOINT_COUNT, 1, conf).unwrap());
        let tokens = build_tokens(&mut tape, &store, &dims, &[(p, c), (p, c)], 256.0).unwrap();
        let t = tape.value(tokens);
        let d = dims.token_dim();
        for j in 0..JOINT_COUNT {
            for col in 0..d {
                assert_eq!(t.at(j, col), t.at(JOINT_COUNT + j, col));
            }
        }
        // Confidence channel is an exact passthrough (last column).
        for j in 0..JOINT_COUNT {
            assert_eq!(t.at(j, d - 1), 0.8);
        }
    }

    #[test]
    fn token_norm_finite_for_corner_joints() {
        let dims = GraphDims::default();
        let store = test_store(&dims, 2);
        let mut rng = StdRng::seed_from_u64(5);
        for _ in 0..1000 {
            let mut tape = Tape::new();
            let px: Vec<f64> = (0..JOINT_COUNT * 2)
                .map(|_| if rng.random_bool(0.3) {
                    if rng.random_bool(0.5) { 0.0 } else { 256.0 }
                } else {
                    rng.random_range(0.0..256.0)
                })
                .collect();
            let conf: Vec<f64> = (0..JOINT_COUNT).map(|_| rng.random_range(0.001..1.0)).collect();
            let p = tape.constant(Array::matrix(JOINT_COUNT, 2, px).unwrap());
            let c = tape.constant(Array::matrix(JOINT_COUNT, 1, conf).unwrap());
            let tokens = build_tokens(&mut tape, &store, &dims, &[(p, c)], 256.0).unwrap();
            assert!(tape.value(tokens).all_finite());
        }
    }

    #[test]
    fn casa_single_token_weight_is_one() {
        let dims = GraphDims::default();
        let store = test_store(&dims, 3);
        let mut tape = Tape::new();
        let d = dims.token_dim();
        let tok_data: Vec<f64> = (0..d).map(|i| (i as f64 * 0.1).sin()).collect();
        let tokens = tape.constant(Array::matrix(1, d, tok_data).unwrap());
        let (out, attn) = casa_layer(&mut tape, &store, 0, tokens).unwrap();
        assert_eq!(tape.value(attn).data(), &[1.0]);
        // output = residual + value projection
        let wv = tape.param(&store, "graph.l0.wv").unwrap();
        let v = tape.matmul(tokens, wv).unwrap();
        let expect = tape.add(tokens, v).unwrap();
        for (a, b) in tape.value(out).data().iter().zip(tape.value(expect).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn casa_identical_keys_give_uniform_attention() {
        let dims = GraphDims::default();
        let mut store = test_store(&dims, 4);
        // Zero the key map: all keys identical -> uniform rows.
        let d = dims.token_dim();
        *store.value_mut("graph.l0.wk").unwrap() = Array::zeros(&[d, d]);
        let mut tape = Tape::new();
        let mut rng = StdRng::seed_from_u64(8);
        let obs = obs_consts(&mut tape, &mut rng, 2);
        let tokens = build_tokens(&mut tape, &store, &dims, &obs, 256.0).unwrap();
        let (_, attn) = casa_layer(&mut tape, &store, 0, tokens).unwrap();
        let n = 2 * JOINT_COUNT;
        for row in tape.value(attn).data().chunks(n) {
            for &w in row {
                assert!((w - 1.0 / n as f64).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn casa_attention_rows_sum_to_one() {
        let dims = GraphDims::default();
        let store = test_store(&dims, 6);
        let mut tape = Tape::new();
        let mut rng = StdRng::seed_from_u64(9);
        let obs = obs_consts(&mut tape, &mut rng, 3);
        let (_, attns) = interact(&mut tape, &store, &dims, &obs, 256.0).unwrap();
        for attn in attns {
            let n = tape.value(attn).cols();
            for row in tape.value(attn).data().chunks(n) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn casa_two_token_hand_computation() {
        // d=2 hand case checked against an explicit softmax computation.
        let mut tape = Tape::new();
        let mut store = ParamStore::new();
        store
            .register("graph.l0.wq", Array::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap())
            .unwrap();
        store
            .register("graph.l0.wk", Array::matrix(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap())
            .unwrap();
        store
            .register("graph.l0.wv", Array::matrix(2, 2, vec![2.0, 0.0, 0.0, 0.5]).unwrap())
            .unwrap();
        let g = [1.0, 0.0, 0.0, 1.0];
        let tokens = tape.constant(Array::matrix(2, 2, g.to_vec()).unwrap());
        let (out, attn) = casa_layer(&mut tape, &store, 0, tokens).unwrap();
        // q = G, k = G swapped cols: k0=(0,1), k1=(1,0).
        // logits/sqrt(2): row0 = (0, 1)/sqrt2, row1 = (1, 0)/sqrt2.
        let s = 1.0 / 2.0_f64.sqrt();
        let e = |x: f64| x.exp();
        let a00 = e(0.0) / (e(0.0) + e(s));
        let a01 = e(s) / (e(0.0) + e(s));
        let want_attn = [a00, a01, a01, a00];
        for (a, b) in tape.value(attn).data().iter().zip(want_attn.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        // values: v0 = (2, 0), v1 = (0, 0.5)
        let want_out = [
            1.0 + a00 * 2.0,
            a01 * 0.5,
            a01 * 2.0,
            1.0 + a00 * 0.5,
        ];
        for (a, b) in tape.value(out).data().iter().zip(want_out.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn agcn_identity_adjacency_doubles_input() {
        let mut tape = Tape::new();
        let k = JOINT_COUNT;
        let mut eye = vec![0.0; k * k];
        for i in 0..k {
            eye[i * k + i] = 1.0;
        }
        let n = tape.constant(Array::matrix(k, k, eye).unwrap());
        let d = 4;
        let mut eye_d = vec![0.0; d * d];
        for i in 0..d {
            eye_d[i * d + i] = 1.0;
        }
        let w = tape.constant(Array::matrix(d, d, eye_d).unwrap());
        let data: Vec<f64> = (0..2 * k * d).map(|i| i as f64 * 0.01).collect();
        let tokens = tape.constant(Array::matrix(2 * k, d, data.clone()).unwrap());
        let out = agcn_apply(&mut tape, n, tokens, 2, w).unwrap();
        for (o, x) in tape.value(out).data().iter().zip(data.iter()) {
            assert!((o - 2.0 * x).abs() < 1e-15);
        }
    }

    #[test]
    fn agcn_rows_sum_to_one_after_softmax() {
        let dims = GraphDims::default();
        let store = test_store(&dims, 10);
        let mut tape = Tape::new();
        let adj = tape.param(&store, "graph.l0.adj").unwrap();
        let norm = tape.softmax(adj);
        for row in tape.value(norm).data().chunks(JOINT_COUNT) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn agcn_chain_matches_hand_computation() {
        // 3-node chain, row-normalized adjacency applied to unit features.
        let mut tape = Tape::new();
        let adj = [
            0.5, 0.5, 0.0, //
            1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, //
            0.0, 0.5, 0.5,
        ];
        let n = tape.constant(Array::matrix(3, 3, adj.to_vec()).unwrap());
        let w = tape.constant(Array::matrix(1, 1, vec![1.0]).unwrap());
        let feats = tape.constant(Array::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap());
        let out = agcn_apply(&mut tape, n, feats, 1, w).unwrap();
        // propagate = [1.5, 2.0, 2.5]; out = x + propagate
        let want = [2.5, 4.0, 5.5];
        for (o, wv) in tape.value(out).data().iter().zip(want.iter()) {
            assert!((o - wv).abs() < 1e-12);
        }
    }

    #[test]
    fn fuse_zero_tokens_is_bias_only() {
        let dims = GraphDims::default();
        let store = test_store(&dims, 11);
        let mut tape = Tape::new();
        let d = dims.token_dim();
        let tokens = tape.constant(Array::zeros(&[2 * JOINT_COUNT, d]));
        let out = fuse(&mut tape, &store, &dims, tokens, 2).unwrap();
        // Expected: relu(b1) @ w2 + b2 replicated per view.
        let b1 = store.value("graph.fuse.l1.b").unwrap().data().to_vec();
        let w2 = store.value("graph.fuse.l2.w").unwrap();
        let b2 = store.value("graph.fuse.l2.b").unwrap().data();
        let h: Vec<f64> = b1.iter().map(|&x| x.max(0.0)).collect();
        for v in 0..2 {
            for o in 0..dims.d_fuse {
                let mut acc = b2[o];
                for (i, &hv) in h.iter().enumerate() {
                    acc += hv * w2.at(i, o);
                }
                assert!((tape.value(out).at(v, o) - acc).abs() < 1e-12);
            }
        }
        assert_eq!(tape.value(out).shape(), &[2, dims.d_fuse]);
    }

    #[test]
    fn fuse_invariant_to_joint_permutation() {
        let dims = GraphDims::default();
        let store = test_store(&dims, 12);
        let mut rng = StdRng::seed_from_u64(3);
        let perm: Vec<usize> = {
            let mut p: Vec<usize> = (0..JOINT_COUNT).collect();
            for i in (1..p.len()).rev() {
                let j = rng.random_range(0..=i);
                p.swap(i, j);
            }
            p
        };
        // Permuted store: joint embeddings and adjacency conjugated by perm.
        let mut store_p = store.clone();
        let embed = store.value("graph.joint_embed").unwrap().clone();
        let mut embed_p = embed.clone();
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..dims.d_id {
                embed_p.data_mut()[new_row * dims.d_id + c] = embed.at(old_row, c);
            }
        }
        *store_p.value_mut("graph.joint_embed").unwrap() = embed_p;
        for l in 0..dims.layers {
            let adj = store.value(&format!("graph.l{l}.adj")).unwrap().clone();
            let mut adj_p = adj.clone();
            for (ni, &oi) in perm.iter().enumerate() {
                for (nj, &oj) in perm.iter().enumerate() {
                    adj_p.data_mut()[ni * JOINT_COUNT + nj] = adj.at(oi, oj);
                }
            }
            *store_p.value_mut(&format!("graph.l{l}.adj")).unwrap() = adj_p;
        }

        let px: Vec<f64> = (0..JOINT_COUNT * 2).map(|_| rng.random_range(10.0..250.0)).collect();
        let conf: Vec<f64> = (0..JOINT_COUNT).map(|_| rng.random_range(0.1..1.0)).collect();
        let px_p: Vec<f64> = perm
            .iter()
            .flat_map(|&o| [px[o * 2], px[o * 2 + 1]])
            .collect();
        let conf_p: Vec<f64> = perm.iter().map(|&o| conf[o]).collect();

        let mut tape = Tape::new();
        let p1 = tape.constant(Array::matrix(JOINT_COUNT, 2, px).unwrap());
        let c1 = tape.constant(Array::matrix(JOINT_COUNT, 1, conf).unwrap());
        let (f1, _) = interact(&mut tape, &store, &dims, &[(p1, c1)], 256.0).unwrap();
        let f1v = tape.value(f1).data().to_vec();

        let mut tape2 = Tape::new();
        let p2 = tape2.constant(Array::matrix(JOINT_COUNT, 2, px_p).unwrap());
        let c2 = tape2.constant(Array::matrix(JOINT_COUNT, 1, conf_p).unwrap());
        let (f2, _) = interact(&mut tape2, &store_p, &dims, &[(p2, c2)], 256.0).unwrap();
        let f2v = tape2.value(f2).data().to_vec();

        for (a, b) in f1v.iter().zip(f2v.iter()) {
            assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }
    }
}
