//! Conditional RealNVP over flattened 2D pose vectors.
//!
//! Affine coupling layers with alternating checkerboard masks over the
//! interleaved (x, y) coordinates; scale and shift nets condition on the
//! fused cross-view feature. The composition is bijective for any parameter
//! values because each layer only transforms its active half.

use crate::diff::{Array, DiffError, ParamStore, Tape, Var};
use crate::nn::{linear, register_linear, Init};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

#[derive(Clone, Copy, Debug)]
pub struct FlowDims {
    /// Flattened pose dimension (2k).
    pub dim: usize,
    /// Conditioning feature width.
    pub cond: usize,
    /// Hidden width of the coupling nets.
    pub hidden: usize,
    /// Number of coupling layers.
    pub layers: usize,
    /// Bound on |log-scale| per dimension.
    pub s_max: f64,
}

impl Default for FlowDims {
    fn default() -> Self {
        FlowDims {
            dim: 42,
            cond: 64,
            hidden: 64,
            layers: 6,
            s_max: 3.0,
        }
    }
}

impl FlowDims {
    fn active(&self, layer: usize) -> Vec<usize> {
        (0..self.dim).filter(|i| i % 2 == layer % 2).collect()
    }

    fn frozen(&self, layer: usize) -> Vec<usize> {
        (0..self.dim).filter(|i| i % 2 != layer % 2).collect()
    }
}

/// Register all coupling-layer parameters. The output layers of both nets
/// start at zero, so the whole flow is the identity at initialization.
pub fn register_flow_params(
    store: &mut ParamStore,
    dims: &FlowDims,
    init: &mut Init,
) -> Result<(), DiffError> {
    for l in 0..dims.layers {
        let nf = dims.frozen(l).len();
        let na = dims.active(l).len();
        let d_in = nf + dims.cond;
        for net in ["scale", "shift"] {
            register_linear(store, &format!("flow.l{l}.{net}.l1"), d_in, dims.hidden, init, false)?;
            register_linear(store, &format!("flow.l{l}.{net}.l2"), dims.hidden, na, init, true)?;
        }
    }
    Ok(())
}

fn selector(tape: &mut Tape, dim: usize, idx: &[usize]) -> Result<Var, DiffError> {
    let mut m = vec![0.0; dim * idx.len()];
    for (c, &i) in idx.iter().enumerate() {
        m[i * idx.len() + c] = 1.0;
    }
    Ok(tape.constant(Array::matrix(dim, idx.len(), m)?))
}

fn coupling_nets(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &FlowDims,
    layer: usize,
    frozen: Var,
    cond: Var,
) -> Result<(Var, Var), DiffError> {
    let net_in = tape.concat_cols(&[frozen, cond])?;
    let h = linear(tape, store, &format!("flow.l{layer}.scale.l1"), net_in)?;
    let h = tape.relu(h);
    let raw = linear(tape, store, &format!("flow.l{layer}.scale.l2"), h)?;
    // Bounded log-scale keeps the map finite for any parameters.
    let t = tape.tanh(raw);
    let s = tape.scale(t, dims.s_max);
    let h2 = linear(tape, store, &format!("flow.l{layer}.shift.l1"), net_in)?;
    let h2 = tape.relu(h2);
    let shift = linear(tape, store, &format!("flow.l{layer}.shift.l2"), h2)?;
    Ok((s, shift))
}

/// Latent-to-pose map: returns x and the per-row log-determinant of dx/dz.
pub fn flow_forward(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &FlowDims,
    z: Var,
    cond: Var,
) -> Result<(Var, Var), DiffError> {
    let rows = tape.value(z).rows();
    let mut x = z;
    let mut log_det = tape.constant(Array::matrix(rows, 1, vec![0.0; rows])?);
    for l in 0..dims.layers {
        let f_idx = dims.frozen(l);
        let a_idx = dims.active(l);
        let s_f = selector(tape, dims.dim, &f_idx)?;
        let s_a = selector(tape, dims.dim, &a_idx)?;
        let frozen = tape.matmul(x, s_f)?;
        let active = tape.matmul(x, s_a)?;
        let (s, shift) = coupling_nets(tape, store, dims, l, frozen, cond)?;
        let es = tape.exp(s);
        let scaled = tape.mul(active, es)?;
        let new_active = tape.add(scaled, shift)?;
        let s_f_t = tape.transpose(s_f)?;
        let s_a_t = tape.transpose(s_a)?;
        let keep = tape.matmul(frozen, s_f_t)?;
        let moved = tape.matmul(new_active, s_a_t)?;
        x = tape.add(keep, moved)?;
        let layer_det = tape.sum_rows(s);
        log_det = tape.add(log_det, layer_det)?;
    }
    Ok((x, log_det))
}

/// Pose-to-latent map: exact inverse of [`flow_forward`]. Returns z and the
/// per-row log-determinant of dz/dx (the negative of the forward log-det at
/// the matched point).
pub fn flow_inverse(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &FlowDims,
    x: Var,
    cond: Var,
) -> Result<(Var, Var), DiffError> {
    let rows = tape.value(x).rows();
    let mut z = x;
    let mut log_det_inv = tape.constant(Array::matrix(rows, 1, vec![0.0; rows])?);
    for l in (0..dims.layers).rev() {
        let f_idx = dims.frozen(l);
        let a_idx = dims.active(l);
        let s_f = selector(tape, dims.dim, &f_idx)?;
        let s_a = selector(tape, dims.dim, &a_idx)?;
        let frozen = tape.matmul(z, s_f)?;
        let active = tape.matmul(z, s_a)?;
        let (s, shift) = coupling_nets(tape, store, dims, l, frozen, cond)?;
        let centered = tape.sub(active, shift)?;
        let neg_s = tape.neg(s);
        let es = tape.exp(neg_s);
        let orig_active = tape.mul(centered, es)?;
        let s_f_t = tape.transpose(s_f)?;
        let s_a_t = tape.transpose(s_a)?;
        let keep = tape.matmul(frozen, s_f_t)?;
        let moved = tape.matmul(orig_active, s_a_t)?;
        z = tape.add(keep, moved)?;
        let layer_det = tape.sum_rows(s);
        log_det_inv = tape.sub(log_det_inv, layer_det)?;
    }
    Ok((z, log_det_inv))
}

/// Per-row negative log-likelihood under the conditional flow:
/// `0.5 ||z||^2 + (dim/2) log(2 pi) - log|det dz/dx|`.
pub fn nll_rows(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &FlowDims,
    x: Var,
    cond: Var,
) -> Result<Var, DiffError> {
    let (z, log_det_inv) = flow_inverse(tape, store, dims, x, cond)?;
    let zsq = tape.mul(z, z)?;
    let half_norm = tape.sum_rows(zsq);
    let half_norm = tape.scale(half_norm, 0.5);
    let log2pi = (2.0 * std::f64::consts::PI).ln();
    let with_const = tape.add_const(half_norm, dims.dim as f64 / 2.0 * log2pi);
    tape.sub(with_const, log_det_inv)
}

/// Mean NLL over a batch of pose rows.
pub fn loss_nll(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &FlowDims,
    x: Var,
    cond: Var,
) -> Result<Var, DiffError> {
    let rows = nll_rows(tape, store, dims, x, cond)?;
    Ok(tape.mean_all(rows))
}

/// Latent draws for M+1 hypotheses across `views` conditioning rows: the key
/// hypothesis decodes z = 0, the rest decode standard-normal draws.
/// Row layout is hypothesis-major: row `h * views + v`.
pub fn hypothesis_latents(dim: usize, views: usize, m: usize, rng: &mut ChaCha8Rng) -> Array {
    let rows = (m + 1) * views;
    let mut data = vec![0.0; rows * dim];
    for h in 1..=m {
        for v in 0..views {
            let base = (h * views + v) * dim;
            for d in 0..dim {
                data[base + d] = rng.sample(StandardNormal);
            }
        }
    }
    Array::matrix(rows, dim, data).expect("latent shape")
}

/// Decode M+1 hypotheses per view. `cond` is `[views, cond_dim]`; the result
/// is `[(m+1)*views, dim]` in model coordinates, hypothesis-major.
pub fn sample_hypotheses(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &FlowDims,
    cond: Var,
    m: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, Var), DiffError> {
    let views = tape.value(cond).rows();
    let latents = hypothesis_latents(dims.dim, views, m, rng);
    let z = tape.constant(latents);
    let rep: Vec<usize> = (0..(m + 1) * views).map(|r| r % views).collect();
    let cond_rep = tape.gather(cond, &rep)?;
    flow_forward(tape, store, dims, z, cond_rep)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand::rngs::StdRng;

    fn small_dims() -> FlowDims {
        FlowDims {
            dim: 4,
            cond: 3,
            hidden: 8,
            layers: 3,
            s_max: 3.0,
        }
    }

    fn store_for(dims: &FlowDims, seed: u64, randomize_output: bool) -> ParamStore {
        let mut store = ParamStore::new();
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(seed));
        register_flow_params(&mut store, dims, &mut init).unwrap();
        if randomize_output {
            for l in 0..dims.layers {
                let na = dims.active(l).len();
                for net in ["scale", "shift"] {
                    let w = init.noise(&[dims.hidden, na], 0.3);
                    *store
                        .value_mut(&format!("flow.l{l}.{net}.l2.w"))
                        .unwrap() = w;
                    let b = init.noise(&[na], 0.1);
                    *store
                        .value_mut(&format!("flow.l{l}.{net}.l2.b"))
                        .unwrap() = b;
                }
            }
        }
        store
    }

    #[test]
    fn zero_initialized_flow_is_identity() {
        let dims = FlowDims::default();
        let store = store_for(&dims, 1, false);
        let mut tape = Tape::new();
        let data: Vec<f64> = (0..dims.dim).map(|i| i as f64 * 0.1 - 2.0).collect();
        let z = tape.constant(Array::matrix(1, dims.dim, data.clone()).unwrap());
        let cond = tape.constant(Array::matrix(1, dims.cond, vec![0.5; dims.cond]).unwrap());
        let (x, log_det) = flow_forward(&mut tape, &store, &dims, z, cond).unwrap();
        assert_eq!(tape.value(x).data(), data.as_slice());
        assert_eq!(tape.value(log_det).data(), &[0.0]);
        let (z2, ldi) = flow_inverse(&mut tape, &store, &dims, x, cond).unwrap();
        assert_eq!(tape.value(z2).data(), data.as_slice());
        assert_eq!(tape.value(ldi).data(), &[0.0]);
    }

    #[test]
    fn constant_log_scale_layer_has_analytic_log_det() {
        let dims = FlowDims {
            layers: 1,
            ..FlowDims::default()
        };
        let mut store = store_for(&dims, 2, false);
        // Constant raw output via the bias: s = s_max * tanh(b).
        let b_val = 0.17;
        let na = dims.active(0).len();
        *store.value_mut("flow.l0.scale.l2.b").unwrap() = Array::filled(&[na], b_val);
        let mut tape = Tape::new();
        let z = tape.constant(Array::matrix(1, dims.dim, vec![0.3; dims.dim]).unwrap());
        let cond = tape.constant(Array::matrix(1, dims.cond, vec![0.0; dims.cond]).unwrap());
        let (_, log_det) = flow_forward(&mut tape, &store, &dims, z, cond).unwrap();
        let want = na as f64 * dims.s_max * b_val.tanh();
        assert!((tape.value(log_det).scalar_value() - want).abs() < 1e-12);
    }

    #[test]
    fn log_det_matches_numerical_jacobian() {
        let dims = small_dims();
        let store = store_for(&dims, 3, true);
        let cond_data = vec![0.4, -0.2, 0.9];
        let z0 = [0.3, -0.8, 0.5, 1.1];
        let fwd = |z: &[f64]| -> Vec<f64> {
            let mut tape = Tape::new();
            let zv = tape.constant(Array::matrix(1, 4, z.to_vec()).unwrap());
            let cv = tape.constant(Array::matrix(1, 3, cond_data.clone()).unwrap());
            let (x, _) = flow_forward(&mut tape, &store, &dims, zv, cv).unwrap();
            tape.value(x).data().to_vec()
        };
        let h = 1e-6;
        let mut jac = nalgebra::Matrix4::<f64>::zeros();
        for j in 0..4 {
            let mut zp = z0;
            zp[j] += h;
            let mut zm = z0;
            zm[j] -= h;
            let (fp, fm) = (fwd(&zp), fwd(&zm));
            for i in 0..4 {
                jac[(i, j)] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let numeric = jac.determinant().abs().ln();
        let mut tape = Tape::new();
        let zv = tape.constant(Array::matrix(1, 4, z0.to_vec()).unwrap());
        let cv = tape.constant(Array::matrix(1, 3, cond_data.clone()).unwrap());
        let (_, log_det) = flow_forward(&mut tape, &store, &dims, zv, cv).unwrap();
        let analytic = tape.value(log_det).scalar_value();
        let rel = (numeric - analytic).abs() / analytic.abs().max(1e-6);
        assert!(rel < 1e-3, "numeric {numeric} vs analytic {analytic}");
    }

    #[test]
    fn roundtrip_inverse_of_forward() {
        let dims = small_dims();
        let store = store_for(&dims, 4, true);
        let mut rng = StdRng::seed_from_u64(5);
        use rand::Rng as _;
        let mut max_err: f64 = 0.0;
        for _ in 0..1000 {
            let x_data: Vec<f64> = (0..dims.dim).map(|_| rng.random_range(-5.0..5.0)).collect();
            let c_data: Vec<f64> = (0..dims.cond).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Array::matrix(1, dims.dim, x_data.clone()).unwrap());
            let c = tape.constant(Array::matrix(1, dims.cond, c_data).unwrap());
            let (z, ldi) = flow_inverse(&mut tape, &store, &dims, x, c).unwrap();
            let (x2, ld) = flow_forward(&mut tape, &store, &dims, z, c).unwrap();
            for (a, b) in tape.value(x2).data().iter().zip(x_data.iter()) {
                max_err = max_err.max((a - b).abs());
            }
            // log_det_inv == -log_det at the matched point.
            let sum = tape.value(ldi).scalar_value() + tape.value(ld).scalar_value();
            assert!(sum.abs() < 1e-9, "log dets not opposite: {sum}");
        }
        assert!(max_err < 1e-5, "roundtrip error {max_err}");
    }

    #[test]
    fn nll_identity_flow_analytic_values() {
        let dims = FlowDims::default();
        let store = store_for(&dims, 6, false);
        let mut tape = Tape::new();
        let x0 = tape.constant(Array::matrix(1, dims.dim, vec![0.0; dims.dim]).unwrap());
        let cond = tape.constant(Array::matrix(1, dims.cond, vec![0.0; dims.cond]).unwrap());
        let nll0 = loss_nll(&mut tape, &store, &dims, x0, cond).unwrap();
        let want = 21.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((tape.value(nll0).scalar_value() - want).abs() < 1e-9);

        let mut unit = vec![0.0; dims.dim];
        unit[7] = 1.0;
        let x1 = tape.constant(Array::matrix(1, dims.dim, unit).unwrap());
        let nll1 = loss_nll(&mut tape, &store, &dims, x1, cond).unwrap();
        assert!((tape.value(nll1).scalar_value() - (want + 0.5)).abs() < 1e-9);
    }

    #[test]
    fn density_integrates_to_one_on_toy_flow() {
        // dim-2 flow with small random parameters; quadrature over a grid.
        let dims = FlowDims {
            dim: 2,
            cond: 2,
            hidden: 6,
            layers: 2,
            s_max: 3.0,
        };
        let mut store = store_for(&dims, 7, false);
        let mut init = Init::new(ChaCha8Rng::seed_from_u64(8));
        for l in 0..dims.layers {
            for net in ["scale", "shift"] {
                *store.value_mut(&format!("flow.l{l}.{net}.l2.w")).unwrap() =
                    init.noise(&[dims.hidden, 1], 0.1);
                *store.value_mut(&format!("flow.l{l}.{net}.l2.b")).unwrap() =
                    init.noise(&[1], 0.05);
            }
        }
        let n = 201;
        let lo = -6.0;
        let hi = 6.0;
        let step = (hi - lo) / (n - 1) as f64;
        let mut xs = Vec::with_capacity(n * n * 2);
        for i in 0..n {
            for j in 0..n {
                xs.push(lo + i as f64 * step);
                xs.push(lo + j as f64 * step);
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(Array::matrix(n * n, 2, xs).unwrap());
        let cond = tape.constant(Array::matrix(1, 2, vec![0.3, -0.6]).unwrap());
        let rep: Vec<usize> = vec![0; n * n];
        let cond_rep = tape.gather(cond, &rep).unwrap();
        let nll = nll_rows(&mut tape, &store, &dims, x, cond_rep).unwrap();
        let mass: f64 = tape
            .value(nll)
            .data()
            .iter()
            .map(|&v| (-v).exp() * step * step)
            .sum();
        assert!((mass - 1.0).abs() < 0.01, "integrated mass {mass}");
    }

    #[test]
    fn sampling_is_deterministic_given_seed() {
        let dims = small_dims();
        let store = store_for(&dims, 9, true);
        let run = || {
            let mut tape = Tape::new();
            let cond = tape.constant(Array::matrix(2, dims.cond, vec![0.1; 2 * dims.cond]).unwrap());
            let mut rng = ChaCha8Rng::seed_from_u64(123);
            let (x, _) = sample_hypotheses(&mut tape, &store, &dims, cond, 5, &mut rng).unwrap();
            tape.value(x).data().to_vec()
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        // Bitwise identical.
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn identity_flow_sampling_statistics() {
        let dims = FlowDims {
            dim: 8,
            cond: 4,
            hidden: 8,
            layers: 2,
            s_max: 3.0,
        };
        let store = store_for(&dims, 10, false);
        let mut tape = Tape::new();
        let cond = tape.constant(Array::matrix(1, dims.cond, vec![0.0; dims.cond]).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let m = 256;
        let (x, _) = sample_hypotheses(&mut tape, &store, &dims, cond, m, &mut rng).unwrap();
        let v = tape.value(x);
        // Key hypothesis decodes the zero latent.
        for d in 0..dims.dim {
            assert_eq!(v.at(0, d), 0.0);
        }
        // Mean of the random hypotheses approaches the key at 1/sqrt(M).
        for d in 0..dims.dim {
            let mean: f64 = (1..=m).map(|h| v.at(h, d)).sum::<f64>() / m as f64;
            assert!(mean.abs() < 0.2, "dim {d} mean {mean}");
        }
        // Per-dim std near 1.
        let mut all = Vec::new();
        for h in 1..=m {
            for d in 0..dims.dim {
                all.push(v.at(h, d));
            }
        }
        let mean: f64 = all.iter().sum::<f64>() / all.len() as f64;
        let var: f64 = all.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / all.len() as f64;
        assert!((var.sqrt() - 1.0).abs() < 0.1, "std {}", var.sqrt());
    }

    #[test]
    fn nll_gradient_passes_grad_check() {
        use crate::diff::{grad_check, GradCheckOptions};
        let dims = FlowDims {
            dim: 6,
            cond: 3,
            hidden: 5,
            layers: 2,
            s_max: 3.0,
        };
        let mut store = store_for(&dims, 11, true);
        let x_data: Vec<f64> = vec![0.4, -0.2, 1.3, 0.8, -0.9, 0.1];
        let c_data = vec![0.2, -0.5, 0.7];
        let report = grad_check(&mut store, &GradCheckOptions::default(), |tape, store| {
            let x = tape.constant(Array::matrix(1, dims.dim, x_data.clone()).unwrap());
            let c = tape.constant(Array::matrix(1, dims.cond, c_data.clone()).unwrap());
            loss_nll(tape, store, &dims, x, c)
        })
        .unwrap();
        assert!(report.passed, "{}", report.summary());
    }

    proptest::proptest! {
        #[test]
        fn bijective_for_any_parameters(seed in 0u64..500, x0 in -5.0f64..5.0, x1 in -5.0f64..5.0) {
            let dims = FlowDims { dim: 2, cond: 2, hidden: 4, layers: 2, s_max: 3.0 };
            let store = store_for(&dims, seed, true);
            let mut tape = Tape::new();
            let x = tape.constant(Array::matrix(1, 2, vec![x0, x1]).unwrap());
            let c = tape.constant(Array::matrix(1, 2, vec![0.1, -0.3]).unwrap());
            let (z, _) = flow_inverse(&mut tape, &store, &dims, x, c).unwrap();
            let (x2, _) = flow_forward(&mut tape, &store, &dims, z, c).unwrap();
            proptest::prop_assert!((tape.value(x2).at(0, 0) - x0).abs() < 1e-5);
            proptest::prop_assert!((tape.value(x2).at(0, 1) - x1).abs() < 1e-5);
        }
    }
}
