//! Probabilistic point-cloud lifting and the spatiotemporal point
//! transformer: confidence-weighted triangulation of sampled hypotheses into
//! anchor/query clouds, point feature fusion from per-view projections, and
//! K blocks of spatial / temporal / cross attention with residual coordinate
//! refinement.
//!
//! The in-graph triangulation solves the weighted two-rows-per-view DLT
//! system in inhomogeneous form through closed-form 3x3 normal equations, so
//! the whole lift stays differentiable on the tape.

use crate::diff::{Array, DiffError, ParamStore, Tape, Var};
use crate::geometry::{project_points_tape, Camera};
use crate::graph::sinusoidal_embed;
use crate::nn::{linear, register_linear, Init};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StptError {
    #[error("degenerate triangulation for query joint {joint}")]
    DegenerateQuery { joint: usize },
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Clone, Copy, Debug)]
pub struct StptDims {
    /// Point feature width.
    pub d_point: usize,
    /// Neighbors for spatial and cross attention.
    pub knn: usize,
    /// Hidden width of the relative-position MLPs.
    pub pos_hidden: usize,
    /// Hidden width of the refinement head.
    pub ffn_hidden: usize,
    /// Number of refinement blocks.
    pub blocks: usize,
    /// Temporal window length (frame embeddings are per window slot).
    pub t_window: usize,
    /// Sinusoidal embedding width for projected (u, v).
    pub d_pe: usize,
    /// Working-volume scale normalizing coordinates entering MLPs, mm.
    pub wv_scale: f64,
    /// Frame size for normalizing projections, px.
    pub frame_size: f64,
}

impl Default for StptDims {
    fn default() -> Self {
        StptDims {
            d_point: 32,
            knn: 8,
            pos_hidden: 16,
            ffn_hidden: 32,
            blocks: 4,
            t_window: 5,
            d_pe: 32,
            wv_scale: 400.0,
            frame_size: 256.0,
        }
    }
}

pub fn register_stpt_params(
    store: &mut ParamStore,
    dims: &StptDims,
    init: &mut Init,
) -> Result<(), DiffError> {
    let d = dims.d_point;
    register_linear(store, "point.enc", dims.d_pe + 1, d, init, false)?;
    register_linear(store, "point.mix", d, d, init, false)?;
    for b in 0..dims.blocks {
        for stage in ["sp", "cr"] {
            for proj in ["wq", "wk", "wv"] {
                register_linear(store, &format!("stpt.b{b}.{stage}.{proj}"), d, d, init, false)?;
            }
            register_linear(store, &format!("stpt.b{b}.{stage}.pos.l1"), 3, dims.pos_hidden, init, false)?;
            register_linear(store, &format!("stpt.b{b}.{stage}.pos.l2"), dims.pos_hidden, d, init, false)?;
        }
        for proj in ["wq", "wk", "wv"] {
            register_linear(store, &format!("stpt.b{b}.tm.{proj}"), d, d, init, false)?;
        }
        store.register(
            &format!("stpt.b{b}.tm.embed"),
            init.noise(&[dims.t_window, d], 0.02),
        )?;
        register_linear(store, &format!("stpt.b{b}.ffn.l1"), d, dims.ffn_hidden, init, false)?;
        // Zero-initialized refinement: the block starts as the identity on
        // coordinates.
        register_linear(store, &format!("stpt.b{b}.ffn.l2"), dims.ffn_hidden, 3, init, true)?;
    }
    Ok(())
}

/// One frame's lifted clouds on the tape. Anchor coordinates and features are
/// fixed after construction; only query coordinates and features evolve.
pub struct FrameCloud {
    pub query_coords: Var,
    pub query_feats: Var,
    pub anchor_coords: Var,
    pub anchor_feats: Var,
    /// Source joint id per anchor row.
    pub anchor_joints: Vec<usize>,
    pub dropped_anchors: usize,
}

/// Batched confidence-weighted linear triangulation of hypothesis pixels.
///
/// `hyp_px` is `[(m+1)*views, 2k]`, hypothesis-major rows, interleaved x/y
/// columns; `confidences[v]` is `[k, 1]`. Returns per-(hypothesis, joint)
/// world coordinates `[(m+1)*k, 3]` plus the determinant values used for
/// degeneracy checks.
fn triangulate_batch(
    tape: &mut Tape,
    hyp_px: Var,
    confidences: &[Var],
    cameras: &[Camera],
    m_hyp: usize,
    k_joints: usize,
) -> Result<(Var, Vec<f64>), DiffError> {
    let views = cameras.len();
    let n = (m_hyp + 1) * k_joints;
    let two_k = 2 * k_joints;

    // Column selectors for x and y coordinates.
    let mut sel_x = vec![0.0; two_k * k_joints];
    let mut sel_y = vec![0.0; two_k * k_joints];
    for j in 0..k_joints {
        sel_x[(2 * j) * k_joints + j] = 1.0;
        sel_y[(2 * j + 1) * k_joints + j] = 1.0;
    }
    let sel_x = tape.constant(Array::matrix(two_k, k_joints, sel_x)?);
    let sel_y = tape.constant(Array::matrix(two_k, k_joints, sel_y)?);

    let joint_pattern: Vec<usize> = (0..n).map(|r| r % k_joints).collect();

    // Accumulated symmetric normal equations, entries [n, 1].
    let ridge = 1e-10;
    let mut m_acc: [Option<Var>; 6] = [None, None, None, None, None, None]; // xx,xy,xz,yy,yz,zz
    let mut c_acc: [Option<Var>; 3] = [None, None, None];

    for (v, cam) in cameras.iter().enumerate() {
        let rows: Vec<usize> = (0..=m_hyp).map(|h| h * views + v).collect();
        let view_px = tape.gather(hyp_px, &rows)?;
        let ux = tape.matmul(view_px, sel_x)?;
        let uy = tape.matmul(view_px, sel_y)?;
        let ux = tape.reshape(ux, &[n, 1])?;
        let uy = tape.reshape(uy, &[n, 1])?;
        // Normalized image coordinates keep the system well conditioned.
        let ux = tape.add_const(ux, -cam.cx);
        let ux = tape.scale(ux, 1.0 / cam.fx);
        let uy = tape.add_const(uy, -cam.cy);
        let uy = tape.scale(uy, 1.0 / cam.fy);

        let w = tape.gather(confidences[v], &joint_pattern)?;
        let w2 = tape.mul(w, w)?;

        let r = &cam.rotation;
        let t = &cam.translation;
        // Two residual rows per view: (u*R3 - R1) X = t1 - u*t3, same for y.
        for (img, r_row, t_row) in [(ux, 0usize, 0usize), (uy, 1, 1)] {
            let mut a = [Var(usize::MAX); 3];
            for c in 0..3 {
                let s = tape.scale(img, r[(2, c)]);
                a[c] = tape.add_const(s, -r[(r_row, c)]);
            }
            let s = tape.scale(img, -t[2]);
            let b = tape.add_const(s, t[t_row]);

            let pairs = [(0, 0), (0, 1), (0, 2), (1, 1), (1, 2), (2, 2)];
            for (slot, &(i, j)) in pairs.iter().enumerate() {
                let prod = tape.mul(a[i], a[j])?;
                let wprod = tape.mul(prod, w2)?;
                m_acc[slot] = Some(match m_acc[slot] {
                    Some(acc) => tape.add(acc, wprod)?,
                    None => wprod,
                });
            }
            for i in 0..3 {
                let prod = tape.mul(a[i], b)?;
                let wprod = tape.mul(prod, w2)?;
                c_acc[i] = Some(match c_acc[i] {
                    Some(acc) => tape.add(acc, wprod)?,
                    None => wprod,
                });
            }
        }
    }

    let [mxx, mxy, mxz, myy, myz, mzz] = m_acc.map(|v| v.expect("accumulated"));
    let mxx = tape.add_const(mxx, ridge);
    let myy = tape.add_const(myy, ridge);
    let mzz = tape.add_const(mzz, ridge);
    let [cx, cy, cz] = c_acc.map(|v| v.expect("accumulated"));

    // Closed-form symmetric 3x3 inverse via the adjugate.
    let mul2 = |tape: &mut Tape, a: Var, b: Var| tape.mul(a, b);
    let a00 = {
        let p = mul2(tape, myy, mzz)?;
        let q = mul2(tape, myz, myz)?;
        tape.sub(p, q)?
    };
    let a01 = {
        let p = mul2(tape, mxz, myz)?;
        let q = mul2(tape, mxy, mzz)?;
        tape.sub(p, q)?
    };
    let a02 = {
        let p = mul2(tape, mxy, myz)?;
        let q = mul2(tape, mxz, myy)?;
        tape.sub(p, q)?
    };
    let a11 = {
        let p = mul2(tape, mxx, mzz)?;
        let q = mul2(tape, mxz, mxz)?;
        tape.sub(p, q)?
    };
    let a12 = {
        let p = mul2(tape, mxy, mxz)?;
        let q = mul2(tape, mxx, myz)?;
        tape.sub(p, q)?
    };
    let a22 = {
        let p = mul2(tape, mxx, myy)?;
        let q = mul2(tape, mxy, mxy)?;
        tape.sub(p, q)?
    };
    let det = {
        let t0 = mul2(tape, mxx, a00)?;
        let t1 = mul2(tape, mxy, a01)?;
        let t2 = mul2(tape, mxz, a02)?;
        let s = tape.add(t0, t1)?;
        tape.add(s, t2)?
    };
    let det_vals = tape.value(det).data().to_vec();

    let solve_row = |tape: &mut Tape, r0: Var, r1: Var, r2: Var| -> Result<Var, DiffError> {
        let t0 = tape.mul(r0, cx)?;
        let t1 = tape.mul(r1, cy)?;
        let t2 = tape.mul(r2, cz)?;
        let s = tape.add(t0, t1)?;
        let s = tape.add(s, t2)?;
        tape.div(s, det)
    };
    let x = solve_row(tape, a00, a01, a02)?;
    let y = solve_row(tape, a01, a11, a12)?;
    let z = solve_row(tape, a02, a12, a22)?;
    let coords = tape.concat_cols(&[x, y, z])?;
    Ok((coords, det_vals))
}

/// Lift one frame's sampled hypotheses into query and anchor clouds.
///
/// The query cloud triangulates the key hypothesis (index 0); anchors
/// triangulate index-matched random hypotheses. Degenerate anchors are
/// dropped and counted; a degenerate query joint is an error.
pub fn lift_frame(
    tape: &mut Tape,
    hyp_px: Var,
    confidences: &[Var],
    cameras: &[Camera],
    m_hyp: usize,
    k_joints: usize,
) -> Result<(Var, Var, Vec<usize>, usize), StptError> {
    let (coords, det_vals) = triangulate_batch(tape, hyp_px, confidences, cameras, m_hyp, k_joints)?;
    let det_floor = 1e-12;
    for j in 0..k_joints {
        if det_vals[j].abs() < det_floor || !det_vals[j].is_finite() {
            return Err(StptError::DegenerateQuery { joint: j });
        }
    }
    let query = tape.gather(coords, &(0..k_joints).collect::<Vec<_>>())?;
    let mut anchor_rows = Vec::with_capacity(m_hyp * k_joints);
    let mut anchor_joints = Vec::with_capacity(m_hyp * k_joints);
    let mut dropped = 0usize;
    for r in k_joints..(m_hyp + 1) * k_joints {
        if det_vals[r].abs() < det_floor || !det_vals[r].is_finite() {
            dropped += 1;
            continue;
        }
        anchor_rows.push(r);
        anchor_joints.push(r % k_joints);
    }
    let anchors = if anchor_rows.is_empty() {
        tape.constant(Array::zeros(&[1, 3]))
    } else {
        tape.gather(coords, &anchor_rows)?
    };
    if anchor_rows.is_empty() {
        dropped = m_hyp * k_joints;
        anchor_joints.clear();
    }
    Ok((query, anchors, anchor_joints, dropped))
}

/// Per-point features from multi-view projections: sinusoidal encoding of the
/// projected pixel plus the source joint's confidence, encoded per view,
/// mean-pooled over views with behind-camera masking, then mixed.
///
/// Returns the features and the number of points behind every camera.
pub fn fuse_point_features(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &StptDims,
    coords: Var,
    confidences: &[Var],
    source_joints: &[usize],
    cameras: &[Camera],
) -> Result<(Var, usize), DiffError> {
    let n = tape.value(coords).rows();
    debug_assert_eq!(source_joints.len(), n);
    let mut sum: Option<Var> = None;
    let mut counts = vec![0.0; n];
    for (v, cam) in cameras.iter().enumerate() {
        let (uv, z) = project_points_tape(tape, coords, cam)?;
        let mask_vals: Vec<f64> = tape
            .value(z)
            .data()
            .iter()
            .map(|&d| if d > 1e-6 { 1.0 } else { 0.0 })
            .collect();
        for (c, m) in counts.iter_mut().zip(mask_vals.iter()) {
            *c += m;
        }
        let mask = tape.constant(Array::matrix(n, 1, mask_vals)?);
        // Behind-camera projections are meaningless; zero them before the
        // encoder so masked rows stay finite.
        let uv = tape.mul(uv, mask)?;
        let pos01 = tape.scale(uv, 1.0 / dims.frame_size);
        let pe = sinusoidal_embed(tape, pos01, dims.d_pe)?;
        let conf = tape.gather(confidences[v], source_joints)?;
        let enc_in = tape.concat_cols(&[pe, conf])?;
        let enc = linear(tape, store, "point.enc", enc_in)?;
        let enc = tape.relu(enc);
        let enc = tape.mul(enc, mask)?;
        sum = Some(match sum {
            Some(s) => tape.add(s, enc)?,
            None => enc,
        });
    }
    let behind_all = counts.iter().filter(|&&c| c == 0.0).count();
    let denom: Vec<f64> = counts.iter().map(|&c| c.max(1.0)).collect();
    let denom = tape.constant(Array::matrix(n, 1, denom)?);
    let mean = tape.div(sum.expect("at least one view"), denom)?;
    let mixed = linear(tape, store, "point.mix", mean)?;
    let feats = tape.relu(mixed);
    // Points behind every camera carry a zero feature.
    let valid: Vec<f64> = counts.iter().map(|&c| if c > 0.0 { 1.0 } else { 0.0 }).collect();
    let valid = tape.constant(Array::matrix(n, 1, valid)?);
    let feats = tape.mul(feats, valid)?;
    Ok((feats, behind_all))
}

/// k-nearest-neighbor indices (including self when the sets coincide) by
/// squared distance; ties break to the lower index.
pub fn knn_indices(queries: &Array, points: &Array, k: usize) -> Vec<usize> {
    let nq = queries.rows();
    let np = points.rows();
    let k = k.min(np);
    let mut out = Vec::with_capacity(nq * k);
    let qd = queries.data();
    let pd = points.data();
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(np);
    for qi in 0..nq {
        dists.clear();
        let q = &qd[qi * 3..qi * 3 + 3];
        for pi in 0..np {
            let p = &pd[pi * 3..pi * 3 + 3];
            let d2 = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
            dists.push((d2, pi));
        }
        dists.sort_unstable_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        out.extend(dists[..k].iter().map(|&(_, i)| i));
    }
    out
}

fn neighborhood_attention(
    tape: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    query_feats: Var,
    query_coords: Var,
    key_feats: Var,
    key_coords: Var,
    knn: usize,
    wv_scale: f64,
) -> Result<(Var, Var), DiffError> {
    let nq = tape.value(query_feats).rows();
    let d = tape.value(query_feats).cols();
    let nbr = knn_indices(tape.value(query_coords), tape.value(key_coords), knn);
    let k_eff = nbr.len() / nq;
    let rep: Vec<usize> = (0..nq).flat_map(|i| std::iter::repeat(i).take(k_eff)).collect();

    let q = linear(tape, store, &format!("{prefix}.wq"), query_feats)?;
    let kk = linear(tape, store, &format!("{prefix}.wk"), key_feats)?;
    let vv = linear(tape, store, &format!("{prefix}.wv"), key_feats)?;
    let q_rep = tape.gather(q, &rep)?;
    let k_n = tape.gather(kk, &nbr)?;
    let v_n = tape.gather(vv, &nbr)?;

    let ci = tape.gather(query_coords, &rep)?;
    let cj = tape.gather(key_coords, &nbr)?;
    let rel = tape.sub(ci, cj)?;
    let rel = tape.scale(rel, 1.0 / wv_scale);
    let h = linear(tape, store, &format!("{prefix}.pos.l1"), rel)?;
    let h = tape.relu(h);
    let delta = linear(tape, store, &format!("{prefix}.pos.l2"), h)?;

    let k_t = tape.add(k_n, delta)?;
    let v_t = tape.add(v_n, delta)?;
    let prod = tape.mul(q_rep, k_t)?;
    let logits = tape.sum_rows(prod);
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let logits = tape.reshape(logits, &[nq, k_eff])?;
    let attn = tape.softmax(logits);
    let w_flat = tape.reshape(attn, &[nq * k_eff, 1])?;
    let contrib = tape.mul(v_t, w_flat)?;
    let mut pool = vec![0.0; nq * nq * k_eff];
    for i in 0..nq {
        for j in 0..k_eff {
            pool[i * nq * k_eff + i * k_eff + j] = 1.0;
        }
    }
    let pool = tape.constant(Array::matrix(nq, nq * k_eff, pool)?);
    let ctx = tape.matmul(pool, contrib)?;
    let out = tape.add(query_feats, ctx)?;
    Ok((out, attn))
}

/// Intra-frame attention over each query point's nearest query neighbors.
pub fn spatial_attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: usize,
    coords: Var,
    feats: Var,
    dims: &StptDims,
) -> Result<(Var, Var), DiffError> {
    neighborhood_attention(
        tape,
        store,
        &format!("stpt.b{block}.sp"),
        feats,
        coords,
        feats,
        coords,
        dims.knn,
        dims.wv_scale,
    )
}

/// Per-joint attention across the temporal window with learnable frame
/// embeddings. `feats[t]` is `[k, d]`; rows of the stacked matrix are
/// frame-major so the same-joint mask is `r % k == c % k`.
pub fn temporal_attention(
    tape: &mut Tape,
    store: &ParamStore,
    block: usize,
    feats: &[Var],
    k_joints: usize,
) -> Result<Vec<Var>, DiffError> {
    let t_frames = feats.len();
    let stacked = tape.concat_rows(feats)?;
    let n = t_frames * k_joints;
    let d = tape.value(stacked).cols();
    let embed = tape.param(store, &format!("stpt.b{block}.tm.embed"))?;
    let pattern: Vec<usize> = (0..n).map(|r| r / k_joints).collect();
    let tiled = tape.gather(embed, &pattern)?;
    let x = tape.add(stacked, tiled)?;
    let q = linear(tape, store, &format!("stpt.b{block}.tm.wq"), x)?;
    let kk = linear(tape, store, &format!("stpt.b{block}.tm.wk"), x)?;
    let vv = linear(tape, store, &format!("stpt.b{block}.tm.wv"), x)?;
    let k_t = tape.transpose(kk)?;
    let logits = tape.matmul(q, k_t)?;
    let logits = tape.scale(logits, 1.0 / (d as f64).sqrt());
    let mut mask = vec![0.0; n * n];
    for r in 0..n {
        for c in 0..n {
            if r % k_joints != c % k_joints {
                mask[r * n + c] = -1e30;
            }
        }
    }
    let mask = tape.constant(Array::matrix(n, n, mask)?);
    let logits = tape.add(logits, mask)?;
    let attn = tape.softmax(logits);
    let ctx = tape.matmul(attn, vv)?;
    let out = tape.add(stacked, ctx)?;
    (0..t_frames)
        .map(|t| tape.gather(out, &((t * k_joints..(t + 1) * k_joints).collect::<Vec<_>>())))
        .collect()
}

/// Cross-attention from query points to their nearest anchors, followed by
/// the residual coordinate refinement. With no anchors the frame passes
/// through unchanged.
pub fn cross_attention_refine(
    tape: &mut Tape,
    store: &ParamStore,
    block: usize,
    query_coords: Var,
    query_feats: Var,
    anchor_coords: Var,
    anchor_feats: Var,
    have_anchors: bool,
    dims: &StptDims,
) -> Result<(Var, Var, Option<Var>), DiffError> {
    if !have_anchors {
        return Ok((query_coords, query_feats, None));
    }
    let (feats, attn) = neighborhood_attention(
        tape,
        store,
        &format!("stpt.b{block}.cr"),
        query_feats,
        query_coords,
        anchor_feats,
        anchor_coords,
        dims.knn,
        dims.wv_scale,
    )?;
    let h = linear(tape, store, &format!("stpt.b{block}.ffn.l1"), feats)?;
    let h = tape.relu(h);
    let delta = linear(tape, store, &format!("stpt.b{block}.ffn.l2"), h)?;
    let delta = tape.scale(delta, dims.wv_scale);
    let coords = tape.add(query_coords, delta)?;
    Ok((coords, feats, Some(attn)))
}

/// Full STPT pass over a window of frames: per block, spatial attention per
/// frame, temporal attention per joint, then cross-attention refinement.
/// Neighborhoods are recomputed after every coordinate update. Returns the
/// refined (coords, feats) per frame.
pub fn stpt_forward(
    tape: &mut Tape,
    store: &ParamStore,
    dims: &StptDims,
    frames: &[FrameCloud],
    k_joints: usize,
) -> Result<Vec<(Var, Var)>, DiffError> {
    let mut state: Vec<(Var, Var)> = frames
        .iter()
        .map(|f| (f.query_coords, f.query_feats))
        .collect();
    for b in 0..dims.blocks {
        let mut spatial = Vec::with_capacity(state.len());
        for (coords, feats) in &state {
            let (f, _) = spatial_attention(tape, store, b, *coords, *feats, dims)?;
            spatial.push(f);
        }
        let temporal = temporal_attention(tape, store, b, &spatial, k_joints)?;
        let mut next = Vec::with_capacity(state.len());
        for (t, frame) in frames.iter().enumerate() {
            let (coords, feats, _) = cross_attention_refine(
                tape,
                store,
                b,
                state[t].0,
                temporal[t],
                frame.anchor_coords,
                frame.anchor_feats,
                !frame.anchor_joints.is_empty(),
                dims,
            )?;
            next.push((coords, feats));
        }
        state = next;
    }
    Ok(state)
}
