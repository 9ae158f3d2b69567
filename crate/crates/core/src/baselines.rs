//! Comparison sequence layers: softmax attention under local / sliding-window
//! masks, a matrix-hidden-state linear-attention scan, and a gated delta-rule
//! scan. All scans are differentiable through the same graph as the TTT layer.

use rand::Rng;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::ops::MASK_NEG;
use crate::tensor::Tensor;

/// Decay gates live in [DECAY_FLOOR, 1]; the floor keeps states from being
/// multiplied by exact zero while the sigmoid keeps them below one.
pub const DECAY_FLOOR: f64 = 1e-4;

/// Guard added under the square root when normalizing delta-rule keys. Small
/// enough that exact unit keys stay bit-identical after normalization.
const KEY_NORM_GUARD: f64 = 1e-24;

// ----- attention masks --------------------------------------------------------

/// Boolean admissibility over a T x T grid, stored as per-row sorted disjoint
/// column intervals. Local masks are block-diagonal over segments; sliding
/// windows are symmetric bands.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMask {
    t: usize,
    rows: Vec<Vec<(usize, usize)>>,
}

impl AttentionMask {
    pub fn full(t: usize) -> Self {
        AttentionMask { t, rows: vec![vec![(0, t)]; t] }
    }

    /// Symmetric non-causal band: row t admits columns with |t - s| <= w/2.
    pub fn sliding_window(t: usize, w: usize) -> Result<Self> {
        if w < 1 {
            return Err(Error::config("sliding window width must be >= 1"));
        }
        let half = w / 2;
        let rows = (0..t)
            .map(|r| {
                let lo = r.saturating_sub(half);
                let hi = (r + half + 1).min(t);
                vec![(lo, hi)]
            })
            .collect();
        Ok(AttentionMask { t, rows })
    }

    /// Block mask from (possibly overlapping) contiguous segment ranges.
    /// A token admits every token of every segment that contains it.
    pub fn from_segments(t: usize, segments: &[std::ops::Range<usize>]) -> Result<Self> {
        for s in segments {
            if s.start >= s.end || s.end > t {
                return Err(Error::config(format!("segment {s:?} out of range for T={t}")));
            }
        }
        let mut rows: Vec<Vec<(usize, usize)>> = vec![Vec::new(); t];
        for (r, row) in rows.iter_mut().enumerate() {
            let mut ivals: Vec<(usize, usize)> = segments
                .iter()
                .filter(|s| s.contains(&r))
                .map(|s| (s.start, s.end))
                .collect();
            if ivals.is_empty() {
                return Err(Error::config(format!("token {r} belongs to no segment")));
            }
            ivals.sort_unstable();
            let mut merged: Vec<(usize, usize)> = Vec::new();
            for (a, b) in ivals {
                match merged.last_mut() {
                    Some(last) if a <= last.1 => last.1 = last.1.max(b),
                    _ => merged.push((a, b)),
                }
            }
            *row = merged;
        }
        Ok(AttentionMask { t, rows })
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    pub fn admits(&self, r: usize, c: usize) -> bool {
        self.rows[r].iter().any(|&(a, b)| c >= a && c < b)
    }

    pub fn intervals(&self, r: usize) -> &[(usize, usize)] {
        &self.rows[r]
    }

    pub fn row_width(&self, r: usize) -> usize {
        self.rows[r].iter().map(|(a, b)| b - a).sum()
    }

    pub fn is_symmetric(&self) -> bool {
        (0..self.t).all(|r| {
            self.rows[r]
                .iter()
                .flat_map(|&(a, b)| a..b)
                .all(|c| self.admits(c, r))
        })
    }

    /// Execution plan: consecutive rows grouped with a bounding column span.
    /// `uniform` groups admit their whole span and need no bias tensor.
    fn plan(&self) -> Vec<RowGroup> {
        const BAND_CHUNK: usize = 64;
        let mut groups: Vec<RowGroup> = Vec::new();
        let mut r = 0;
        while r < self.t {
            let mut end = r + 1;
            while end < self.t && self.rows[end] == self.rows[r] {
                end += 1;
            }
            let (lo, hi) = bounding(&self.rows[r]);
            let uniform = self.rows[r].len() == 1;
            if end - r == 1 {
                // run of distinct rows (a band): chunk them under one span
                let mut chunk_end = r + 1;
                let (mut clo, mut chi) = (lo, hi);
                while chunk_end < self.t
                    && chunk_end - r < BAND_CHUNK
                    && self.rows[chunk_end] != self.rows[chunk_end.saturating_sub(1)]
                {
                    let (a, b) = bounding(&self.rows[chunk_end]);
                    clo = clo.min(a);
                    chi = chi.max(b);
                    chunk_end += 1;
                }
                let all_uniform = (r..chunk_end)
                    .all(|i| self.rows[i] == vec![(clo, chi)]);
                groups.push(RowGroup {
                    row_start: r,
                    row_len: chunk_end - r,
                    col_start: clo,
                    col_len: chi - clo,
                    uniform: all_uniform,
                });
                r = chunk_end;
            } else {
                groups.push(RowGroup {
                    row_start: r,
                    row_len: end - r,
                    col_start: lo,
                    col_len: hi - lo,
                    uniform,
                });
                r = end;
            }
        }
        groups
    }
}

fn bounding(ivals: &[(usize, usize)]) -> (usize, usize) {
    (ivals.first().unwrap().0, ivals.last().unwrap().1)
}

struct RowGroup {
    row_start: usize,
    row_len: usize,
    col_start: usize,
    col_len: usize,
    uniform: bool,
}

/// Sliding-window mask; `w` defaults to 8192 in the full-scale profile and is
/// configurable at toy scale.
pub fn build_sliding_window_mask(t: usize, w: usize) -> Result<AttentionMask> {
    AttentionMask::sliding_window(t, w)
}

// ----- attention parameters -----------------------------------------------------

#[derive(Clone)]
pub struct AttnHeadParams<E: Element = f64> {
    pub wq: Tensor<E>,
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wo: Tensor<E>,
}

#[derive(Clone)]
pub struct AttnParams<E: Element = f64> {
    pub heads: Vec<AttnHeadParams<E>>,
    pub k: usize,
}

#[derive(Clone)]
pub struct AttnHeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone)]
pub struct AttnVars {
    pub heads: Vec<AttnHeadVars>,
    pub head_dim: usize,
}

impl<E: Element> AttnParams<E> {
    pub fn init(d: usize, k: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads < 1 || k % heads != 0 {
            return Err(Error::config(format!("k={k} not divisible by heads={heads}")));
        }
        let kh = k / heads;
        let std = 0.02;
        let heads = (0..heads)
            .map(|_| AttnHeadParams {
                wq: Tensor::randn(&[kh, d], std, rng),
                wk: Tensor::randn(&[kh, d], std, rng),
                wv: Tensor::randn(&[kh, d], std, rng),
                wo: Tensor::randn(&[d, kh], std, rng),
            })
            .collect();
        Ok(AttnParams { heads, k })
    }

    pub fn bind(&self, g: &mut Graph<E>) -> AttnVars {
        AttnVars {
            heads: self
                .heads
                .iter()
                .map(|h| AttnHeadVars {
                    wq: g.leaf(h.wq.clone()),
                    wk: g.leaf(h.wk.clone()),
                    wv: g.leaf(h.wv.clone()),
                    wo: g.leaf(h.wo.clone()),
                })
                .collect(),
            head_dim: self.k / self.heads.len(),
        }
    }

    pub fn flatten(&self) -> Vec<Tensor<E>> {
        self.heads
            .iter()
            .flat_map(|h| [h.wq.clone(), h.wk.clone(), h.wv.clone(), h.wo.clone()])
            .collect()
    }

    pub fn unflatten(&self, flat: &[Tensor<E>]) -> Self {
        let mut p = self.clone();
        let mut it = flat.iter().cloned();
        for h in &mut p.heads {
            h.wq = it.next().unwrap();
            h.wk = it.next().unwrap();
            h.wv = it.next().unwrap();
            h.wo = it.next().unwrap();
        }
        p
    }
}

/// Non-causal masked softmax attention.
///
/// Per admissible row entry: softmax((q_t . k_s) / sqrt(k_head)) weights a
/// convex combination of values; the output projection folds heads back to d.
pub fn softmax_attention<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    vars: &AttnVars,
    mask: &AttentionMask,
) -> Result<Var> {
    let t = g.shape(x)[0];
    if mask.len() != t {
        return Err(Error::shape(
            "softmax_attention",
            format!("mask is {}x{} but sequence has {t} tokens", mask.len(), mask.len()),
        ));
    }
    for r in 0..t {
        if mask.intervals(r).is_empty() {
            return Err(Error::config(format!("attention row {r} admits no columns")));
        }
    }
    let plan = mask.plan();
    let scale = 1.0 / (vars.head_dim as f64).sqrt();
    let mut z: Option<Var> = None;
    for head in &vars.heads {
        let qt = g.transpose(head.wq)?;
        let kt = g.transpose(head.wk)?;
        let vt = g.transpose(head.wv)?;
        let q = g.matmul(x, qt)?;
        let k = g.matmul(x, kt)?;
        let v = g.matmul(x, vt)?;
        let mut blocks = Vec::with_capacity(plan.len());
        for grp in &plan {
            let qr = g.narrow(q, 0, grp.row_start, grp.row_len)?;
            let ks = g.narrow(k, 0, grp.col_start, grp.col_len)?;
            let vs = g.narrow(v, 0, grp.col_start, grp.col_len)?;
            let kst = g.transpose(ks)?;
            let scores = g.matmul(qr, kst)?;
            let scores = g.scale(scores, scale)?;
            let bias = if grp.uniform {
                None
            } else {
                let mut b = vec![E::zero(); grp.row_len * grp.col_len];
                for i in 0..grp.row_len {
                    for j in 0..grp.col_len {
                        if !mask.admits(grp.row_start + i, grp.col_start + j) {
                            b[i * grp.col_len + j] = E::from_f64(MASK_NEG);
                        }
                    }
                }
                Some(Tensor::new(vec![grp.row_len, grp.col_len], b)?)
            };
            let p = g.softmax_rows(scores, bias.as_ref())?;
            blocks.push(g.matmul(p, vs)?);
        }
        let f = g.concat(&blocks, 0)?;
        let ot = g.transpose(head.wo)?;
        let zh = g.matmul(f, ot)?;
        z = Some(match z {
            None => zh,
            Some(acc) => g.add(acc, zh)?,
        });
    }
    Ok(z.unwrap())
}

// ----- recurrent baselines ------------------------------------------------------

#[derive(Clone)]
pub struct RnnHeadParams<E: Element = f64> {
    pub wk: Tensor<E>,
    pub wv: Tensor<E>,
    pub wq: Tensor<E>,
    pub wo: Tensor<E>,
    /// Affine map behind the per-token decay gate a_t.
    pub decay_w: Tensor<E>,
    pub decay_b: Tensor<E>,
    /// Affine map behind the delta-rule write strength beta_t (unused by the
    /// plain linear-attention scan).
    pub write_w: Tensor<E>,
    pub write_b: Tensor<E>,
}

#[derive(Clone)]
pub struct RnnParams<E: Element = f64> {
    pub heads: Vec<RnnHeadParams<E>>,
    pub k: usize,
}

#[derive(Clone)]
pub struct RnnHeadVars {
    pub wk: Var,
    pub wv: Var,
    pub wq: Var,
    pub wo: Var,
    pub decay_w: Var,
    pub decay_b: Var,
    pub write_w: Var,
    pub write_b: Var,
}

#[derive(Clone)]
pub struct RnnVars {
    pub heads: Vec<RnnHeadVars>,
    pub head_dim: usize,
}

impl<E: Element> RnnParams<E> {
    pub fn init(d: usize, k: usize, heads: usize, rng: &mut impl Rng) -> Result<Self> {
        if heads < 1 || k % heads != 0 {
            return Err(Error::config(format!("k={k} not divisible by heads={heads}")));
        }
        let kh = k / heads;
        let std = 0.02;
        let heads = (0..heads)
            .map(|_| RnnHeadParams {
                wk: Tensor::randn(&[kh, d], std, rng),
                wv: Tensor::randn(&[kh, d], std, rng),
                wq: Tensor::randn(&[kh, d], std, rng),
                wo: Tensor::randn(&[d, kh], std, rng),
                decay_w: Tensor::randn(&[d, 1], std, rng),
                decay_b: Tensor::full(&[1, 1], E::from_f64(2.0)),
                write_w: Tensor::randn(&[d, 1], std, rng),
                write_b: Tensor::full(&[1, 1], E::from_f64(1.0)),
            })
            .collect();
        Ok(RnnParams { heads, k })
    }

    pub fn bind(&self, g: &mut Graph<E>) -> RnnVars {
        RnnVars {
            heads: self
                .heads
                .iter()
                .map(|h| RnnHeadVars {
                    wk: g.leaf(h.wk.clone()),
                    wv: g.leaf(h.wv.clone()),
                    wq: g.leaf(h.wq.clone()),
                    wo: g.leaf(h.wo.clone()),
                    decay_w: g.leaf(h.decay_w.clone()),
                    decay_b: g.leaf(h.decay_b.clone()),
                    write_w: g.leaf(h.write_w.clone()),
                    write_b: g.leaf(h.write_b.clone()),
                })
                .collect(),
            head_dim: self.k / self.heads.len(),
        }
    }

    pub fn flatten(&self) -> Vec<Tensor<E>> {
        self.heads
            .iter()
            .flat_map(|h| {
                [
                    h.wk.clone(),
                    h.wv.clone(),
                    h.wq.clone(),
                    h.wo.clone(),
                    h.decay_w.clone(),
                    h.decay_b.clone(),
                    h.write_w.clone(),
                    h.write_b.clone(),
                ]
            })
            .collect()
    }

    pub fn unflatten(&self, flat: &[Tensor<E>]) -> Self {
        let mut p = self.clone();
        let mut it = flat.iter().cloned();
        for h in &mut p.heads {
            h.wk = it.next().unwrap();
            h.wv = it.next().unwrap();
            h.wq = it.next().unwrap();
            h.wo = it.next().unwrap();
            h.decay_w = it.next().unwrap();
            h.decay_b = it.next().unwrap();
            h.write_w = it.next().unwrap();
            h.write_b = it.next().unwrap();
        }
        p
    }
}

/// Decay gate: sigmoid of an affine map, remapped onto [DECAY_FLOOR, 1].
fn decay_gate<E: Element>(g: &mut Graph<E>, xt: Var, w: Var, b: Var) -> Result<Var> {
    let a = g.matmul(xt, w)?;
    let a = g.add(a, b)?;
    let s = g.sigmoid(a)?;
    let scaled = g.scale(s, 1.0 - DECAY_FLOOR)?;
    let shifted = g.add_scalar(scaled, DECAY_FLOOR)?;
    g.reshape(shifted, &[])
}

/// Write-strength gate in [0, 1].
fn write_gate<E: Element>(g: &mut Graph<E>, xt: Var, w: Var, b: Var) -> Result<Var> {
    let a = g.matmul(xt, w)?;
    let a = g.add(a, b)?;
    let s = g.sigmoid(a)?;
    g.reshape(s, &[])
}

/// Matrix-hidden-state linear attention: `S_t = a_t S_{t-1} + v_t k_t^T`,
/// `z_t = O (S_t q_t)`, with S stored so that reads are `q . S`.
pub fn linear_attn_scan<E: Element>(g: &mut Graph<E>, x: Var, vars: &RnnVars) -> Result<Var> {
    rnn_scan(g, x, vars, false)
}

/// Gated delta rule: `S_t = a_t S_{t-1} (I - beta_t k_t k_t^T) + beta_t v_t k_t^T`
/// with unit-normalized keys.
pub fn gated_delta_scan<E: Element>(g: &mut Graph<E>, x: Var, vars: &RnnVars) -> Result<Var> {
    rnn_scan(g, x, vars, true)
}

fn rnn_scan<E: Element>(g: &mut Graph<E>, x: Var, vars: &RnnVars, delta: bool) -> Result<Var> {
    let t_len = g.shape(x)[0];
    let kh = vars.head_dim;
    let mut rows: Vec<Var> = Vec::with_capacity(t_len);
    let mut states: Vec<Var> = vars
        .heads
        .iter()
        .map(|_| g.constant(Tensor::zeros(&[kh, kh])))
        .collect();
    for t in 0..t_len {
        let xt = g.narrow(x, 0, t, 1)?;
        let mut z: Option<Var> = None;
        for (h, head) in vars.heads.iter().enumerate() {
            let kt = g.transpose(head.wk)?;
            let vt = g.transpose(head.wv)?;
            let qt = g.transpose(head.wq)?;
            let mut key = g.matmul(xt, kt)?;
            let val = g.matmul(xt, vt)?;
            let query = g.matmul(xt, qt)?;
            let a = decay_gate(g, xt, head.decay_w, head.decay_b)?;

            let s = states[h];
            let decayed_then_written = if delta {
                key = normalize_key(g, key)?;
                let beta = write_gate(g, xt, head.write_w, head.write_b)?;
                // erase the old association for this key before writing
                let ks = g.matmul(key, s)?;
                let key_col = g.transpose(key)?;
                let outer_old = g.matmul(key_col, ks)?;
                let erase = g.mul(outer_old, beta)?;
                let erased = g.sub(s, erase)?;
                let decayed = g.mul(erased, a)?;
                let write = g.matmul(key_col, val)?;
                let scaled_write = g.mul(write, beta)?;
                g.add(decayed, scaled_write)?
            } else {
                let decayed = g.mul(s, a)?;
                let key_col = g.transpose(key)?;
                let write = g.matmul(key_col, val)?;
                g.add(decayed, write)?
            };
            states[h] = decayed_then_written;

            let read = g.matmul(query, states[h])?;
            let ot = g.transpose(head.wo)?;
            let zh = g.matmul(read, ot)?;
            z = Some(match z {
                None => zh,
                Some(acc) => g.add(acc, zh)?,
            });
        }
        rows.push(z.unwrap());
    }
    g.concat(&rows, 0)
}

fn normalize_key<E: Element>(g: &mut Graph<E>, key: Var) -> Result<Var> {
    let sq = g.mul(key, key)?;
    let norm2 = g.row_sum(sq)?;
    let guarded = g.add_scalar(norm2, KEY_NORM_GUARD)?;
    let norm = g.sqrt(guarded)?;
    let inv = g.recip(norm)?;
    let inv = g.reshape(inv, &[])?;
    g.mul(key, inv)
}

/// Eq.-7 style wrapper for any scan: `rev(scan(rev(X)))`.
pub fn reverse_wrapped<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    scan: &mut dyn FnMut(&mut Graph<E>, Var) -> Result<Var>,
) -> Result<Var> {
    let rx = g.time_reverse(x)?;
    let rz = scan(g, rx)?;
    g.time_reverse(rz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::check::central_diff_grad;
    use crate::seeded_rng;

    #[test]
    fn sliding_window_examples() {
        // w >= 2T admits everything
        let m = build_sliding_window_mask(5, 10).unwrap();
        assert_eq!(m, AttentionMask::full(5));
        // w = 1 is the diagonal
        let m = build_sliding_window_mask(4, 1).unwrap();
        for r in 0..4 {
            for c in 0..4 {
                assert_eq!(m.admits(r, c), r == c);
            }
        }
        // T=10, w=5 against an enumerated admissibility table
        let m = build_sliding_window_mask(10, 5).unwrap();
        for r in 0..10usize {
            for c in 0..10usize {
                let want = r.abs_diff(c) <= 2;
                assert_eq!(m.admits(r, c), want, "({r},{c})");
            }
        }
        assert!(m.is_symmetric());
    }

    #[test]
    fn segment_mask_is_block_diagonal_and_symmetric() {
        let m = AttentionMask::from_segments(6, &[0..3, 3..6]).unwrap();
        for r in 0..6 {
            for c in 0..6 {
                assert_eq!(m.admits(r, c), (r < 3) == (c < 3));
            }
        }
        assert!(m.is_symmetric());
        // uncovered token is an error
        assert!(AttentionMask::from_segments(6, &[0..3, 4..6]).is_err());
    }

    #[test]
    fn overlapping_segments_admit_both_blocks() {
        let m = AttentionMask::from_segments(6, &[0..4, 3..6]).unwrap();
        // token 3 sits in both segments
        for c in 0..6 {
            assert!(m.admits(3, c));
        }
        assert!(m.admits(0, 3) && !m.admits(0, 4));
        assert!(m.admits(5, 3) && !m.admits(5, 2));
        assert!(m.is_symmetric());
    }

    fn brute_force_attention(
        x: &Tensor,
        p: &AttnParams,
        mask: &AttentionMask,
    ) -> Tensor {
        let t = x.shape()[0];
        let d = x.shape()[1];
        let mut out = Tensor::zeros(&[t, d]);
        for head in &p.heads {
            let kh = head.wq.shape()[0];
            let q = x.matmul(&head.wq.transpose().unwrap()).unwrap();
            let k = x.matmul(&head.wk.transpose().unwrap()).unwrap();
            let v = x.matmul(&head.wv.transpose().unwrap()).unwrap();
            let mut f = Tensor::zeros(&[t, kh]);
            for r in 0..t {
                let cols: Vec<usize> = (0..t).filter(|&c| mask.admits(r, c)).collect();
                let scores: Vec<f64> = cols
                    .iter()
                    .map(|&c| {
                        q.row(r).iter().zip(k.row(c)).map(|(a, b)| a * b).sum::<f64>()
                            / (kh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let es: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let denom: f64 = es.iter().sum();
                for j in 0..kh {
                    let mut acc = 0.0;
                    for (idx, &c) in cols.iter().enumerate() {
                        acc += es[idx] / denom * v.at2(c, j);
                    }
                    f.data_mut()[r * kh + j] = acc;
                }
            }
            let zh = f.matmul(&head.wo.transpose().unwrap()).unwrap();
            out = out.add(&zh).unwrap();
        }
        out
    }

    #[test]
    fn attention_matches_brute_force_full_mask() {
        let mut rng = seeded_rng(61);
        let p = AttnParams::init(4, 4, 1, &mut rng).unwrap();
        let xt = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let mask = AttentionMask::full(3);

        let mut g: Graph = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(xt.clone());
        let z = softmax_attention(&mut g, x, &vars, &mask).unwrap();
        let want = brute_force_attention(&xt, &p, &mask);
        assert!(g.value(z).rel_err(&want) < 1e-12);
    }

    #[test]
    fn attention_matches_brute_force_banded_and_segmented() {
        let mut rng = seeded_rng(67);
        let p = AttnParams::init(6, 4, 2, &mut rng).unwrap();
        let xt = Tensor::randn(&[9, 6], 1.0, &mut rng);
        for mask in [
            build_sliding_window_mask(9, 5).unwrap(),
            AttentionMask::from_segments(9, &[0..4, 3..9]).unwrap(),
            AttentionMask::from_segments(9, &[0..3, 3..7, 7..9]).unwrap(),
        ] {
            let mut g: Graph = Graph::new();
            let vars = p.bind(&mut g);
            let x = g.constant(xt.clone());
            let z = softmax_attention(&mut g, x, &vars, &mask).unwrap();
            let want = brute_force_attention(&xt, &p, &mask);
            assert!(g.value(z).rel_err(&want) < 1e-12);
        }
    }

    #[test]
    fn attention_singleton_and_uniform_rows() {
        let mut rng = seeded_rng(71);
        let p = AttnParams::init(3, 3, 1, &mut rng).unwrap();

        // single admissible column: output row is that value row (after O)
        let xt = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let mask = build_sliding_window_mask(3, 1).unwrap();
        let mut g: Graph = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(xt.clone());
        let z = softmax_attention(&mut g, x, &vars, &mask).unwrap();
        let v = xt.matmul(&p.heads[0].wv.transpose().unwrap()).unwrap();
        let want = v.matmul(&p.heads[0].wo.transpose().unwrap()).unwrap();
        assert!(g.value(z).rel_err(&want) < 1e-12);

        // identical keys (zeroed key projection): uniform weights, so each
        // output row is the mean of the admissible value rows
        let mut p2 = p.clone();
        p2.heads[0].wk = Tensor::zeros(&[3, 3]);
        let xmix = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let mask = AttentionMask::full(3);
        let mut g: Graph = Graph::new();
        let vars = p2.bind(&mut g);
        let x = g.constant(xmix.clone());
        let z = softmax_attention(&mut g, x, &vars, &mask).unwrap();
        let v = xmix.matmul(&p2.heads[0].wv.transpose().unwrap()).unwrap();
        let mean_row: Vec<f64> = (0..3)
            .map(|j| (0..3).map(|s| v.at2(s, j)).sum::<f64>() / 3.0)
            .collect();
        let mean = Tensor::new(vec![1, 3], mean_row).unwrap();
        let want_row = mean.matmul(&p2.heads[0].wo.transpose().unwrap()).unwrap();
        for t in 0..3 {
            let got = g.value(z).narrow(0, t, 1).unwrap();
            assert!(got.rel_err(&want_row) < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        // Fix feature 0 of every token to 1 and make the value projection read
        // exactly that feature: every value vector is all-ones, so the output
        // (with O = I) is the row sum of the attention weights.
        let mut rng = seeded_rng(73);
        let mut p = AttnParams::init(4, 4, 1, &mut rng).unwrap();
        let mut wv = Tensor::zeros(&[4, 4]);
        for j in 0..4 {
            wv.data_mut()[j * 4] = 1.0;
        }
        p.heads[0].wv = wv;
        p.heads[0].wo = Tensor::eye(4);
        let mut xt = Tensor::randn(&[7, 4], 1.0, &mut rng);
        for t in 0..7 {
            xt.data_mut()[t * 4] = 1.0;
        }
        let mask = build_sliding_window_mask(7, 3).unwrap();

        let mut g: Graph = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(xt);
        let z = softmax_attention(&mut g, x, &vars, &mask).unwrap();
        for &v in g.value(z).data() {
            assert!((v - 1.0).abs() < 1e-12, "weight row sums to {v}");
        }
    }

    #[test]
    fn linear_scan_examples() {
        let mut rng = seeded_rng(79);
        let p = RnnParams::init(3, 3, 1, &mut rng).unwrap();

        // T = 1: z_1 = O (v_1 (k_1 . q_1)) with S_0 = 0 and one write
        let xt = Tensor::randn(&[1, 3], 1.0, &mut rng);
        let mut g: Graph = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(xt.clone());
        let z = linear_attn_scan(&mut g, x, &vars).unwrap();
        let h = &p.heads[0];
        let k = xt.matmul(&h.wk.transpose().unwrap()).unwrap();
        let v = xt.matmul(&h.wv.transpose().unwrap()).unwrap();
        let q = xt.matmul(&h.wq.transpose().unwrap()).unwrap();
        let kq: f64 = k.data().iter().zip(q.data()).map(|(a, b)| a * b).sum();
        let want = v
            .scale(kq)
            .unwrap()
            .matmul(&h.wo.transpose().unwrap())
            .unwrap();
        assert!(g.value(z).rel_err(&want) < 1e-12);
    }

    fn gates_of(x: &Tensor, h: &RnnHeadParams, t: usize) -> (f64, f64) {
        let dot = |w: &Tensor, b: &Tensor| -> f64 {
            let s: f64 = x.row(t).iter().zip(w.data()).map(|(a, b)| a * b).sum();
            s + b.data()[0]
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        let a = DECAY_FLOOR + (1.0 - DECAY_FLOOR) * sig(dot(&h.decay_w, &h.decay_b));
        let beta = sig(dot(&h.write_w, &h.write_b));
        (a, beta)
    }

    #[test]
    fn linear_scan_matches_brute_force() {
        let mut rng = seeded_rng(83);
        let p = RnnParams::init(4, 3, 1, &mut rng).unwrap();
        let xt = Tensor::randn(&[4, 4], 1.0, &mut rng);

        let mut g: Graph = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(xt.clone());
        let z = linear_attn_scan(&mut g, x, &vars).unwrap();

        // brute force: z_t = O sum_{s<=t} (prod_{u=s+1..t} a_u) v_s (k_s . q_t)
        let h = &p.heads[0];
        let k = xt.matmul(&h.wk.transpose().unwrap()).unwrap();
        let v = xt.matmul(&h.wv.transpose().unwrap()).unwrap();
        let q = xt.matmul(&h.wq.transpose().unwrap()).unwrap();
        let mut want = Tensor::zeros(&[4, 4]);
        for t in 0..4 {
            let mut read = vec![0.0; 3];
            for s in 0..=t {
                let mut decay = 1.0;
                for u in (s + 1)..=t {
                    decay *= gates_of(&xt, h, u).0;
                }
                let kq: f64 = k.row(s).iter().zip(q.row(t)).map(|(a, b)| a * b).sum();
                for j in 0..3 {
                    read[j] += decay * kq * v.at2(s, j);
                }
            }
            let row = Tensor::new(vec![1, 3], read).unwrap();
            let zrow = row.matmul(&h.wo.transpose().unwrap()).unwrap();
            want.data_mut()[t * 4..(t + 1) * 4].copy_from_slice(zrow.data());
        }
        assert!(g.value(z).rel_err(&want) < 1e-11);
    }

    #[test]
    fn delta_scan_matches_stepwise_recurrence() {
        let mut rng = seeded_rng(89);
        let p = RnnParams::init(4, 3, 1, &mut rng).unwrap();
        let xt = Tensor::randn(&[4, 4], 1.0, &mut rng);

        let mut g: Graph = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(xt.clone());
        let z = gated_delta_scan(&mut g, x, &vars).unwrap();

        // independent step-by-step script in plain tensor math (row layout:
        // S[i][j] = key_i value_j, reads are q . S)
        let h = &p.heads[0];
        let kmat = xt.matmul(&h.wk.transpose().unwrap()).unwrap();
        let vmat = xt.matmul(&h.wv.transpose().unwrap()).unwrap();
        let qmat = xt.matmul(&h.wq.transpose().unwrap()).unwrap();
        let mut s = vec![[0.0; 3]; 3];
        let mut want = Tensor::zeros(&[4, 4]);
        for t in 0..4 {
            let (a, beta) = gates_of(&xt, h, t);
            let norm = (kmat.row(t).iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
            let key: Vec<f64> = kmat.row(t).iter().map(|v| v / norm).collect();
            // k . S
            let mut ks = [0.0; 3];
            for j in 0..3 {
                for i in 0..3 {
                    ks[j] += key[i] * s[i][j];
                }
            }
            let mut snew = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    snew[i][j] = a * (s[i][j] - beta * key[i] * ks[j]) + beta * key[i] * vmat.at2(t, j);
                }
            }
            s = snew.to_vec();
            let mut read = [0.0; 3];
            for j in 0..3 {
                for i in 0..3 {
                    read[j] += qmat.at2(t, i) * s[i][j];
                }
            }
            let row = Tensor::new(vec![1, 3], read.to_vec()).unwrap();
            let zrow = row.matmul(&h.wo.transpose().unwrap()).unwrap();
            want.data_mut()[t * 4..(t + 1) * 4].copy_from_slice(zrow.data());
        }
        assert!(g.value(z).rel_err(&want) < 1e-11);
    }

    /// Params that force a_t = 1 exactly and beta_t to 1 or ~0, with identity
    /// key/query projections so tokens choose keys directly.
    fn degenerate_params(d: usize, beta_bias: f64, rng: &mut crate::Rng) -> RnnParams {
        let mut p = RnnParams::init(d, d, 1, rng).unwrap();
        let h = &mut p.heads[0];
        h.wk = Tensor::eye(d);
        h.wq = Tensor::eye(d);
        h.decay_w = Tensor::zeros(&[d, 1]);
        h.decay_b = Tensor::full(&[1, 1], 40.0); // sigmoid(40) == 1.0 in f64
        h.write_w = Tensor::zeros(&[d, 1]);
        h.write_b = Tensor::full(&[1, 1], beta_bias);
        p
    }

    #[test]
    fn delta_overwrite_returns_latest_value() {
        // a=1, beta=1, same unit key written twice: the second value wins
        let mut rng = seeded_rng(97);
        let p = degenerate_params(3, 40.0, &mut rng);
        // tokens: e_0, e_0, query e_0
        let xt = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![1.0, 0.0, 0.0],
        ])
        .unwrap();
        let mut g: Graph = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(xt.clone());
        let z = gated_delta_scan(&mut g, x, &vars).unwrap();

        // two-step hand computation: after step 2, S holds v2 under e_0, so the
        // query at t=2 reads v2 exactly.
        let h = &p.heads[0];
        let v2 = xt
            .narrow(0, 1, 1)
            .unwrap()
            .matmul(&h.wv.transpose().unwrap())
            .unwrap();
        let want = v2.matmul(&h.wo.transpose().unwrap()).unwrap();
        let got = g.value(z).narrow(0, 2, 1).unwrap();
        assert!(got.rel_err(&want) < 1e-12);
    }

    #[test]
    fn delta_without_writes_is_pure_decay() {
        // beta ~ 0: only the decay path of the linear scan remains
        let mut rng = seeded_rng(101);
        let p = degenerate_params(3, -40.0, &mut rng);
        let xt = Tensor::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let mut g: Graph = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(xt.clone());
        let z = gated_delta_scan(&mut g, x, &vars).unwrap();
        // nothing is ever written, so every read of S = 0 gives zero output
        assert!(g.value(z).data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn delta_equals_linear_on_the_degenerate_configuration() {
        // a shared, beta = 1, orthonormal keys, no overwrite collisions
        let mut rng = seeded_rng(103);
        let p = degenerate_params(4, 40.0, &mut rng);
        let xt = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0, 0.0],
            vec![0.0, 0.0, 0.0, 1.0],
        ])
        .unwrap();
        let mut g: Graph = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(xt.clone());
        let zl = linear_attn_scan(&mut g, x, &vars).unwrap();
        let zd = gated_delta_scan(&mut g, x, &vars).unwrap();
        assert!(g.value(zl).rel_err(g.value(zd)) < 1e-12);
    }

    #[test]
    fn baseline_scans_gradcheck() {
        let mut rng = seeded_rng(107);
        let xt = Tensor::randn(&[4, 3], 1.0, &mut rng);

        // attention under a segment mask
        let ap = AttnParams::init(3, 3, 1, &mut rng).unwrap();
        let mask = AttentionMask::from_segments(4, &[0..2, 2..4]).unwrap();
        let mut g: Graph = Graph::new();
        let vars = ap.bind(&mut g);
        let x = g.constant(xt.clone());
        let z = softmax_attention(&mut g, x, &vars, &mask).unwrap();
        let sq = g.mul(z, z).unwrap();
        let loss = g.sum(sq).unwrap();
        let h = vars.heads[0].clone();
        let analytic = g.grad(loss, &[h.wq, h.wk, h.wv, h.wo]).unwrap();
        let flat = ap.flatten();
        let proto = ap.clone();
        let mask2 = mask.clone();
        let xt2 = xt.clone();
        let mut f = move |inputs: &[Tensor]| -> crate::Result<f64> {
            let p = proto.unflatten(inputs);
            let mut g: Graph = Graph::new();
            let vars = p.bind(&mut g);
            let x = g.constant(xt2.clone());
            let z = softmax_attention(&mut g, x, &vars, &mask2)?;
            let sq = g.mul(z, z)?;
            let s = g.sum(sq)?;
            g.value(s).item()
        };
        let fd = central_diff_grad(&mut f, &flat, 1e-5).unwrap();
        for (a, n) in analytic.iter().zip(&fd) {
            assert!(g.value(*a).rel_err(n) <= 1e-4, "attention gradcheck");
        }

        // both recurrent scans
        for delta in [false, true] {
            let rp = RnnParams::init(3, 3, 1, &mut rng).unwrap();
            let mut g: Graph = Graph::new();
            let vars = rp.bind(&mut g);
            let x = g.constant(xt.clone());
            let z = if delta {
                gated_delta_scan(&mut g, x, &vars).unwrap()
            } else {
                linear_attn_scan(&mut g, x, &vars).unwrap()
            };
            let sq = g.mul(z, z).unwrap();
            let loss = g.sum(sq).unwrap();
            let h = vars.heads[0].clone();
            // the linear scan has no write gate, so those params are
            // unreachable from its loss
            let mut wrt = vec![h.wk, h.wv, h.wq, h.wo, h.decay_w, h.decay_b];
            if delta {
                wrt.extend([h.write_w, h.write_b]);
            }
            let analytic = g.grad(loss, &wrt).unwrap();
            let flat = rp.flatten();
            let proto = rp.clone();
            let xt2 = xt.clone();
            let mut f = move |inputs: &[Tensor]| -> crate::Result<f64> {
                let p = proto.unflatten(inputs);
                let mut g: Graph = Graph::new();
                let vars = p.bind(&mut g);
                let x = g.constant(xt2.clone());
                let z = if delta {
                    gated_delta_scan(&mut g, x, &vars)?
                } else {
                    linear_attn_scan(&mut g, x, &vars)?
                };
                let sq = g.mul(z, z)?;
                let s = g.sum(sq)?;
                g.value(s).item()
            };
            let fd = central_diff_grad(&mut f, &flat, 1e-5).unwrap();
            for (i, (a, n)) in analytic.iter().zip(&fd).enumerate() {
                let err = g.value(*a).rel_err(n);
                // write gates have zero influence on the linear scan
                if !delta && i >= 6 {
                    continue;
                }
                assert!(err <= 1e-4, "rnn gradcheck delta={delta} tensor {i}: {err}");
            }
        }
    }

    #[test]
    fn reverse_wrapper_unfolds() {
        let mut rng = seeded_rng(109);
        let p = RnnParams::init(3, 3, 1, &mut rng).unwrap();
        let xt = Tensor::randn(&[5, 3], 1.0, &mut rng);

        let mut g: Graph = Graph::new();
        let vars = p.bind(&mut g);
        let x = g.constant(xt.clone());
        let mut scan = |g: &mut Graph, v: Var| linear_attn_scan(g, v, &vars);
        let z = reverse_wrapped(&mut g, x, &mut scan).unwrap();

        let mut g2: Graph = Graph::new();
        let vars2 = p.bind(&mut g2);
        let xr = g2.constant(xt.reverse_axis(0).unwrap());
        let zr = linear_attn_scan(&mut g2, xr, &vars2).unwrap();
        let want = g2.value(zr).reverse_axis(0).unwrap();
        assert!(g.value(z).bit_equal(&want));
    }
}
