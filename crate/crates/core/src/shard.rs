//! Sharded execution of the TTT-MLP scan across worker threads.
//!
//! The first hidden layer is sharded column-wise and the second row-wise, so
//! each worker computes `GELU(u W1_s) W2_s` locally and only the
//! activation-sized partial products cross worker boundaries through an
//! all-reduce. The inner-loss residual is formed on the reduced value, and
//! each worker updates its own weight slices from its local gradient — the
//! forward inner-loss path performs exactly one all-reduce per mini-batch,
//! which the returned stats expose for verification.
//!
//! Reductions sum shard partials in fixed shard-index order, so repeated runs
//! are bit-identical regardless of thread scheduling.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Barrier, Mutex};
use std::time::Instant;

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;
use crate::ttt::{scan_minibatch, HiddenState, TttConfig, TttParams, TttVariant, LN_EPS};

/// One worker's slices: columns of W1, matching rows of W2.
#[derive(Clone, Debug)]
pub struct ShardSlice<E: Element = f64> {
    pub shard_id: usize,
    pub w1: Tensor<E>,
    pub w2: Tensor<E>,
}

/// A hidden state split over `n_shards` workers. Reassembling the slices
/// reproduces the original weights exactly.
#[derive(Clone, Debug)]
pub struct ShardedState<E: Element = f64> {
    pub n_shards: usize,
    pub slices: Vec<ShardSlice<E>>,
}

/// Split an MLP hidden state: W1 by columns, W2 by rows. Lossless.
pub fn shard_params<E: Element>(
    w: &HiddenState<Tensor<E>>,
    n_shards: usize,
) -> Result<ShardedState<E>> {
    let HiddenState::Mlp { w1, w2 } = w else {
        return Err(Error::config("sharding applies to the ttt-mlp hidden state"));
    };
    if n_shards == 0 {
        return Err(Error::config("n_shards must be >= 1"));
    }
    let hidden = w1.shape()[1];
    if hidden % n_shards != 0 {
        return Err(Error::config(format!(
            "hidden width {hidden} is not divisible by n_shards {n_shards}"
        )));
    }
    let per = hidden / n_shards;
    let mut slices = Vec::with_capacity(n_shards);
    for s in 0..n_shards {
        slices.push(ShardSlice {
            shard_id: s,
            w1: w1.narrow(1, s * per, per)?,
            w2: w2.narrow(0, s * per, per)?,
        });
    }
    Ok(ShardedState { n_shards, slices })
}

impl<E: Element> ShardedState<E> {
    /// Concatenate slices back into the full weights, bit-exact.
    pub fn reassemble(&self) -> Result<HiddenState<Tensor<E>>> {
        let w1_parts: Vec<&Tensor<E>> = self.slices.iter().map(|s| &s.w1).collect();
        let w2_parts: Vec<&Tensor<E>> = self.slices.iter().map(|s| &s.w2).collect();
        Ok(HiddenState::Mlp {
            w1: Tensor::concat(&w1_parts, 1)?,
            w2: Tensor::concat(&w2_parts, 0)?,
        })
    }
}

/// Elementwise sum of per-shard partials, delivered to every shard. The
/// reduction folds in shard-index order for reproducibility.
pub fn all_reduce<E: Element>(partials: &[Tensor<E>]) -> Result<Tensor<E>> {
    let first = partials
        .first()
        .ok_or_else(|| Error::shape("all_reduce", "no partials".to_string()))?;
    let mut acc = (*first).clone();
    for p in &partials[1..] {
        if p.shape() != first.shape() {
            return Err(Error::shape(
                "all_reduce",
                format!("shard partial {:?} vs {:?}", p.shape(), first.shape()),
            ));
        }
        acc = acc.add(p)?;
    }
    Ok(acc)
}

/// Which communication the reduce belongs to, for instrumentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReducePath {
    InnerLoss,
    Output,
}

/// Counters exposed by a sharded scan.
#[derive(Clone, Copy, Debug, Default)]
pub struct ShardStats {
    pub inner_loss_reduces: usize,
    pub output_reduces: usize,
    pub minibatches: usize,
}

/// Rendezvous shared by the workers of one scan.
struct ReduceCtx<E: Element> {
    slots: Mutex<Vec<Option<Tensor<E>>>>,
    result: Mutex<Option<Tensor<E>>>,
    barrier: Barrier,
    inner_count: AtomicUsize,
    output_count: AtomicUsize,
}

impl<E: Element> ReduceCtx<E> {
    fn new(n: usize) -> Self {
        ReduceCtx {
            slots: Mutex::new(vec![None; n]),
            result: Mutex::new(None),
            barrier: Barrier::new(n),
            inner_count: AtomicUsize::new(0),
            output_count: AtomicUsize::new(0),
        }
    }

    /// Three waves: deposit -> leader sums in slot order -> everyone reads.
    /// Slots are overwritten each round, never cleared, so no round can race
    /// the next one's deposits.
    fn reduce(&self, shard_id: usize, part: Tensor<E>, path: ReducePath) -> Result<Tensor<E>> {
        self.slots.lock().unwrap()[shard_id] = Some(part);
        let wave = self.barrier.wait();
        if wave.is_leader() {
            let slots = self.slots.lock().unwrap();
            let parts: Vec<Tensor<E>> = slots.iter().map(|s| s.clone().unwrap()).collect();
            drop(slots);
            let summed = all_reduce(&parts)?;
            *self.result.lock().unwrap() = Some(summed);
            match path {
                ReducePath::InnerLoss => self.inner_count.fetch_add(1, Ordering::Relaxed),
                ReducePath::Output => self.output_count.fetch_add(1, Ordering::Relaxed),
            };
        }
        self.barrier.wait();
        let out = self.result.lock().unwrap().clone().unwrap();
        // all readers must finish before any thread starts the next round
        self.barrier.wait();
        Ok(out)
    }
}

/// Per-mini-batch projections, computed once by the driver and shared with
/// every worker (projections are not sharded).
struct MiniBatch<E: Element> {
    len: usize,
    /// Per head: key / target / query projections of the batch tokens.
    u: Vec<Tensor<E>>,
    v: Vec<Tensor<E>>,
    q: Vec<Tensor<E>>,
}

/// Sharded forward scan, functionally equal to [`scan_minibatch`].
///
/// With `eta == 0` the hidden state never changes, so there is nothing to
/// shard and the call delegates to the reference scan — the output is then
/// independent of `n_shards` by construction.
pub fn sharded_scan<E: Element>(
    x: &Tensor<E>,
    params: &TttParams<E>,
    cfg: &TttConfig,
    n_shards: usize,
) -> Result<(Tensor<E>, ShardStats)> {
    cfg.validate()?;
    if cfg.variant != TttVariant::Mlp {
        return Err(Error::config("sharded_scan supports the ttt-mlp variant"));
    }
    if cfg.eta == 0.0 {
        let mut g: Graph<E> = Graph::new();
        let vars = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let z = scan_minibatch(&mut g, xv, &vars, cfg)?;
        return Ok((g.value(z).clone(), ShardStats::default()));
    }

    let heads = params.theta_k.len();
    let sharded: Vec<ShardedState<E>> = params
        .w0
        .iter()
        .map(|w| shard_params(w, n_shards))
        .collect::<Result<_>>()?;

    // projections for every mini-batch, computed once
    let t_len = x.shape()[0];
    let mut batches = Vec::new();
    let mut start = 0;
    while start < t_len {
        let len = cfg.b.min(t_len - start);
        let xb = x.narrow(0, start, len)?;
        let mut mb = MiniBatch { len, u: Vec::new(), v: Vec::new(), q: Vec::new() };
        for h in 0..heads {
            mb.u.push(xb.matmul(&params.theta_k[h].transpose()?)?);
            mb.v.push(xb.matmul(&params.theta_v[h].transpose()?)?);
            mb.q.push(xb.matmul(&params.theta_q[h].transpose()?)?);
        }
        batches.push(mb);
        start += len;
    }

    let ctx = ReduceCtx::<E>::new(n_shards);
    let mut lead_outputs: Vec<Vec<Vec<Tensor<E>>>> = Vec::new(); // [shard0 only] per batch per head

    std::thread::scope(|scope| -> Result<()> {
        let mut handles = Vec::new();
        for s in 0..n_shards {
            let ctx = &ctx;
            let batches = &batches;
            let sharded = &sharded;
            let params = params;
            let handle = scope.spawn(move || -> Result<Vec<Vec<Vec<Tensor<E>>>>> {
                worker(s, ctx, batches, sharded, params, cfg)
            });
            handles.push(handle);
        }
        for (s, h) in handles.into_iter().enumerate() {
            let out = h.join().expect("shard worker panicked")?;
            if s == 0 {
                lead_outputs = out;
            }
        }
        Ok(())
    })?;

    // assemble z exactly as the reference scan does: per-head output
    // projections summed in head order, mini-batch blocks concatenated
    let mut blocks = Vec::with_capacity(batches.len());
    for fb in &lead_outputs {
        let mut z: Option<Tensor<E>> = None;
        for (h, f) in fb.iter().enumerate() {
            debug_assert_eq!(f.len(), 1);
            let zh = f[0].matmul(&params.theta_o[h].transpose()?)?;
            z = Some(match z {
                None => zh,
                Some(acc) => acc.add(&zh)?,
            });
        }
        blocks.push(z.unwrap());
    }
    let refs: Vec<&Tensor<E>> = blocks.iter().collect();
    let z = Tensor::concat(&refs, 0)?;

    let stats = ShardStats {
        inner_loss_reduces: ctx.inner_count.load(Ordering::Relaxed),
        output_reduces: ctx.output_count.load(Ordering::Relaxed),
        minibatches: batches.len(),
    };
    Ok((z, stats))
}

/// One worker: local slice math, two reduces per mini-batch (inner loss and
/// output), local gradient-slice updates. Returns, for shard 0 only, the
/// wrapped outputs `f(theta_Q x; W)` per batch and head.
fn worker<E: Element>(
    shard_id: usize,
    ctx: &ReduceCtx<E>,
    batches: &[MiniBatch<E>],
    sharded: &[ShardedState<E>],
    params: &TttParams<E>,
    cfg: &TttConfig,
) -> Result<Vec<Vec<Vec<Tensor<E>>>>> {
    let heads = sharded.len();
    let mut g: Graph<E> = Graph::new();
    let mut w1: Vec<crate::graph::Var> = Vec::with_capacity(heads);
    let mut w2: Vec<crate::graph::Var> = Vec::with_capacity(heads);
    let mut gains = Vec::with_capacity(heads);
    let mut biases = Vec::with_capacity(heads);
    for h in 0..heads {
        w1.push(g.leaf(sharded[h].slices[shard_id].w1.clone()));
        w2.push(g.leaf(sharded[h].slices[shard_id].w2.clone()));
        gains.push(g.constant(params.ln_gain[h].clone()));
        biases.push(g.constant(params.ln_bias[h].clone()));
    }

    let mut outputs = Vec::with_capacity(batches.len());
    for mb in batches {
        // ---- inner-loss path: one all-reduce over concatenated head partials
        let mut partial_vars = Vec::with_capacity(heads);
        let mut u_vars = Vec::with_capacity(heads);
        for h in 0..heads {
            let u = g.constant(mb.u[h].clone());
            let hh = g.matmul(u, w1[h])?;
            let a = g.gelu(hh)?;
            let p = g.matmul(a, w2[h])?;
            partial_vars.push(p);
            u_vars.push(u);
        }
        let payload = if heads == 1 {
            g.value(partial_vars[0]).clone()
        } else {
            let parts: Vec<&Tensor<E>> = partial_vars.iter().map(|&p| g.value(p)).collect();
            Tensor::concat(&parts, 0)?
        };
        let reduced = ctx.reduce(shard_id, payload, ReducePath::InnerLoss)?;
        for h in 0..heads {
            let full = reduced.narrow(0, h * mb.len, mb.len)?;
            let other = full.sub(g.value(partial_vars[h]))?;
            let other = g.constant(other);
            let c = g.add(partial_vars[h], other)?;
            let normed = g.layer_norm(c, gains[h], biases[h], LN_EPS)?;
            let pred = g.add(u_vars[h], normed)?;
            let v = g.constant(mb.v[h].clone());
            let total = g.squared_error(pred, v)?;
            let mean = g.scale(total, 1.0 / mb.len as f64)?;
            let grads = g.grad(mean, &[w1[h], w2[h]])?;
            let s1 = g.scale(grads[0], cfg.eta)?;
            w1[h] = g.sub(w1[h], s1)?;
            let s2 = g.scale(grads[1], cfg.eta)?;
            w2[h] = g.sub(w2[h], s2)?;
        }

        // ---- output path: second reduce with the updated slices
        let mut q_vars = Vec::with_capacity(heads);
        let mut out_partials = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = g.constant(mb.q[h].clone());
            let hh = g.matmul(q, w1[h])?;
            let a = g.gelu(hh)?;
            let p = g.matmul(a, w2[h])?;
            q_vars.push(q);
            out_partials.push(p);
        }
        let payload = if heads == 1 {
            g.value(out_partials[0]).clone()
        } else {
            let parts: Vec<&Tensor<E>> = out_partials.iter().map(|&p| g.value(p)).collect();
            Tensor::concat(&parts, 0)?
        };
        let reduced = ctx.reduce(shard_id, payload, ReducePath::Output)?;
        let mut fs = Vec::with_capacity(heads);
        for h in 0..heads {
            let full = reduced.narrow(0, h * mb.len, mb.len)?;
            let other = full.sub(g.value(out_partials[h]))?;
            let other = g.constant(other);
            let c = g.add(out_partials[h], other)?;
            let normed = g.layer_norm(c, gains[h], biases[h], LN_EPS)?;
            let f = g.add(q_vars[h], normed)?;
            fs.push(vec![g.value(f).clone()]);
        }
        outputs.push(fs);
    }
    Ok(outputs)
}

// ----- benchmarking ------------------------------------------------------------

#[derive(Clone, Debug)]
pub struct ShardBenchRow {
    pub variant: String,
    pub t: usize,
    pub n_shards: usize,
    pub mean_ms: f64,
    pub std_ms: f64,
}

/// Wall-time of sharded scans over a grid of shard counts and sequence
/// lengths; `repeats` timed runs (>= 5 recommended) after one warm-up.
pub fn shard_bench(
    cfg: &TttConfig,
    params: &TttParams,
    n_shards_list: &[usize],
    t_list: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<Vec<ShardBenchRow>> {
    if n_shards_list.is_empty() || t_list.is_empty() {
        return Err(Error::config("shard_bench needs non-empty shard and length lists"));
    }
    let mut rows = Vec::new();
    let mut rng = crate::seeded_rng(seed);
    for &t in t_list {
        let x = Tensor::randn(&[t, cfg.d], 1.0, &mut rng);
        for &n in n_shards_list {
            sharded_scan(&x, params, cfg, n)?; // warm-up
            let mut times = Vec::with_capacity(repeats);
            for _ in 0..repeats {
                let t0 = Instant::now();
                sharded_scan(&x, params, cfg, n)?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            let mean = times.iter().sum::<f64>() / times.len() as f64;
            let var = times.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / times.len() as f64;
            rows.push(ShardBenchRow {
                variant: cfg.variant.name().to_string(),
                t,
                n_shards: n,
                mean_ms: mean,
                std_ms: var.sqrt(),
            });
        }
    }
    Ok(rows)
}
