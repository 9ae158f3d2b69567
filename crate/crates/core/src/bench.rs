//! Wall-clock scaling benchmarks: forward-scan time vs sequence length for
//! every sequence-layer variant, with a log-log slope fit per variant. The
//! quadratic/linear dichotomy shows up as slope ~2 for full attention and
//! slope ~1 for everything else.

use std::time::Instant;

use crate::baselines::{
    build_sliding_window_mask, gated_delta_scan, linear_attn_scan, softmax_attention,
    AttentionMask, AttnParams, RnnParams,
};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::Variant;
use crate::tensor::Tensor;
use crate::ttt::{scan_minibatch, TttConfig, TttParams, TttVariant};

#[derive(Clone, Debug)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub t_list: Vec<usize>,
    pub repeats: usize,
    pub d: usize,
    pub k: usize,
    pub heads: usize,
    pub b: usize,
    /// Segment size for local attention (fixed as T grows).
    pub segment: usize,
    /// Window for sliding-window attention.
    pub window: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            variants: Variant::all().to_vec(),
            t_list: vec![256, 512, 1024, 2048],
            repeats: 5,
            d: 64,
            k: 64,
            heads: 1,
            b: 64,
            segment: 256,
            window: 256,
            seed: 0,
        }
    }
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.t_list.len() < 3 {
            return Err(Error::config("throughput bench needs >= 3 sequence lengths"));
        }
        let lo = *self.t_list.iter().min().unwrap();
        let hi = *self.t_list.iter().max().unwrap();
        if hi < lo * 8 {
            return Err(Error::config(format!(
                "sequence lengths must span >= 8x, got {lo}..{hi}"
            )));
        }
        if self.repeats < 1 {
            return Err(Error::config("repeats must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct BenchRow {
    pub variant: String,
    pub t: usize,
    pub n_shards: usize,
    pub median_ms: f64,
    pub iqr_ms: f64,
    pub slope: f64,
}

pub const TIMING_CSV_HEADER: &str = "variant,T,n_shards,median_ms,iqr_ms,slope";

/// Least-squares slope of ln(y) against ln(x).
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for &(x, y) in points {
        let lx = x.ln();
        let ly = y.ln();
        sx += lx;
        sy += ly;
        sxx += lx * lx;
        sxy += lx * ly;
    }
    (n * sxy - sx * sy) / (n * sxx - sx * sx)
}

fn median_iqr(times: &mut [f64]) -> (f64, f64) {
    times.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = times.len();
    let med = times[n / 2];
    let q1 = times[n / 4];
    let q3 = times[(3 * n) / 4];
    (med, q3 - q1)
}

/// One forward scan of the given variant, generically over precision.
pub fn run_scan<E: Element>(
    variant: Variant,
    x: &Tensor<E>,
    ttt: &TttParams<E>,
    rnn: &RnnParams<E>,
    attn: &AttnParams<E>,
    cfg: &BenchConfig,
    mask_cache: &AttentionMask,
) -> Result<()> {
    let mut g: Graph<E> = Graph::new();
    let xv = g.constant(x.clone());
    match variant {
        Variant::TttMlp | Variant::TttLinear => {
            let mut tcfg = TttConfig::new(
                cfg.d,
                cfg.k,
                if variant == Variant::TttLinear { TttVariant::Linear } else { TttVariant::Mlp },
            );
            tcfg.b = cfg.b;
            tcfg.heads = cfg.heads;
            tcfg.eta = variant.default_eta();
            let vars = ttt.bind(&mut g);
            scan_minibatch(&mut g, xv, &vars, &tcfg)?;
        }
        Variant::MambaLike => {
            let vars = rnn.bind(&mut g);
            linear_attn_scan(&mut g, xv, &vars)?;
        }
        Variant::Delta => {
            let vars = rnn.bind(&mut g);
            gated_delta_scan(&mut g, xv, &vars)?;
        }
        Variant::LocalAttn | Variant::Swa | Variant::FullAttn => {
            let vars = attn.bind(&mut g);
            softmax_attention(&mut g, xv, &vars, mask_cache)?;
        }
    }
    Ok(())
}

fn mask_for<E: Element>(variant: Variant, t: usize, cfg: &BenchConfig) -> Result<AttentionMask> {
    match variant {
        Variant::FullAttn => Ok(AttentionMask::full(t)),
        Variant::Swa => build_sliding_window_mask(t, cfg.window.min(2 * t)),
        _ => {
            let seg = cfg.segment.min(t);
            let mut segments = Vec::new();
            let mut s = 0;
            while s < t {
                segments.push(s..(s + seg).min(t));
                s += seg;
            }
            AttentionMask::from_segments(t, &segments)
        }
    }
}

/// Median forward-scan wall time per (variant, T) after one warm-up, plus a
/// per-variant log-log slope written onto each of its rows.
pub fn throughput_bench<E: Element>(cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    cfg.validate()?;
    let mut rng = crate::seeded_rng(cfg.seed);
    let mut ttt_mlp_cfg = TttConfig::new(cfg.d, cfg.k, TttVariant::Mlp);
    ttt_mlp_cfg.b = cfg.b;
    ttt_mlp_cfg.heads = cfg.heads;
    let mut ttt_lin_cfg = ttt_mlp_cfg;
    ttt_lin_cfg.variant = TttVariant::Linear;

    let ttt_mlp: TttParams<E> = TttParams::init(&ttt_mlp_cfg, &mut rng)?;
    let ttt_lin: TttParams<E> = TttParams::init(&ttt_lin_cfg, &mut rng)?;
    let rnn: RnnParams<E> = RnnParams::init(cfg.d, cfg.k, cfg.heads, &mut rng)?;
    let attn: AttnParams<E> = AttnParams::init(cfg.d, cfg.k, cfg.heads, &mut rng)?;

    let mut rows = Vec::new();
    for &variant in &cfg.variants {
        let ttt = if variant == Variant::TttLinear { &ttt_lin } else { &ttt_mlp };
        let mut medians = Vec::new();
        for &t in &cfg.t_list {
            let x = Tensor::<E>::randn(&[t, cfg.d], 1.0, &mut rng);
            let mask = mask_for::<E>(variant, t, cfg)?;
            run_scan(variant, &x, ttt, &rnn, &attn, cfg, &mask)?; // warm-up
            let mut times = Vec::with_capacity(cfg.repeats);
            for _ in 0..cfg.repeats {
                let t0 = Instant::now();
                run_scan(variant, &x, ttt, &rnn, &attn, cfg, &mask)?;
                times.push(t0.elapsed().as_secs_f64() * 1e3);
            }
            let (median, iqr) = median_iqr(&mut times);
            medians.push((t as f64, median));
            rows.push(BenchRow {
                variant: variant.name().to_string(),
                t,
                n_shards: 1,
                median_ms: median,
                iqr_ms: iqr,
                slope: f64::NAN,
            });
        }
        let slope = loglog_slope(&medians);
        for row in rows.iter_mut().rev().take(cfg.t_list.len()) {
            row.slope = slope;
        }
    }
    Ok(rows)
}

/// Slope per variant out of a finished row set.
pub fn slopes(rows: &[BenchRow]) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64)> = Vec::new();
    for r in rows {
        if !out.iter().any(|(v, _)| v == &r.variant) {
            out.push((r.variant.clone(), r.slope));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_fit_recovers_known_exponents() {
        let quad: Vec<(f64, f64)> = [256.0, 512.0, 1024.0, 2048.0]
            .iter()
            .map(|&t| (t, 3.0e-6 * t * t))
            .collect();
        assert!((loglog_slope(&quad) - 2.0).abs() < 1e-12);
        let lin: Vec<(f64, f64)> = [256.0, 512.0, 1024.0, 2048.0]
            .iter()
            .map(|&t| (t, 0.5 * t))
            .collect();
        assert!((loglog_slope(&lin) - 1.0).abs() < 1e-12);
        // affine data lands between the pure exponents
        let mixed: Vec<(f64, f64)> = [256.0, 512.0, 1024.0, 2048.0]
            .iter()
            .map(|&t| (t, 100.0 + t))
            .collect();
        let s = loglog_slope(&mixed);
        assert!(s > 0.5 && s < 1.0, "{s}");
    }

    #[test]
    fn bench_config_validation() {
        let mut c = BenchConfig::default();
        assert!(c.validate().is_ok());
        c.t_list = vec![256, 512];
        assert!(c.validate().is_err());
        c.t_list = vec![256, 300, 400];
        assert!(c.validate().is_err());
    }

    #[test]
    fn tiny_bench_produces_rows_with_slopes() {
        let cfg = BenchConfig {
            variants: vec![Variant::TttLinear, Variant::LocalAttn],
            t_list: vec![16, 32, 128],
            repeats: 2,
            d: 8,
            k: 8,
            heads: 1,
            b: 8,
            segment: 16,
            window: 8,
            seed: 1,
        };
        let rows = throughput_bench::<f64>(&cfg).unwrap();
        assert_eq!(rows.len(), 6);
        assert!(rows.iter().all(|r| r.median_ms > 0.0 && r.slope.is_finite()));
        let s = slopes(&rows);
        assert_eq!(s.len(), 2);
    }
}
