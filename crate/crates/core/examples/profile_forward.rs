//! Scratch timing probe for the toy model forward/backward.

use std::time::Instant;

use ttt_lab::graph::Graph;
use ttt_lab::model::{Model, ModelConfig, Variant};
use ttt_lab::seeded_rng;
use ttt_lab::tasks::{Task, TaskSpec};
use ttt_lab::tensor::Tensor;
use ttt_lab::ttt::{scan_minibatch, TttConfig, TttParams, TttVariant};

fn main() {
    let mut rng = seeded_rng(0);

    // bare TTT scan
    let mut tcfg = TttConfig::new(32, 16, TttVariant::Mlp);
    tcfg.b = 16;
    tcfg.eta = 0.1;
    let params: TttParams = TttParams::init(&tcfg, &mut rng).unwrap();
    let x = Tensor::randn(&[96, 32], 1.0, &mut rng);
    let t0 = Instant::now();
    let mut nodes = 0;
    for _ in 0..10 {
        let mut g: Graph = Graph::new();
        let vars = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let z = scan_minibatch(&mut g, xv, &vars, &tcfg).unwrap();
        let _ = g.value(z);
        nodes = g.len();
    }
    println!("bare ttt scan x10: {:?} ({nodes} nodes)", t0.elapsed());

    // scan + outer grad
    let t0 = Instant::now();
    for _ in 0..10 {
        let mut g: Graph = Graph::new();
        let vars = params.bind(&mut g);
        let xv = g.constant(x.clone());
        let z = scan_minibatch(&mut g, xv, &vars, &tcfg).unwrap();
        let sq = g.mul(z, z).unwrap();
        let loss = g.sum(sq).unwrap();
        let head = vars.heads[0].clone();
        let _ = g.grad(loss, &[head.theta_k]).unwrap();
        nodes = g.len();
    }
    println!("ttt scan + outer grad x10: {:?} ({nodes} nodes)", t0.elapsed());

    // full model forward + grad per variant
    for variant in [Variant::TttMlp, Variant::MambaLike, Variant::LocalAttn] {
        let mut cfg = ModelConfig::new(variant, 32, 16);
        cfg.n_layers = 2;
        cfg.b = 16;
        if variant == Variant::TttMlp {
            cfg.eta = 0.1;
        }
        let model = Model::init(cfg, &mut rng).unwrap();
        let spec = TaskSpec::recall(96, 32, 24, 8, 8, vec![32, 32, 32], 7);
        let task = Task::new(spec).unwrap();
        let inst = task.instance(0);
        let mask = model.attention_mask(96, &task.spec.segments()).unwrap();

        let t0 = Instant::now();
        for _ in 0..5 {
            let mut g: Graph = Graph::new();
            let bound = model.params.bind(&mut g);
            let xv = g.constant(inst.x.clone());
            let y = model.forward(&mut g, &bound, xv, &mask).unwrap();
            let _ = g.value(y);
            nodes = g.len();
        }
        println!("{} fwd x5: {:?} ({nodes} nodes)", variant.name(), t0.elapsed());

        let ids = model.trainable_ids(&["ttt".into(), "gates".into(), "attn".into(), "pretrained".into()]);
        let t0 = Instant::now();
        for _ in 0..5 {
            let mut g: Graph = Graph::new();
            let bound = model.params.bind(&mut g);
            let xv = g.constant(inst.x.clone());
            let y = model.forward(&mut g, &bound, xv, &mask).unwrap();
            let sq = g.mul(y, y).unwrap();
            let loss = g.sum(sq).unwrap();
            let wrt: Vec<_> = ids.iter().map(|&id| bound.var(id)).collect();
            let _ = g.grad(loss, &wrt).unwrap();
            nodes = g.len();
        }
        println!("{} fwd+grad x5: {:?} ({nodes} nodes)", variant.name(), t0.elapsed());
    }
}
