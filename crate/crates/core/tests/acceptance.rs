//! Acceptance suite. Every test prints one `PASS`/`FAIL` line per criterion.
//!
//! Tests share a lock so that wall-clock budgets are measured without
//! contention from the long training runs of the desk replication.

use std::process::Command;
use std::rc::Rc;
use std::sync::Mutex;
use std::time::Instant;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use meshrollout::autodiff::{
    finite_difference_check, Bound, ParamStore, RotationTable, Tape, Tensor, Var,
};
use meshrollout::data::{generate_mesh, generate_split, DatasetConfig, FieldSchema};
use meshrollout::experiment::{
    calibrate_noise, mean_std, run_single, EvalConfig, ProbePoint, RunMetrics, TrainOptions,
};
use meshrollout::mesh::MeshGraph;
use meshrollout::mnp::{combine_losses, mnp_loss, sample_centers, RingTransformer, StarBatch};
use meshrollout::model::{param_matched_plain, parameter_count, Model, ModelConfig, Normalizer};
use meshrollout::nn::{
    AttentionGraph, AttentionLayer, GatedMlp, Init, MaskSemantics, MeshEdges, MgnBlock, Mlp,
    PeMode, RmsNorm, RopeConfig, TransformerBlock, TransolverBlock,
};
use meshrollout::temporal::{
    theta_amplification, theta_method_emulation, Corrector, TemporalConfig,
};
use meshrollout::theory::{gradient_suite, stability_suite};
use meshrollout::train::{OptimizerConfig, TrainConfig, Trainer};

static SERIAL: Mutex<()> = Mutex::new(());

fn serial() -> std::sync::MutexGuard<'static, ()> {
    SERIAL.lock().unwrap_or_else(|e| e.into_inner())
}

fn report(name: &str, passed: bool, detail: &str) -> bool {
    println!("{} {name}: {detail}", if passed { "PASS" } else { "FAIL" });
    passed
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    Tensor::from_vec(
        rows,
        cols,
        (0..rows * cols)
            .map(|_| r.random_range(-1.0..1.0))
            .collect(),
    )
    .unwrap()
}

fn jitter(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    for t in store.tensors_mut() {
        t.data_mut()
            .iter_mut()
            .for_each(|x| *x += r.random_range(-0.3..0.3));
    }
}

fn rope_table(mesh: &MeshGraph, head_width: usize, heads: usize) -> Rc<RotationTable> {
    let g = mesh.geometry();
    RopeConfig::new(mesh.dim(), head_width, g.mesh_size_h, g.diameter)
        .unwrap()
        .table(heads, &g.centered_positions)
}

#[test]
fn theory_suite() {
    let _g = serial();
    let start = Instant::now();
    let suite = gradient_suite(0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let get = |name: &str| suite.checks.iter().find(|c| c.name == name).unwrap().value;
    let (affine, quad, cons) = (
        get("wls affine exactness"),
        get("wls quadratic order"),
        get("h1 consistency slope"),
    );
    let ok = report(
        "theory suite",
        affine < 1e-10 && quad >= 0.9 && cons >= 1.8 && secs < 10.0,
        &format!("affine err {affine:.2e} (<1e-10), quadratic slope {quad:.3} (>=0.9), consistency slope {cons:.3} (>=1.8), {secs:.2} s (<10)"),
    );
    assert!(ok);
}

#[test]
fn a_stability() {
    let _g = serial();
    let start = Instant::now();
    let suite = stability_suite(0).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let detail: Vec<String> = suite
        .checks
        .iter()
        .map(|c| format!("{} = {:.3e}", c.name, c.value))
        .collect();
    let ok = report(
        "a-stability",
        suite.checks.iter().all(|c| c.passed) && secs < 5.0,
        &format!("{}; {secs:.2} s (<5)", detail.join(", ")),
    );
    assert!(ok);
}

/// Worst relative FD error of `sum(w ⊙ block(input))` jointly over
/// parameters and input.
fn block_error<F>(store: &ParamStore, input: &Tensor, block: F) -> f64
where
    F: for<'t> Fn(&Bound<'t>, Var<'t>) -> meshrollout::Result<Var<'t>>,
{
    let np = store.num_scalars();
    let mut joint = store.to_flat().into_data();
    joint.extend_from_slice(input.data());
    let joint = Tensor::from_vec(1, joint.len(), joint).unwrap();
    let shape = {
        let tape = Tape::new();
        let p = store.bind_constant(&tape);
        block(&p, tape.constant(input.clone())).unwrap().shape()
    };
    let w = random(shape[0], shape[1], 99);
    let (rows, cols) = (input.rows(), input.cols());
    finite_difference_check(
        |tape, x| {
            let p = store.bind_from_flat(x.slice_cols(0, np)?)?;
            let z = x.slice_cols(np, np + rows * cols)?.reshape(rows, cols)?;
            Ok(block(&p, z)?.mul(tape.constant(w.clone()))?.sum())
        },
        &joint,
        1e-4,
    )
    .unwrap()
}

#[test]
fn gradient_correctness() {
    let _g = serial();
    let start = Instant::now();
    let mut errors: Vec<(String, f64)> = Vec::new();

    let mut store = ParamStore::new();
    let enc = Mlp::new(&mut store, "enc", [3, 5, 4], Init::He, &mut rng(1));
    jitter(&mut store, 1);
    errors.push((
        "encoder".into(),
        block_error(&store, &random(6, 3, 2), |p, x| enc.forward(p, x)),
    ));

    let mut store = ParamStore::new();
    let dec = Mlp::new(&mut store, "dec", [4, 5, 3], Init::Zero, &mut rng(2));
    jitter(&mut store, 2);
    errors.push((
        "decoder".into(),
        block_error(&store, &random(6, 4, 3), |p, x| dec.forward(p, x)),
    ));

    let mut store = ParamStore::new();
    let norm = RmsNorm::new(&mut store, "n", 4);
    jitter(&mut store, 3);
    errors.push((
        "rmsnorm".into(),
        block_error(&store, &random(6, 4, 4), |p, x| norm.forward(p, x)),
    ));

    let mut store = ParamStore::new();
    let gated = GatedMlp::new(&mut store, "g", 4, 6, &mut rng(4));
    jitter(&mut store, 4);
    errors.push((
        "gated mlp".into(),
        block_error(&store, &random(6, 4, 5), |p, x| gated.forward(p, x)),
    ));

    let mesh = generate_mesh(12, 9).unwrap();
    let n = mesh.num_nodes();
    let graph = AttentionGraph::from_mesh(&mesh, true);
    let table = rope_table(&mesh, 4, 2);
    for pe in [PeMode::None, PeMode::Rope] {
        let mut store = ParamStore::new();
        let layer = AttentionLayer::new(
            &mut store,
            "a",
            8,
            2,
            pe,
            2,
            MaskSemantics::Additive,
            &mut rng(3),
        )
        .unwrap();
        jitter(&mut store, 5);
        let e = block_error(&store, &random(n, 8, 6), |p, x| {
            layer.forward(p, x, x, &graph, Some(&table))
        });
        errors.push((format!("masked mha {pe:?}"), e));
    }

    let mut store = ParamStore::new();
    let mgn = MgnBlock::new(&mut store, "m", 3, 8, &mut rng(6));
    jitter(&mut store, 6);
    let edges = MeshEdges::from_mesh(&mesh);
    let e_lat = random(edges.len(), 3, 7);
    let e = block_error(&store, &random(n, 3, 8), |p, x| {
        let (dz, en) = mgn.forward(p, x, x.tape().constant(e_lat.clone()), &edges)?;
        dz.add(en.scatter_add_rows(&edges.senders, n)?)
    });
    errors.push(("mgn block".into(), e));

    let mut store = ParamStore::new();
    let tso = TransolverBlock::new(&mut store, "t", 4, 2, 3, 6, &mut rng(8)).unwrap();
    jitter(&mut store, 9);
    errors.push((
        "transolver block".into(),
        block_error(&store, &random(10, 4, 10), |p, x| tso.forward(p, x)),
    ));

    for pe in [PeMode::None, PeMode::Rope] {
        let mut store = ParamStore::new();
        let block = TransformerBlock::new(
            &mut store,
            "b",
            8,
            2,
            12,
            pe,
            2,
            MaskSemantics::Additive,
            &mut rng(12),
        )
        .unwrap();
        jitter(&mut store, 13);
        let e = block_error(&store, &random(n, 8, 14), |p, x| {
            block.forward(p, x, &graph, Some(&table))
        });
        errors.push((format!("transformer block {pe:?}"), e));
    }

    // Ring transformer together with the neighbor loss it feeds.
    let star_mesh = generate_mesh(60, 10).unwrap();
    let sn = star_mesh.num_nodes();
    let mut store = ParamStore::new();
    let ring = RingTransformer::new(&mut store, "r", 4, 2, 6, &mut rng(10)).unwrap();
    let head = Mlp::new(&mut store, "d", [4, 6, 3], Init::He, &mut rng(11));
    jitter(&mut store, 10);
    let centers = sample_centers(&star_mesh, 3, &mut rng(5)).unwrap();
    let batch = StarBatch::new(&star_mesh, &centers, 4, true).unwrap();
    let (z0, y) = (random(sn, 4, 2), random(sn, 3, 3));
    let np = store.num_scalars();
    let mut joint = store.to_flat().into_data();
    joint.extend(random(sn, 4, 1).into_data());
    let joint = Tensor::from_vec(1, joint.len(), joint).unwrap();
    let e = finite_difference_check(
        |tape, x| {
            let p = store.bind_from_flat(x.slice_cols(0, np)?)?;
            let zl = x.slice_cols(np, np + sn * 4)?.reshape(sn, 4)?;
            let out = ring.forward(&p, batch.tokens(zl, tape.constant(z0.clone()))?, &batch)?;
            let mnp = mnp_loss(
                out,
                |v| head.forward(&p, v),
                tape.constant(y.clone()),
                &batch,
            )?;
            combine_losses(zl.square().mean(), mnp, 0.2)
        },
        &joint,
        1e-4,
    )
    .unwrap();
    errors.push(("ring transformer".into(), e));

    let corr_table = rope_table(&mesh, 4, 1);
    for (pe, heads) in [(PeMode::None, 2), (PeMode::Rope, 1)] {
        let mut store = ParamStore::new();
        let c = Corrector::new(
            &mut store,
            "c",
            4,
            heads,
            6,
            pe,
            2,
            &TemporalConfig::default(),
            &mut rng(6),
        )
        .unwrap();
        jitter(&mut store, 7);
        let np = store.num_scalars();
        let mut joint = store.to_flat().into_data();
        joint.extend(random(2 * n, 4, 8).into_data());
        let joint = Tensor::from_vec(1, joint.len(), joint).unwrap();
        let w = random(n, 4, 9);
        let e = finite_difference_check(
            |tape, x| {
                let p = store.bind_from_flat(x.slice_cols(0, np)?)?;
                let z = x.slice_cols(np, np + 4 * n)?.reshape(n, 4)?;
                let zp = x.slice_cols(np + 4 * n, np + 8 * n)?.reshape(n, 4)?;
                Ok(c.forward(&p, zp, z, &graph, Some(&corr_table))?
                    .mul(tape.constant(w.clone()))?
                    .sum())
            },
            &joint,
            1e-4,
        )
        .unwrap();
        errors.push((format!("corrector {pe:?}"), e));
    }

    let secs = start.elapsed().as_secs_f64();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail: Vec<String> = errors.iter().map(|(k, v)| format!("{k} {v:.1e}")).collect();
    let ok = report(
        "gradient correctness",
        worst < 1e-5 && secs < 120.0,
        &format!(
            "worst rel err {worst:.2e} (<1e-5), {secs:.1} s (<120); {}",
            detail.join(", ")
        ),
    );
    assert!(ok);
}

#[test]
fn rope_invariances() {
    let _g = serial();
    let mesh = generate_mesh(30, 5).unwrap();
    let shift = [3.7, -12.25];
    let moved = MeshGraph::new(
        2,
        mesh.positions()
            .iter()
            .enumerate()
            .map(|(k, x)| x + shift[k % 2])
            .collect(),
        mesh.edges().to_vec(),
        mesh.node_types().to_vec(),
    )
    .unwrap();
    let mut store = ParamStore::new();
    let layer = AttentionLayer::new(
        &mut store,
        "a",
        8,
        2,
        PeMode::Rope,
        2,
        MaskSemantics::Additive,
        &mut rng(4),
    )
    .unwrap();
    let z = random(mesh.num_nodes(), 8, 6);
    let run = |m: &MeshGraph| {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let zv = tape.constant(z.clone());
        layer
            .forward(
                &p,
                zv,
                zv,
                &AttentionGraph::from_mesh(m, true),
                Some(&rope_table(m, 4, 2)),
            )
            .unwrap()
            .value()
    };
    let (a, b) = (run(&mesh), run(&moved));
    let translation = a.zip_map(&b, |x, y| x - y).max_abs() / a.max_abs();

    let mut r = rng(11);
    let cfg = RopeConfig::new(3, 12, 0.05, 1.5).unwrap();
    let mut relative = 0.0f64;
    for _ in 0..200 {
        let pi: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let pj: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let rel: Vec<f64> = pj.iter().zip(&pi).map(|(a, b)| a - b).collect();
        let q =
            Tensor::from_vec(1, 12, (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let k =
            Tensor::from_vec(1, 12, (0..12).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        let tape = Tape::new();
        let rot = |x: &Tensor, p: &[f64]| {
            tape.constant(x.clone())
                .rotate_pairs(&cfg.table(1, p))
                .unwrap()
                .value()
        };
        let lhs: f64 = rot(&q, &pi)
            .data()
            .iter()
            .zip(rot(&k, &pj).data())
            .map(|(a, b)| a * b)
            .sum();
        let rhs: f64 = q
            .data()
            .iter()
            .zip(rot(&k, &rel).data())
            .map(|(a, b)| a * b)
            .sum();
        relative = relative.max((lhs - rhs).abs() / rhs.abs().max(1e-3));
    }
    let ok = report(
        "rope invariances",
        translation < 1e-10 && relative < 1e-6,
        &format!("translation rel diff {translation:.2e} (roundoff, <1e-10), relative-angle max rel err {relative:.2e} over 200 draws (<1e-6)"),
    );
    assert!(ok);
}

fn run_ring(
    store: &ParamStore,
    ring: &RingTransformer,
    batch: &StarBatch,
    zl: &Tensor,
    z0: &Tensor,
) -> Tensor {
    let tape = Tape::new();
    let p = store.bind(&tape);
    let tokens = batch
        .tokens(tape.constant(zl.clone()), tape.constant(z0.clone()))
        .unwrap();
    ring.forward(&p, tokens, batch).unwrap().value()
}

fn star_isolation() -> bool {
    let mesh = generate_mesh(60, 6).unwrap();
    let n = mesh.num_nodes();
    let mut store = ParamStore::new();
    let ring = RingTransformer::new(&mut store, "r", 4, 2, 6, &mut rng(6)).unwrap();
    jitter(&mut store, 6);
    let centers = sample_centers(&mesh, 2, &mut rng(1)).unwrap();
    let (zl, z0) = (random(n, 4, 1), random(n, 4, 2));
    let both = StarBatch::new(&mesh, &centers, 12, true).unwrap();
    let out = run_ring(&store, &ring, &both, &zl, &z0);
    let mut ok = true;
    for s in 0..2 {
        let single = StarBatch::new(&mesh, &centers[s..s + 1], 12, true).unwrap();
        let alone = run_ring(&store, &ring, &single, &zl, &z0);
        ok &= both
            .token_range(s)
            .zip(0..)
            .all(|(t, u)| out.row(t) == alone.row(u));
    }
    let mut zl2 = zl.clone();
    zl2.row_mut(centers[1]).iter_mut().for_each(|x| *x += 1.0);
    let out2 = run_ring(&store, &ring, &both, &zl2, &z0);
    ok && both.token_range(0).all(|t| out.row(t) == out2.row(t))
}

fn padding_gap() -> f64 {
    let mesh = generate_mesh(60, 9).unwrap();
    let n = mesh.num_nodes();
    let mut store = ParamStore::new();
    let ring = RingTransformer::new(&mut store, "r", 4, 2, 6, &mut rng(9)).unwrap();
    let head = Mlp::new(&mut store, "d", [4, 6, 3], Init::He, &mut rng(10));
    jitter(&mut store, 9);
    let centers = sample_centers(&mesh, 8, &mut rng(4)).unwrap();
    let max_degree = (0..n)
        .map(|i| mesh.neighborhood(i).unwrap().len())
        .max()
        .unwrap();
    let (zl, z0, y) = (random(n, 4, 1), random(n, 4, 2), random(n, 3, 3));
    let eval = |k: usize| {
        let batch = StarBatch::new(&mesh, &centers, k, true).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let tokens = batch
            .tokens(tape.constant(zl.clone()), tape.constant(z0.clone()))
            .unwrap();
        let out = ring.forward(&p, tokens, &batch).unwrap();
        mnp_loss(
            out,
            |x| head.forward(&p, x),
            tape.constant(y.clone()),
            &batch,
        )
        .unwrap()
        .item()
    };
    let base = eval(max_degree);
    [max_degree + 1, max_degree + 5, 40]
        .iter()
        .map(|&k| (eval(k) - base).abs() / base)
        .fold(0.0, f64::max)
}

fn alpha_zero_parity() -> bool {
    let data = generate_split(&DatasetConfig {
        nodes: 60,
        steps: 4,
        train_trajectories: 2,
        test_trajectories: 0,
        seed: 3,
        ..Default::default()
    })
    .unwrap()
    .train;
    let mut base = ModelConfig {
        layers: 2,
        width: 8,
        heads: 2,
        ..Default::default()
    };
    base.mnp.centers = 8;
    base.mnp.k = 4;
    let train = TrainConfig {
        epochs: 2,
        optimizer: OptimizerConfig {
            warmup_steps: 3,
            ..Default::default()
        },
        ..Default::default()
    };
    let build = |cfg: ModelConfig| {
        let m = Model::new(
            cfg,
            data[0].schema.clone(),
            2,
            Normalizer::fit(&data, false).unwrap(),
        )
        .unwrap();
        let mut t = Trainer::new(m, train.clone(), &data).unwrap();
        t.run_until(5, |_, _| Ok(())).unwrap();
        t
    };
    let mut with = base.clone();
    with.mnp.alpha = 0.0;
    let mut without = base;
    without.mnp.enabled = false;
    let (a, b) = (build(with), build(without));
    let params_equal = b.model.params.ids().all(|id| {
        let other = a.model.params.find(b.model.params.name(id)).unwrap();
        a.model.params.get(other) == b.model.params.get(id)
    });
    let losses_equal = a
        .history
        .iter()
        .map(|h| h.main)
        .eq(b.history.iter().map(|h| h.main));
    params_equal && losses_equal
}

fn batched_loop_gap() -> f64 {
    let mesh = generate_mesh(60, 8).unwrap();
    let n = mesh.num_nodes();
    let mut store = ParamStore::new();
    let ring = RingTransformer::new(&mut store, "r", 4, 2, 6, &mut rng(8)).unwrap();
    let head = Mlp::new(&mut store, "d", [4, 6, 3], Init::He, &mut rng(9));
    jitter(&mut store, 8);
    let centers = sample_centers(&mesh, 5, &mut rng(2)).unwrap();
    let batch = StarBatch::new(&mesh, &centers, 12, true).unwrap();
    let (zl, z0, y) = (random(n, 4, 1), random(n, 4, 2), random(n, 3, 3));
    let tape = Tape::new();
    let p = store.bind(&tape);
    let out = ring
        .forward(
            &p,
            batch.tokens(tape.constant(zl), tape.constant(z0)).unwrap(),
            &batch,
        )
        .unwrap();
    let batched = mnp_loss(
        out,
        |x| head.forward(&p, x),
        tape.constant(y.clone()),
        &batch,
    )
    .unwrap()
    .item();
    let outv = out.value();
    let decode = |row: &[f64]| {
        let t2 = Tape::new();
        let p2 = store.bind(&t2);
        head.forward(
            &p2,
            t2.constant(Tensor::from_vec(1, 4, row.to_vec()).unwrap()),
        )
        .unwrap()
        .value()
        .into_data()
    };
    let mut looped = 0.0;
    for s in 0..batch.num_stars() {
        let nb = &batch.neighbors[s];
        let mut star = 0.0;
        for (t, &j) in batch.token_range(s).skip(1).zip(nb) {
            star += decode(outv.row(t))
                .iter()
                .zip(y.row(j))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>();
        }
        looped += star / nb.len() as f64;
    }
    looped /= batch.num_stars() as f64;
    (batched - looped).abs() / looped.max(1.0)
}

#[test]
fn mnp_structural_suite() {
    let _g = serial();
    let isolated = star_isolation();
    let padding = padding_gap();
    let parity = alpha_zero_parity();
    let gap = batched_loop_gap();
    let ok = report(
        "mnp structural suite",
        isolated && padding < 1e-7 && parity && gap <= 1e-12,
        &format!("star isolation exact {isolated}, padding rel change {padding:.2e} (<1e-7), alpha=0 parity {parity}, batched vs looped {gap:.2e} (<=1e-12)"),
    );
    assert!(ok);
}

#[test]
fn temporal_emulation() {
    let _g = serial();
    let mut r = rng(9);
    let mut worst = 0.0f64;
    for theta in [0.0, 0.5, 1.0] {
        for _ in 0..50 {
            let z = Complex64::new(r.random_range(-20.0..0.0), r.random_range(-10.0..10.0));
            let want = theta_amplification(theta, z).unwrap();
            let got = theta_method_emulation(z, theta).unwrap();
            worst = worst.max((got - want).norm() / want.norm().max(1e-300));
        }
    }
    let mesh = generate_mesh(30, 1).unwrap();
    let graph = AttentionGraph::from_mesh(&mesh, true);
    let mut store = ParamStore::new();
    let c = Corrector::new(
        &mut store,
        "c",
        4,
        2,
        6,
        PeMode::None,
        2,
        &TemporalConfig::default(),
        &mut rng(1),
    )
    .unwrap();
    store
        .tensors_mut()
        .iter_mut()
        .for_each(|t| t.data_mut().fill(0.0));
    let tape = Tape::new();
    let p = store.bind(&tape);
    let z = tape.constant(random(mesh.num_nodes(), 4, 2));
    let zp = tape.constant(random(mesh.num_nodes(), 4, 3));
    let identity = c.forward(&p, zp, z, &graph, None).unwrap().value() == z.value();
    let ok = report(
        "temporal emulation",
        worst < 1e-8 && identity,
        &format!("max rel err {worst:.2e} over 150 (theta, z) pairs (<1e-8), zero-parameter corrector identity {identity}"),
    );
    assert!(ok);
}

#[test]
fn determinism() {
    let _g = serial();
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("config.toml");
    std::fs::write(
        &config,
        "seeds = [0, 1]\n\
         [dataset]\nnodes = 80\nsteps = 6\ntrain_trajectories = 2\ntest_trajectories = 1\n\
         [model]\nlayers = 2\nwidth = 8\nheads = 2\n[model.mnp]\ncenters = 8\n\
         [train]\nepochs = 1\n[train.optimizer]\nwarmup_steps = 2\n",
    )
    .unwrap();
    let run = |tag: &str| {
        let out = dir.path().join(tag);
        let status = Command::new(env!("CARGO_BIN_EXE_meshrollout"))
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(&out)
            .arg("train")
            .env("RUST_LOG", "warn")
            .status()
            .unwrap();
        assert!(status.success());
        std::fs::read(out.join("metrics.csv")).unwrap()
    };
    let (a, b) = (run("a"), run("b"));
    let ok = report(
        "determinism",
        a == b && !a.is_empty(),
        &format!(
            "metrics.csv of two identical runs byte-identical: {} ({} bytes)",
            a == b,
            a.len()
        ),
    );
    assert!(ok);
}

/// Desk-scale comparison protocol: one schedule shared by all runs.
const DESK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const DESK_STEPS: u64 = 5000;
const DESK_WARMUP: u64 = 250;
const PROBE_EVERY: u64 = 250;

fn improved_config(seed: u64) -> ModelConfig {
    let mut cfg = ModelConfig {
        layers: 3,
        width: 16,
        heads: 4,
        seed,
        ..Default::default()
    };
    cfg.mnp.centers = 64;
    cfg
}

/// Whether a probe series rises above its end-of-warmup value by more than
/// the stability band.
fn probe_increases(series: &[ProbePoint]) -> Option<bool> {
    let reference = series.iter().find(|p| p.step >= DESK_WARMUP)?.distance;
    let last = series.last()?.distance;
    Some(last > 1.05 * reference)
}

#[test]
fn desk_replication_and_latent_probe() {
    let _g = serial();
    let start = Instant::now();
    let split = generate_split(&DatasetConfig {
        nodes: 1000,
        steps: 100,
        train_trajectories: 50,
        test_trajectories: 10,
        ..Default::default()
    })
    .unwrap();
    let schema = FieldSchema::advection_diffusion();
    let target = parameter_count(&improved_config(0), &schema, 2).unwrap();
    let plain = param_matched_plain(&improved_config(0), &schema, 2, target, 0.02).unwrap();
    let base_train = TrainConfig {
        max_steps: Some(DESK_STEPS),
        optimizer: OptimizerConfig {
            warmup_steps: DESK_WARMUP,
            ..Default::default()
        },
        ..Default::default()
    };
    let noise = calibrate_noise(&plain, &base_train, &split.train, DESK_STEPS).unwrap();
    println!("desk: {target} parameters, calibrated noise std {noise:?}");
    let train = TrainConfig {
        noise_std: noise,
        ..base_train
    };
    let eval = EvalConfig::default();
    let probe_set = &split.test[..2];

    let mut improved: Vec<RunMetrics> = Vec::new();
    let mut baseline: Vec<RunMetrics> = Vec::new();
    let mut probe_mnp = Vec::new();
    let mut probe_free = Vec::new();
    for &seed in &DESK_SEEDS {
        let opts = TrainOptions {
            probe: Some((probe_set, PROBE_EVERY)),
            ..Default::default()
        };
        let (m, out) = run_single(
            "improved",
            &improved_config(seed),
            &train,
            &split,
            &eval,
            opts,
        )
        .unwrap();
        println!(
            "desk seed {seed}: improved rollout {:.5} ({} params)",
            m.rollout_rmse, m.parameters
        );
        improved.push(m);
        probe_mnp.push(probe_increases(&out.probe));

        let plain_seed = ModelConfig {
            seed,
            ..plain.clone()
        };
        let (m, _) = run_single(
            "plain",
            &plain_seed,
            &train,
            &split,
            &eval,
            TrainOptions::default(),
        )
        .unwrap();
        println!(
            "desk seed {seed}: plain rollout {:.5} ({} params)",
            m.rollout_rmse, m.parameters
        );
        baseline.push(m);
    }
    let desk_secs = start.elapsed().as_secs_f64();

    let roll = |runs: &[RunMetrics]| runs.iter().map(|m| m.rollout_rmse).collect::<Vec<_>>();
    let (mi, si) = mean_std(&roll(&improved));
    let (mb, sb) = mean_std(&roll(&baseline));
    let pooled = ((si * si + sb * sb) / 2.0).sqrt();
    let gap = improved[0].parameters.abs_diff(baseline[0].parameters) as f64 / target as f64;
    let desk_ok = report(
        "desk replication",
        mi < mb - pooled && gap <= 0.02 && desk_secs < 4.0 * 3600.0,
        &format!(
            "improved {mi:.5} ± {si:.5}, plain {mb:.5} ± {sb:.5}, threshold {:.5}, param gap {:.2}%, {:.0} s (<14400)",
            mb - pooled,
            100.0 * gap,
            desk_secs
        ),
    );

    for &seed in &DESK_SEEDS {
        let mut cfg = improved_config(seed);
        cfg.mnp.enabled = false;
        let opts = TrainOptions {
            probe: Some((probe_set, PROBE_EVERY)),
            ..Default::default()
        };
        let (_, out) = run_single("no_mnp", &cfg, &train, &split, &eval, opts).unwrap();
        probe_free.push(probe_increases(&out.probe));
    }
    let stable_mnp = probe_mnp.iter().filter(|p| **p == Some(false)).count();
    let rising_free = probe_free.iter().filter(|p| **p == Some(true)).count();
    // Reported only; a miss is recorded as a finding.
    report(
        "latent probe (reported)",
        stable_mnp >= 4 && rising_free >= 4,
        &format!("non-increasing with MNP in {stable_mnp}/5 seeds, increasing without MNP in {rising_free}/5 seeds (need >=4 each)"),
    );
    assert!(desk_ok);
}
