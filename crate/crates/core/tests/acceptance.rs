//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use dst_core::arch::build_mlp;
use dst_core::data::load_mnist_dir;
use dst_core::flops::forward_flops;
use dst_core::harness::{self, run_with_data, Grid, Splits, TrainConfig};
use dst_core::nn::cross_entropy_with_label_smoothing;
use dst_core::schedulers::{
    drop_smallest, prune_fraction, read_events_csv, rigl_update, LayerSignals, PruneSchedule, Scheduler,
    UpdatePolicy,
};
use dst_core::sparsity::{init_channel_masks, init_masks, solve_distribution};
use dst_core::{
    ArchSpec, BufferMode, Distribution, Granularity, MaskSet, Method, Model, SgdState, SparsityConfig, Tensor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion<'a> = (&'static str, Box<dyn Fn() -> Check + 'a>);

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist-10k")
}

fn mnist_config() -> TrainConfig {
    let mut cfg = TrainConfig::default();
    cfg.data.data_dir = Some(data_dir());
    cfg
}

fn ratios(spec: &ArchSpec, cfg: &SparsityConfig) -> Result<(f64, f64), String> {
    let d: Vec<f64> = solve_distribution(spec, cfg)
        .map_err(|e| e.to_string())?
        .iter()
        .map(|s| 1.0 - s)
        .collect();
    let r = forward_flops(spec, Some(&d))
        .and_then(|r| r.with_training(Method::Rigl, 100, None))
        .map_err(|e| e.to_string())?;
    Ok((r.train_ratio_exact().unwrap(), r.test_ratio_exact()))
}

fn c1_wrn_anchor() -> Check {
    let spec = ArchSpec::by_name("wrn-22-2").map_err(|e| e.to_string())?;
    let r = forward_flops(&spec, None)
        .and_then(|r| r.with_training(Method::Static, 100, None))
        .map_err(|e| e.to_string())?;
    let train = r.train_flops.unwrap();
    ensure(
        (r.f_d / 3.15e8 - 1.0).abs() <= 0.05 && train == 3.0 * r.f_d,
        format!("f_d {:.4e}, train {:.4e} = {}x", r.f_d, train, train / r.f_d),
    )
}

fn c2_resnet_anchor() -> Check {
    let spec = ArchSpec::by_name("resnet50-cifar").map_err(|e| e.to_string())?;
    let r = forward_flops(&spec, None).map_err(|e| e.to_string())?;
    ensure((r.f_d / 2.59e9 - 1.0).abs() <= 0.05, format!("f_d {:.4e}", r.f_d))
}

fn c3_ratios() -> Check {
    let wrn = ArchSpec::by_name("wrn-22-2").map_err(|e| e.to_string())?;
    let resnet = ArchSpec::by_name("resnet50-cifar").map_err(|e| e.to_string())?;
    let round2 = dst_core::flops::round2;
    let (a_train, a_test) = ratios(
        &wrn,
        &SparsityConfig::new(0.9, Distribution::Uniform).with_first_layer_dense(false),
    )?;
    let (b_train, b_test) = ratios(&wrn, &SparsityConfig::new(0.9, Distribution::Erk))?;
    let (c_train, c_test) = ratios(&wrn, &SparsityConfig::new(0.8, Distribution::Erk))?;
    let (d_train, d_test) = ratios(&resnet, &SparsityConfig::new(0.9, Distribution::Erk))?;
    let a = round2(a_train) == 0.10 && round2(a_test) == 0.10;
    let b = (b_train - 0.17).abs() <= 0.01 && (b_test - 0.17).abs() <= 0.01;
    let c = (c_train - 0.35).abs() <= 0.01 && (c_test - 0.35).abs() <= 0.01;
    let d = (d_test - 0.22).abs() <= 0.01 && (d_train - 0.23).abs() <= 0.01;
    ensure(
        a && b && c && d,
        format!(
            "(a) {a_train:.4}/{a_test:.4} (b) {b_train:.4}/{b_test:.4} (c) {c_train:.4}/{c_test:.4} \
             (d) {d_train:.4}/{d_test:.4} [train/test]"
        ),
    )
}

fn c4_schedule() -> Check {
    let (alpha, t_end) = (0.3, 1000);
    let start = prune_fraction(0, alpha, t_end);
    let mid = prune_fraction(t_end / 2, alpha, t_end);
    let end = prune_fraction(t_end, alpha, t_end);
    let monotone = (1..=1000).all(|t| prune_fraction(t, alpha, t_end) <= prune_fraction(t - 1, alpha, t_end));
    ensure(
        start == alpha && (mid - alpha / 2.0).abs() <= 4.0 * f64::EPSILON && end.abs() <= 4.0 * f64::EPSILON && monotone,
        format!("f(0) {start}, f(T/2) {mid}, f(T) {end:e}, non-increasing {monotone}"),
    )
}

/// Randomized driver: random weights on active positions and random dense
/// gradients every step, a mask update every step, then one SGD step.
fn drive(method: Method, steps: usize, seed: u64) -> Result<(), String> {
    let channel = method == Method::RiglStruct;
    let spec = if channel {
        dst_core::arch::build_small_cnn(&[1, 8, 8], 4).unwrap()
    } else {
        build_mlp(&[10, 8, 6, 4]).unwrap()
    };
    let mut cfg = SparsityConfig::new(if channel { 0.15 } else { 0.7 }, Distribution::Erk);
    if channel {
        cfg.granularity = Granularity::Channel;
    }
    let finals = solve_distribution(&spec, &cfg).map_err(|e| e.to_string())?;
    let mut masks = match method {
        Method::Pruning => MaskSet::dense(&spec),
        Method::RiglStruct => init_channel_masks(&spec, &finals, seed),
        _ => init_masks(&spec, &finals, seed),
    }
    .map_err(|e| e.to_string())?;
    let mut model = Model::new(&spec, seed).map_err(|e| e.to_string())?;
    model.apply_masks(&masks).map_err(|e| e.to_string())?;
    let mode = if method == Method::Snfs { BufferMode::Dense } else { BufferMode::Sparse };
    let mut opt = SgdState::new(&model, 0.9, 0.01, mode).map_err(|e| e.to_string())?;
    let mut policy = UpdatePolicy::new(method, 0.3, 1, steps);
    if method == Method::Pruning {
        policy.prune_schedule = Some(PruneSchedule {
            s_final: cfg.target_sparsity,
            t_start: 0,
            t_stop: steps * 3 / 4,
        });
    }
    let mut scheduler = Scheduler::new(policy, seed, finals);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let total0 = masks.total_active();
    for t in 1..=steps {
        for l in 0..model.maskable_count() {
            let mask = masks.layer(l).clone();
            let w = model.weight_mut(l);
            for (i, v) in w.values_mut().iter_mut().enumerate() {
                *v = if mask.is_active(i) { rng.random_range(-1.0..1.0) } else { 0.0 };
            }
            let n = w.len();
            w.set_grad((0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            if let Some(b) = model.bias_mut(l) {
                let nb = b.len();
                b.set_grad(vec![0.0; nb]).unwrap();
            }
        }
        let before = masks.clone();
        let ev = scheduler
            .update(t, &mut model, &mut opt, &mut masks)
            .map_err(|e| e.to_string())?;
        let Some(ev) = ev else { continue };
        for lu in &ev.layers {
            for &i in &lu.grown {
                if model.weight(lu.layer).values()[i] != 0.0 {
                    return Err(format!("{method:?} step {t}: grown weight not zero"));
                }
            }
        }
        match method {
            Method::Rigl | Method::Set | Method::RiglStruct => {
                if masks.active_counts() != before.active_counts() {
                    return Err(format!("{method:?} step {t}: per-layer count changed"));
                }
            }
            Method::Snfs | Method::RiglSg | Method::RiglSm => {
                if masks.total_active() != total0 {
                    return Err(format!("{method:?} step {t}: global count changed"));
                }
            }
            Method::Pruning => {
                for (a, b) in masks.layers().iter().zip(before.layers()) {
                    if a.bits().iter().zip(b.bits()).any(|(&now, &was)| now && !was) {
                        return Err(format!("pruning step {t}: a weight was regrown"));
                    }
                }
            }
            Method::Static => {}
        }
        if channel {
            for m in masks.layers() {
                let per = m.len() / m.shape()[0];
                if m.shape().len() == 4 && !m.bits().chunks(per).all(|c| c.iter().all(|&b| b == c[0])) {
                    return Err(format!("struct step {t}: channel split"));
                }
            }
        }
        opt.step(&mut model, &masks).map_err(|e| e.to_string())?;
    }
    if method == Method::Pruning && (masks.global_sparsity() - cfg.target_sparsity).abs() > 1e-2 {
        return Err(format!("pruning ended at sparsity {}", masks.global_sparsity()));
    }
    Ok(())
}

fn c5_conservation() -> Check {
    let methods = [
        Method::Rigl,
        Method::Set,
        Method::RiglStruct,
        Method::Snfs,
        Method::RiglSg,
        Method::RiglSm,
        Method::Pruning,
    ];
    for (i, m) in methods.iter().enumerate() {
        drive(*m, 10_000, i as u64)?;
    }
    Ok(format!("{} methods x 10000 steps", methods.len()))
}

fn loss_of(model: &mut Model, x: &Tensor, y: &[usize]) -> f64 {
    let logits = model.forward(x).unwrap();
    cross_entropy_with_label_smoothing(&logits, y, 0.0).unwrap().0
}

fn c6_growth_oracle() -> Check {
    const EPS: f64 = 1e-4;
    let spec = build_mlp(&[16, 20, 12, 4]).unwrap();
    let params = spec.parameter_count();
    let trials = 100;
    let (mut exact, mut ties) = (0, 0);
    for trial in 0..trials {
        let seed = 1000 + trial as u64;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut masks = init_masks(&spec, &[0.6, 0.6, 0.6], seed).unwrap();
        let mut model = Model::new(&spec, seed).unwrap();
        model.apply_masks(&masks).unwrap();
        // Non-zero biases keep units whose inputs are all masked off the
        // ReLU kink, where finite differences are one-sided.
        for l in 0..model.maskable_count() {
            for b in model.bias_mut(l).unwrap().values_mut() {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        let x = Tensor::from_vec(&[8, 16], (0..128).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let y: Vec<usize> = (0..8).map(|_| rng.random_range(0..4)).collect();
        let logits = model.forward(&x).unwrap();
        let (_, g) = cross_entropy_with_label_smoothing(&logits, &y, 0.0).unwrap();
        model.backward(&g).unwrap();

        let mut fd = Vec::new();
        for l in 0..model.maskable_count() {
            let mut grads = Vec::with_capacity(model.weight(l).len());
            for i in 0..model.weight(l).len() {
                let orig = model.weight(l).values()[i];
                model.weight_mut(l).values_mut()[i] = orig + EPS;
                let up = loss_of(&mut model, &x, &y);
                model.weight_mut(l).values_mut()[i] = orig - EPS;
                let down = loss_of(&mut model, &x, &y);
                model.weight_mut(l).values_mut()[i] = orig;
                grads.push((up - down) / (2.0 * EPS));
            }
            fd.push(grads);
        }

        let weights: Vec<Vec<f64>> = (0..model.maskable_count()).map(|l| model.weight(l).values().to_vec()).collect();
        let grads: Vec<Vec<f64>> = (0..model.maskable_count())
            .map(|l| model.weight(l).grad().unwrap().to_vec())
            .collect();
        let zeros: Vec<Vec<f64>> = weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let signals: Vec<LayerSignals<'_>> = (0..weights.len())
            .map(|l| LayerSignals {
                weights: &weights[l],
                grads: &grads[l],
                momentum: &zeros[l],
            })
            .collect();
        let before = masks.clone();
        let ev = rigl_update(1, &signals, &mut masks, 0.3);

        let mut all_exact = true;
        let mut all_explained = true;
        for (l, lu) in ev.layers.iter().enumerate() {
            let mut after_drop = before.layer(l).clone();
            drop_smallest(&weights[l], &mut after_drop, 0.3);
            let mut cand = after_drop.inactive_indices();
            cand.sort_by(|&a, &b| fd[l][b].abs().total_cmp(&fd[l][a].abs()).then(a.cmp(&b)));
            let k = lu.grown.len();
            let want: BTreeSet<usize> = cand[..k].iter().copied().collect();
            let got: BTreeSet<usize> = lu.grown.iter().copied().collect();
            if want != got {
                all_exact = false;
                let kth = fd[l][cand[k - 1]].abs();
                if !want.symmetric_difference(&got).all(|&i| (fd[l][i].abs() - kth).abs() <= 1e-6) {
                    all_explained = false;
                }
            }
        }
        if all_exact {
            exact += 1;
        } else if all_explained {
            ties += 1;
        }
    }
    ensure(
        exact * 100 >= 99 * trials && exact + ties == trials,
        format!("{exact}/{trials} exact, {ties} tie-explained, MLP with {params} weights"),
    )
}

fn c7_erk_grid() -> Check {
    let mut worst = 0.0f64;
    let mut max_density = 0.0f64;
    for name in ["wrn-22-2", "resnet50-cifar", "mlp"] {
        let spec = ArchSpec::by_name(name).map_err(|e| e.to_string())?;
        for s in [0.5, 0.8, 0.9, 0.95] {
            let sp = solve_distribution(&spec, &SparsityConfig::new(s, Distribution::Erk)).map_err(|e| e.to_string())?;
            let masks = init_masks(&spec, &sp, 0).map_err(|e| e.to_string())?;
            worst = worst.max((masks.global_sparsity() - s).abs());
            max_density = sp.iter().map(|x| 1.0 - x).fold(max_density, f64::max);
        }
    }
    ensure(
        worst <= 1e-3 && max_density <= 1.0,
        format!("worst realized error {worst:.2e}, max layer density {max_density:.4}"),
    )
}

fn c8_directional(splits: &Splits) -> Check {
    let base = mnist_config();
    let mut grid = Grid::single(&base);
    grid.methods = vec![Method::Rigl, Method::Set, Method::Static];
    grid.seeds = vec![0, 1, 2];
    let workers = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1).min(9);
    let res = harness::sweep(&base, &grid, splits, workers, None).map_err(|e| e.to_string())?;
    let mean = |i: usize| res.cells[i].test_accuracy_mean.unwrap_or(f64::NAN);
    let (rigl, set, stat) = (mean(0), mean(1), mean(2));
    ensure(
        rigl >= set && set >= stat && rigl - stat > 0.0,
        format!("mean test accuracy RigL {rigl:.4}, SET {set:.4}, Static {stat:.4} over 3 seeds"),
    )
}

fn c9_determinism(splits: &Splits) -> Check {
    let cfg = mnist_config();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_with_data(&cfg, splits, Some(a.path())).map_err(|e| e.to_string())?;
    let rb = run_with_data(&cfg, splits, Some(b.path())).map_err(|e| e.to_string())?;
    let (da, db) = (ra.dir.unwrap(), rb.dir.unwrap());
    let same = ["metrics.csv", "mask.json"]
        .iter()
        .all(|f| std::fs::read(da.join(f)).ok() == std::fs::read(db.join(f)).ok());
    ensure(same, format!("metrics.csv and mask.json identical: {same}"))
}

fn c10_round_trip(splits: &Splits) -> Check {
    let root = tempfile::tempdir().unwrap();
    let mut total_events = 0;
    for method in [Method::Rigl, Method::Set, Method::RiglSm] {
        let mut cfg = mnist_config();
        cfg.epochs = 2;
        cfg.scheduler.method = method;
        cfg.scheduler.delta_t = 20;
        let out = run_with_data(&cfg, splits, Some(root.path())).map_err(|e| e.to_string())?;
        let dir = out.dir.unwrap();
        let loaded = MaskSet::load(dir.join("mask.json")).map_err(|e| e.to_string())?;
        if loaded != out.masks {
            return Err(format!("{method:?}: mask.json differs after load"));
        }
        let initial = MaskSet::load(dir.join("mask_init.json")).map_err(|e| e.to_string())?;
        let log = read_events_csv(dir.join("events.csv"), &initial).map_err(|e| e.to_string())?;
        total_events += log.len();
        if log.replay(&initial).map_err(|e| e.to_string())? != loaded {
            return Err(format!("{method:?}: events replay differs from mask.json"));
        }
    }
    ensure(total_events > 0, format!("3 runs, {total_events} update events replayed bit-exactly"))
}

fn c11_struct(splits: &Splits) -> Check {
    let mut cfg = mnist_config();
    cfg.arch = "small-cnn".into();
    cfg.epochs = 1;
    cfg.sparsity.target_sparsity = 0.02;
    cfg.sparsity.granularity = Granularity::Channel;
    cfg.scheduler.method = Method::RiglStruct;
    cfg.scheduler.delta_t = 10;
    let out = run_with_data(&cfg, splits, None).map_err(|e| e.to_string())?;
    let mut conv_ok = true;
    let mut linear_ok = true;
    let mut sparse_channels = 0;
    for m in out.masks.layers() {
        if m.shape().len() == 4 {
            let per = m.len() / m.shape()[0];
            for c in m.bits().chunks(per) {
                conv_ok &= c.iter().all(|&b| b == c[0]);
                sparse_channels += usize::from(!c[0]);
            }
        } else {
            linear_ok &= m.active_count() == m.len();
        }
    }
    ensure(
        conv_ok && linear_ok && !out.events.is_empty(),
        format!(
            "{} updates, {sparse_channels} inactive conv channels, channels uniform {conv_ok}, linear dense {linear_ok}",
            out.events.len()
        ),
    )
}

fn main() -> ExitCode {
    let splits = match load_mnist_dir(data_dir()).and_then(|_| harness::load_splits(&mnist_config().data)) {
        Ok(s) => Some(s),
        Err(e) => {
            eprintln!("MNIST subset unavailable: {e}");
            None
        }
    };
    let no_data = || Err::<String, String>("MNIST subset not found".into());
    let criteria: Vec<Criterion<'_>> = vec![
        ("WRN-22-2 FLOP anchor", Box::new(c1_wrn_anchor)),
        ("ResNet-50 FLOP anchor", Box::new(c2_resnet_anchor)),
        ("FLOP ratios", Box::new(c3_ratios)),
        ("cosine drop schedule", Box::new(c4_schedule)),
        ("mask conservation driver", Box::new(c5_conservation)),
        ("growth matches finite differences", Box::new(c6_growth_oracle)),
        ("ERK solver grid", Box::new(c7_erk_grid)),
        ("MNIST ordering RigL >= SET >= Static", Box::new(|| splits.as_ref().map_or_else(no_data, c8_directional))),
        ("determinism", Box::new(|| splits.as_ref().map_or_else(no_data, c9_determinism))),
        ("mask and events round trip", Box::new(|| splits.as_ref().map_or_else(no_data, c10_round_trip))),
        ("channel granularity invariant", Box::new(|| splits.as_ref().map_or_else(no_data, c11_struct))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let (tag, detail) = match check() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "{tag} criterion {:>2} {name}: {detail} ({:.1}s)",
            i + 1,
            start.elapsed().as_secs_f64()
        );
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
