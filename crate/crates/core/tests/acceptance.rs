//! Acceptance suite: one line per criterion, `PASS`, `FAIL` or `SKIP`.
//!
//! Correctness criteria (1-5, 9 and the exact parts of 8) make the binary
//! exit non-zero on failure. The directional training comparisons (6, 7 and
//! the AUSUC ordering of 8) are reported but only fail the process when
//! `ACCEPTANCE_STRICT=1`. `ACCEPTANCE_EPOCHS` overrides the epoch budget of
//! the comparison runs and `SPAEN_BENCHMARK_ATTRIBUTES` points at real
//! attribute tables for criterion 10.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use spaen::ablations::{run_variant, AblationRow, AblationSpec};
use spaen::cli::{analyze_attributes, net_for, AnalyzeArgs, DEFAULT_VAL_CLASSES};
use spaen::data::{generate_synthetic, make_splits, AccessLogger, DataAccess, Dataset, GenConfig, SplitSpec};
use spaen::eval::{
    ausuc, default_gamma_grid, harmonic_mean, per_class_top1, predict, predict_calibrated, score_images, suc_curve,
    ScoreMatrix, SucPoint,
};
use spaen::nets::{
    build_critic, build_phi, build_variant, central_differences, images_to_batch, random_matrix, ModelBundle,
    NetConfig, Variant,
};
use spaen::objectives::{
    cls_batch, critic_grads, embedder_adv_grads, rec_batch, term_gradients, AdvForm, Batch, HyperParams, RankingMode,
};
use spaen::spaces::EmbeddingTable;
use spaen::trainer::{train, train_step, TrainConfig, TrainState};

struct Outcome {
    pass: Option<bool>,
    detail: String,
}

impl Outcome {
    fn check(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass: Some(pass),
            detail: detail.into(),
        }
    }

    fn skip(detail: impl Into<String>) -> Self {
        Outcome {
            pass: None,
            detail: detail.into(),
        }
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

fn tiny_net(seed: u64) -> NetConfig {
    NetConfig {
        d: 4,
        image_size: 8,
        trunk_channels: [2, 3],
        head_hidden: 5,
        f_channels: [2, 3],
        f_hidden: 5,
        g_channels: [3, 2, 2],
        critic_hidden: 4,
        phi_channels: [2, 3, 2],
        seed,
        ..NetConfig::default()
    }
}

fn random_table(classes: usize, d: usize, seed: u64) -> EmbeddingTable {
    let ids: Vec<usize> = (0..classes).map(|c| c * 3 + 1).collect();
    let attrs = random_matrix(classes, d, seed);
    EmbeddingTable::from_rows(&ids, |row| attrs.row(ids.iter().position(|&c| c == row).unwrap())).unwrap()
}

fn worst_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// Central differences of a scalar function of a matrix at every entry.
fn matrix_fd(x: &Array2<f64>, mut f: impl FnMut(&Array2<f64>) -> f64) -> Vec<f64> {
    let flat: Vec<f64> = x.iter().copied().collect();
    let coords: Vec<usize> = (0..flat.len()).collect();
    let shape = x.raw_dim();
    let mut eval = |p: &[f64]| Ok(f(&Array2::from_shape_vec(shape, p.to_vec()).unwrap()));
    central_differences(&mut eval, &flat, &coords, FD_STEP).unwrap()
}

fn criterion_1() -> Outcome {
    let table = [
        (24.9, 38.6, 30.3),
        (34.7, 70.6, 46.6),
        (23.3, 90.9, 37.1),
        (13.7, 63.4, 22.6),
    ];
    let mut worst: f64 = 0.0;
    let mut parts = Vec::new();
    for (ut, st, printed) in table {
        let h = harmonic_mean(st, ut);
        worst = worst.max((h - printed).abs());
        parts.push(format!("{h:.2}"));
    }
    Outcome::check(worst <= 0.15, format!("H = [{}], max deviation {worst:.3}", parts.join(", ")))
}

fn criterion_2() -> Outcome {
    let mut per_loss: BTreeMap<&str, f64> = BTreeMap::new();
    let mut note = |name: &'static str, e: f64| {
        let slot = per_loss.entry(name).or_insert(0.0);
        *slot = slot.max(e);
    };
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);

        // ranking loss, full sum over wrong labels
        let d = rng.random_range(2..6);
        let classes = rng.random_range(2..6);
        let n = rng.random_range(1..5);
        let table = random_table(classes, d, seed);
        let labels: Vec<usize> = (0..n).map(|_| table.class_ids[rng.random_range(0..classes)]).collect();
        let margin = rng.random_range(0.05..1.0);
        let emb = random_matrix(n, d, seed + 100);
        let (_, g) = cls_batch(emb.view(), &labels, &table, margin, RankingMode::FullSum).unwrap();
        let numeric = matrix_fd(&emb, |x| {
            cls_batch(x.view(), &labels, &table, margin, RankingMode::FullSum).unwrap().0
        });
        note("cls (full sum)", worst_error(&g.iter().copied().collect::<Vec<_>>(), &numeric));

        // reconstruction: feature term alone, then the pixel term by difference
        let net = tiny_net(seed);
        let phi = build_phi(&net).unwrap();
        let len = net.image_len();
        let recon = random_matrix(2, len, seed + 200);
        let target = random_matrix(2, len, seed + 300);
        let (_, _, g_feat) = rec_batch(recon.view(), target.view(), None, &phi, 0.0).unwrap();
        let (_, _, g_both) = rec_batch(recon.view(), target.view(), None, &phi, 1.0).unwrap();
        let fd_feat = matrix_fd(&recon, |x| rec_batch(x.view(), target.view(), None, &phi, 0.0).unwrap().0);
        let fd_pixel = matrix_fd(&recon, |x| rec_batch(x.view(), target.view(), None, &phi, 0.0).unwrap().1);
        note("rec feature term", worst_error(&g_feat.iter().copied().collect::<Vec<_>>(), &fd_feat));
        let g_pixel: Vec<f64> = g_both.iter().zip(g_feat.iter()).map(|(b, f)| b - f).collect();
        note("rec pixel term", worst_error(&g_pixel, &fd_pixel));

        // adversarial: critic side over D's parameters, embedder side over E(x)
        let d_map = build_critic(&net).unwrap();
        let real = random_matrix(3, net.d, seed + 400);
        let fake = random_matrix(3, net.d, seed + 500);
        for (form, critic_name, embedder_name) in [
            (AdvForm::Wgan, "adv critic side (wgan)", "adv embedder side (wgan)"),
            (AdvForm::Log, "adv critic side (log)", "adv embedder side (log)"),
        ] {
            let (_, g) = critic_grads(&d_map, real.view(), fake.view(), form).unwrap();
            let params = d_map.params();
            let coords: Vec<usize> = (0..params.len()).collect();
            let mut probe = d_map.clone();
            let mut eval = |p: &[f64]| {
                probe.set_params(p)?;
                Ok(critic_grads(&probe, real.view(), fake.view(), form)?.0)
            };
            let numeric = central_differences(&mut eval, &params, &coords, FD_STEP).unwrap();
            note(critic_name, worst_error(&g, &numeric));

            let (_, g) = embedder_adv_grads(&d_map, fake.view(), form).unwrap();
            let numeric = matrix_fd(&fake, |x| embedder_adv_grads(&d_map, x.view(), form).unwrap().0);
            note(embedder_name, worst_error(&g.iter().copied().collect::<Vec<_>>(), &numeric));
        }

        // weighted total over every generator-side parameter
        let variant = Variant::ALL[seed as usize % Variant::ALL.len()];
        let bundle = build_variant(&net, variant).unwrap();
        let table = random_table(4, net.d, seed + 600);
        let images = random_matrix(3, len, seed + 700);
        let labels: Vec<usize> = (0..3).map(|i| table.class_ids[(i + seed as usize) % 4]).collect();
        let batch = Batch::new(&bundle, images, labels).unwrap();
        let hyper = HyperParams {
            alpha: rng.random_range(0.0..2.0),
            beta: rng.random_range(0.0..2.0),
            ..HyperParams::default()
        };
        let mode = RankingMode::FullSum;
        let total = term_gradients(&bundle, &batch, &table, &hyper, mode).unwrap().total(&hyper);
        for map in bundle.maps() {
            if !map.trainable || Some(&map.name) == bundle.d.as_ref().map(|d| &d.name) {
                continue;
            }
            let params = map.params();
            let coords = spaen::nets::sample_coords(params.len(), 12, seed);
            let mut probe = bundle.clone();
            let name = map.name.clone();
            let mut eval = |p: &[f64]| {
                probe.map_mut(&name).unwrap().set_params(p)?;
                Ok(term_gradients(&probe, &batch, &table, &hyper, mode)?.losses.total)
            };
            let numeric = central_differences(&mut eval, &params, &coords, FD_STEP).unwrap();
            let analytic: Vec<f64> = coords.iter().map(|&i| total.get(&map.name).unwrap()[i]).collect();
            note("weighted total", worst_error(&analytic, &numeric));
        }
    }
    let worst = per_loss.values().copied().fold(0.0, f64::max);
    let detail = per_loss
        .iter()
        .map(|(k, v)| format!("{k} {v:.1e}"))
        .collect::<Vec<_>>()
        .join("; ");
    Outcome::check(worst < FD_TOL, format!("{INSTANCES} instances each; {detail}"))
}

fn small_dataset(seed: u64) -> (Dataset, SplitSpec) {
    let gen = GenConfig {
        num_classes: 8,
        num_attributes: 8,
        n_per_class: 6,
        image_size: 16,
        unseen_count: 2,
        seed,
        ..GenConfig::default()
    };
    let ds = generate_synthetic(&gen).unwrap();
    let splits = make_splits(&ds, 2, 1, seed).unwrap();
    (ds, splits)
}

fn criterion_3() -> Outcome {
    let (ds, splits) = small_dataset(5);
    let unseen: BTreeSet<usize> = splits.unseen_classes.iter().copied().collect();
    let net = net_for(&ds, 0).unwrap();
    let mut cfg = TrainConfig {
        epochs: 2,
        seed: 1,
        ..TrainConfig::default()
    };
    cfg.hyper.batch_size = 8;
    let mut leaks = Vec::new();
    let mut reads = 0;
    for variant in Variant::ALL {
        let logged = AccessLogger::new(&ds);
        train(&logged, &splits, &net, variant, &cfg).unwrap();
        let log = logged.log();
        reads += log.image_ids.len();
        let images = log.image_ids.iter().filter(|&&id| unseen.contains(&ds.labels[id])).count();
        let rows = log.classes.intersection(&unseen).count();
        if images + rows > 0 {
            leaks.push(format!("{variant}: {images} images, {rows} class rows"));
        }
    }
    Outcome::check(
        leaks.is_empty(),
        if leaks.is_empty() {
            format!("5 variants, {reads} image reads, none from unseen classes")
        } else {
            leaks.join("; ")
        },
    )
}

fn criterion_4() -> Outcome {
    let (ds, splits) = small_dataset(6);
    let net = net_for(&ds, 3).unwrap();
    let hyper = HyperParams {
        batch_size: 8,
        ..HyperParams::default()
    };
    let mut bundle = build_variant(&net, Variant::SpAen).unwrap();
    let clip = hyper.clip_c;
    bundle.d.as_mut().unwrap().for_each_param_mut(|p| *p = p.clamp(-clip, clip));
    let mut state = TrainState::new(bundle, &hyper);
    let training = splits.training_classes();
    let table = EmbeddingTable::from_rows(&training, |c| ds.class_attributes(c)).unwrap();
    let ids: Vec<usize> = splits
        .train_ids
        .iter()
        .copied()
        .filter(|&id| training.contains(&ds.labels[id]))
        .collect();
    let mut worst: f64 = 0.0;
    let mut updates = 0;
    for step in 0..50 {
        let rows: Vec<usize> = (0..hyper.batch_size).map(|i| ids[(step * hyper.batch_size + i) % ids.len()]).collect();
        let images = images_to_batch(rows.iter().map(|&id| ds.image(id)));
        let batch = Batch::new(&state.bundle, images, rows.iter().map(|&id| ds.labels[id]).collect()).unwrap();
        let out = train_step(&mut state, &batch, &table, &hyper, RankingMode::Sampled(step as u64)).unwrap();
        updates += out.critic_max_abs.len();
        worst = out.critic_max_abs.iter().copied().fold(worst, f64::max);
    }
    Outcome::check(
        worst <= clip && updates == 50 * hyper.n_critic,
        format!("{updates} critic updates, max |w| = {worst:.4} (clip {clip})"),
    )
}

fn criterion_5() -> Outcome {
    let mut problems = Vec::new();
    for seed in 0..4 {
        let net = tiny_net(seed);
        let table = random_table(4, net.d, seed);
        let hyper = HyperParams::default();
        for variant in Variant::ALL {
            let bundle = build_variant(&net, variant).unwrap();
            let images = random_matrix(3, net.image_len(), seed + 9);
            let labels: Vec<usize> = (0..3).map(|i| table.class_ids[i]).collect();
            let batch = Batch::new(&bundle, images, labels).unwrap();
            let t = term_gradients(&bundle, &batch, &table, &hyper, RankingMode::FullSum).unwrap();
            let mut expect_zero = |term: &str, g: &spaen::objectives::Gradients, map: &str| {
                if g.0.contains_key(map) && g.max_abs(map) != 0.0 {
                    problems.push(format!("{variant}: d{term}/d{map} = {:.2e}", g.max_abs(map)));
                }
            };
            for map in ["F", "G", "D", "branch-rec", "branch-merge"] {
                expect_zero("cls", &t.cls, map);
            }
            for map in ["F", "G", "D"] {
                expect_zero("adv", &t.adv, map);
            }
            if variant == Variant::SpAen {
                expect_zero("rec", &t.rec, "E-head");
                expect_zero("rec", &t.rec, "D");
                if t.rec.max_abs("F") == 0.0 || t.rec.max_abs("G") == 0.0 || t.cls.max_abs("E-head") == 0.0 {
                    problems.push("full model: a term lost its own parameters".into());
                }
            }
        }
    }
    Outcome::check(
        problems.is_empty(),
        if problems.is_empty() {
            "cls reaches only E-head; rec reaches F and G, never E-head; adv reaches only E-head".into()
        } else {
            problems.join("; ")
        },
    )
}

/// Brute-force argmax: the smallest class id among those attaining the row maximum.
fn oracle_predict(scores: &Array2<f64>, classes: &[usize], bias: &[f64]) -> Vec<usize> {
    scores
        .rows()
        .into_iter()
        .map(|row| {
            let adjusted: Vec<f64> = row.iter().zip(bias).map(|(v, b)| v - b).collect();
            let best = adjusted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (0..classes.len())
                .filter(|&j| adjusted[j] == best)
                .map(|j| classes[j])
                .min()
                .unwrap()
        })
        .collect()
}

fn oracle_per_class(pred: &[usize], truth: &[usize]) -> f64 {
    let classes: BTreeSet<usize> = truth.iter().copied().collect();
    let mut sum = 0.0;
    for &c in &classes {
        let idx: Vec<usize> = (0..truth.len()).filter(|&i| truth[i] == c).collect();
        let hits = idx.iter().filter(|&&i| pred[i] == c).count();
        sum += hits as f64 / idx.len() as f64;
    }
    sum / classes.len() as f64
}

/// Area under the polyline through distinct x values, entering each x at
/// its highest y and leaving at its lowest.
fn oracle_ausuc(curve: &[SucPoint]) -> f64 {
    let mut by_x: BTreeMap<u64, (f64, f64, f64)> = BTreeMap::new();
    for p in curve {
        let e = by_x.entry(p.acc_ut.to_bits()).or_insert((p.acc_ut, p.acc_st, p.acc_st));
        e.1 = e.1.min(p.acc_st);
        e.2 = e.2.max(p.acc_st);
    }
    let mut xs: Vec<(f64, f64, f64)> = by_x.into_values().collect();
    xs.sort_by(|a, b| a.0.total_cmp(&b.0));
    xs.windows(2).map(|w| (w[1].0 - w[0].0) * (w[0].1 + w[1].2) / 2.0).sum()
}

fn criterion_9() -> Outcome {
    let trials = 200;
    let mut mismatches: BTreeMap<&str, usize> = BTreeMap::new();
    for t in ["predict", "per_class_top1", "suc_curve", "ausuc"] {
        mismatches.insert(t, 0);
    }
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + trial);
        let n_seen = rng.random_range(1..4);
        let n_unseen = rng.random_range(1..4);
        let classes: Vec<usize> = (0..n_seen + n_unseen).map(|c| 2 * c + 1).collect();
        let seen: Vec<usize> = classes[..n_seen].to_vec();
        let rows = rng.random_range(2..12);
        let mut labels: Vec<usize> = (0..rows).map(|_| classes[rng.random_range(0..classes.len())]).collect();
        labels[0] = seen[0];
        labels[1] = classes[n_seen];
        // small integer scores make ties common
        let scores = Array2::from_shape_fn((rows, classes.len()), |_| rng.random_range(-3..4) as f64 * 0.5);
        let m = ScoreMatrix::new(scores.clone(), classes.clone(), labels.clone()).unwrap();

        let zero = vec![0.0; classes.len()];
        let pred = predict(&m).unwrap();
        if pred != oracle_predict(&scores, &classes, &zero) {
            *mismatches.get_mut("predict").unwrap() += 1;
        }
        let random_pred: Vec<usize> = (0..rows).map(|_| classes[rng.random_range(0..classes.len())]).collect();
        if (per_class_top1(&random_pred, &labels).unwrap() - oracle_per_class(&random_pred, &labels)).abs() > 1e-12 {
            *mismatches.get_mut("per_class_top1").unwrap() += 1;
        }

        let grid: Vec<f64> = (-16..=16).map(|k| k as f64 * 0.25).collect();
        let curve = suc_curve(&m, &seen, &grid).unwrap();
        let unseen_rows: Vec<usize> = (0..rows).filter(|&i| !seen.contains(&labels[i])).collect();
        let seen_rows: Vec<usize> = (0..rows).filter(|&i| seen.contains(&labels[i])).collect();
        let pick = |v: &[usize], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut curve_ok = true;
        for (p, &g) in curve.iter().zip(&grid) {
            let bias: Vec<f64> = classes.iter().map(|c| if seen.contains(c) { g } else { 0.0 }).collect();
            let pred = oracle_predict(&scores, &classes, &bias);
            if pred != predict_calibrated(&m, &seen, g).unwrap() {
                curve_ok = false;
            }
            let ut = oracle_per_class(&pick(&pred, &unseen_rows), &pick(&labels, &unseen_rows));
            let st = oracle_per_class(&pick(&pred, &seen_rows), &pick(&labels, &seen_rows));
            if (p.acc_ut - ut).abs() > 1e-12 || (p.acc_st - st).abs() > 1e-12 || p.gamma != g {
                curve_ok = false;
            }
        }
        if !curve_ok {
            *mismatches.get_mut("suc_curve").unwrap() += 1;
        }
        if (ausuc(&curve).unwrap() - oracle_ausuc(&curve)).abs() > 1e-12 {
            *mismatches.get_mut("ausuc").unwrap() += 1;
        }
    }
    let bad: usize = mismatches.values().sum();
    let detail = mismatches
        .iter()
        .map(|(k, v)| format!("{k} {v}/{trials}"))
        .collect::<Vec<_>>()
        .join(", ");
    Outcome::check(bad == 0, format!("mismatches: {detail}"))
}

struct SeedRun {
    seed: u64,
    rows: BTreeMap<Variant, AblationRow>,
    bundles: BTreeMap<Variant, ModelBundle>,
    data: Dataset,
    splits: SplitSpec,
}

fn comparison_runs(epochs: usize) -> Vec<SeedRun> {
    let mut runs = Vec::new();
    for seed in 0..3 {
        let gen = GenConfig {
            seed,
            ..GenConfig::default()
        };
        let data = generate_synthetic(&gen).unwrap();
        let splits = make_splits(&data, gen.unseen_count, DEFAULT_VAL_CLASSES, seed).unwrap();
        let net = net_for(&data, seed).unwrap();
        let mut rows = BTreeMap::new();
        let mut bundles = BTreeMap::new();
        for variant in Variant::ALL {
            let started = Instant::now();
            let spec = AblationSpec {
                variant,
                net: net.clone(),
                train: TrainConfig {
                    epochs,
                    seed,
                    ..TrainConfig::default()
                },
            };
            let (bundle, report, row) = run_variant(&spec, &data, &splits).unwrap();
            let m = &row.metrics;
            println!(
                "      seed {seed} {:<12} U->U {:.3} U->T {:.3} S->T {:.3} H {:.3} AUSUC {:.3} mse {} best epoch {:?} ({:.0}s)",
                variant.as_str(),
                m.acc_uu,
                m.acc_ut,
                m.acc_st,
                m.h,
                m.ausuc,
                row.recon_mse.map_or("-".into(), |v| format!("{v:.4}")),
                report.best_epoch,
                started.elapsed().as_secs_f64()
            );
            rows.insert(variant, row);
            bundles.insert(variant, bundle);
        }
        runs.push(SeedRun {
            seed,
            rows,
            bundles,
            data,
            splits,
        });
    }
    runs
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = values.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn criterion_6(runs: &[SeedRun]) -> Outcome {
    let metric = |r: &SeedRun, v: Variant| {
        let m = &r.rows[&v].metrics;
        (m.acc_ut, m.h)
    };
    let wins = runs
        .iter()
        .filter(|r| {
            let (ut, h) = metric(r, Variant::SpAen);
            let (ut0, h0) = metric(r, Variant::ClsOnly);
            ut > ut0 && h > h0
        })
        .count();
    let mean_of = |v: Variant, pick: fn((f64, f64)) -> f64| mean(runs.iter().map(|r| pick(metric(r, v))));
    let (ut, ut0) = (mean_of(Variant::SpAen, |x| x.0), mean_of(Variant::ClsOnly, |x| x.0));
    let (h, h0) = (mean_of(Variant::SpAen, |x| x.1), mean_of(Variant::ClsOnly, |x| x.1));
    Outcome::check(
        wins >= 2 && ut > ut0 && h > h0,
        format!(
            "full beats cls-only on both in {wins}/3 seeds; mean U->T {ut:.3} vs {ut0:.3}, mean H {h:.3} vs {h0:.3}"
        ),
    )
}

fn criterion_7(runs: &[SeedRun]) -> Outcome {
    let mse = |r: &SeedRun, v: Variant| r.rows[&v].recon_mse.expect("decoder variant");
    let wins = runs
        .iter()
        .filter(|r| mse(r, Variant::SpAen) < mse(r, Variant::Sae))
        .count();
    let means: Vec<String> = [Variant::SpAen, Variant::SplitBranch, Variant::DirectMap, Variant::Sae]
        .iter()
        .map(|&v| format!("{} {:.4}", v.as_str(), mean(runs.iter().map(|r| mse(r, v)))))
        .collect();
    let full_ordering = runs
        .iter()
        .filter(|r| {
            mse(r, Variant::SpAen) <= mse(r, Variant::SplitBranch)
                && mse(r, Variant::SplitBranch) <= mse(r, Variant::DirectMap)
                && mse(r, Variant::DirectMap) < mse(r, Variant::Sae)
        })
        .count();
    Outcome::check(
        wins >= 2,
        format!(
            "MSE(full) < MSE(sae) in {wins}/3 seeds; mean MSE {}; full <= split <= direct < sae in {full_ordering}/3",
            means.join(", ")
        ),
    )
}

/// Exact SUC properties on every trained bundle, and the AUSUC ordering.
fn criterion_8(runs: &[SeedRun]) -> (Outcome, Outcome) {
    let mut problems = Vec::new();
    let mut curves = 0;
    for r in runs {
        for (&variant, bundle) in &r.bundles {
            let ids: Vec<usize> = r.splits.seen_test_ids.iter().chain(&r.splits.unseen_test_ids).copied().collect();
            let scores = score_images(bundle, &r.data, &ids, &r.splits.all_classes()).unwrap();
            let mut grid = default_gamma_grid(&scores, 201);
            grid.push(0.0);
            grid.sort_by(f64::total_cmp);
            let curve = suc_curve(&scores, &r.splits.seen_classes, &grid).unwrap();
            curves += 1;
            let at_zero = curve.iter().find(|p| p.gamma == 0.0).unwrap();
            let m = &r.rows[&variant].metrics;
            if at_zero.acc_ut != m.acc_ut || at_zero.acc_st != m.acc_st {
                problems.push(format!("seed {} {variant}: gamma=0 differs from direct stacking", r.seed));
            }
            for w in curve.windows(2) {
                if w[1].acc_ut < w[0].acc_ut || w[1].acc_st > w[0].acc_st {
                    problems.push(format!("seed {} {variant}: not monotone at gamma {}", r.seed, w[1].gamma));
                    break;
                }
            }
            let first = curve.first().unwrap();
            let last = curve.last().unwrap();
            if first.acc_ut != 0.0 || last.acc_st != 0.0 {
                problems.push(format!("seed {} {variant}: grid does not reach both ends", r.seed));
            }
        }
    }
    let exact = Outcome::check(
        problems.is_empty(),
        if problems.is_empty() {
            format!("{curves} curves: gamma=0 equals direct stacking, U->T non-decreasing, S->T non-increasing")
        } else {
            problems.join("; ")
        },
    );
    let full = mean(runs.iter().map(|r| r.rows[&Variant::SpAen].metrics.ausuc));
    let base = mean(runs.iter().map(|r| r.rows[&Variant::ClsOnly].metrics.ausuc));
    let per_seed: Vec<String> = runs
        .iter()
        .map(|r| {
            format!(
                "{:.3}/{:.3}",
                r.rows[&Variant::SpAen].metrics.ausuc,
                r.rows[&Variant::ClsOnly].metrics.ausuc
            )
        })
        .collect();
    let order = Outcome::check(
        full >= base,
        format!("mean AUSUC full {full:.3} vs cls-only {base:.3} (per seed {})", per_seed.join(", ")),
    );
    (exact, order)
}

fn criterion_10() -> Outcome {
    let Some(root) = std::env::var_os("SPAEN_BENCHMARK_ATTRIBUTES").map(PathBuf::from) else {
        return Outcome::skip("SPAEN_BENCHMARK_ATTRIBUTES not set");
    };
    let expected = [("SUN", 0.9851), ("CUB", 0.9575), ("AWA", 0.7459), ("aPY", 0.5847)];
    let mut parts = Vec::new();
    let mut pass = true;
    let mut found = 0;
    for (name, want) in expected {
        let dir = root.join(name);
        let (classes, splits) = (dir.join("classes.csv"), dir.join("splits.csv"));
        if !classes.exists() || !splits.exists() {
            parts.push(format!("{name} absent"));
            continue;
        }
        found += 1;
        let args = AnalyzeArgs {
            dataset: None,
            classes: Some(classes),
            splits: Some(splits),
            out: std::env::temp_dir(),
            mode: "image".into(),
        };
        match analyze_attributes(&args) {
            Ok((_, _, cos)) => {
                pass &= (cos - want).abs() <= 1e-3;
                parts.push(format!("{name} {cos:.4} (want {want})"));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{name}: {e}"));
            }
        }
    }
    if found == 0 {
        return Outcome::skip(format!("no benchmark tables under {}", root.display()));
    }
    Outcome::check(pass, parts.join(", "))
}

fn report(id: &str, name: &str, outcome: &Outcome, started: Instant) -> Option<bool> {
    let tag = match outcome.pass {
        Some(true) => "PASS",
        Some(false) => "FAIL",
        None => "SKIP",
    };
    println!(
        "{tag} [{id}] {name}: {} ({:.1}s)",
        outcome.detail,
        started.elapsed().as_secs_f64()
    );
    outcome.pass
}

fn main() {
    // `cargo test` passes harness flags such as `--list` or a filter; the
    // suite runs as a whole and ignores them, except listing
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1");
    let epochs: usize = std::env::var("ACCEPTANCE_EPOCHS")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(ACCEPTANCE_EPOCHS);
    let mut hard_failures = 0;
    let mut soft_failures = 0;
    let mut hard = |r: Option<bool>| hard_failures += usize::from(r == Some(false));

    let t = Instant::now();
    hard(report("1", "harmonic mean vs printed H", &criterion_1(), t));
    let t = Instant::now();
    hard(report("2", "finite-difference gradients", &criterion_2(), t));
    let t = Instant::now();
    hard(report("3", "no unseen-class reads in training", &criterion_3(), t));
    let t = Instant::now();
    hard(report("4", "critic weights stay clipped", &criterion_4(), t));
    let t = Instant::now();
    hard(report("5", "gradient partition", &criterion_5(), t));
    let t = Instant::now();
    hard(report("9", "brute-force metric oracles", &criterion_9(), t));

    let t = Instant::now();
    println!("      training 5 variants x 3 seeds, {epochs} epochs each");
    let runs = comparison_runs(epochs);
    println!("      comparison runs took {:.0}s", t.elapsed().as_secs_f64());
    let mut soft = |r: Option<bool>| soft_failures += usize::from(r == Some(false));
    soft(report("6", "full model beats cls-only (U->T, H)", &criterion_6(&runs), t));
    soft(report("7", "reconstruction MSE full < sae", &criterion_7(&runs), t));
    let t = Instant::now();
    let (exact, order) = criterion_8(&runs);
    hard(report("8a", "SUC sweep properties", &exact, t));
    soft(report("8b", "AUSUC full >= cls-only", &order, t));
    let t = Instant::now();
    hard(report("10", "variance cosine on benchmark attributes", &criterion_10(), t));

    println!("acceptance: {hard_failures} correctness failures, {soft_failures} directional failures");
    if hard_failures > 0 || (strict && soft_failures > 0) {
        std::process::exit(1);
    }
}

const ACCEPTANCE_EPOCHS: usize = 20;
