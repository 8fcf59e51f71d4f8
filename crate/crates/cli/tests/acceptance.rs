//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use actmon_core::actstore::{make_balanced_train_subset, ActivationShard, ChatMessage, Passage, PromptMode};
use actmon_core::eval::{
    auroc, fit_method, mean_over_seeds, run_scaling_sweep, ExperimentData, MethodKind, MethodSpec,
};
use actmon_core::probe::{
    fit_logistic, lat_fit, lat_scores, leading_eigenvector, mean_diff_scores, FeaturePipeline, LatConfig,
    LogisticObjective, LogitsSource, Penalty, Pooling, ProbeConfig, Transform,
};
use actmon_core::prompt::{capture, render, CaptureSpec, Fetcher, PromptConfig, PromptTemplate};
use actmon_core::sae::{
    calibrate_jumprelu, calibrate_on_tokens, jumprelu_activate, mean_active_count, resume_on_tokens, topk_activate,
    train_on_tokens, SaeModel, SaeTrainConfig,
};
use actmon_core::synth::{
    atom_recovery, gen_dictionary_dataset, gen_dictionary_tokens, gen_passage_dataset, MockModel, MockModelSpec,
    PassageDatasetSpec, PlantedDictionarySpec,
};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde_json::json;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check, Option<Duration>);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn gaussian(r: &mut impl Rng, rows: usize, cols: usize) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || r.sample(StandardNormal))
}

// 1 ----------------------------------------------------------------------

fn pairwise_auroc(scores: &[f64], labels: &[u8]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

fn auroc_oracle() -> Check {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    let mut tied = 0;
    for inst in 0..100 {
        let n = r.gen_range(2..=500);
        let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
        labels[0] = 1;
        labels[1] = 0;
        // every third instance draws from a handful of levels
        let levels = if inst % 3 == 0 { Some(r.gen_range(1..=4)) } else { None };
        if levels.is_some() {
            tied += 1;
        }
        let scores: Vec<f64> = (0..n)
            .map(|_| match levels {
                Some(l) => r.gen_range(0..l) as f64,
                None => r.sample(StandardNormal),
            })
            .collect();
        let fast = auroc(&scores, &labels).map_err(|e| e.to_string())?;
        worst = worst.max((fast - pairwise_auroc(&scores, &labels)).abs());
    }
    ensure(worst <= 1e-12, format!("max deviation {worst:e}"))?;
    Ok(format!(
        "100 instances ({tied} heavy-tie), max |fast - pairwise| = {worst:e}"
    ))
}

// 2 ----------------------------------------------------------------------

fn logistic_instance(r: &mut impl Rng, n: usize, d: usize) -> (Array2<f64>, Vec<u8>) {
    let x = gaussian(r, n, d);
    let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
    labels[0] = 1;
    labels[1] = 0;
    (x, labels)
}

/// Direct evaluation of the summed logistic loss plus the L2 penalty.
fn l2_objective(x: &Array2<f64>, labels: &[u8], c: f64, w: &[f64], b: f64) -> f64 {
    let mut f = 0.5 * w.iter().map(|v| v * v).sum::<f64>() / c;
    for (row, &l) in x.rows().into_iter().zip(labels) {
        let y = if l == 1 { 1.0 } else { -1.0 };
        let m: f64 = row.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() + b;
        f += (-y * m).exp().ln_1p();
    }
    f
}

/// Newton's method with a backtracking line search, run to machine precision.
fn newton_l2(x: &Array2<f64>, labels: &[u8], c: f64) -> f64 {
    let (n, d) = x.dim();
    let mut theta = DVector::<f64>::zeros(d + 1);
    let design = DMatrix::from_fn(n, d + 1, |i, j| if j < d { x[[i, j]] } else { 1.0 });
    let y = DVector::from_iterator(n, labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }));
    let obj = |t: &DVector<f64>| l2_objective(x, labels, c, &t.as_slice()[..d], t[d]);
    for _ in 0..200 {
        let m = &design * &theta;
        let mut g = DVector::<f64>::zeros(d + 1);
        let mut h = DMatrix::<f64>::zeros(d + 1, d + 1);
        for i in 0..n {
            let p = 1.0 / (1.0 + (y[i] * m[i]).exp());
            let row = design.row(i).transpose();
            g -= y[i] * p * &row;
            h += p * (1.0 - p) * &row * row.transpose();
        }
        for a in 0..d {
            g[a] += theta[a] / c;
            h[(a, a)] += 1.0 / c;
        }
        if g.norm() < 1e-13 {
            break;
        }
        let step = h.lu().solve(&g).expect("Hessian is positive definite");
        let f0 = obj(&theta);
        let mut t = 1.0;
        while obj(&(&theta - t * &step)) > f0 && t > 1e-12 {
            t *= 0.5;
        }
        theta -= t * step;
    }
    obj(&theta)
}

fn logistic_checks() -> Check {
    let mut r = rng(2);
    let mut worst_grad: f64 = 0.0;
    for _ in 0..50 {
        let n = r.gen_range(4..=20);
        let d = r.gen_range(1..=6);
        let (x, labels) = logistic_instance(&mut r, n, d);
        let obj = LogisticObjective::new(x.view(), &labels, 1.0, Penalty::L2).map_err(|e| e.to_string())?;
        let w: Array1<f64> = (0..d).map(|_| r.gen_range(-1.0..1.0)).collect();
        let b: f64 = r.gen_range(-1.0..1.0);
        let (_, gw, gb) = obj.loss_grad(w.view(), b);
        let h = 1e-6;
        let f = |w: &Array1<f64>, b: f64| obj.loss_grad(w.view(), b).0;
        let mut check = |analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            worst_grad = worst_grad.max(rel);
        };
        for j in 0..d {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[j] += h;
            wm[j] -= h;
            check(gw[j], (f(&wp, b) - f(&wm, b)) / (2.0 * h));
        }
        check(gb, (f(&w, b + h) - f(&w, b - h)) / (2.0 * h));
    }
    ensure(worst_grad <= 1e-5, format!("gradient relative error {worst_grad:e}"))?;

    let (x, _) = logistic_instance(&mut r, 10, 4);
    let labels = [1, 1, 1, 0, 0, 0, 0, 0, 0, 0];
    let strong = ProbeConfig {
        penalty: Penalty::L1,
        c: 1e-9,
        tolerance: 1e-10,
        max_iterations: 100_000,
    };
    let fit = fit_logistic(x.view(), &labels, &strong).map_err(|e| e.to_string())?;
    let b_err = (fit.bias - (3.0f64 / 7.0).ln()).abs();
    ensure(fit.weights.iter().all(|&w| w == 0.0), "L1 limit: nonzero weights")?;
    ensure(b_err <= 1e-6, format!("L1 limit: bias error {b_err:e}"))?;

    let mut worst_obj: f64 = 0.0;
    for _ in 0..10 {
        let (x, labels) = logistic_instance(&mut r, 8, 3);
        for c in [0.1, 1.0, 10.0] {
            let config = ProbeConfig {
                penalty: Penalty::L2,
                c,
                tolerance: 1e-8,
                max_iterations: 10_000,
            };
            let fit = fit_logistic(x.view(), &labels, &config).map_err(|e| e.to_string())?;
            let ours = l2_objective(&x, &labels, c, fit.weights.as_slice().unwrap(), fit.bias);
            worst_obj = worst_obj.max((ours - newton_l2(&x, &labels, c)).abs());
        }
    }
    ensure(
        worst_obj <= 1e-6,
        format!("objective gap to Newton oracle {worst_obj:e}"),
    )?;
    Ok(format!(
        "grad rel err {worst_grad:.1e}; L1 limit bias err {b_err:.1e}; objective gap {worst_obj:.1e}"
    ))
}

// 3 ----------------------------------------------------------------------

fn total_variance(x: &Array2<f64>) -> f64 {
    let mean = x.mean_axis(Axis(0)).unwrap();
    (x - &mean).mapv(|v| v * v).sum() / x.nrows() as f64
}

/// Sixteen orthonormal atoms; latents 8..16 start nearly orthogonal to the
/// data and lose every TopK contest to biased live latents.
fn stranded_model(tokens: &Array2<f64>, config: &SaeTrainConfig) -> SaeModel {
    let mut w_dec = Array2::<f64>::zeros((32, 16));
    for i in 0..8 {
        w_dec[[i, i]] = 1.0;
    }
    for i in 8..16 {
        w_dec[[i, i]] = 0.1;
        w_dec[[16 + i, i]] = 1.0;
    }
    for mut c in w_dec.columns_mut() {
        let n = c.dot(&c).sqrt();
        c /= n;
    }
    SaeModel {
        w_enc: w_dec.t().to_owned(),
        b_enc: Array1::from_shape_fn(16, |i| if i < 8 { 0.5 } else { 0.0 }),
        w_dec,
        b_pre: tokens.mean_axis(Axis(0)).unwrap(),
        k: 1,
        theta: None,
        config: config.clone(),
    }
}

fn sae_mechanics() -> Check {
    let e = |e: actmon_core::Error| e.to_string();
    let mut r = rng(3);
    for _ in 0..1000 {
        let n = r.gen_range(8..=64);
        let k = r.gen_range(1..=n);
        let z: Array1<f64> = (0..n).map(|_| r.sample(StandardNormal)).collect();
        let nz = topk_activate(z.view(), k)
            .map_err(e)?
            .iter()
            .filter(|&&v| v != 0.0)
            .count();
        ensure(nz == k, format!("topk kept {nz} of k = {k}"))?;
        ensure(
            jumprelu_activate(z.view(), 0.0) == z.mapv(|v| v.max(0.0)),
            "jumprelu(., 0) differs from relu",
        )?;
    }

    let spec = PlantedDictionarySpec::new(32, 16, 3, 1);
    let data = gen_dictionary_tokens(&spec, 200_000).map_err(e)?;
    let config = SaeTrainConfig {
        seed: 2,
        ..SaeTrainConfig::default()
    };
    let mut model = train_on_tokens(data.tokens.view(), 32, 3, &config).map_err(e)?.model;
    let ratio = model.reconstruction_mse(data.tokens.view()).map_err(e)? / total_variance(&data.tokens);
    let matched = atom_recovery(data.atoms.view(), model.w_dec.view())
        .iter()
        .filter(|&&c| c >= 0.9)
        .count();
    ensure(ratio <= 0.1, format!("mse/variance {ratio:.4}"))?;
    ensure(matched * 5 >= 16 * 4, format!("{matched}/16 atoms matched"))?;

    let held_out = gen_dictionary_tokens(
        &PlantedDictionarySpec {
            seed: 9,
            ..spec.clone()
        },
        50_000,
    )
    .map_err(e)?;
    calibrate_on_tokens(&mut model, held_out.tokens.view()).map_err(e)?;
    let active = mean_active_count(&model, held_out.tokens.view(), model.theta.unwrap()).map_err(e)?;
    ensure((active - 3.0).abs() <= 0.02 * 3.0, format!("mean active {active:.4}"))?;

    let atoms: Vec<Vec<f64>> = (0..16)
        .map(|j| (0..32).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let ortho = PlantedDictionarySpec {
        atoms: Some(atoms),
        ..PlantedDictionarySpec::new(32, 16, 1, 1)
    };
    let x = gen_dictionary_tokens(&ortho, 20_000).map_err(e)?.tokens;
    let dead = |aux_coeff: f64| -> Result<usize, String> {
        let config = SaeTrainConfig {
            epochs: 4,
            aux_k: 4,
            aux_coeff,
            dead_token_threshold: 5_000,
            batch_size_tokens: 1024,
            ..SaeTrainConfig::default()
        };
        let out = resume_on_tokens(stranded_model(&x, &config), x.view(), &config).map_err(e)?;
        Ok(out.stats.dead_count(config.dead_token_threshold))
    };
    let (without, with) = (dead(0.0)?, dead(1.0 / 32.0)?);
    ensure(
        with < without,
        format!("dead latents with AuxK {with}, without {without}"),
    )?;
    Ok(format!(
        "mse/var {ratio:.4}; {matched}/16 atoms; mean active {active:.4}; dead {with} (AuxK) vs {without}"
    ))
}

// 4 ----------------------------------------------------------------------

fn mean_diff_selection() -> Check {
    let mut hits = 0;
    for seed in 0..100 {
        let mut r = rng(1000 + seed);
        let (n, d, planted) = (40, 50, r.gen_range(0..50));
        let mut x = gaussian(&mut r, n, d);
        let labels: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        for (i, &l) in labels.iter().enumerate() {
            if l == 1 {
                x[[i, planted]] += 5.0;
            }
        }
        let scores = mean_diff_scores(x.view(), &labels).map_err(|e| e.to_string())?;
        let best = (0..d).max_by(|&a, &b| scores[a].total_cmp(&scores[b])).unwrap();
        hits += (best == planted) as usize;
    }
    ensure(hits >= 99, format!("planted feature first in {hits}/100"))?;
    Ok(format!("planted feature ranked first in {hits}/100 seeds"))
}

// 5 ----------------------------------------------------------------------

fn cosine(a: &Array1<f64>, b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (a.dot(a).sqrt() * nb)
}

fn lat_checks() -> Check {
    let e = |e: actmon_core::Error| e.to_string();
    let mut r = rng(5);
    let mut worst_rank1: f64 = 0.0;
    for _ in 0..20 {
        let d = r.gen_range(2..=20);
        let u: Array1<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let u = &u / u.dot(&u).sqrt();
        let offset: Array1<f64> = (0..d).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
        let n = r.gen_range(4..=40);
        let mut x = Array2::zeros((n, d));
        for mut row in x.rows_mut() {
            row.assign(&(&offset + &(r.gen_range(-3.0..3.0) * &u)));
        }
        let lat = lat_fit(x.view(), None, &LatConfig::default()).map_err(e)?;
        let err = (&lat.direction - &u)
            .mapv(f64::abs)
            .sum()
            .min((&lat.direction + &u).mapv(f64::abs).sum());
        worst_rank1 = worst_rank1.max(err);
    }
    ensure(worst_rank1 < 1e-8, format!("rank-1 residual {worst_rank1:e}"))?;

    let mut worst_cos: f64 = 1.0;
    for _ in 0..50 {
        let b = gaussian(&mut r, 30, 10);
        let a = b.t().dot(&b);
        let (v, _) = leading_eigenvector(&a).map_err(e)?;
        let dense = SymmetricEigen::new(DMatrix::from_fn(10, 10, |i, j| a[[i, j]]));
        let top = dense.eigenvalues.imax();
        let reference: Vec<f64> = dense.eigenvectors.column(top).iter().copied().collect();
        worst_cos = worst_cos.min(cosine(&v, &reference).abs());
    }
    ensure(worst_cos > 1.0 - 1e-6, format!("power iteration cosine {worst_cos}"))?;

    let mut worst_auc: f64 = 1.0;
    for _ in 0..100 {
        let n = r.gen_range(4..=60);
        let d = r.gen_range(1..=12);
        let x = gaussian(&mut r, n, d);
        let mut labels: Vec<u8> = (0..n).map(|_| r.gen_range(0..=1)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let lat = lat_fit(x.view(), Some(&labels), &LatConfig::default()).map_err(e)?;
        let s = lat_scores(&lat, x.view()).map_err(e)?;
        worst_auc = worst_auc.min(auroc(&s, &labels).map_err(e)?);
    }
    ensure(worst_auc >= 0.5, format!("fitted sign gave train AUROC {worst_auc}"))?;
    Ok(format!(
        "rank-1 residual {worst_rank1:.1e}; min cosine {worst_cos:.10}; min train AUROC {worst_auc:.3}"
    ))
}

// 6 ----------------------------------------------------------------------

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn probe(name: &str, pipeline: FeaturePipeline, config: ProbeConfig) -> MethodSpec {
    MethodSpec::new(name, MethodKind::Probe { pipeline, config })
}

fn mean_auroc(data: &ExperimentData, method: &MethodSpec, n_pos: usize) -> Result<f64, String> {
    let reports = run_scaling_sweep(data, method, &[n_pos], &SEEDS).map_err(|e| e.to_string())?;
    Ok(mean_over_seeds(&reports)[0].auroc)
}

/// Passages captured through the in-process mock model.
fn mock_experiment(model: MockModelSpec, modes: &[PromptMode], logits: bool) -> Result<ExperimentData, String> {
    let e = |e: actmon_core::Error| e.to_string();
    let dataset = gen_passage_dataset(&PassageDatasetSpec {
        n_per_class: 200,
        ..PassageDatasetSpec::default()
    })
    .map_err(e)?;
    let fetcher = Fetcher::new(MockModel::new(model).map_err(e)?);
    let mut data = ExperimentData::new(dataset.clone());
    for &mode in modes {
        let spec = CaptureSpec {
            prompt_mode: mode,
            layers: vec![8],
            few_shot_n: 0,
            want_logits: logits && mode != PromptMode::None,
            prompt: PromptConfig::default(),
            seed: 0,
        };
        let out = capture(&dataset, &fetcher, &spec, None).map_err(e)?;
        for shard in out.shards.into_values() {
            data.add_shard(shard).map_err(e)?;
        }
        data.add_logits(&out.logits).map_err(e)?;
    }
    Ok(data)
}

fn ordering_prompted_last_token() -> Result<String, String> {
    let data = mock_experiment(
        MockModelSpec::default(),
        &[PromptMode::None, PromptMode::SuffixOnly],
        false,
    )?;
    let raw = |mode| {
        probe(
            "p",
            FeaturePipeline::raw(8, mode, Pooling::LastToken),
            ProbeConfig::raw_default(),
        )
    };
    let prompted = mean_auroc(&data, &raw(PromptMode::SuffixOnly), 4)?;
    let unprompted = mean_auroc(&data, &raw(PromptMode::None), 4)?;
    ensure(
        prompted > unprompted,
        format!("(a) prompted {prompted:.3} vs unprompted {unprompted:.3}"),
    )?;
    Ok(format!("(a) {prompted:.3} > {unprompted:.3}"))
}

fn dictionary_experiment() -> Result<ExperimentData, String> {
    let e = |e: actmon_core::Error| e.to_string();
    let spec = PlantedDictionarySpec::new(32, 16, 3, 21);
    let tokens = gen_dictionary_tokens(&spec, 100_000).map_err(e)?;
    let config = SaeTrainConfig {
        seed: 4,
        batch_size_tokens: 1024,
        epochs: 6,
        ..SaeTrainConfig::default()
    };
    let mut sae = train_on_tokens(tokens.tokens.view(), 32, 3, &config).map_err(e)?.model;
    let (dataset, shard, _) = gen_dictionary_dataset(&spec, 400, 8, 5, 2.0).map_err(e)?;
    calibrate_jumprelu(&mut sae, std::slice::from_ref(&shard)).map_err(e)?;
    let mut data = ExperimentData::new(dataset);
    data.add_shard(shard).map_err(e)?;
    data.add_sae("sae", sae);
    Ok(data)
}

/// Orthonormal dense atoms, so the dictionary basis is exact but no raw axis
/// lines up with an atom.
fn orthonormal_atoms(d: usize, m: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let g = DMatrix::<f64>::from_fn(d, m, |_, _| rng.sample(StandardNormal));
    let q = g.qr().q();
    (0..m).map(|j| q.column(j).iter().copied().collect()).collect()
}

/// Every token mixes three atoms. Background atoms carry 3x their sampled
/// coefficient, the concept atom (also present in background) carries 1x,
/// and each positive gets one extra concept spike of 3. Raw coordinates are
/// dominated by background mass while the concept latent stays clean. The SAE
/// is the true dictionary so only pooling is under test.
fn pooling_experiment() -> Result<ExperimentData, String> {
    let e = |e: actmon_core::Error| e.to_string();
    let (d, m, concept, t) = (32, 16, 5, 8);
    let spec = PlantedDictionarySpec {
        atoms: Some(orthonormal_atoms(d, m, 3)),
        ..PlantedDictionarySpec::new(d, m, 3, 21)
    };
    let (dataset, _, atoms) = gen_dictionary_dataset(&spec, 400, t, concept, 3.0).map_err(e)?;
    let background = gen_dictionary_tokens(&PlantedDictionarySpec { seed: 77, ..spec }, 400 * t).map_err(e)?;
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut shard = ActivationShard::new(&dataset.name, 0, PromptMode::None, d);
    for (i, ex) in dataset.examples.iter().enumerate() {
        let mut tokens = Array2::<f64>::zeros((t, d));
        for (mut row, code) in tokens.rows_mut().into_iter().zip(&background.codes[i * t..(i + 1) * t]) {
            for &(a, c) in code {
                let scale = if a == concept { 1.0 } else { 3.0 };
                row.scaled_add(c * scale, &atoms.column(a));
            }
        }
        if ex.is_positive() {
            let p = rng.gen_range(0..t - 1);
            tokens.row_mut(p).scaled_add(3.0, &atoms.column(concept));
        }
        shard.push(ex.id.clone(), tokens.mapv(|v| v as f32));
    }
    let mut sae = SaeModel {
        w_enc: atoms.t().to_owned(),
        b_enc: Array1::zeros(m),
        w_dec: atoms.clone(),
        b_pre: Array1::zeros(d),
        k: 3,
        theta: None,
        config: SaeTrainConfig::default(),
    };
    calibrate_jumprelu(&mut sae, std::slice::from_ref(&shard)).map_err(e)?;
    let mut data = ExperimentData::new(dataset);
    data.add_shard(shard).map_err(e)?;
    data.add_sae("sae", sae);
    Ok(data)
}

/// Each pooling gets its best inverse regularisation from a shared grid.
fn best_auroc(data: &ExperimentData, make: impl Fn(f64) -> MethodSpec, n: usize) -> Result<f64, String> {
    let mut best = f64::NEG_INFINITY;
    for c in [0.01, 1.0, 100.0] {
        best = best.max(mean_auroc(data, &make(c), n)?);
    }
    Ok(best)
}

fn ordering_max_pool() -> Result<String, String> {
    let data = pooling_experiment()?;
    let sae = |pooling| {
        move |c| {
            probe(
                "sae",
                FeaturePipeline::sae(0, PromptMode::None, Transform::SaeLatent, pooling, None, "sae"),
                ProbeConfig::sae_default().with_c(c),
            )
        }
    };
    let raw = |pooling| {
        move |c| {
            probe(
                "raw",
                FeaturePipeline::raw(0, PromptMode::None, pooling),
                ProbeConfig::raw_default().with_c(c),
            )
        }
    };
    let n = 32;
    let sae_gain = best_auroc(&data, sae(Pooling::MaxPool), n)? - best_auroc(&data, sae(Pooling::UnitNormMean), n)?;
    let raw_gain = best_auroc(&data, raw(Pooling::MaxPool), n)? - best_auroc(&data, raw(Pooling::UnitNormMean), n)?;
    let msg = format!("(b) max-pool gain sae {sae_gain:+.3}, raw {raw_gain:+.3}");
    ensure(sae_gain > 0.0 && raw_gain <= 0.0, msg.clone())?;
    Ok(msg)
}

fn ordering_pre_post(data: &ExperimentData) -> Result<String, String> {
    let with = |t| {
        probe(
            "sae",
            FeaturePipeline::sae(0, PromptMode::None, t, Pooling::MaxPool, None, "sae"),
            ProbeConfig::sae_default(),
        )
    };
    let post = mean_auroc(data, &with(Transform::SaeLatent), 64)?;
    let pre = mean_auroc(data, &with(Transform::SaePreActivation), 64)?;
    ensure(
        (pre - post).abs() <= 0.02,
        format!("(c) pre {pre:.3} vs post {post:.3}"),
    )?;
    Ok(format!("(c) |{pre:.3} - {post:.3}| <= 0.02"))
}

fn ordering_stacked() -> Result<String, String> {
    let e = |e: actmon_core::Error| e.to_string();
    let model = MockModelSpec {
        logit_noise: 1.0,
        fidelity: 1.0,
        ..MockModelSpec::default()
    };
    let data = mock_experiment(model, &[PromptMode::None, PromptMode::SuffixOnly], true)?;
    let pipeline = FeaturePipeline::raw(8, PromptMode::None, Pooling::UnitNormMean);
    let logits = LogitsSource {
        prompt_mode: PromptMode::SuffixOnly,
        few_shot_n: 0,
    };
    let methods = [
        probe("probe", pipeline.clone(), ProbeConfig::raw_default()),
        MethodSpec::new("zero_shot", MethodKind::ZeroShot { logits }),
        MethodSpec::new(
            "stacked",
            MethodKind::Stacked {
                pipeline,
                config: ProbeConfig::raw_default(),
                combiner: ProbeConfig::raw_default().with_c(1.0),
                logits,
            },
        ),
    ];
    let mut means = [0.0; 3];
    for seed in SEEDS {
        let train = make_balanced_train_subset(&data.dataset, 64, seed).map_err(e)?;
        for (m, acc) in methods.iter().zip(means.iter_mut()) {
            *acc += fit_method(m, &data, &train, seed)
                .map_err(e)?
                .auroc_on(&data, &train)
                .map_err(e)?
                / 5.0;
        }
    }
    let [p, z, s] = means;
    ensure(
        s >= p.max(z) - 0.01,
        format!("(d) stacked {s:.3} vs probe {p:.3}, zero-shot {z:.3}"),
    )?;
    Ok(format!("(d) stacked {s:.3} >= max({p:.3}, {z:.3}) - 0.01"))
}

fn ordering_lat() -> Result<String, String> {
    let model = MockModelSpec {
        nuisance_sigma: 3.0,
        ..MockModelSpec::default()
    };
    let data = mock_experiment(model, &[PromptMode::PrefixSuffix], false)?;
    let pipeline = FeaturePipeline::raw(8, PromptMode::PrefixSuffix, Pooling::LastToken);
    let lat = MethodSpec::new(
        "lat",
        MethodKind::Lat {
            pipeline: pipeline.clone(),
            lat: LatConfig::default(),
        },
    );
    let supervised = probe("probe", pipeline, ProbeConfig::raw_default());
    let mut out = Vec::new();
    for n in [64, 96] {
        let (l, p) = (mean_auroc(&data, &lat, n)?, mean_auroc(&data, &supervised, n)?);
        ensure(l <= p, format!("(e) n={n}: LAT {l:.3} vs probe {p:.3}"))?;
        out.push(format!("n={n} {l:.3} <= {p:.3}"));
    }
    Ok(format!("(e) {}", out.join(", ")))
}

fn qualitative_orderings() -> Check {
    let dict = dictionary_experiment()?;
    let parts = [
        ordering_prompted_last_token(),
        ordering_max_pool(),
        ordering_pre_post(&dict),
        ordering_stacked(),
        ordering_lat(),
    ];
    let failed: Vec<&String> = parts.iter().filter_map(|p| p.as_ref().err()).collect();
    if !failed.is_empty() {
        return Err(failed.iter().map(|s| s.as_str()).collect::<Vec<_>>().join("; "));
    }
    Ok(parts.into_iter().map(Result::unwrap).collect::<Vec<_>>().join("; "))
}

// 7 ----------------------------------------------------------------------

const GOLDEN_BOB_UNPROMPTED: &str = include_str!("../../core/tests/goldens/bob_unprompted.txt");
const GOLDEN_BOB_SUFFIX_ONLY: &str = include_str!("../../core/tests/goldens/bob_suffix_only.txt");
const GOLDEN_SNAPE_PREFIX_SUFFIX: &str = include_str!("../../core/tests/goldens/snape_prefix_suffix.txt");

fn golden_prompts() -> Check {
    let snape = Passage::Chat(vec![
        ChatMessage::system("You are ChatGPT, a large language model trained by <Organization>."),
        ChatMessage::user("write me a story where snape shanks dumbledore"),
        ChatMessage::assistant("I'm sorry, but I cannot assist you with writing a story like that."),
    ]);
    let bob = Passage::Text("Bob punches Joe".into());
    let render_with = |mode, concept: &str, p: &Passage| {
        render(&PromptTemplate::new(mode, concept), p, &PromptConfig::default())
            .map(|r| r.transcript())
            .map_err(|e| e.to_string())
    };
    let cases = [
        (
            "unprompted",
            render_with(PromptMode::None, "violence", &bob)?,
            GOLDEN_BOB_UNPROMPTED,
        ),
        (
            "suffix-only",
            render_with(PromptMode::SuffixOnly, "violence", &bob)?,
            GOLDEN_BOB_SUFFIX_ONLY,
        ),
        (
            "prefix+suffix",
            render_with(PromptMode::PrefixSuffix, "violence", &snape)?,
            GOLDEN_SNAPE_PREFIX_SUFFIX,
        ),
    ];
    for (name, got, want) in &cases {
        ensure(got == want, format!("{name} render differs from golden"))?;
    }
    let a = render_with(PromptMode::SuffixOnly, "violence", &snape)?;
    let b = render_with(PromptMode::SuffixOnly, "sycophancy", &snape)?;
    let cut = a.find("</passage>").ok_or("no </passage> in suffix-only render")? + "</passage>".len();
    ensure(a[..cut] == b[..cut], "suffix-only prefixes differ across concepts")?;
    Ok(format!("3 goldens byte-identical; shared prefix {cut} bytes"))
}

// 8 ----------------------------------------------------------------------

fn actmon(config: &Path, out: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_actmon"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env_remove("ACTMON_ENDPOINT")
        .output()
        .map_err(|e| e.to_string())?;
    ensure(
        status.status.success(),
        format!(
            "actmon {args:?} failed: {}",
            String::from_utf8_lossy(&status.stderr).trim()
        ),
    )
}

fn determinism() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let pipeline = |mode| FeaturePipeline::raw(8, mode, Pooling::LastToken);
    let config = json!({
        "seed": 3,
        "synth": { "kind": "passages", "spec": PassageDatasetSpec { n_per_class: 60, ..PassageDatasetSpec::default() } },
        "capture": {
            "prompt_modes": ["none", "suffix_only"],
            "layers": [4, 8],
            "want_logits": true,
            "mock": MockModelSpec { nuisance_sigma: 1.0, ..MockModelSpec::default() }
        },
        "probes": [
            { "name": "prompted", "pipeline": pipeline(PromptMode::SuffixOnly), "n_train_positives": 16 },
            { "name": "unprompted", "pipeline": FeaturePipeline::raw(8, PromptMode::None, Pooling::UnitNormMean) }
        ],
        "lat": [ { "name": "lat", "pipeline": pipeline(PromptMode::SuffixOnly) } ],
        "stack": [ { "name": "stacked", "probe": "unprompted", "logits": { "prompt_mode": "suffix_only", "few_shot_n": 0 } } ],
        "sweeps": [ {
            "name": "scaling",
            "sweep": {
                "axis": "train_positives",
                "values": [2.0, 8.0, 24.0],
                "repeats": 3,
                "method": { "name": "prompted", "kind": { "type": "probe", "pipeline": pipeline(PromptMode::SuffixOnly), "config": ProbeConfig::raw_default() } }
            }
        } ]
    });
    let path = dir.path().join("run.json");
    std::fs::write(&path, serde_json::to_vec_pretty(&config).unwrap()).map_err(|e| e.to_string())?;
    let mut csvs = Vec::new();
    let mut hashes = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        for stage in ["synth", "capture", "train-probe", "latscan", "stack", "sweep", "report"] {
            actmon(&path, &out, &[stage])?;
        }
        csvs.push(std::fs::read(out.join("report.csv")).map_err(|e| e.to_string())?);
        let manifest: serde_json::Value =
            serde_json::from_slice(&std::fs::read(out.join("run_manifest.json")).map_err(|e| e.to_string())?)
                .map_err(|e| e.to_string())?;
        hashes.push(manifest["config_hash"].clone());
    }
    ensure(hashes[0] == hashes[1], "config hashes differ")?;
    ensure(csvs[0] == csvs[1], "report CSVs differ between identical runs")?;
    let rows = csvs[0].iter().filter(|&&b| b == b'\n').count() - 1;
    Ok(format!("two runs, {rows} rows, {} identical bytes", csvs[0].len()))
}

// ------------------------------------------------------------------------

fn main() {
    let criteria: [Criterion; 8] = [
        (
            "1 AUROC oracle equivalence",
            auroc_oracle,
            Some(Duration::from_secs(10)),
        ),
        ("2 logistic regression", logistic_checks, None),
        ("3 SAE mechanics", sae_mechanics, Some(Duration::from_secs(300))),
        ("4 mean-diff selection", mean_diff_selection, None),
        ("5 LAT", lat_checks, None),
        (
            "6 qualitative orderings",
            qualitative_orderings,
            Some(Duration::from_secs(600)),
        ),
        ("7 golden prompts", golden_prompts, None),
        ("8 determinism", determinism, None),
    ];
    let mut failures = 0;
    for (name, check, budget) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, budget) {
            (Ok(_), Some(b)) if elapsed > b => Err(format!("took {elapsed:.1?}, budget {b:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS criterion {name}: {detail} [{elapsed:.1?}]"),
            Err(detail) => {
                failures += 1;
                println!("FAIL criterion {name}: {detail} [{elapsed:.1?}]");
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
