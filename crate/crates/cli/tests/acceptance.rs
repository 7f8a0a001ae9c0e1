//! Acceptance criteria. Each test prints one `PASS`/`FAIL` line to stderr,
//! bypassing output capture so the lines always show in the test log.

use std::io::Write as _;

use csac::aggregation::{fuse_divergence_weighted, fuse_layerwise, layer_distance, DistanceMetric, FusionStrategy};
use csac::analysis::{gap_ratio_by_layer, parameter_distance_study, StudyInit};
use csac::datasets::{leave_one_domain_out, synthetic_domains, synthetic_domains_with, SyntheticConfig};
use csac::federation::{run_csac_audited, Method, TrainingConfig};
use csac::losses::{
    attention_weights, calibration_loss, calibration_objective, mmd, mmd_with_grad, smooth_labels, smoothed_ce,
    smoothed_ce_grad, AttentionMatrix, CalibrationSettings, KernelConfig, SmoothedLabel,
};
use csac::models::{build_projection, Cnn, CnnArch, FeatureTap, ParameterTree};
use csac::rng::{rng_from, Rng};
use csac::tensor::Tensor;
use csac_cli::{cmd_ablate, cmd_run, read_ablation_csv, DatasetSpec, ExperimentSpec};
use rand::Rng as _;

fn report(n: u32, name: &str, pass: bool, detail: &str) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(std::io::stderr(), "[criterion {n}] {verdict} {name}: {detail}");
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

fn random_tensor(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff = analytic
        .iter()
        .zip(numeric)
        .map(|(a, b)| (a - b).powi(2))
        .sum::<f64>()
        .sqrt();
    let scale = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    diff / scale.max(1e-12)
}

/// Central differences of `f` at `x`.
fn numeric_grad(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut v = x.to_vec();
    (0..x.len())
        .map(|i| {
            v[i] = x[i] + eps;
            let up = f(&v);
            v[i] = x[i] - eps;
            let down = f(&v);
            v[i] = x[i];
            (up - down) / (2.0 * eps)
        })
        .collect()
}

fn scalar_tree(v: &[f64]) -> ParameterTree<f64> {
    let mut t = ParameterTree::new();
    t.insert("l", "w", Tensor::from_vec(&[v.len()], v.to_vec()).unwrap());
    t
}

#[test]
fn criterion_1_formula_suite() {
    let start = std::time::Instant::now();
    let mut fails: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok {
            fails.push(what.to_string());
        }
    };

    let s = smooth_labels(2, 5, 0.1).unwrap();
    let want = [0.02, 0.02, 0.92, 0.02, 0.02];
    check(
        s.probs().iter().zip(want).all(|(a, b)| close(*a, b, 1e-6)),
        "smooth_labels(2,5,0.1)",
    );
    let s = smooth_labels(0, 2, 0.0).unwrap();
    check(s.probs() == [1.0, 0.0], "smooth_labels(0,2,0)");
    check(smooth_labels(5, 5, 0.1).is_err(), "smooth_labels out of range");
    for c in 2..12 {
        for y in 0..c {
            let s = smooth_labels(y, c, 0.3).unwrap();
            check(close(s.probs().iter().sum(), 1.0, 1e-6), "smoothed label sums to 1");
        }
    }
    let logits = Tensor::from_vec(&[1, 2], vec![2.0f64, 0.0]).unwrap();
    let l = smoothed_ce(&logits, &[smooth_labels(0, 2, 0.1).unwrap()]).unwrap();
    let sp = (1.0 + (-2.0f64).exp()).ln();
    check(close(l, 0.95 * sp + 0.05 * (2.0 + sp), 1e-6), "smoothed_ce hand case");
    let uniform = Tensor::from_vec(&[1, 4], vec![0.3f64; 4]).unwrap();
    check(
        close(
            smoothed_ce(&uniform, &[smooth_labels(1, 4, 0.1).unwrap()]).unwrap(),
            4f64.ln(),
            1e-6,
        ),
        "uniform logits give ln 4",
    );

    check(
        close(
            layer_distance(&[0.0f64, 0.0], &[3.0, 4.0], DistanceMetric::L2).unwrap(),
            5.0,
            1e-6,
        ),
        "L2 3-4-5",
    );
    check(
        close(
            layer_distance(&[1.0f64, 0.0], &[0.0, 1.0], DistanceMetric::Cosine).unwrap(),
            1.0,
            1e-6,
        ),
        "cosine orthogonal",
    );
    for m in [DistanceMetric::L2, DistanceMetric::L1, DistanceMetric::Cosine] {
        check(
            close(layer_distance(&[1.5f64, -2.0], &[1.5, -2.0], m).unwrap(), 0.0, 1e-6),
            "self distance",
        );
    }

    let (f, r) = fuse_divergence_weighted(&[scalar_tree(&[2.0]), scalar_tree(&[4.0])], DistanceMetric::L2).unwrap();
    check(close(f.tensor("l", "w").data()[0], 3.0, 1e-6), "fuse [2],[4]");
    check(
        r.layers[0]
            .weights
            .iter()
            .zip([0.5, 0.5])
            .all(|(a, b)| close(*a, b, 1e-6)),
        "weights (0.5,0.5)",
    );
    let trees = [scalar_tree(&[0.0]), scalar_tree(&[0.0]), scalar_tree(&[6.0])];
    let (f, r) = fuse_divergence_weighted(&trees, DistanceMetric::L2).unwrap();
    check(close(f.tensor("l", "w").data()[0], 3.0, 1e-6), "fuse [0],[0],[6]");
    check(
        r.layers[0]
            .weights
            .iter()
            .zip([0.25, 0.25, 0.5])
            .all(|(a, b)| close(*a, b, 1e-6)),
        "weights (0.25,0.25,0.5)",
    );
    let same = vec![scalar_tree(&[1.25, -3.0]); 3];
    let (f, r) = fuse_divergence_weighted(&same, DistanceMetric::L2).unwrap();
    check(
        f == same[0] && r.layers[0].uniform_fallback,
        "identical trees fall back to uniform",
    );

    check(
        close(calibration_loss(1.0, 2.0, 0.6), 2.6, 1e-6),
        "calibration_loss(1,2,0.6)",
    );
    check(
        close(calibration_loss(1.7, 2.0, 0.0), 2.0, 1e-6),
        "calibration_loss lambda=0",
    );

    // convex hull on random trees
    let mut rng = rng_from(11, &[]);
    for case in 0..100 {
        let h = rng.random_range(2..6);
        let layers = rng.random_range(1..4);
        let sizes: Vec<usize> = (0..layers).map(|_| rng.random_range(1..20)).collect();
        let trees: Vec<ParameterTree<f64>> = (0..h)
            .map(|_| {
                let mut t = ParameterTree::new();
                for (i, &n) in sizes.iter().enumerate() {
                    t.insert(&format!("layer{i}"), "w", random_tensor(&mut rng, &[n], 5.0));
                }
                t
            })
            .collect();
        for strategy in [
            FusionStrategy::Divergence,
            FusionStrategy::Similarity,
            FusionStrategy::Average,
        ] {
            let (fused, rep) = fuse_layerwise(&trees, strategy, DistanceMetric::L2).unwrap();
            let sums_ok = rep.layers.iter().all(|l| close(l.weights.iter().sum(), 1.0, 1e-6));
            check(sums_ok, &format!("case {case} {strategy:?}: weights sum to 1"));
            for (layer, name, t) in fused.tensors() {
                for (k, &v) in t.data().iter().enumerate() {
                    let vals = trees.iter().map(|tr| tr.tensor(layer, name).data()[k]);
                    let lo = vals.clone().fold(f64::INFINITY, f64::min);
                    let hi = vals.fold(f64::NEG_INFINITY, f64::max);
                    check(lo <= v && v <= hi, &format!("case {case} {strategy:?}: convex hull"));
                }
            }
        }
    }

    let pass = fails.is_empty();
    let detail = if pass {
        format!(
            "all examples exact within 1e-6; convexity on 100 random trees ({:.1?})",
            start.elapsed()
        )
    } else {
        format!("{} failures, first: {}", fails.len(), fails[0])
    };
    report(1, "formula suite", pass, &detail);
    assert!(pass, "{detail}");
}

/// Direct O(n^2) kernel sum with its own median heuristic.
fn mmd_oracle(x: &[Vec<f64>], y: &[Vec<f64>], multipliers: &[f64]) -> f64 {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>();
    let pooled: Vec<&Vec<f64>> = x.iter().chain(y).collect();
    let mut d = Vec::new();
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq(pooled[i], pooled[j]));
        }
    }
    d.sort_by(f64::total_cmp);
    let n = d.len();
    let mut med = if n % 2 == 1 {
        d[n / 2]
    } else {
        (d[n / 2 - 1] + d[n / 2]) / 2.0
    };
    if med == 0.0 {
        med = 1.0;
    }
    let mut total = 0.0;
    for &mu in multipliers {
        let s2 = mu * med;
        let k = |a: &[f64], b: &[f64]| (-sq(a, b) / (2.0 * s2)).exp();
        let mean = |p: &[Vec<f64>], q: &[Vec<f64>]| {
            p.iter().flat_map(|a| q.iter().map(move |b| k(a, b))).sum::<f64>() / (p.len() * q.len()) as f64
        };
        total += mean(x, x) + mean(y, y) - 2.0 * mean(x, y);
    }
    total
}

fn rows(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    t.data().chunks(t.row_len()).map(<[f64]>::to_vec).collect()
}

#[test]
fn criterion_2_mmd_suite() {
    let k = KernelConfig::default();
    let mut rng = rng_from(22, &[]);
    let mut worst_oracle = 0.0f64;
    let mut worst_sym = 0.0f64;
    let mut worst_self = 0.0f64;
    for _ in 0..20 {
        let n = rng.random_range(2..12);
        let m = rng.random_range(2..12);
        let d = rng.random_range(1..8);
        let sep = rng.random_range(0.0..6.0);
        let x = random_tensor(&mut rng, &[n, d], 1.0);
        let mut y = random_tensor(&mut rng, &[m, d], 1.0);
        y.data_mut().iter_mut().for_each(|v| *v += sep);
        let v = mmd(&x, &y, &k).unwrap();
        worst_oracle = worst_oracle.max((v - mmd_oracle(&rows(&x), &rows(&y), &k.multipliers)).abs());
        worst_sym = worst_sym.max((v - mmd(&y, &x, &k).unwrap()).abs());
        worst_self = worst_self.max(mmd(&x, &x, &k).unwrap());
    }
    let x = Tensor::from_vec(&[1, 1], vec![0.0f64]).unwrap();
    let y = Tensor::from_vec(&[1, 1], vec![2.0f64]).unwrap();
    let closed = mmd(&x, &y, &KernelConfig::single(1.0)).unwrap();
    let closed_err = (closed - (2.0 - 2.0 * (-2.0f64).exp())).abs();

    let pass = worst_oracle <= 1e-6 && worst_sym <= 1e-9 && worst_self <= 1e-6 && closed_err <= 1e-6;
    let detail = format!(
        "oracle err {worst_oracle:.2e}, symmetry {worst_sym:.2e}, mmd(X,X) max {worst_self:.2e}, closed form err {closed_err:.2e}"
    );
    report(2, "MMD suite", pass, &detail);
    assert!(pass, "{detail}");
}

fn toy_arch(classes: usize) -> CnnArch {
    CnnArch {
        input_side: 16,
        in_channels: 1,
        conv1_filters: 2,
        conv2_filters: 3,
        kernel: 3,
        fc_hidden: 4,
        classes,
    }
}

#[test]
fn criterion_3_gradient_checks() {
    let eps = 1e-6;
    let mut worst = [0.0f64; 3];
    for inst in 0..10u64 {
        let mut rng = rng_from(33, &[inst]);

        // smoothed cross-entropy w.r.t. logits
        let (b, c) = (rng.random_range(1..6), rng.random_range(2..7));
        let logits = random_tensor(&mut rng, &[b, c], 3.0);
        let targets: Vec<SmoothedLabel> = (0..b)
            .map(|_| smooth_labels(rng.random_range(0..c), c, rng.random_range(0.0..0.5)).unwrap())
            .collect();
        let (_, g) = smoothed_ce_grad(&logits, &targets).unwrap();
        let num = numeric_grad(logits.data(), eps, |v| {
            smoothed_ce(&Tensor::from_vec(&[b, c], v.to_vec()).unwrap(), &targets).unwrap()
        });
        worst[0] = worst[0].max(rel_err(g.data(), &num));

        // MMD w.r.t. both samples, median bandwidth included
        let (n, m, d) = (rng.random_range(2..7), rng.random_range(2..7), rng.random_range(1..6));
        let x = random_tensor(&mut rng, &[n, d], 1.0);
        let y = random_tensor(&mut rng, &[m, d], 1.5);
        let k = KernelConfig::default();
        let g = mmd_with_grad(&x, &y, &k).unwrap();
        let nx = numeric_grad(x.data(), eps, |v| {
            mmd(&Tensor::from_vec(&[n, d], v.to_vec()).unwrap(), &y, &k).unwrap()
        });
        let ny = numeric_grad(y.data(), eps, |v| {
            mmd(&x, &Tensor::from_vec(&[m, d], v.to_vec()).unwrap(), &k).unwrap()
        });
        let analytic: Vec<f64> = g.grad_x.data().iter().chain(g.grad_y.data()).copied().collect();
        let numeric: Vec<f64> = nx.into_iter().chain(ny).collect();
        worst[1] = worst[1].max(rel_err(&analytic, &numeric));

        // full calibration loss on a toy network, w.r.t. network and projection
        let classes = 3;
        let model = Cnn::<f64>::new(toy_arch(classes), 100 + inst).unwrap();
        let frozen = Cnn::<f64>::new(toy_arch(classes), 200 + inst).unwrap();
        let proj = build_projection::<f64>(&model.tap_shapes(), 300 + inst).unwrap();
        let batch = 3;
        let mut x = random_tensor(&mut rng, &[batch, 1, 16, 16], 1.0);
        x.data_mut().iter_mut().for_each(|v| *v = v.abs());
        let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
        let settings = CalibrationSettings {
            lambda: rng.random_range(0.1..1.0),
            attention_grad: true,
            ..Default::default()
        };
        let out = calibration_objective(&model, &frozen, &proj, &x, &labels, &settings).unwrap();
        let base = model.params().flatten_all();
        let nm = numeric_grad(&base, eps, |v| {
            let mut mm = model.clone();
            mm.params_mut().unflatten_all(v).unwrap();
            calibration_objective(&mm, &frozen, &proj, &x, &labels, &settings)
                .unwrap()
                .total
        });
        let pbase = proj.params().flatten_all();
        let np = numeric_grad(&pbase, eps, |v| {
            let mut pp = proj.clone();
            pp.params_mut().unflatten_all(v).unwrap();
            calibration_objective(&model, &frozen, &pp, &x, &labels, &settings)
                .unwrap()
                .total
        });
        worst[2] = worst[2]
            .max(rel_err(&out.model_grads.flatten_all(), &nm))
            .max(rel_err(&out.proj_grads.flatten_all(), &np));
    }
    let pass = worst.iter().all(|&e| e < 1e-3);
    let detail = format!(
        "max relative error over 10 instances: smoothed_ce {:.2e}, mmd {:.2e}, calibration loss {:.2e}",
        worst[0], worst[1], worst[2]
    );
    report(3, "gradient checks", pass, &detail);
    assert!(pass, "{detail}");
}

fn tap(layers: &[(&str, [f64; 4])]) -> FeatureTap<f64> {
    let mut t = FeatureTap::<f64>::new();
    for (name, v) in layers {
        // one sample, 2 channels, 1 x 2 spatial: a 2x2 (channel, position) matrix
        t.insert(name.to_string(), Tensor::from_vec(&[1, 2, 1, 2], v.to_vec()).unwrap());
    }
    t
}

/// Scalar-by-scalar attention: position and channel map averages, then a
/// row softmax, then the mean of both.
fn attention_oracle(a: &[[f64; 4]], b: &[[f64; 4]]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (c, d) = (2usize, 2usize);
    let r = a.len();
    let at = |m: &[f64; 4], ch: usize, pos: usize| m[ch * d + pos];
    let mut sp = vec![0.0; r * r];
    let mut sc = vec![0.0; r * r];
    for l in 0..r {
        for m in 0..r {
            let mut p = 0.0;
            for i in 0..d {
                for j in 0..d {
                    for k in 0..c {
                        p += at(&a[l], k, i) * at(&b[m], k, j);
                    }
                }
            }
            sp[l * r + m] = p / (d * d) as f64;
            let mut q = 0.0;
            for k1 in 0..c {
                for k2 in 0..c {
                    for i in 0..d {
                        q += at(&a[l], k1, i) * at(&b[m], k2, i);
                    }
                }
            }
            sc[l * r + m] = q / (c * c) as f64;
        }
    }
    let softmax = |s: &[f64]| -> Vec<f64> {
        s.chunks(r)
            .flat_map(|row| {
                let z: f64 = row.iter().map(|v| v.exp()).sum();
                row.iter().map(move |v| v.exp() / z).collect::<Vec<_>>()
            })
            .collect()
    };
    let (p, ch) = (softmax(&sp), softmax(&sc));
    let full = p.iter().zip(&ch).map(|(x, y)| (x + y) / 2.0).collect();
    (p, ch, full)
}

fn rows_sum_to_one(v: &[f64], r: usize) -> f64 {
    v.chunks(r)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max)
}

#[test]
fn criterion_4_attention_suite() {
    let a = [[1.0, 2.0, 0.0, 1.0], [0.5, -1.0, 2.0, 0.0]];
    let b = [[1.0, 0.0, 0.0, 1.0], [-1.0, 1.0, 1.0, 0.5]];
    let att = attention_weights(&tap(&[("l1", a[0]), ("l2", a[1])]), &tap(&[("l1", b[0]), ("l2", b[1])])).unwrap();
    let (p, c, full) = attention_oracle(&a, &b);
    let max_diff = |x: &[f64], y: &[f64]| x.iter().zip(y).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
    let hand = max_diff(&att.position, &p)
        .max(max_diff(&att.channel, &c))
        .max(max_diff(&att.alpha, &full));

    let mut rng = rng_from(44, &[]);
    let mut worst_row = 0.0f64;
    let mut worst_uniform = 0.0f64;
    for _ in 0..20 {
        let r = rng.random_range(1..5);
        let names: Vec<String> = (0..r).map(|i| format!("l{i}")).collect();
        let shape = [
            rng.random_range(1..4),
            rng.random_range(1..4),
            rng.random_range(1..3),
            rng.random_range(1..3),
        ];
        let mk = |rng: &mut Rng| -> FeatureTap<f64> {
            names
                .iter()
                .map(|n| (n.clone(), random_tensor(rng, &shape, 1.0)))
                .collect()
        };
        let (f, l) = (mk(&mut rng), mk(&mut rng));
        let m: AttentionMatrix = attention_weights(&f, &l).unwrap();
        for v in [&m.alpha, &m.position, &m.channel] {
            worst_row = worst_row.max(rows_sum_to_one(v, r));
        }
        let one = random_tensor(&mut rng, &shape, 1.0);
        let same: FeatureTap<f64> = names.iter().map(|n| (n.clone(), one.clone())).collect();
        let u = attention_weights(&same, &same).unwrap();
        worst_uniform = worst_uniform.max(u.alpha.iter().map(|v| (v - 1.0 / r as f64).abs()).fold(0.0, f64::max));
    }
    let pass = hand <= 1e-6 && worst_row <= 1e-6 && worst_uniform <= 1e-6;
    let detail = format!(
        "2x2 hand case err {hand:.2e}, row-sum err {worst_row:.2e}, identical-feature uniformity err {worst_uniform:.2e}"
    );
    report(4, "attention suite", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_5_distance_study() {
    let start = std::time::Instant::now();
    let layers: Vec<String> = ["conv1", "fc2"].map(String::from).to_vec();
    let mut intra_below = 0;
    let mut ratios = Vec::new();
    for rep in 0..3u64 {
        let doms: Vec<_> = synthetic_domains(100 + rep, 3, 10, 1.0)
            .unwrap()
            .into_iter()
            .map(|d| d.train)
            .collect();
        let cfg = TrainingConfig {
            acquisition_epochs: 5,
            seed: rep,
            ..Default::default()
        };
        let r = parameter_distance_study(&doms, 5, &layers, &cfg, StudyInit::Shared).unwrap();
        let conv1 = r.layer("conv1").unwrap();
        if conv1.intra_mean < conv1.inter_mean {
            intra_below += 1;
        }
        let g = gap_ratio_by_layer(&r).unwrap();
        ratios.push((g[0].1, g[1].1));
    }
    let mean = |f: fn(&(f64, f64)) -> f64| ratios.iter().map(f).sum::<f64>() / ratios.len() as f64;
    let (g_conv1, g_fc2) = (mean(|r| r.0), mean(|r| r.1));
    let pass = intra_below >= 2 && g_conv1 > g_fc2;
    let detail = format!(
        "conv1 intra < inter in {intra_below}/3 studies; mean gap ratio conv1 {g_conv1:.3} vs fc2 {g_fc2:.3} ({:.0?})",
        start.elapsed()
    );
    report(5, "parameter-distance study", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_6_rotated_mnist_trend() {
    let start = std::time::Instant::now();
    let out = tempfile::tempdir().unwrap();
    let mut training = TrainingConfig {
        acquisition_epochs: 10,
        rounds: 10,
        calibration_epochs_per_round: 2,
        ..Default::default()
    };
    training.eval_sources = false;
    let base = ExperimentSpec {
        dataset: DatasetSpec::default(),
        training,
        seeds: vec![0, 1, 2],
        out: out.path().to_path_buf(),
        ..Default::default()
    };
    let mut acc = std::collections::HashMap::new();
    for target in ["M0", "M45"] {
        for method in [Method::Csac, Method::Fedavg] {
            let spec = ExperimentSpec {
                target: target.into(),
                method,
                ..base.clone()
            };
            match cmd_run(&spec) {
                Ok(r) => {
                    let _ = writeln!(
                        std::io::stderr(),
                        "  {} {target}: {:?} mean {:.4}",
                        method.name(),
                        r.summary.accuracies,
                        r.summary.mean
                    );
                    acc.insert((method, target), r.summary.mean);
                }
                Err(e) => {
                    let detail = format!("error[{}]: {e}", e.code());
                    report(6, "rotated MNIST trend", false, &detail);
                    panic!("{detail}");
                }
            }
        }
    }
    let avg = |m: Method| (acc[&(m, "M0")] + acc[&(m, "M45")]) / 2.0;
    let (csac, fedavg) = (avg(Method::Csac), avg(Method::Fedavg));
    let (c45, f45) = (acc[&(Method::Csac, "M45")], acc[&(Method::Fedavg, "M45")]);
    let pass = csac >= fedavg - 0.005 && c45 > 0.75 && f45 > 0.75;
    let detail = format!(
        "mean over {{M0, M45}} x 3 seeds: CSAC {:.2}% vs FedAvg {:.2}% (needs >= FedAvg - 0.5); M45 CSAC {:.2}%, FedAvg {:.2}% (need > 75%) ({:.0?})",
        csac * 100.0,
        fedavg * 100.0,
        c45 * 100.0,
        f45 * 100.0,
        start.elapsed()
    );
    report(6, "rotated MNIST trend", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_7_ablation_harness() {
    let start = std::time::Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let mut spec = ExperimentSpec {
        dataset: DatasetSpec::synthetic(4, 10, 1.0, 7),
        target: "S0".into(),
        out: tmp.path().join("out"),
        data_dir: Some(tmp.path().join("data")),
        ..Default::default()
    };
    spec.training.acquisition_epochs = 3;
    spec.training.rounds = 3;
    spec.training.calibration_epochs_per_round = 1;
    spec.training.eval_sources = false;

    let axes: Vec<String> = ["fusion=average", "same_layer", "attention=off", "discrepancy=mse"]
        .map(String::from)
        .to_vec();
    let summaries = cmd_ablate(&spec, &axes).unwrap();
    let csv_rows = read_ablation_csv(&spec.out.join("ablation_S0").join("ablation.csv")).unwrap();
    let four_rows = csv_rows.len() == 4 && summaries.len() == 4;

    let degenerate = cmd_ablate(
        &ExperimentSpec {
            out: tmp.path().join("degenerate"),
            ..spec.clone()
        },
        &["alignment=off".to_string(), "attention=off".to_string()],
    )
    .unwrap();
    let finite = degenerate
        .iter()
        .chain(&summaries)
        .all(|s| s.finite && s.mean.is_finite());
    let pass = four_rows && finite;
    let detail = format!(
        "{} CSV rows [{}]; degenerate settings finite: {} ({:.0?})",
        csv_rows.len(),
        csv_rows
            .iter()
            .map(|r| format!("{}={:.3}", r.0, r.1))
            .collect::<Vec<_>>()
            .join(", "),
        finite,
        start.elapsed()
    );
    report(7, "ablation harness", pass, &detail);
    assert!(pass, "{detail}");
}

#[test]
fn criterion_8_privacy_audit() {
    let cfg = SyntheticConfig {
        side: 16,
        train_per_class: 10,
        test_per_class: 5,
        noise: 0.1,
    };
    let domains = synthetic_domains_with(&cfg, 8, 4, 5, 1.0).unwrap();
    let split = leave_one_domain_out(&domains, "S2").unwrap();
    let training = TrainingConfig {
        acquisition_epochs: 2,
        rounds: 3,
        calibration_epochs_per_round: 1,
        batch_size: 16,
        ..Default::default()
    };
    let out = run_csac_audited(&split, &training).unwrap();
    let records = out.audit.records();
    let violations = out.audit.violations();
    let pass = violations.is_empty() && !records.is_empty();
    let detail = format!(
        "{} dataset reads recorded, {} cross-client reads",
        records.len(),
        violations.len()
    );
    report(8, "privacy audit", pass, &detail);
    assert!(pass, "{detail}");
}
