//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each,
//! and exits non-zero if any fails.

#![allow(clippy::needless_range_loop, clippy::type_complexity)]

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use mvocab_core::bow::{quantization_complexity, unique_assignments, BowMatrix, BowVector};
use mvocab_core::cli::{self, default_synthetic_config};
use mvocab_core::config::{PipelineConfig, VocabEntry, ROOTSIFT_POWERS};
use mvocab_core::descriptors::{
    load_descriptors, save_descriptors, ChannelManifest, DescriptorMatrix, DescriptorProjection,
};
use mvocab_core::pipeline::{self, evaluate, BundleEncoder, MemorySource};
use mvocab_core::reduction::{
    reduce, train_reduction, whitening_check, ReductionModel, ReductionOptions, Route,
};
use mvocab_core::search::{average_precision, QueryTruth};
use mvocab_core::synth::{generate_synthetic, SynthSpec};
use mvocab_core::vocabulary::{kmeans_train, quantize, KMeansParams, Provenance, Vocabulary};
use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Pinned benchmark results (joint 4-vocabulary, best single vocabulary).
const PINNED_JOINT_MAP: f64 = 0.649776;
const PINNED_BEST_SINGLE_MAP: f64 = 0.466369;
/// Pinned product-vocabulary cell counts for 1..=4 vocabularies.
const PINNED_UNIQUE: [usize; 4] = [16, 94, 201, 476];

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize, decay: bool) -> DMatrix<f64> {
    DMatrix::from_fn(n, d, |_, j| {
        let g: f64 = rng.sample(rand_distr::StandardNormal);
        if decay {
            g / (1.0 + j as f64 / 4.0)
        } else {
            g
        }
    })
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix. Returns
/// eigenpairs sorted by descending eigenvalue; vectors are columns.
fn jacobi_eigen(mut a: Vec<Vec<f64>>) -> (Vec<f64>, Vec<Vec<f64>>) {
    let n = a.len();
    let mut v = vec![vec![0.0; n]; n];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let diag: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum();
        if off <= 1e-30 * diag {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let vp = row[p];
                    let vq = row[q];
                    row[p] = c * vp - s * vq;
                    row[q] = s * vp + c * vq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j][j].total_cmp(&a[i][i]));
    let values = order.iter().map(|&i| a[i][i]).collect();
    let vectors = order
        .iter()
        .map(|&i| v.iter().map(|row| row[i]).collect())
        .collect();
    (values, vectors)
}

/// 1/N covariance of the centered rows.
fn covariance(y: &DMatrix<f64>) -> Vec<Vec<f64>> {
    let (n, d) = y.shape();
    let mean: Vec<f64> = (0..d).map(|j| y.column(j).sum() / n as f64).collect();
    let mut c = vec![vec![0.0; d]; d];
    for r in 0..n {
        for i in 0..d {
            let a = y[(r, i)] - mean[i];
            for j in i..d {
                c[i][j] += a * (y[(r, j)] - mean[j]);
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            c[i][j] /= n as f64;
            c[j][i] = c[i][j];
        }
    }
    c
}

fn pca_oracle() -> Outcome {
    let shapes = [(50, 200), (200, 50), (100, 100)];
    let d_out = 10;
    let opts = ReductionOptions {
        route: Route::Gram,
        ..Default::default()
    };
    let start = Instant::now();
    let mut worst_val = 0.0f64;
    let mut worst_vec = 0.0f64;
    for inst in 0..20 {
        let (n, d) = shapes[inst % shapes.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + inst as u64);
        let y = gaussian_matrix(&mut rng, n, d, true);
        let model = train_reduction(&y, d_out, &opts).map_err(|e| e.to_string())?;
        let (values, vectors) = jacobi_eigen(covariance(&y));
        for j in 0..d_out {
            let rel = (model.eigenvalues[j] - values[j]).abs() / values[j];
            worst_val = worst_val.max(rel);
            let p = model.column(j);
            let sign = if p.iter().zip(&vectors[j]).map(|(a, b)| a * b).sum::<f64>() < 0.0 {
                -1.0
            } else {
                1.0
            };
            let diff = p
                .iter()
                .zip(&vectors[j])
                .map(|(a, b)| (a - sign * b).abs())
                .fold(0.0, f64::max);
            worst_vec = worst_vec.max(diff);
        }
    }
    let elapsed = start.elapsed();
    check(worst_val <= 1e-8, || format!("eigenvalue relative error {worst_val:.3e}"))?;
    check(worst_vec <= 1e-6, || format!("eigenvector error {worst_vec:.3e}"))?;
    check(elapsed < Duration::from_secs(10), || format!("took {elapsed:?}"))?;
    Ok(format!(
        "20 instances, max eigenvalue rel err {worst_val:.1e}, max eigenvector err {worst_vec:.1e}, {:.2}s",
        elapsed.as_secs_f64()
    ))
}

fn whitening() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let y = gaussian_matrix(&mut rng, 300, 40, true);
    let model = train_reduction(&y, 10, &ReductionOptions::default()).map_err(|e| e.to_string())?;
    let var = whitening_check(&y, &model).map_err(|e| e.to_string())?;
    let mut worst = 0.0f64;
    for (j, v) in var.iter().enumerate() {
        if !model.is_floored(j) {
            worst = worst.max((v - 1.0).abs());
        }
    }
    check(worst <= 1e-6, || format!("variance deviation {worst:.3e}"))?;
    Ok(format!("max |var - 1| = {worst:.1e} over {} components", var.len()))
}

fn random_bow(rng: &mut ChaCha8Rng, id: &str, d: usize) -> BowVector {
    let v: Vec<f64> = (0..d)
        .map(|_| if rng.random_bool(0.3) { rng.random::<f64>() } else { 0.0 })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
    BowVector::from_f64(id, &v.iter().map(|x| x / n).collect::<Vec<_>>())
}

fn output_contract() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let d = 60;
    let train: Vec<BowVector> = (0..150).map(|i| random_bow(&mut rng, &format!("t{i}"), d)).collect();
    let y = DMatrix::from_fn(train.len(), d, |r, c| train[r].values[c] as f64);
    let model = train_reduction(&y, 20, &ReductionOptions::default()).map_err(|e| e.to_string())?;
    let mut inputs = train.clone();
    inputs.extend((0..300).map(|i| random_bow(&mut rng, &format!("x{i}"), d)));
    inputs.push(BowVector::from_f64("zero", &vec![0.0; d]));
    inputs.push(BowVector::from_f64("mean", &model.mean));
    let mut zeros = 0;
    for x in &inputs {
        let s = reduce(x, &model).map_err(|e| e.to_string())?;
        if s.zero {
            zeros += 1;
            continue;
        }
        check(x.image_id != "zero", || "zero input not flagged".into())?;
        let norm = s.values.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
        check((norm - 1.0).abs() <= 1e-6, || format!("{}: norm {norm}", x.image_id))?;
    }
    Ok(format!("{} vectors, {zeros} zero-flagged, rest unit norm", inputs.len()))
}

fn clustered(rng: &mut ChaCha8Rng, n: usize, d: usize, centers: usize) -> DescriptorMatrix {
    let c: Vec<Vec<f64>> = (0..centers)
        .map(|_| (0..d).map(|_| rng.random::<f64>() * 10.0).collect())
        .collect();
    let data = (0..n)
        .flat_map(|i| {
            let center = c[i % centers].clone();
            center
                .into_iter()
                .map(|v| (v + rng.sample::<f64, _>(rand_distr::StandardNormal)) as f32)
                .collect::<Vec<_>>()
        })
        .collect();
    DescriptorMatrix::new(d, data).unwrap()
}

fn kmeans_properties() -> Outcome {
    let d = 8;
    let k = 6;
    let mut fixed_points = 0;
    for run in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(500 + run);
        let x = clustered(&mut rng, 300, d, 5);
        let params = KMeansParams {
            max_iters: 300,
            tol: 0.0,
            ..KMeansParams::new(k, run)
        };
        let res = kmeans_train(&x, &params, Provenance::default()).map_err(|e| e.to_string())?;
        let h = &res.objective_history;
        if let Some(i) = (1..h.len()).find(|&i| h[i] > h[i - 1]) {
            return Err(format!("run {run}: objective rose at iteration {i}: {} -> {}", h[i - 1], h[i]));
        }
        check(res.converged, || format!("run {run}: no convergence in 300 iterations"))?;
        let again = quantize(&x, &res.vocabulary).map_err(|e| e.to_string())?;
        check(again.word_ids == res.assignment, || format!("run {run}: reassignment changed labels"))?;
        // Recomputed means equal the stored centroids bit for bit.
        for j in 0..k {
            let rows: Vec<usize> = (0..x.n()).filter(|&i| res.assignment[i] as usize == j).collect();
            let mut sum = vec![0.0f64; d];
            for &i in &rows {
                sum.iter_mut().zip(x.row(i)).for_each(|(s, &v)| *s += v as f64);
            }
            let mean: Vec<f32> = sum.iter().map(|s| (s / rows.len() as f64) as f32).collect();
            check(mean == res.vocabulary.centroid(j), || format!("run {run}: centroid {j} is not its cluster mean"))?;
        }
        fixed_points += 1;
    }

    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = clustered(&mut rng, 4000, 16, 20);
    let params = KMeansParams::new(32, 3);
    let mut reference: Option<Vec<f32>> = None;
    for threads in [1, 4, 8] {
        let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap();
        let res = pool
            .install(|| kmeans_train(&x, &params, Provenance::default()))
            .map_err(|e| e.to_string())?;
        let c = res.vocabulary.centroids().to_vec();
        match &reference {
            None => reference = Some(c),
            Some(r) => check(
                r.iter().zip(&c).all(|(a, b)| a.to_bits() == b.to_bits()),
                || format!("{threads} threads changed the centroids"),
            )?,
        }
    }
    Ok(format!("{fixed_points}/50 monotone fixed points, centroids identical for 1/4/8 threads"))
}

/// Exhaustive optimum over all 2-partitions with both parts non-empty.
fn best_two_partition(points: &[f64]) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    for mask in 1u32..(1 << n) - 1 {
        let mut sse = 0.0;
        for side in [true, false] {
            let part: Vec<f64> = (0..n)
                .filter(|&i| (mask >> i & 1 == 1) == side)
                .map(|i| points[i])
                .collect();
            let m = part.iter().sum::<f64>() / part.len() as f64;
            sse += part.iter().map(|p| (p - m).powi(2)).sum::<f64>();
        }
        best = best.min(sse);
    }
    best
}

fn train_1d(points: &[f64], seed: u64) -> Result<f64, String> {
    let x = DescriptorMatrix::new(1, points.iter().map(|&p| p as f32).collect()).map_err(|e| e.to_string())?;
    let params = KMeansParams {
        restarts: 3,
        ..KMeansParams::new(2, seed)
    };
    kmeans_train(&x, &params, Provenance::default())
        .map(|r| r.objective())
        .map_err(|e| e.to_string())
}

fn kmeans_optimality() -> Outcome {
    let example = train_1d(&[0.0, 1.0, 10.0], 1)?;
    check((example - 0.5).abs() < 1e-9, || format!("{{0,1,10}} gave {example}"))?;
    let mut hits = 0;
    for run in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(700 + run);
        let n = rng.random_range(3..=8);
        let points: Vec<f64> = (0..n)
            .map(|_| rng.random_range(0u32..400))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .map(|v| v as f64 / 4.0)
            .collect();
        if points.len() < 2 {
            continue;
        }
        let oracle = best_two_partition(&points);
        let got = train_1d(&points, run)?;
        if (got - oracle).abs() <= 1e-6 * oracle.max(1.0) {
            hits += 1;
        }
    }
    check(hits >= 45, || format!("optimal in {hits}/50 runs"))?;
    Ok(format!("{{0,1,10}} -> 0.5; optimal in {hits}/50 runs"))
}

fn ap_oracle() -> Outcome {
    // (ranking, positives, junk, query, exclude_self, expected)
    type Case = (&'static [&'static str], &'static [&'static str], &'static [&'static str], &'static str, bool, f64);
    let cases: [Case; 10] = [
        (&["a", "x", "b"], &["a", "b"], &[], "q", false, 5.0 / 6.0),
        (&["a", "b", "x", "y"], &["a", "b"], &[], "q", false, 1.0),
        (&["x", "y", "a"], &["a"], &[], "q", false, 1.0 / 3.0),
        (&["x", "a"], &["a"], &[], "q", false, 0.5),
        (&["x", "y", "z"], &["a"], &[], "q", false, 0.0),
        (&["a", "x"], &["a", "b"], &[], "q", false, 0.5),
        (&["x", "j", "a"], &["a"], &["j"], "q", false, 0.5),
        (&["q", "a", "x", "b"], &["a", "b"], &[], "q", true, 5.0 / 6.0),
        (&["x", "a", "y", "b", "c"], &["a", "b", "c"], &[], "q", false, (0.5 + 0.5 + 0.6) / 3.0),
        (&["j1", "a", "j2", "x", "q", "b"], &["a", "b"], &["j1", "j2"], "q", true, (1.0 + 2.0 / 3.0) / 2.0),
    ];
    for (i, (ranked, pos, junk, q, excl, expected)) in cases.iter().enumerate() {
        let gt = QueryTruth::new(q, pos.iter().copied(), junk.iter().copied(), *excl);
        let ap = average_precision(ranked, &gt).map_err(|e| e.to_string())?;
        check((ap - expected).abs() < 1e-12, || format!("case {i}: {ap} != {expected}"))?;
    }
    // Junk inserted at every position leaves AP unchanged.
    let base = ["x", "a", "y", "b", "z", "c"];
    let gt = QueryTruth::new("q", ["a", "b", "c"], ["junk"], false);
    let reference = average_precision(&base, &gt).map_err(|e| e.to_string())?;
    for pos in 0..=base.len() {
        let mut ranked = base.to_vec();
        ranked.insert(pos, "junk");
        let ap = average_precision(&ranked, &gt).map_err(|e| e.to_string())?;
        check(ap == reference, || format!("junk at {pos}: {ap} != {reference}"))?;
    }
    Ok(format!("10 cases exact; junk invariant at all {} positions", base.len() + 1))
}

fn table_complexity() -> Outcome {
    let rows: [(&[usize], usize); 8] = [
        (&[8192], 8192),
        (&[4096], 4096),
        (&[2048], 2048),
        (&[1024], 1024),
        (&[4096, 2048, 1024, 512, 256, 128], 8064),
        (&[2048, 1024, 512, 256, 128], 3968),
        (&[1024, 512, 256, 128], 1920),
        (&[512, 256, 128], 896),
    ];
    for (ks, expected) in rows {
        let got = quantization_complexity(ks.iter().copied());
        check(got == expected, || format!("{ks:?}: {got} != {expected}"))?;
    }
    Ok("8/8 rows".into())
}

fn small_spec() -> SynthSpec {
    SynthSpec {
        seed: 31,
        n_images: 60,
        n_queries: 4,
        positives_per_query: 3,
        n_train_images: 40,
        descriptors_per_image: 50,
        dim: 16,
        n_patterns: 12,
        ..Default::default()
    }
}

fn unique_trend() -> Outcome {
    let spec = small_spec();
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let train = MemorySource {
        channels: &data.channels,
        images: &data.train,
    };
    let db = MemorySource {
        channels: &data.channels,
        images: &data.database,
    };
    let ks = [16, 16, 32, 64];
    let vocab = ks
        .iter()
        .zip(ROOTSIFT_POWERS)
        .enumerate()
        .map(|(i, (&k, p))| VocabEntry {
            seed: Some(40 + i as u64),
            power: Some(p),
            ..VocabEntry::new("r1.00", k)
        })
        .collect();
    let cfg = PipelineConfig::new("unused", vocab);
    let enc = pipeline::train_bundle(&cfg, &train).map_err(|e| e.to_string())?;
    let curve = pipeline::unique_assignment_curve(&enc, &db).map_err(|e| e.to_string())?;

    // Independent count of distinct tuples.
    let per_image: Vec<_> = data
        .database
        .iter()
        .map(|img| enc.assign(&db, &img.id).unwrap())
        .collect();
    let n: usize = per_image.iter().map(|a| a[0].word_ids.len()).sum();
    for v in 1..=4 {
        let mut tuples = BTreeSet::new();
        for a in &per_image {
            for i in 0..a[0].word_ids.len() {
                tuples.insert(a[..v].iter().map(|x| x.word_ids[i]).collect::<Vec<_>>());
            }
        }
        check(tuples.len() == curve[v - 1], || format!("{v} vocabularies: {} != oracle {}", curve[v - 1], tuples.len()))?;
        let cells: usize = ks[..v].iter().product();
        check(curve[v - 1] <= n.min(cells), || format!("{v} vocabularies: {} exceeds bound", curve[v - 1]))?;
    }
    check(curve.windows(2).all(|w| w[0] <= w[1]), || format!("curve decreases: {curve:?}"))?;
    let columns: Vec<Vec<u32>> = (0..4)
        .map(|v| per_image.iter().flat_map(|a| a[v].word_ids.clone()).collect())
        .collect();
    let all: Vec<&[u32]> = columns.iter().map(Vec::as_slice).collect();
    check(unique_assignments(&all).unwrap() == curve[3], || "unique_assignments disagrees".into())?;
    check(curve[..] == PINNED_UNIQUE[..], || format!("curve {curve:?} != pinned {PINNED_UNIQUE:?}"))?;
    Ok(format!("n={n}, cells {curve:?}"))
}

fn benchmark() -> Outcome {
    let start = Instant::now();
    let spec = SynthSpec::default();
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    let cfg = default_synthetic_config(&spec);
    let train = MemorySource {
        channels: &data.channels,
        images: &data.train,
    };
    let db = MemorySource {
        channels: &data.channels,
        images: &data.database,
    };
    let gt = &data.ground_truth;
    let enc = pipeline::train_bundle(&cfg, &train).map_err(|e| e.to_string())?;
    let joint = evaluate(&enc, cfg.d_out, &train, &db, gt).map_err(|e| e.to_string())?.map;
    let mut singles = Vec::new();
    for (i, entry) in cfg.vocab.iter().enumerate() {
        let mut single_cfg = cfg.clone();
        single_cfg.vocab = vec![entry.clone()];
        let single = BundleEncoder::new(
            &single_cfg,
            vec![enc.bundle.vocabularies[i].clone()],
            vec![None],
            Some(&train),
        )
        .map_err(|e| e.to_string())?;
        singles.push(evaluate(&single, cfg.d_out, &train, &db, gt).map_err(|e| e.to_string())?.map);
    }
    let best = singles.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let elapsed = start.elapsed();
    let summary = format!(
        "joint {joint:.6} vs best single {best:.6} (singles {}), {:.1}s",
        singles.iter().map(|m| format!("{m:.6}")).collect::<Vec<_>>().join(" "),
        elapsed.as_secs_f64()
    );
    check(joint >= best, || format!("joint below best single: {summary}"))?;
    check(format!("{joint:.6}") == format!("{PINNED_JOINT_MAP:.6}"), || format!("joint drifted from pin {PINNED_JOINT_MAP:.6}: {summary}"))?;
    check(format!("{best:.6}") == format!("{PINNED_BEST_SINGLE_MAP:.6}"), || format!("best single drifted from pin {PINNED_BEST_SINGLE_MAP:.6}: {summary}"))?;
    check(elapsed < Duration::from_secs(120), || format!("too slow: {summary}"))?;
    Ok(summary)
}

fn f32_values(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.random_range(-4.0f32..4.0)).collect()
}

fn label(rng: &mut ChaCha8Rng) -> String {
    let len = rng.random_range(0..12);
    (0..len).map(|_| ['a', 'é', '7', '_', 'Z', '∑'][rng.random_range(0..6)]).collect()
}

/// Saves, loads, saves again; the loaded value must equal the original and
/// both files must be byte-identical.
fn round_trip<T: PartialEq + std::fmt::Debug>(
    dir: &Path,
    name: &str,
    value: &T,
    save: impl Fn(&Path, &T) -> mvocab_core::Result<()>,
    load: impl Fn(&Path) -> mvocab_core::Result<T>,
) -> Result<(), String> {
    let a = dir.join(format!("{name}.a"));
    let b = dir.join(format!("{name}.b"));
    save(&a, value).map_err(|e| e.to_string())?;
    let loaded = load(&a).map_err(|e| e.to_string())?;
    check(&loaded == value, || format!("{name}: loaded value differs"))?;
    save(&b, &loaded).map_err(|e| e.to_string())?;
    check(fs::read(&a).unwrap() == fs::read(&b).unwrap(), || format!("{name}: bytes differ"))
}

fn format_round_trips() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = dir.path();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let trials = 25;
    for t in 0..trials {
        let d = rng.random_range(1..20);
        let n = rng.random_range(0..30);
        let x = DescriptorMatrix::new(d, f32_values(&mut rng, n * d)).unwrap();
        round_trip(dir, "desc", &x, save_descriptors, load_descriptors)?;

        let k = rng.random_range(1..16);
        let prov = Provenance {
            seed: rng.random(),
            transform: label(&mut rng),
            channel: label(&mut rng),
            training_set: label(&mut rng),
        };
        let vocab = Vocabulary::new(d, f32_values(&mut rng, k * d), prov).unwrap();
        round_trip(dir, "vocab", &vocab, |p, v| v.save(p), Vocabulary::load)?;

        let d_out = rng.random_range(1..=d);
        let proj = DescriptorProjection {
            mean: f32_values(&mut rng, d).into_iter().map(f64::from).collect(),
            basis: f32_values(&mut rng, d * d_out).into_iter().map(f64::from).collect(),
            d,
            d_out,
            source: String::new(),
            renormalize: rng.random_bool(0.5),
            eigenvalues: Vec::new(),
        };
        // The source tag is set from the path on load and is not part of the file.
        let load_proj = |p: &Path| {
            DescriptorProjection::load(p).map(|mut x| {
                x.source.clear();
                x
            })
        };
        round_trip(dir, "proj", &proj, |p, v| v.save(p), load_proj)?;

        let mut bow = BowMatrix::new(d);
        for i in 0..n {
            bow.push(&format!("{}{i}", label(&mut rng)), &f32_values(&mut rng, d)).unwrap();
        }
        round_trip(dir, "bow", &bow, |p, v| v.save(p), BowMatrix::load)?;

        let mut eigenvalues: Vec<f64> = (0..d_out).map(|_| rng.random_range(1e-6..10.0)).collect();
        eigenvalues.sort_by(|a, b| b.total_cmp(a));
        let model = ReductionModel {
            d,
            d_out,
            mean: f32_values(&mut rng, d).into_iter().map(f64::from).collect(),
            eigenvalues,
            basis: f32_values(&mut rng, d * d_out).into_iter().map(f64::from).collect(),
            floored: t % 2 == 0,
        };
        round_trip(dir, "model", &model, |p, v| v.save(p), ReductionModel::load)?;
    }
    Ok(format!("5 formats x {trials} random payloads"))
}

/// Full-scale layout: separate cropped-query descriptor sets, junk lists,
/// queries kept in their own rankings, two measurement-region channels,
/// descriptor PCA and idf switched on.
fn full_scale_path() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let dir = tmp.path();
    let spec = SynthSpec {
        channels: vec!["r1.00".into(), "r1.50".into()],
        ..small_spec()
    };
    let data = generate_synthetic(&spec).map_err(|e| e.to_string())?;
    data.write(dir).map_err(|e| e.to_string())?;

    let planted: BTreeSet<&str> = data
        .ground_truth
        .queries
        .iter()
        .flat_map(|q| q.positives.iter().map(String::as_str).chain([q.query_id.as_str()]))
        .collect();
    let distractors: Vec<&str> = data
        .database
        .iter()
        .map(|i| i.id.as_str())
        .filter(|id| !planted.contains(id))
        .collect();
    let mut queries = ChannelManifest::new(dir);
    let mut gt = String::new();
    fs::create_dir_all(dir.join("queries")).unwrap();
    for (qi, q) in data.ground_truth.queries.iter().enumerate() {
        let img = data.database.iter().find(|i| i.id == q.query_id).unwrap();
        let qid = format!("query_{qi:02}");
        for (label, x) in data.channels.iter().zip(&img.channels) {
            let keep = x.n() * 2 / 3;
            let crop = DescriptorMatrix::new(x.d(), x.data()[..keep * x.d()].to_vec()).unwrap();
            let rel = Path::new("queries").join(format!("{qid}_{label}.mvsd"));
            save_descriptors(&dir.join(&rel), &crop).map_err(|e| e.to_string())?;
            queries.insert(&qid, label, rel).map_err(|e| e.to_string())?;
        }
        writeln!(gt, "Q\t{qid}\t0\nP\t{}", q.query_id).unwrap();
        let mut pos: Vec<_> = q.positives.iter().collect();
        pos.sort();
        for p in pos {
            writeln!(gt, "P\t{p}").unwrap();
        }
        writeln!(gt, "J\t{}", distractors[qi]).unwrap();
    }
    queries.save(&dir.join("queries.tsv")).map_err(|e| e.to_string())?;
    fs::write(dir.join("gt_full.tsv"), gt).unwrap();

    let mut cfg = PipelineConfig::new(
        "manifest.tsv",
        vec![
            VocabEntry { seed: Some(1), ..VocabEntry::new("r1.00", 32) },
            VocabEntry { power: Some(0.5), pca_dim: Some(8), ..VocabEntry::new("r1.00", 32) },
            VocabEntry { power: Some(0.5), ..VocabEntry::new("r1.50", 16) },
        ],
    );
    cfg.train_manifest = Some("train_manifest.tsv".into());
    cfg.query_manifest = Some("queries.tsv".into());
    cfg.ground_truth = Some("gt_full.tsv".into());
    cfg.idf = true;
    cfg.d_out = 24;
    fs::write(dir.join("full.toml"), cfg.to_toml()).unwrap();

    let mut out = Vec::new();
    let config = dir.join("full.toml");
    let code = cli::run(["mvocab", "pipeline", "--config", config.to_str().unwrap()], &mut out);
    let text = String::from_utf8_lossy(&out);
    check(code == 0, || format!("pipeline exited {code}"))?;
    let line = text
        .lines()
        .find_map(|l| l.strip_prefix("mAP\t"))
        .ok_or_else(|| format!("no mAP line in output: {text}"))?;
    let map: f64 = line.parse().map_err(|_| format!("bad mAP value {line}"))?;
    check((0.0..=1.0).contains(&map), || format!("mAP {map} out of range"))?;
    check(dir.join("out/eval.tsv").is_file(), || "eval.tsv missing".into())?;
    Ok(format!("pipeline completed, mAP {map:.6}"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("PCA oracle equivalence", pca_oracle),
        ("whitening", whitening),
        ("reduced-vector output contract", output_contract),
        ("k-means monotonicity, fixed point, thread determinism", kmeans_properties),
        ("small-instance k-means optimality", kmeans_optimality),
        ("AP oracle", ap_oracle),
        ("quantization complexity table", table_complexity),
        ("unique-assignment trend", unique_trend),
        ("multi-vocabulary benefit (pinned)", benchmark),
        ("format round trips", format_round_trips),
        ("full-scale pipeline path", full_scale_path),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let outcome = std::panic::catch_unwind(f).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {:>2}: {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {:>2}: {name}: {why}", i + 1);
            }
        }
    }
    println!("acceptance: {}/{} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
