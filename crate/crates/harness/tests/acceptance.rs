//! Acceptance suite: one PASS/FAIL line per criterion. Failures are
//! reported; with `DVK_ACCEPTANCE_STRICT=1` any failure also makes the exit
//! status non-zero. Tolerances and runtime limits are pinned below.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use dvk_cnn::gradcheck::{check_layer, check_network};
use dvk_cnn::loss::{hinge_cls, hinge_rank, softmax_ce};
use dvk_cnn::train::{dataset_loss, fine_tune, prepare_fine_tune, train, LrSchedule, TrainConfig};
use dvk_cnn::{
    build_architecture, build_with, init_network, ArchName, ArchitectureSpec, BuildOptions, DropoutMode, LayerKind,
    LayerSpec, LossKind, LrnParams, Mode, NetworkState, Tensor, TensorShape,
};
use dvk_core::augment::{crop_boxes, generate_samples, AugmentKind};
use dvk_core::descriptors::{DescriptorSet, Site};
use dvk_core::eval::{average_precision, mean_class_accuracy, top_k_error};
use dvk_core::fisher::{encode_spatial, FisherConfig, Normalisation, SpatialScheme};
use dvk_core::gmm::{fit_gmm, GmmModel, GmmOptions};
use dvk_core::{ColorSpace, RasterImage};
use dvk_harness::config::ExperimentConfig;
use dvk_harness::dims::{dim_label, reference_dims};
use dvk_harness::manifest::{load_manifest, Split};
use dvk_harness::models::{self, Container};
use dvk_harness::pipeline::{load_images, run_experiment, LoadedImage, ResultsRow};
use dvk_harness::synth::{generate, SynthKind, SynthOptions};
use dvk_harness::training::{channel_means, ImageSource};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const STRICT_ENV: &str = "DVK_ACCEPTANCE_STRICT";

type Outcome = Result<(bool, String), Box<dyn std::error::Error>>;

const GRAD_TOL: f64 = 1e-4;
const GRAD_SEEDS: u64 = 20;
const FV_TOL: f64 = 1e-10;
const FV_INSTANCES: usize = 200;
const GMM_RUNS: u64 = 50;
const GMM_DECREASE_TOL: f64 = 1e-8;
const GMM_MEAN_TOL: f64 = 0.05;
const AUG_SIZES: usize = 100;
const METRIC_TOL: f64 = 1e-12;
const METRIC_INSTANCES: usize = 1000;

const TEXTURE_TRAIN: usize = 200;
const TEXTURE_TEST: usize = 200;
const TEXTURE_SEED: u64 = 7;
const SHALLOW_MIN_ACCURACY: f64 = 0.95;
const AUGMENT_MAX_DROP: f64 = 0.01;

const SHAPES_TRAIN: usize = 2000;
const SHAPES_TEST: usize = 500;
const SHAPES_SEED: u64 = 11;
const MICRO_SIDE: usize = 64;
const MICRO_DIVISOR: usize = 8;
const MICRO_FC: usize = 4096 / MICRO_DIVISOR;
const MICRO_EPOCHS: usize = 30;
const MICRO_LR: f64 = 0.01;
const MICRO_TRAIN_AUGMENT: bool = false;
const MICRO_SEED: u64 = 3;
const MIN_TRAIN_ACCURACY: f64 = 0.99;
/// Shape classes (by index) forming the relabelled fine-tuning subset.
const FINE_TUNE_CLASSES: [usize; 3] = [3, 6, 9];
const FINE_TUNE_MAX_EPOCHS: usize = 30;

/// Runtime limits in seconds, by criterion.
const LIMITS: [Option<f64>; 12] = [
    Some(1.0),
    Some(1.0),
    Some(120.0),
    Some(60.0),
    Some(60.0),
    None,
    None,
    Some(300.0),
    Some(900.0),
    Some(300.0),
    None,
    None,
];

/// The IFV representation used on both synthetic datasets: K = 16, D = 20,
/// with sampling scaled to 64-pixel images.
const IFV_SECTION: &str = "[representation.ifv]
kind = ifv
k = 16
pca_dim = 20
stride = 4
scales = 3
base_patch = 8
upscale = 1
";

fn ifv_config(name: &str, manifest: &Path, seed: u64, augment: &str) -> String {
    format!(
        "[experiment]\nname = {name}\nmanifest = {}\nrepresentation = ifv\nseed = {seed}\n\n{IFV_SECTION}\n[augment]\n{augment}",
        manifest.display()
    )
}

const CROP_FLIP_SUM: &str = "kind = crop_flip\ntrain_fusion = samples\ntest_fusion = sum\ncrop = 56\n";
const NO_AUGMENT: &str = "kind = none\n";

fn cnn_config(name: &str, manifest: &Path, model: &Path, seed: u64, l2: bool) -> String {
    format!(
        "[experiment]\nname = {name}\nmanifest = {}\nrepresentation = cnn\nseed = {seed}\n\n[representation.cnn]\nkind = cnn\nmodel = {}\nl2 = {l2}\n",
        manifest.display(),
        model.display()
    )
}

fn run_config(text: &str) -> Result<ResultsRow, Box<dyn std::error::Error>> {
    let cfg = ExperimentConfig::parse(text, Path::new("."))?;
    Ok(run_experiment(&cfg)?.row)
}

fn accuracy(row: &ResultsRow) -> f64 {
    row.accuracy.unwrap_or(f64::NAN)
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

// ---------------------------------------------------------------- 1

const REFERENCE_DIMS: [usize; 16] = [
    327_680, 327_680, 41_984, 41_984, 83_968, 81_920, 165_888, 4096, 4096, 4096, 40_960, 2048, 1024, 128, 88_064,
    86_016,
];

fn printed_value(label: &str) -> f64 {
    match label.strip_suffix('K') {
        Some(k) => k.parse::<f64>().unwrap_or(f64::NAN) * 1000.0,
        None => label.parse().unwrap_or(f64::NAN),
    }
}

fn criterion_1() -> Outcome {
    let rows = reference_dims()?;
    let mut bad = Vec::new();
    if rows.len() != REFERENCE_DIMS.len() {
        bad.push(format!("{} rows, expected {}", rows.len(), REFERENCE_DIMS.len()));
    }
    for ((row, dim), want) in rows.iter().zip(REFERENCE_DIMS) {
        if *dim != want {
            bad.push(format!("{} {}: {dim} != {want}", row.method, row.aug));
        }
        // printed entries are rounded to the nearest thousand
        let label = dim_label(*dim);
        if (printed_value(row.printed) - *dim as f64).abs() > 1000.0 {
            bad.push(format!("{} {}: {dim} vs printed {}", row.method, row.aug, row.printed));
        }
        if row.printed != label && !row.printed.ends_with('K') {
            bad.push(format!("{}: label {label} vs printed {}", row.method, row.printed));
        }
    }
    let relabelled: Vec<String> = rows
        .iter()
        .filter(|(r, d)| dim_label(*d) != r.printed)
        .map(|(r, d)| format!("{} {} printed {}", r.method, dim_label(*d), r.printed))
        .collect();
    Ok((
        bad.is_empty(),
        format!(
            "{} rows exact{}{}",
            rows.len(),
            if relabelled.is_empty() { String::new() } else { format!("; rounding differs: {}", relabelled.join(", ")) },
            if bad.is_empty() { String::new() } else { format!("; {}", bad.join("; ")) }
        ),
    ))
}

// ---------------------------------------------------------------- 2

fn transcription() -> Result<Vec<Vec<String>>, Box<dyn std::error::Error>> {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data/architectures.tsv");
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.starts_with('#') && !l.trim().is_empty())
        .map(|l| l.split('\t').map(str::to_string).collect())
        .collect())
}

/// The architecture-table row of `layer` as emitted by the builder.
fn emitted(spec: &ArchitectureSpec, layer: &str) -> Vec<String> {
    let find = |n: &str| spec.layers.iter().find(|l| l.name == n);
    let Some(l) = find(layer) else {
        return vec!["missing".into()];
    };
    let n = &layer[layer.len() - 1..];
    match l.kind {
        LayerKind::Conv { filters, kernel, stride, pad } => {
            let lrn = find(&format!("norm{n}")).is_some();
            let pool = match find(&format!("pool{n}")).map(|p| p.kind) {
                Some(LayerKind::MaxPool { window, stride }) if window == stride => window.to_string(),
                Some(k) => format!("{k:?}"),
                None => "0".into(),
            };
            vec![
                filters.to_string(),
                kernel.to_string(),
                stride.to_string(),
                pad.to_string(),
                u8::from(lrn).to_string(),
                pool,
            ]
        }
        LayerKind::FullyConnected { out_dim } => {
            let after = if layer == "full8" {
                matches!(find("prob").map(|p| p.kind), Some(LayerKind::Softmax)).then_some("softmax")
            } else {
                matches!(find(&format!("drop{n}")).map(|p| p.kind), Some(LayerKind::Dropout { .. })).then_some("dropout")
            };
            let dash = || "-".to_string();
            vec![out_dim.to_string(), dash(), dash(), dash(), after.unwrap_or("none").into(), dash()]
        }
        k => vec![format!("{k:?}")],
    }
}

fn criterion_2() -> Outcome {
    let rows = transcription()?;
    let mut bad = Vec::new();
    for row in &rows {
        let spec = build_architecture(row[0].parse::<ArchName>()?);
        let got = emitted(&spec, &row[1]);
        if got != row[2..] {
            bad.push(format!("{} {}: {:?} != {:?}", row[0], row[1], got, &row[2..]));
        }
    }
    let mut composed = 0;
    for arch in ArchName::ALL {
        let spec = build_architecture(arch);
        let shapes = spec.shapes()?;
        if spec.input != TensorShape::new(3, 224, 224) || shapes.last() != Some(&TensorShape::flat(1000)) {
            bad.push(format!("{arch}: shapes {:?} -> {:?}", spec.input, shapes.last()));
        }
        if spec.feature_dim()? != arch.full7_dim() {
            bad.push(format!("{arch}: full7 {}", spec.feature_dim()?));
        }
        composed += 1;
    }
    Ok((
        bad.is_empty() && rows.len() == 24,
        format!("{} transcribed rows, {composed} networks composed at 224x224{}", rows.len(), fail_list(&bad)),
    ))
}

fn fail_list(bad: &[String]) -> String {
    if bad.is_empty() {
        String::new()
    } else {
        format!("; {}", bad.join("; "))
    }
}

// ---------------------------------------------------------------- 3

fn layer_cases() -> Vec<(LayerKind, TensorShape, Mode)> {
    let img = TensorShape::new(3, 5, 5);
    vec![
        (LayerKind::Conv { filters: 4, kernel: 3, stride: 1, pad: 1 }, img, Mode::Train),
        (LayerKind::Conv { filters: 2, kernel: 3, stride: 2, pad: 0 }, img, Mode::Train),
        (LayerKind::Relu, img, Mode::Train),
        (LayerKind::Lrn(LrnParams::default()), TensorShape::new(7, 5, 5), Mode::Train),
        (LayerKind::MaxPool { window: 2, stride: 2 }, img, Mode::Train),
        (LayerKind::MaxPool { window: 3, stride: 1 }, img, Mode::Train),
        (LayerKind::FullyConnected { out_dim: 6 }, img, Mode::Train),
        (LayerKind::Dropout { rate: 0.5, mode: DropoutMode::Inverted }, img, Mode::Train),
        (LayerKind::Dropout { rate: 0.3, mode: DropoutMode::Classic }, img, Mode::Train),
        (LayerKind::Dropout { rate: 0.3, mode: DropoutMode::Classic }, img, Mode::Eval),
        (LayerKind::Softmax, TensorShape::flat(7), Mode::Train),
    ]
}

fn loss_net() -> ArchitectureSpec {
    let l = |n: &str, k| LayerSpec::new(n, k);
    ArchitectureSpec {
        name: "gradcheck".into(),
        input: TensorShape::new(2, 6, 6),
        layers: vec![
            l("conv1", LayerKind::Conv { filters: 4, kernel: 3, stride: 1, pad: 1 }),
            l("relu1", LayerKind::Relu),
            l("norm1", LayerKind::Lrn(LrnParams { size: 3, alpha: 0.1, beta: 0.75, bias: 1.0 })),
            l("pool1", LayerKind::MaxPool { window: 2, stride: 2 }),
            l("full6", LayerKind::FullyConnected { out_dim: 5 }),
            l("relu6", LayerKind::Relu),
            l("full7", LayerKind::FullyConnected { out_dim: 3 }),
            l("prob", LayerKind::Softmax),
        ],
        num_classes: 3,
    }
}

fn criterion_3() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut bad = Vec::new();
    let cases = layer_cases();
    for (kind, shape, mode) in &cases {
        for seed in 0..GRAD_SEEDS {
            let e = check_layer(kind, *shape, *mode, seed)?.worst();
            worst = worst.max(e);
            if !(e < GRAD_TOL) {
                bad.push(format!("{} seed {seed}: {e:.2e}", kind.tag()));
            }
        }
    }
    let spec = loss_net();
    for seed in 0..GRAD_SEEDS {
        let mut net = init_network::<f64>(&spec, seed)?;
        for p in &mut net.params {
            p.weights.iter_mut().for_each(|w| *w *= 5.0);
        }
        let mut r = rng(100 + seed);
        let batch: Vec<Tensor<f64>> = (0..4)
            .map(|_| Tensor::new(spec.input, (0..spec.input.len()).map(|_| r.random_range(-1.0..1.0)).collect()))
            .collect::<Result<_, _>>()?;
        let labels = vec![vec![0], vec![2], vec![1], vec![0, 2]];
        let l = &labels;
        let errors = [
            ("softmax_ce", check_network(&net, &batch, seed, |s| softmax_ce(s, l).map_err(Into::into))?),
            ("hinge_cls", check_network(&net, &batch, seed, |s| hinge_cls(s, l).map_err(Into::into))?),
            ("hinge_rank", check_network(&net, &batch, seed, |s| hinge_rank(s, l).map_err(Into::into))?),
        ];
        for (name, e) in errors {
            worst = worst.max(e);
            if !(e < GRAD_TOL) {
                bad.push(format!("{name} seed {seed}: {e:.2e}"));
            }
        }
    }
    Ok((
        bad.is_empty(),
        format!(
            "{} layer cases and 3 losses x {GRAD_SEEDS} seeds, worst relative error {worst:.2e} (< {GRAD_TOL:.0e}){}",
            cases.len(),
            fail_list(&bad)
        ),
    ))
}

// ---------------------------------------------------------------- 4

fn random_model(r: &mut ChaCha8Rng, k: usize, d: usize) -> Result<GmmModel, Box<dyn std::error::Error>> {
    let means: Vec<f64> = (0..k * d).map(|_| r.random_range(-1.0..1.0)).collect();
    let variances: Vec<f64> = (0..k * d).map(|_| r.random_range(0.3..2.0)).collect();
    let raw: Vec<f64> = (0..k).map(|_| r.random_range(0.2..1.0)).collect();
    let s: f64 = raw.iter().sum();
    let mut weights: Vec<f64> = raw.iter().map(|w| w / s).collect();
    let head: f64 = weights[..k - 1].iter().sum();
    weights[k - 1] = 1.0 - head;
    Ok(GmmModel::from_parameters(d, means, variances, weights)?)
}

fn oracle_posteriors(m: &GmmModel, x: &[f64]) -> Vec<f64> {
    let dens: Vec<f64> = (0..m.num_components)
        .map(|k| {
            let mut log_p = m.weights[k].ln();
            for i in 0..m.dim {
                let v = m.variance(k)[i];
                let z = x[i] - m.mean(k)[i];
                log_p += -(z * z) / (2.0 * v) - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
            }
            log_p
        })
        .collect();
    let top = dens.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = dens.iter().map(|l| (l - top).exp()).sum();
    dens.iter().map(|l| (l - top).exp() / total).collect()
}

fn oracle_raw(m: &GmmModel, rows: &[Vec<f64>]) -> Vec<f64> {
    let (k, d) = (m.num_components, m.dim);
    let n = rows.len() as f64;
    let mut out = vec![0.0; 2 * k * d];
    if rows.is_empty() {
        return out;
    }
    for c in 0..k {
        for x in rows {
            let q = oracle_posteriors(m, x)[c];
            if q < 1e-6 {
                continue;
            }
            for i in 0..d {
                let z = (x[i] - m.mean(c)[i]) / m.variance(c)[i].sqrt();
                out[2 * c * d + i] += q * z;
                out[2 * c * d + d + i] += q * (z * z - 1.0);
            }
        }
        let pi = m.weights[c];
        for i in 0..d {
            out[2 * c * d + i] /= n * pi.sqrt();
            out[2 * c * d + d + i] /= n * (2.0 * pi).sqrt();
        }
    }
    out
}

fn ssqrt(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| if *x < 0.0 { -(-x).sqrt() } else { x.sqrt() }).collect()
}

fn l2(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        v.to_vec()
    }
}

fn oracle_improve(raw: &[f64], norm: Normalisation, block: usize) -> Vec<f64> {
    match norm {
        Normalisation::ClassicDoubleSqrt => l2(&ssqrt(&l2(&ssqrt(raw)))),
        Normalisation::IntraNormSingleSqrt => l2(&ssqrt(raw).chunks(block).flat_map(l2).collect::<Vec<_>>()),
    }
}

fn oracle_encode(
    m: &GmmModel,
    rows: &[Vec<f64>],
    sites: &[(f64, f64)],
    (w, h): (f64, f64),
    norm: Normalisation,
    spatial: SpatialScheme,
) -> Vec<f64> {
    let block = 2 * m.dim;
    match spatial {
        SpatialScheme::None => oracle_improve(&oracle_raw(m, rows), norm, block),
        SpatialScheme::Extended => {
            let ext: Vec<Vec<f64>> = rows
                .iter()
                .zip(sites)
                .map(|(x, (sx, sy))| {
                    let mut e = x.clone();
                    e.extend([sx / w - 0.5, sy / h - 0.5]);
                    e
                })
                .collect();
            oracle_improve(&oracle_raw(m, &ext), norm, block)
        }
        SpatialScheme::Pyramid => {
            // whole image, three horizontal bands, four quadrants
            let cell = |(sx, sy): (f64, f64), c: usize| -> bool {
                let (fx, fy) = (sx / w, sy / h);
                let band = ((fy * 3.0).floor() as i64).clamp(0, 2) as usize;
                let (qx, qy) = (((fx * 2.0).floor() as i64).clamp(0, 1) as usize, ((fy * 2.0).floor() as i64).clamp(0, 1) as usize);
                match c {
                    0 => true,
                    1..=3 => band == c - 1,
                    _ => qy * 2 + qx == c - 4,
                }
            };
            let mut out = Vec::new();
            for c in 0..8 {
                let members: Vec<Vec<f64>> =
                    rows.iter().zip(sites).filter(|(_, s)| cell(**s, c)).map(|(x, _)| x.clone()).collect();
                out.extend(oracle_improve(&oracle_raw(m, &members), norm, block));
            }
            l2(&out)
        }
    }
}

fn criterion_4() -> Outcome {
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    let mut bad = Vec::new();
    for inst in 0..FV_INSTANCES {
        let k = r.random_range(1..6);
        let d = r.random_range(1..6);
        let n = r.random_range(0..40);
        let (w, h) = (r.random_range(8..80) as f64, r.random_range(8..80) as f64);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| 1.5 * normal(&mut r)).collect()).collect();
        let sites: Vec<(f64, f64)> = (0..n).map(|_| (r.random_range(0.0..w), r.random_range(0.0..h))).collect();
        let set = DescriptorSet::from_parts(
            d,
            rows.concat(),
            sites.iter().map(|&(x, y)| Site { x, y, scale: 4.0 }).collect(),
        )?;
        for spatial in [SpatialScheme::None, SpatialScheme::Pyramid, SpatialScheme::Extended] {
            let gmm_dim = if spatial == SpatialScheme::Extended { d + 2 } else { d };
            let model = random_model(&mut r, k, gmm_dim)?;
            for norm in [Normalisation::ClassicDoubleSqrt, Normalisation::IntraNormSingleSqrt] {
                let cfg = FisherConfig::new(norm, spatial, k, d);
                let got = encode_spatial(&model, &set, &cfg, w as usize, h as usize)?;
                let want = oracle_encode(&model, &rows, &sites, (w.floor(), h.floor()), norm, spatial);
                checked += 1;
                if got.values.len() != want.len() {
                    bad.push(format!("instance {inst} {spatial:?}: dim {} vs {}", got.values.len(), want.len()));
                    continue;
                }
                let e = got.values.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
                worst = worst.max(e);
                if !(e <= FV_TOL) {
                    bad.push(format!("instance {inst} {norm:?}/{spatial:?}: {e:.2e}"));
                }
            }
        }
    }
    bad.truncate(5);
    Ok((
        bad.is_empty(),
        format!("{checked} encodings ({FV_INSTANCES} instances x 2 normalisations x 3 spatial), max abs error {worst:.2e} (<= {FV_TOL:.0e}){}", fail_list(&bad)),
    ))
}

// ---------------------------------------------------------------- 5

fn criterion_5() -> Outcome {
    let mut worst_drop: f64 = 0.0;
    let mut bad = Vec::new();
    for seed in 0..GMM_RUNS {
        let mut r = rng(500 + seed);
        let (k, d) = (r.random_range(2..6), r.random_range(1..5));
        let centres: Vec<Vec<f64>> = (0..k).map(|_| (0..d).map(|_| r.random_range(-4.0..4.0)).collect()).collect();
        let rows: Vec<Vec<f64>> = (0..600)
            .map(|i| centres[i % k].iter().map(|c| c + r.random_range(0.3..1.5) * normal(&mut r)).collect())
            .collect();
        let set = DescriptorSet::from_rows(d, &rows)?;
        let m = fit_gmm(&set, &GmmOptions::new(k + r.random_range(0..2), seed))?;
        for w in m.log_likelihood_history.windows(2) {
            let drop = w[0] - w[1];
            worst_drop = worst_drop.max(drop);
            if drop > GMM_DECREASE_TOL {
                bad.push(format!("seed {seed}: decrease {drop:.2e}"));
            }
        }
    }
    let mut r = rng(2);
    let centres = [[0.0, 0.0], [10.0, 0.0]];
    let rows: Vec<Vec<f64>> = (0..4000)
        .map(|i| {
            let c = centres[i % 2];
            vec![c[0] + normal(&mut r), c[1] + normal(&mut r)]
        })
        .collect();
    let m = fit_gmm(&DescriptorSet::from_rows(2, &rows)?, &GmmOptions::new(2, 9))?;
    let mut found: Vec<&[f64]> = (0..2).map(|k| m.mean(k)).collect();
    found.sort_by(|a, b| a[0].total_cmp(&b[0]));
    let err = found
        .iter()
        .zip(centres)
        .flat_map(|(f, c)| [(f[0] - c[0]).abs(), (f[1] - c[1]).abs()])
        .fold(0.0, f64::max);
    if !(err <= GMM_MEAN_TOL) {
        bad.push(format!("two-cluster mean error {err:.4}"));
    }
    bad.truncate(5);
    Ok((
        bad.is_empty(),
        format!(
            "{GMM_RUNS} runs, largest log-likelihood decrease {worst_drop:.2e}; two-cluster mean error {err:.4} (<= {GMM_MEAN_TOL}){}",
            fail_list(&bad)
        ),
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let mut r = rng(6);
    let mut bad = Vec::new();
    for _ in 0..AUG_SIZES {
        let target = r.random_range(4..40);
        let (w, h) = (r.random_range(target..4 * target), r.random_range(target..4 * target));
        let img = RasterImage::from_fn(w, h, ColorSpace::Rgb, |_, _, _| r.random::<f64>())?;
        for (kind, want) in [(AugmentKind::None, 1), (AugmentKind::Flip, 2), (AugmentKind::CropFlip, 10)] {
            let boxes = crop_boxes(w, h, kind, target)?.len();
            let shallow = generate_samples(&img, kind, target, false)?.len();
            let deep = generate_samples(&img, kind, target, true)?;
            if boxes != want || shallow != want || deep.len() != want || kind.sample_count() != want {
                bad.push(format!("{w}x{h} t{target} {kind:?}: {boxes}/{shallow}/{}", deep.len()));
            }
            if deep.iter().any(|s| s.width() != target || s.height() != target) {
                bad.push(format!("{w}x{h} t{target} {kind:?}: sample size"));
            }
        }
        let twice = img.mirror().mirror();
        if twice.data() != img.data() || img.mirror().data() == img.data() {
            bad.push(format!("{w}x{h}: mirror is not an involution"));
        }
    }
    bad.truncate(5);
    Ok((bad.is_empty(), format!("{AUG_SIZES} sizes: counts 1/2/10, mirror involution bit-exact{}", fail_list(&bad))))
}

// ---------------------------------------------------------------- 7

/// Precision at the rank of each positive, ranks by descending score with
/// ties in input order.
fn brute_ap(scores: &[f64], pos: &[bool]) -> f64 {
    let rank = |i: usize| (0..scores.len()).filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i)).count() + 1;
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| pos[i]).collect();
    let mut total = 0.0;
    for &i in &positives {
        let ri = rank(i);
        let above = positives.iter().filter(|&&j| rank(j) <= ri).count();
        total += above as f64 / ri as f64;
    }
    total / positives.len() as f64
}

fn criterion_7() -> Outcome {
    let mut r = rng(7);
    let (mut worst_ap, mut worst_top, mut worst_mca): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..METRIC_INSTANCES {
        let n = r.random_range(1..40);
        // quantised scores so ties occur
        let scores: Vec<f64> = (0..n).map(|_| (r.random_range(0..12) as f64) * 0.25).collect();
        let mut pos: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
        pos[r.random_range(0..n)] = true;
        worst_ap = worst_ap.max((average_precision(&scores, &pos)? - brute_ap(&scores, &pos)).abs());

        let c = r.random_range(2..9);
        let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..c).map(|_| r.random_range(0..5) as f64).collect()).collect();
        let truth: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let k = r.random_range(1..=c);
        let wrong = rows
            .iter()
            .zip(&truth)
            .filter(|(row, &t)| (0..c).filter(|&j| row[j] > row[t] || (row[j] == row[t] && j < t)).count() >= k)
            .count();
        worst_top = worst_top.max((top_k_error(&rows, &truth, k)? - wrong as f64 / n as f64).abs());

        let preds: Vec<usize> = (0..n).map(|_| r.random_range(0..c)).collect();
        let mut per_class = Vec::new();
        for class in 0..c {
            let members: Vec<usize> = (0..n).filter(|&i| truth[i] == class).collect();
            if !members.is_empty() {
                per_class.push(members.iter().filter(|&&i| preds[i] == class).count() as f64 / members.len() as f64);
            }
        }
        let want = per_class.iter().sum::<f64>() / per_class.len() as f64;
        worst_mca = worst_mca.max((mean_class_accuracy(&preds, &truth, c)? - want).abs());
    }
    let mut edges = true;
    for n in [1usize, 5, 50] {
        for np in 1..=n {
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let pos: Vec<bool> = (0..n).map(|i| i < np).collect();
            edges &= average_precision(&scores, &pos)? == 1.0;
        }
        for rank in 1..=n {
            let scores: Vec<f64> = (0..n).map(|i| (n - i) as f64).collect();
            let pos: Vec<bool> = (0..n).map(|i| i + 1 == rank).collect();
            edges &= average_precision(&scores, &pos)? == 1.0 / rank as f64;
        }
    }
    let pass = worst_ap <= METRIC_TOL && worst_top <= METRIC_TOL && worst_mca <= METRIC_TOL && edges;
    Ok((
        pass,
        format!(
            "{METRIC_INSTANCES} instances each, max error AP {worst_ap:.1e} top-k {worst_top:.1e} MCA {worst_mca:.1e} (<= {METRIC_TOL:.0e}); edge cases {}",
            if edges { "exact" } else { "WRONG" }
        ),
    ))
}

// ---------------------------------------------------------------- 8, 12

struct Textures {
    manifest: PathBuf,
    dir: PathBuf,
    rows: Option<(ResultsRow, ResultsRow)>,
}

fn textures(root: &Path) -> Result<Textures, Box<dyn std::error::Error>> {
    let dir = root.join("textures");
    let manifest = generate(&SynthOptions::new(SynthKind::Textures, TEXTURE_TRAIN, TEXTURE_TEST, TEXTURE_SEED), &dir)?;
    Ok(Textures { manifest, dir, rows: None })
}

fn criterion_8(t: &mut Textures) -> Outcome {
    let plain = run_config(&ifv_config("textures-ifv", &t.manifest, TEXTURE_SEED, NO_AUGMENT))?;
    let cf = run_config(&ifv_config("textures-ifv-cf", &t.manifest, TEXTURE_SEED, CROP_FLIP_SUM))?;
    let (a, b) = (accuracy(&plain), accuracy(&cf));
    t.rows = Some((plain, cf));
    Ok((
        a >= SHALLOW_MIN_ACCURACY && b >= a - AUGMENT_MAX_DROP,
        format!(
            "IFV K=16 D=20 accuracy {:.1}% (>= {:.0}%), with C+F sum fusion {:.1}% (drop <= {:.0} point)",
            100.0 * a,
            100.0 * SHALLOW_MIN_ACCURACY,
            100.0 * b,
            100.0 * AUGMENT_MAX_DROP
        ),
    ))
}

fn cli_rows(t: &Textures, threads: usize) -> Result<Vec<String>, Box<dyn std::error::Error>> {
    let mut rows = Vec::new();
    for (name, aug) in [("textures-ifv", NO_AUGMENT), ("textures-ifv-cf", CROP_FLIP_SUM)] {
        let cfg = t.dir.join(format!("{name}.ini"));
        std::fs::write(&cfg, ifv_config(name, &t.manifest, TEXTURE_SEED, aug))?;
        let out = Command::new(env!("CARGO_BIN_EXE_dvk"))
            .args(["--threads", &threads.to_string(), "run", "--config"])
            .arg(&cfg)
            .env_remove("DVK_CACHE_DIR")
            .output()?;
        if !out.status.success() {
            return Err(format!("dvk exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr)).into());
        }
        let stdout = String::from_utf8(out.stdout)?;
        rows.push(stdout.lines().nth(1).ok_or("no results row")?.to_string());
    }
    Ok(rows)
}

fn criterion_12(t: &Textures) -> Outcome {
    let one = cli_rows(t, 1)?;
    let eight = cli_rows(t, 8)?;
    let in_process: Vec<String> = t.rows.iter().flat_map(|(a, b)| [a.to_tsv(), b.to_tsv()]).collect();
    let same = one == eight;
    let matches_library = in_process.is_empty() || in_process == one;
    Ok((
        same && matches_library,
        format!(
            "{} rows via the binary: --threads 1 vs 8 {}; library run {}",
            one.len(),
            if same { "bit-identical" } else { "DIFFER" },
            if in_process.is_empty() { "unavailable" } else if matches_library { "identical" } else { "DIFFERS" }
        ),
    ))
}

// ---------------------------------------------------------------- 9, 10, 11

struct Shapes {
    manifest: PathBuf,
    images: Vec<LoadedImage>,
    net: Option<(NetworkState<f32>, Vec<f64>, PathBuf)>,
}

fn shapes(root: &Path) -> Result<Shapes, Box<dyn std::error::Error>> {
    let dir = root.join("shapes");
    let manifest = generate(&SynthOptions::new(SynthKind::Shapes, SHAPES_TRAIN, SHAPES_TEST, SHAPES_SEED), &dir)?;
    let images = load_images(&load_manifest(&manifest)?)?;
    Ok(Shapes { manifest, images, net: None })
}

fn train_split(s: &Shapes) -> Vec<&LoadedImage> {
    s.images.iter().filter(|i| i.entry.split == Split::Train).collect()
}

fn criterion_9(s: &mut Shapes, root: &Path) -> Outcome {
    let train_images = train_split(s);
    let refs: Vec<&RasterImage> = train_images.iter().map(|i| &i.image).collect();
    let labels: Vec<Vec<usize>> = train_images.iter().map(|i| i.entry.positive_labels()).collect();
    let mean = channel_means(&refs);
    let src = ImageSource::new(&refs, labels.clone(), MICRO_SIDE, mean.clone(), MICRO_TRAIN_AUGMENT)?;
    let spec = build_with(ArchName::CnnF, &BuildOptions::micro(ArchName::CnnF, MICRO_SIDE, MICRO_DIVISOR, MICRO_FC, 10))?;
    let mut net = init_network::<f32>(&spec, MICRO_SEED)?;
    let mut cfg = TrainConfig::new(LossKind::SoftmaxCe, LrSchedule::plateau(MICRO_LR, 3, 2), MICRO_SEED);
    cfg.max_epochs = MICRO_EPOCHS;
    cfg.track_train_accuracy = true;
    let report = train(&mut net, &src, None, &mut cfg)?;
    // accuracy on the un-augmented training images
    let plain = ImageSource::new(&refs, labels, MICRO_SIDE, mean.clone(), false)?;
    let final_acc = dvk_cnn::train::accuracy(&net, &plain, 64)?;
    let first_hit = report
        .epochs
        .iter()
        .find(|e| e.train_accuracy.is_some_and(|a| a >= MIN_TRAIN_ACCURACY))
        .map(|e| e.epoch + 1);

    let model_path = root.join("micro-cnn-f.dvkm");
    let mut c = Container::default();
    models::insert_network(&mut c, &net, &mean);
    c.save(&model_path)?;
    s.net = Some((net, mean, model_path.clone()));

    let cnn = run_config(&cnn_config("shapes-cnn", &s.manifest, &model_path, SHAPES_SEED, true))?;
    let ifv = run_config(&ifv_config("shapes-ifv", &s.manifest, SHAPES_SEED, NO_AUGMENT))?;
    let reached = first_hit.is_some() && final_acc >= MIN_TRAIN_ACCURACY;
    let beats = accuracy(&cnn) > accuracy(&ifv);
    Ok((
        reached && beats,
        format!(
            "{}: train accuracy >= {:.0}% first at epoch {} of {MICRO_EPOCHS}, final {:.2}%; test accuracy full7+SVM {:.1}% (mAP {:.4}) vs IFV {:.1}% (mAP {:.4}){}",
            spec.name,
            100.0 * MIN_TRAIN_ACCURACY,
            first_hit.map_or("-".into(), |e| e.to_string()),
            100.0 * final_acc,
            100.0 * accuracy(&cnn),
            cnn.map.unwrap_or(f64::NAN),
            100.0 * accuracy(&ifv),
            ifv.map.unwrap_or(f64::NAN),
            if beats { "" } else { "; CNN does not beat IFV" }
        ),
    ))
}

fn criterion_10(s: &Shapes) -> Outcome {
    let (net, mean, _) = s.net.as_ref().ok_or("criterion 9 produced no network")?;
    let subset: Vec<(&RasterImage, usize)> = train_split(s)
        .into_iter()
        .filter_map(|i| {
            let c = i.entry.positive_labels()[0];
            FINE_TUNE_CLASSES.iter().position(|&f| f == c).map(|new| (&i.image, new))
        })
        .collect();
    let refs: Vec<&RasterImage> = subset.iter().map(|(i, _)| *i).collect();
    let labels: Vec<Vec<usize>> = subset.iter().map(|(_, l)| vec![*l]).collect();
    let src = ImageSource::new(&refs, labels, MICRO_SIDE, mean.clone(), false)?;
    let mut cfg = TrainConfig::new(LossKind::HingeRank, LrSchedule::fine_tune(2), MICRO_SEED + 1);
    cfg.max_epochs = FINE_TUNE_MAX_EPOCHS;
    cfg.track_eval_loss = true;
    let start = dataset_loss(&prepare_fine_tune(net, 3, cfg.seed)?, &src, LossKind::HingeRank, cfg.batch_size)?;
    let (_, report) = fine_tune(net, 3, &src, None, &mut cfg)?;
    let mut losses = vec![start];
    losses.extend(report.epochs.iter().filter(|e| e.stage == 0).filter_map(|e| e.eval_loss));
    // strictly lower at the end of the stage, and never higher from one
    // epoch to the next (a hinge loss can bottom out at zero)
    let strict = losses.len() >= 2
        && losses[losses.len() - 1] < losses[0]
        && losses.windows(2).all(|w| w[1] <= w[0]);
    let shown: Vec<String> = losses.iter().map(|l| format!("{l:.4}")).collect();
    Ok((
        strict,
        format!(
            "{} images, classes {FINE_TUNE_CLASSES:?} relabelled 0..2; ranking loss over the first stage ({} epochs): {}",
            refs.len(),
            losses.len() - 1,
            shown.join(" -> ")
        ),
    ))
}

fn criterion_11(s: &Shapes) -> Outcome {
    let (_, _, model) = s.net.as_ref().ok_or("criterion 9 produced no network")?;
    let with = run_config(&cnn_config("shapes-cnn-l2", &s.manifest, model, SHAPES_SEED, true))?;
    let without = run_config(&cnn_config("shapes-cnn-raw", &s.manifest, model, SHAPES_SEED, false))?;
    let (a, b) = (with.map.unwrap_or(f64::NAN), without.map.unwrap_or(f64::NAN));
    Ok((
        a >= b,
        format!(
            "test mAP l2-normalised {a:.4} vs unnormalised {b:.4} (accuracy {:.1}% vs {:.1}%)",
            100.0 * accuracy(&with),
            100.0 * accuracy(&without)
        ),
    ))
}

// ----------------------------------------------------------------

fn report(id: usize, name: &str, start: Instant, outcome: Outcome) -> bool {
    let secs = start.elapsed().as_secs_f64();
    let (mut pass, mut detail) = match outcome {
        Ok(r) => r,
        Err(e) => (false, format!("error: {e}")),
    };
    if let Some(limit) = LIMITS[id - 1] {
        if secs > limit {
            pass = false;
            detail.push_str(&format!("; runtime over {limit} s"));
        }
    }
    println!("criterion {id:>2} {} {name}: {detail} [{secs:.2} s]", if pass { "PASS" } else { "FAIL" });
    pass
}

fn main() {
    // `cargo test` passes filter and harness flags; this binary runs everything
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = tmp.path();
    let mut results = Vec::new();

    let t = Instant::now();
    results.push(report(1, "dimension reproduction", t, criterion_1()));
    let t = Instant::now();
    results.push(report(2, "architecture reproduction", t, criterion_2()));
    let t = Instant::now();
    results.push(report(3, "gradient correctness", t, criterion_3()));
    let t = Instant::now();
    results.push(report(4, "Fisher vector oracle", t, criterion_4()));
    let t = Instant::now();
    results.push(report(5, "GMM", t, criterion_5()));
    let t = Instant::now();
    results.push(report(6, "augmentation counts", t, criterion_6()));
    let t = Instant::now();
    results.push(report(7, "metric oracles", t, criterion_7()));

    let t = Instant::now();
    let mut tex = textures(root);
    let c8 = match &mut tex {
        Ok(tex) => criterion_8(tex),
        Err(e) => Err(e.to_string().into()),
    };
    results.push(report(8, "shallow pipeline on textures", t, c8));

    let t = Instant::now();
    let mut shp = shapes(root);
    let c9 = match &mut shp {
        Ok(s) => criterion_9(s, root),
        Err(e) => Err(e.to_string().into()),
    };
    results.push(report(9, "deep pipeline on shapes", t, c9));
    let t = Instant::now();
    let c10 = shp.as_ref().map_err(|e| e.to_string().into()).and_then(criterion_10);
    results.push(report(10, "fine-tuning with ranking loss", t, c10));
    let t = Instant::now();
    let c11 = shp.as_ref().map_err(|e| e.to_string().into()).and_then(criterion_11);
    results.push(report(11, "l2 normalisation ablation", t, c11));

    let t = Instant::now();
    let c12 = tex.as_ref().map_err(|e| e.to_string().into()).and_then(criterion_12);
    results.push(report(12, "determinism across thread counts", t, c12));

    let passed = results.iter().filter(|p| **p).count();
    println!("{passed}/{} criteria passed", results.len());
    if passed != results.len() && std::env::var_os(STRICT_ENV).is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}
