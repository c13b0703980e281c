use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dvk_cnn::train::{extract_features_with, fine_tune, train, TrainConfig};
use dvk_cnn::{build_with, init_network, ArchName, BuildOptions, LossKind, LrSchedule, Mode};
use dvk_core::augment::AugmentKind;
use dvk_core::descriptors::{DenseSamplingParams, DescriptorSet};
use dvk_core::eval::{self, ApVariant};
use dvk_core::gmm::{fit_gmm, GmmOptions};
use dvk_core::reduce::{apply_pca, fit_pca_subsampled, spatially_extend};
use dvk_core::svm::{self, SvmOptions, TrainingSet};
use dvk_core::RasterImage;
use dvk_harness::cache::{read_matrix, write_matrix, Dtype, Matrix};
use dvk_harness::config::{DescriptorKind, ExperimentConfig, IfvSpec};
use dvk_harness::dims::{dim_label, output_dim, reference_dims};
use dvk_harness::manifest::{load_manifest, DatasetManifest, Split};
use dvk_harness::models::{self, Container};
use dvk_harness::pipeline::{self, load_images, LoadedImage, Run};
use dvk_harness::synth::{generate, SynthKind, SynthOptions};
use dvk_harness::training::{channel_means, ImageSource};
use dvk_harness::{plot, Error, Result};

#[derive(Parser)]
#[command(name = "dvk", about = "Shallow and deep image representations: extraction, training and evaluation")]
struct Cli {
    /// Worker threads (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Log progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Sampling {
    #[arg(long, default_value = "sift")]
    descriptor: String,
    #[arg(long, default_value_t = 3)]
    stride: usize,
    #[arg(long, default_value_t = 7)]
    scales: usize,
    #[arg(long, default_value_t = 24)]
    base_patch: usize,
    #[arg(long, default_value_t = 2)]
    upscale: usize,
}

impl Sampling {
    fn params(&self) -> DenseSamplingParams {
        DenseSamplingParams {
            stride: self.stride,
            num_scales: self.scales,
            base_patch: self.base_patch,
            upscale_factor: self.upscale,
            ..DenseSamplingParams::default()
        }
    }

    fn kind(&self) -> Result<DescriptorKind> {
        match self.descriptor.as_str() {
            "sift" => Ok(DescriptorKind::Sift),
            "lcs" => Ok(DescriptorKind::Lcs),
            d => Err(Error::Config(format!("unknown descriptor {d:?}"))),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Dense local descriptors of one split, pooled into one feature file.
    Extract {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[command(flatten)]
        sampling: Sampling,
        /// Project with the PCA in this model file.
        #[arg(long)]
        pca: Option<PathBuf>,
        /// Append normalised (x, y) site coordinates.
        #[arg(long)]
        xy: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// PCA on a descriptor file.
    FitPca {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long, default_value_t = 80)]
        dim: usize,
        #[arg(long, default_value_t = dvk_core::reduce::DEFAULT_PCA_SAMPLE_CAP)]
        cap: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Diagonal GMM vocabulary on a descriptor file.
    FitGmm {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 100)]
        iters: usize,
        /// Model file whose sections are carried into the output (e.g. PCA).
        #[arg(long)]
        with: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Encodes one split with the configured representation and fusion.
    Encode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        out: PathBuf,
    },
    /// Initialises a network from the architecture table.
    CnnInit {
        #[arg(long, default_value = "CNN-F")]
        arch: ArchName,
        #[arg(long)]
        classes: usize,
        /// Divide convolution widths by this.
        #[arg(long, default_value_t = 1)]
        divisor: usize,
        #[arg(long, default_value_t = 224)]
        input: usize,
        /// Width of full6/full7 (full-size default 4096).
        #[arg(long)]
        fc: Option<usize>,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Trains a network with SGD on the train split.
    CnnTrain {
        #[command(flatten)]
        t: TrainArgs,
        #[arg(long, default_value_t = 0.01)]
        lr: f64,
        #[arg(long, default_value_t = 3)]
        drops: usize,
    },
    /// Replaces the classifier and fine-tunes on the train split.
    CnnFinetune {
        #[command(flatten)]
        t: TrainArgs,
    },
    /// full7 features of one split, one row per augmentation sample.
    CnnExtract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value = "none")]
        augment: String,
        #[arg(long)]
        no_l2: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-vs-rest linear SVMs on a feature file (rows in split order).
    SvmTrain {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        #[arg(long, default_value_t = 1.0)]
        c: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scores a feature file with a trained SVM and reports metrics.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = 5)]
        top_k: usize,
        #[arg(long)]
        eleven_point: bool,
    },
    /// Full pipeline from a config file; prints (and optionally appends)
    /// the results row.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        results: Option<PathBuf>,
    },
    /// Dimension calculator: the reference table's Dim column, or one
    /// config's output dimension.
    Dims {
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Bar chart of a results file column or of label=value points.
    Plot {
        #[arg(long)]
        results: Option<PathBuf>,
        #[arg(long, default_value = "map")]
        metric: String,
        #[arg(long = "point")]
        points: Vec<String>,
        #[arg(long, default_value = "")]
        title: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes a seeded synthetic dataset and its manifest.
    Synth {
        #[arg(long)]
        kind: SynthKind,
        #[arg(long)]
        train: usize,
        #[arg(long, default_value_t = 0)]
        val: usize,
        #[arg(long)]
        test: usize,
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value = "softmax_ce")]
    loss: LossKind,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    #[arg(long, default_value_t = 5e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 2)]
    patience: usize,
    /// Random crops and mirroring while training.
    #[arg(long)]
    augment: bool,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn augment_kind(s: &str) -> Result<AugmentKind> {
    match s {
        "none" => Ok(AugmentKind::None),
        "flip" => Ok(AugmentKind::Flip),
        "crop_flip" => Ok(AugmentKind::CropFlip),
        _ => Err(Error::Config(format!("unknown augmentation {s:?}"))),
    }
}

fn split_images(manifest: &DatasetManifest, split: Split) -> Result<Vec<LoadedImage>> {
    let all = load_images(manifest)?;
    Ok(all.into_iter().filter(|i| i.entry.split == split).collect())
}

fn labels_of(images: &[LoadedImage]) -> Vec<Vec<usize>> {
    images.iter().map(|i| i.entry.positive_labels()).collect()
}

fn extract(manifest: &Path, split: Split, sampling: &Sampling, pca: Option<&Path>, xy: bool, out: &Path) -> Result<()> {
    let m = load_manifest(manifest)?;
    let images = split_images(&m, split)?;
    let spec = IfvSpec {
        descriptor: sampling.kind()?,
        normalisation: dvk_core::fisher::Normalisation::IntraNormSingleSqrt,
        spatial: dvk_core::fisher::SpatialScheme::None,
        pyramid_norm: dvk_core::fisher::PyramidNorm::PerCell,
        k: 1,
        pca_dim: 1,
        sampling: sampling.params(),
        pca_samples: 0,
        gmm_samples: 0,
        gmm_iters: 0,
        gmm_tol: 0.0,
    };
    let pca = pca.map(|p| Container::load(p).and_then(|c| models::decode_pca(c.get(models::PCA)?))).transpose()?;
    let sets: Vec<DescriptorSet> = {
        use rayon::prelude::*;
        images
            .par_iter()
            .map(|i| {
                let mut d = pipeline::raw_descriptors(&i.image, &spec)?;
                if let Some(p) = &pca {
                    d = apply_pca(p, &d)?;
                }
                if xy {
                    d = spatially_extend(&d, i.image.width(), i.image.height())?;
                }
                Ok(d)
            })
            .collect::<Result<_>>()?
    };
    let dim = sets.first().map_or(0, |s| s.dim());
    let m = Matrix::from_rows(dim, sets.iter().flat_map(|s| s.iter()))?;
    log::info!("{} descriptors of dimension {dim}", m.count);
    write_matrix(out, &m, Dtype::F64)
}

fn descriptor_set(path: &Path) -> Result<DescriptorSet> {
    let m = read_matrix(path)?;
    Ok(DescriptorSet::from_parts(
        m.dim,
        m.values,
        vec![dvk_core::descriptors::Site { x: 0.0, y: 0.0, scale: 0.0 }; m.count],
    )?)
}

fn load_net(path: &Path) -> Result<(dvk_cnn::NetworkState<f32>, Vec<f64>)> {
    models::network::<f32>(&Container::load(path)?)
}

fn save_net(path: &Path, net: &dvk_cnn::NetworkState<f32>, mean: &[f64]) -> Result<()> {
    let mut c = Container::default();
    models::insert_network(&mut c, net, mean);
    c.save(path)
}

fn train_source(t: &TrainArgs, side: usize, mean: Option<Vec<f64>>) -> Result<(ImageSource, usize, Vec<f64>)> {
    let m = load_manifest(&t.manifest)?;
    let images = split_images(&m, Split::Train)?;
    let refs: Vec<&RasterImage> = images.iter().map(|i| &i.image).collect();
    let mean = mean.unwrap_or_else(|| channel_means(&refs));
    let src = ImageSource::new(&refs, labels_of(&images), side, mean.clone(), t.augment)?;
    Ok((src, m.num_classes(), mean))
}

fn configure(t: &TrainArgs, schedule: LrSchedule) -> TrainConfig {
    let mut cfg = TrainConfig::new(t.loss, schedule, t.seed);
    cfg.max_epochs = t.epochs;
    cfg.batch_size = t.batch;
    cfg.momentum = t.momentum;
    cfg.weight_decay = t.weight_decay;
    cfg.track_train_accuracy = t.loss == LossKind::SoftmaxCe;
    cfg
}

fn report(rep: &dvk_cnn::train::TrainReport) {
    for e in &rep.epochs {
        println!(
            "epoch {}\tloss {:.6}\tlr {:.0e}/{:.0e}\ttrain_acc {}",
            e.epoch,
            e.batch_loss,
            e.lr_last,
            e.lr_hidden,
            e.train_accuracy.map_or("-".into(), |a| format!("{a:.4}"))
        );
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Extract { manifest, split, sampling, pca, xy, out } => {
            extract(&manifest, split, &sampling, pca.as_deref(), xy, &out)
        }
        Command::FitPca { descriptors, dim, cap, seed, out } => {
            let pca = fit_pca_subsampled(&descriptor_set(&descriptors)?, dim, cap, seed)?;
            let mut c = Container::default();
            c.insert(models::PCA, models::encode_pca(&pca));
            c.save(&out)
        }
        Command::FitGmm { descriptors, k, seed, iters, with, out } => {
            let mut opts = GmmOptions::new(k, seed);
            opts.max_iters = iters;
            let gmm = fit_gmm(&descriptor_set(&descriptors)?, &opts)?;
            if let Some(ll) = gmm.log_likelihood_history.last() {
                println!("log-likelihood per descriptor {ll:.6} after {} iterations", gmm.log_likelihood_history.len());
            }
            let mut c = match with {
                Some(p) => Container::load(&p)?,
                None => Container::default(),
            };
            c.insert(models::GMM, models::encode_gmm(&gmm));
            c.save(&out)
        }
        Command::Encode { config, split, out } => {
            let cfg = ExperimentConfig::load(&config)?;
            let run = Run::prepare(&cfg)?;
            let idx = match split {
                Split::Train => &run.splits.train,
                Split::Val => &run.splits.val,
                Split::Test => &run.splits.test,
            };
            let per_image = run.features(idx)?;
            let (x, _) = pipeline::fused_examples(&per_image, cfg.augment.test_fusion)?;
            write_matrix(&out, &Matrix::from_features(&x)?, Dtype::F64)
        }
        Command::CnnInit { arch, classes, divisor, input, fc, seed, out } => {
            let mut opts = if divisor == 1 && input == 224 && fc.is_none() {
                BuildOptions::full(arch)
            } else {
                BuildOptions::micro(arch, input, divisor, fc.unwrap_or(4096 / divisor), classes)
            };
            opts.num_classes = classes;
            let spec = build_with(arch, &opts)?;
            let mut net = init_network::<f32>(&spec, seed)?;
            net.set_mode(Mode::Eval);
            println!("{}: {} parameters, full7 {}", spec.name, net.num_parameters(), spec.feature_dim()?);
            save_net(&out, &net, &[0.0; 3])
        }
        Command::CnnTrain { t, lr, drops } => {
            let (mut net, _) = load_net(&t.model)?;
            let (src, _, mean) = train_source(&t, net.spec.input.height, None)?;
            let mut cfg = configure(&t, LrSchedule::plateau(lr, drops, t.patience));
            let rep = train(&mut net, &src, None, &mut cfg)?;
            report(&rep);
            save_net(&t.out, &net, &mean)
        }
        Command::CnnFinetune { t } => {
            let (net, mean) = load_net(&t.model)?;
            let (src, classes, _) = train_source(&t, net.spec.input.height, Some(mean.clone()))?;
            let mut cfg = configure(&t, LrSchedule::fine_tune(t.patience));
            let (tuned, rep) = fine_tune(&net, classes, &src, None, &mut cfg)?;
            report(&rep);
            save_net(&t.out, &tuned, &mean)
        }
        Command::CnnExtract { model, manifest, split, augment, no_l2, out } => {
            let (net, mean) = load_net(&model)?;
            let kind = augment_kind(&augment)?;
            let m = load_manifest(&manifest)?;
            let mut rows = Vec::new();
            for img in split_images(&m, split)? {
                let tensors = pipeline::cnn_samples(&img.image, kind, &net, &mean)?;
                rows.extend(extract_features_with(&net, &tensors, !no_l2)?);
            }
            write_matrix(&out, &Matrix::from_features(&rows)?, Dtype::F64)
        }
        Command::SvmTrain { features, manifest, split, c, seed, out } => {
            let m = load_manifest(&manifest)?;
            let entries = m.split(split);
            let x = read_matrix(&features)?.to_features("file");
            if x.len() % entries.len().max(1) != 0 || entries.is_empty() {
                return Err(Error::Format(format!("{} feature rows for {} images", x.len(), entries.len())));
            }
            let per = x.len() / entries.len();
            let labels: Vec<Vec<usize>> = (0..x.len()).map(|r| entries[r / per].positive_labels()).collect();
            let ignore: Vec<Vec<usize>> = (0..x.len()).map(|r| entries[r / per].difficult_labels()).collect();
            let opts = SvmOptions { seed, ..SvmOptions::default() };
            let set = TrainingSet { features: &x, labels: &labels, ignore: Some(&ignore) };
            let model = svm::train_ovr(&set, m.num_classes(), c, &opts)?;
            let mut cont = Container::default();
            cont.insert(models::SVM, models::encode_svm(&model));
            models::insert_json(&mut cont, models::META, &serde_json::json!({ "classes": m.classes }));
            cont.save(&out)
        }
        Command::Evaluate { model, features, manifest, split, top_k, eleven_point } => {
            let m = load_manifest(&manifest)?;
            let entries = m.split(split);
            let svm_model = models::decode_svm(Container::load(&model)?.get(models::SVM)?)?;
            let x = read_matrix(&features)?.to_features("file");
            if entries.is_empty() || x.len() % entries.len() != 0 {
                return Err(Error::Format(format!("{} feature rows for {} images", x.len(), entries.len())));
            }
            let per = x.len() / entries.len();
            let groups: Vec<usize> = (0..x.len()).map(|r| r / per).collect();
            let scores = svm::grouped_scores(&svm_model, &x, &groups)?;
            let labels: Vec<Vec<usize>> = entries.iter().map(|e| e.positive_labels()).collect();
            let variant = if eleven_point { ApVariant::ElevenPoint } else { ApVariant::Integral };
            let r = eval::evaluate(&scores, &labels, &m.classes, top_k, variant)?;
            for (c, ap) in &r.per_class_ap {
                println!("ap\t{c}\t{ap:.6}");
            }
            if let Some(v) = r.map {
                println!("map\t{v:.6}");
            }
            if let Some((k, e)) = r.top_k_error {
                println!("top{k}_error\t{e:.6}");
            }
            if let Some(v) = r.mean_class_accuracy {
                println!("mean_class_accuracy\t{v:.6}");
            }
            Ok(())
        }
        Command::Run { config, results } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = pipeline::run_experiment(&cfg)?;
            println!("{}", pipeline::ResultsRow::HEADER);
            println!("{}", out.row.to_tsv());
            if let Some(p) = results {
                pipeline::append_row(&p, &out.row)?;
            }
            Ok(())
        }
        Command::Dims { config } => {
            match config {
                Some(p) => {
                    let cfg = ExperimentConfig::load(&p)?;
                    let d = output_dim(&cfg)?;
                    println!("{d}\t{}", dim_label(d));
                }
                None => {
                    println!("method\tspool\taug\tdim\tlabel\tprinted");
                    for (r, d) in reference_dims()? {
                        println!("{}\t{}\t{}\t{d}\t{}\t{}", r.method, r.spool, r.aug, dim_label(d), r.printed);
                    }
                }
            }
            Ok(())
        }
        Command::Plot { results, metric, points, title, out } => {
            let mut pts = Vec::new();
            if let Some(p) = results {
                let text = std::fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                let mut lines = text.lines();
                let header: Vec<&str> = lines.next().unwrap_or("").split('\t').collect();
                let col = header
                    .iter()
                    .position(|h| *h == metric)
                    .ok_or_else(|| Error::Config(format!("no column {metric:?} in {}", p.display())))?;
                for l in lines.filter(|l| !l.trim().is_empty()) {
                    let f: Vec<&str> = l.split('\t').collect();
                    let v: f64 = f
                        .get(col)
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| Error::Format(format!("bad {metric} value in {l:?}")))?;
                    pts.push((format!("{} {}", f[1], f.get(3).unwrap_or(&"")), v));
                }
            }
            for p in &points {
                let (l, v) = p
                    .rsplit_once('=')
                    .and_then(|(l, v)| v.parse::<f64>().ok().map(|v| (l.to_string(), v)))
                    .ok_or_else(|| Error::Config(format!("point {p:?} is not label=value")))?;
                pts.push((l, v));
            }
            let svg = plot::bar_chart(&pts, &title, &metric)?;
            dvk_harness::cache::write_atomic(&out, svg.as_bytes())
        }
        Command::Synth { kind, train, val, test, size, seed, out } => {
            let opts = SynthOptions { kind, train, val, test, size, seed };
            let path = generate(&opts, &out)?;
            println!("{}", path.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    env_logger::Builder::new()
        .filter_level(if cli.verbose { log::LevelFilter::Info } else { log::LevelFilter::Warn })
        .parse_default_env()
        .init();
    let threads = cli.threads.unwrap_or(0);
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: thread pool: {e}");
            return ExitCode::from(1);
        }
    };
    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
