//! End-to-end experiment execution.

use std::collections::HashMap;
use std::path::PathBuf;

use dvk_cnn::{NetworkState, Tensor};
use dvk_core::augment::{fuse, generate_samples, AugmentKind, Fusion};
use dvk_core::descriptors::{extract_dense_sift, extract_lcs, DescriptorSet};
use dvk_core::eval::{self, EvalResult};
use dvk_core::fisher::{encode_spatial, stack_encodings, SpatialScheme};
use dvk_core::gmm::{fit_gmm, GmmModel, GmmOptions};
use dvk_core::reduce::{apply_pca, fit_pca_subsampled, spatially_extend, PcaModel};
use dvk_core::svm::{self, LinearModel, SvmOptions, TrainingSet};
use dvk_core::{FeatureVector, RasterImage};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::cache::{content_digest, CacheKey, FeatureCache};
use crate::config::{CnnSpec, DescriptorKind, ExperimentConfig, IfvSpec, Representation};
use crate::dims::{dim_label, output_dim};
use crate::imageio::load_rgb;
use crate::manifest::{load_manifest, DatasetManifest, ManifestEntry, Split};
use crate::models::{self, Container};
use crate::{Error, Result};

/// A decoded image with the digest of its file contents.
#[derive(Debug, Clone)]
pub struct LoadedImage {
    pub entry: ManifestEntry,
    pub image: RasterImage,
    pub digest: String,
}

/// Loads every manifest image in parallel. Missing files are reported
/// together.
pub fn load_images(manifest: &DatasetManifest) -> Result<Vec<LoadedImage>> {
    let missing: Vec<String> = manifest
        .entries
        .iter()
        .map(|e| manifest.resolve(e))
        .filter(|p| !p.exists())
        .map(|p| p.display().to_string())
        .collect();
    if !missing.is_empty() {
        let shown: Vec<&str> = missing.iter().take(5).map(String::as_str).collect();
        return Err(Error::MissingArtifact(format!(
            "{} image(s): {}{}",
            missing.len(),
            shown.join(", "),
            if missing.len() > 5 { ", ..." } else { "" }
        )));
    }
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let path = manifest.resolve(e);
            let bytes = std::fs::read(&path).map_err(|err| Error::io(&path, err))?;
            Ok(LoadedImage {
                entry: e.clone(),
                image: load_rgb(&path)?,
                digest: content_digest(&bytes),
            })
        })
        .collect()
}

/// Indices into the image list for each split. Without a val split in the
/// manifest a seeded fraction of train is held out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn make_splits(images: &[LoadedImage], val_fraction: f64, seed: u64) -> Splits {
    let of = |s: Split| -> Vec<usize> { (0..images.len()).filter(|&i| images[i].entry.split == s).collect() };
    let (mut train, mut val, test) = (of(Split::Train), of(Split::Val), of(Split::Test));
    if val.is_empty() && val_fraction > 0.0 && train.len() > 1 {
        let n_val = ((train.len() as f64 * val_fraction).round() as usize).clamp(1, train.len() - 1);
        let mut shuffled = train.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x7661_6c5f_686f_6c64));
        val = shuffled[..n_val].to_vec();
        val.sort_unstable();
        train.retain(|i| val.binary_search(i).is_err());
    }
    Splits { train, val, test }
}

/// Raw local descriptors of an image (RootSIFT on gray, LCS on Lab).
pub fn raw_descriptors(image: &RasterImage, spec: &IfvSpec) -> Result<DescriptorSet> {
    Ok(match spec.descriptor {
        DescriptorKind::Sift => extract_dense_sift(&image.to_grayscale()?, &spec.sampling)?,
        DescriptorKind::Lcs => extract_lcs(&image.to_lab()?, &spec.sampling)?,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct IfvModel {
    pub pca: PcaModel,
    pub gmm: GmmModel,
}

impl IfvModel {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        c.insert(models::PCA, models::encode_pca(&self.pca));
        c.insert(models::GMM, models::encode_gmm(&self.gmm));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        Ok(Self {
            pca: models::decode_pca(c.get(models::PCA)?)?,
            gmm: models::decode_gmm(c.get(models::GMM)?)?,
        })
    }

    pub fn digest(&self) -> String {
        content_digest(&self.to_container().to_bytes())
    }
}

/// Evenly spaced subsample of at most `cap` rows, keeping order.
fn thin(set: &DescriptorSet, cap: usize) -> DescriptorSet {
    if set.len() <= cap {
        return set.clone();
    }
    let idx: Vec<usize> = (0..cap).map(|i| i * set.len() / cap).collect();
    set.select(&idx)
}

/// Fits PCA and the GMM vocabulary on the descriptors of `images`.
pub fn fit_ifv(images: &[&RasterImage], spec: &IfvSpec, seed: u64) -> Result<IfvModel> {
    if images.is_empty() {
        return Err(Error::Core(dvk_core::Error::Empty("training images")));
    }
    let sets: Vec<DescriptorSet> = images.par_iter().map(|img| raw_descriptors(img, spec)).collect::<Result<_>>()?;
    let mut pool = DescriptorSet::empty(spec.raw_dim());
    for s in &sets {
        pool.extend(s)?;
    }
    let pca = fit_pca_subsampled(&pool, spec.pca_dim, spec.pca_samples, seed)?;
    let mut reduced = DescriptorSet::empty(spec.fisher().gmm_dim());
    for (s, img) in sets.iter().zip(images) {
        let p = apply_pca(&pca, s)?;
        let p = match spec.spatial {
            SpatialScheme::Extended => spatially_extend(&p, img.width(), img.height())?,
            _ => p,
        };
        reduced.extend(&p)?;
    }
    let sample = thin(&reduced, spec.gmm_samples);
    let mut opts = GmmOptions::new(spec.k, seed.wrapping_add(1));
    opts.max_iters = spec.gmm_iters;
    opts.tol = spec.gmm_tol;
    let gmm = fit_gmm(&sample, &opts)?;
    log::info!(
        "fitted vocabulary: {} descriptors, PCA {}->{}, K={}",
        pool.len(),
        spec.raw_dim(),
        spec.pca_dim,
        spec.k
    );
    Ok(IfvModel { pca, gmm })
}

pub fn encode_ifv(model: &IfvModel, spec: &IfvSpec, image: &RasterImage) -> Result<FeatureVector> {
    let d = apply_pca(&model.pca, &raw_descriptors(image, spec)?)?;
    Ok(encode_spatial(&model.gmm, &d, &spec.fisher(), image.width(), image.height())?)
}

/// Augmentation samples for shallow encoders: the whole image (and its
/// mirror) without corner crops, else the crop geometry at the original
/// resolution.
pub fn shallow_samples(image: &RasterImage, kind: AugmentKind, crop: usize) -> Result<Vec<RasterImage>> {
    Ok(match kind {
        AugmentKind::None => vec![image.clone()],
        AugmentKind::Flip => vec![image.clone(), image.mirror()],
        AugmentKind::CropFlip => generate_samples(image, kind, crop, false)?,
    })
}

pub fn cnn_samples(image: &RasterImage, kind: AugmentKind, net: &NetworkState<f32>, mean: &[f64]) -> Result<Vec<Tensor<f32>>> {
    let side = net.spec.input.height;
    generate_samples(image, kind, side, true)?
        .iter()
        .map(|s| Tensor::from_image(s, mean).map_err(Into::into))
        .collect()
}

enum Encoder {
    Ifv { spec: IfvSpec, model: IfvModel, digest: String },
    Cnn { spec: CnnSpec, net: Box<NetworkState<f32>>, mean: Vec<f64>, digest: String },
}

/// Per-image, per-sample features of one split.
pub type SampleFeatures = Vec<Vec<FeatureVector>>;

/// A prepared experiment: images loaded, splits fixed, encoders fitted or
/// loaded.
pub struct Run<'a> {
    pub cfg: &'a ExperimentConfig,
    pub images: Vec<LoadedImage>,
    pub splits: Splits,
    pub classes: Vec<String>,
    cache: Option<FeatureCache>,
    encoders: HashMap<String, Encoder>,
}

impl<'a> Run<'a> {
    pub fn prepare(cfg: &'a ExperimentConfig) -> Result<Self> {
        if !cfg.manifest.exists() {
            return Err(Error::MissingArtifact(format!("manifest {}", cfg.manifest.display())));
        }
        let manifest = load_manifest(&cfg.manifest)?;
        let images = load_images(&manifest)?;
        let splits = make_splits(&images, cfg.val_fraction, cfg.seed);
        if splits.train.is_empty() || splits.test.is_empty() {
            return Err(Error::Config("manifest needs train and test images".into()));
        }
        let cache = cfg.cache_dir.clone().map(FeatureCache::new).or_else(FeatureCache::from_env);
        let mut run = Self {
            cfg,
            images,
            splits,
            classes: manifest.classes,
            cache,
            encoders: HashMap::new(),
        };
        run.build_encoders(&cfg.representation)?;
        Ok(run)
    }

    fn build_encoders(&mut self, name: &str) -> Result<()> {
        if self.encoders.contains_key(name) {
            return Ok(());
        }
        let enc = match self.cfg.get(name)? {
            Representation::Stack(parts) => {
                for p in parts {
                    self.build_encoders(p)?;
                }
                return Ok(());
            }
            Representation::Ifv(spec) => {
                let model = self.ifv_model(name, spec)?;
                let digest = model.digest();
                Encoder::Ifv { spec: spec.clone(), model, digest }
            }
            Representation::Cnn(spec) => {
                let path = spec
                    .model
                    .as_ref()
                    .ok_or_else(|| Error::MissingArtifact(format!("representation {name:?} has no model file")))?;
                let container = Container::load(path)?;
                let (net, mean) = models::network::<f32>(&container)?;
                let digest = content_digest(&container.to_bytes());
                Encoder::Cnn { spec: spec.clone(), net: Box::new(net), mean, digest }
            }
        };
        self.encoders.insert(name.to_string(), enc);
        Ok(())
    }

    /// Fits (or loads from the cache) the PCA + GMM of a shallow encoder on
    /// the training images.
    fn ifv_model(&self, name: &str, spec: &IfvSpec) -> Result<IfvModel> {
        let mut parts = vec![self.cfg.echo_representation(name), format!("seed{}", self.cfg.seed)];
        parts.extend(self.splits.train.iter().map(|&i| self.images[i].digest.clone()));
        let key = CacheKey::new(&parts);
        if let Some(cache) = &self.cache {
            let path = cache.root.join("models").join(format!("{}.dvkm", key.0));
            if path.exists() {
                match Container::load(&path).and_then(|c| IfvModel::from_container(&c)) {
                    Ok(m) => return Ok(m),
                    Err(e) => log::warn!("recomputing vocabulary: {e}"),
                }
            }
            let imgs: Vec<&RasterImage> = self.splits.train.iter().map(|&i| &self.images[i].image).collect();
            let model = fit_ifv(&imgs, spec, self.cfg.seed)?;
            model.to_container().save(&path)?;
            return Ok(model);
        }
        let imgs: Vec<&RasterImage> = self.splits.train.iter().map(|&i| &self.images[i].image).collect();
        fit_ifv(&imgs, spec, self.cfg.seed)
    }

    fn leaf_features(&self, name: &str, image: &LoadedImage) -> Result<Vec<FeatureVector>> {
        let enc = &self.encoders[name];
        let kind = self.cfg.augment.kind;
        let (model_digest, geometry) = match enc {
            Encoder::Ifv { digest, .. } => (digest, format!("{kind:?}:{}", self.cfg.crop)),
            Encoder::Cnn { digest, net, .. } => (digest, format!("{kind:?}:{}", net.spec.input.height)),
        };
        let key = CacheKey::new([
            self.cfg.echo_representation(name).as_str(),
            geometry.as_str(),
            model_digest.as_str(),
            image.digest.as_str(),
        ]);
        let expected = kind.sample_count();
        if let Some(cache) = &self.cache {
            if let Some(f) = cache.load(&key, name) {
                if f.len() == expected {
                    return Ok(f);
                }
                log::warn!("cache entry for {} has {} samples, expected {expected}; recomputing", image.entry.path, f.len());
            }
        }
        let feats = match enc {
            Encoder::Ifv { spec, model, .. } => shallow_samples(&image.image, kind, self.cfg.crop)?
                .iter()
                .map(|s| encode_ifv(model, spec, s))
                .collect::<Result<Vec<_>>>()?,
            Encoder::Cnn { spec, net, mean, .. } => {
                let tensors = cnn_samples(&image.image, kind, net, mean)?;
                dvk_cnn::train::extract_features_with(net, &tensors, spec.l2)?
            }
        };
        if let Some(cache) = &self.cache {
            cache.store(&key, &feats)?;
        }
        Ok(feats)
    }

    fn image_features(&self, name: &str, image: &LoadedImage) -> Result<Vec<FeatureVector>> {
        match self.cfg.get(name)? {
            Representation::Stack(parts) => {
                let per_part: Vec<Vec<FeatureVector>> =
                    parts.iter().map(|p| self.image_features(p, image)).collect::<Result<_>>()?;
                (0..per_part[0].len())
                    .map(|s| {
                        let sample: Vec<FeatureVector> = per_part.iter().map(|p| p[s].clone()).collect();
                        Ok(stack_encodings(&sample)?)
                    })
                    .collect()
            }
            _ => self.leaf_features(name, image),
        }
    }

    /// Features of every augmentation sample of the given images, in
    /// order.
    pub fn features(&self, indices: &[usize]) -> Result<SampleFeatures> {
        let name = &self.cfg.representation;
        indices
            .par_iter()
            .map(|&i| self.image_features(name, &self.images[i]))
            .collect()
    }

    pub fn labels(&self, indices: &[usize]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        indices
            .iter()
            .map(|&i| (self.images[i].entry.positive_labels(), self.images[i].entry.difficult_labels()))
            .unzip()
    }
}

/// Expands per-image samples into classifier examples under `fusion`.
/// Returns the examples and the image each belongs to.
pub fn fused_examples(per_image: &SampleFeatures, fusion: Fusion) -> Result<(Vec<FeatureVector>, Vec<usize>)> {
    let mut out = Vec::new();
    let mut owner = Vec::new();
    for (i, samples) in per_image.iter().enumerate() {
        for f in fuse(samples, fusion)? {
            out.push(f);
            owner.push(i);
        }
    }
    Ok((out, owner))
}

/// One row of the results table, mirroring the reference table's columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultsRow {
    pub name: String,
    pub method: String,
    pub spool: String,
    pub aug: String,
    pub train_fusion: String,
    pub test_fusion: String,
    pub dim: usize,
    pub map: Option<f64>,
    pub accuracy: Option<f64>,
    pub top_k_error: Option<(usize, f64)>,
    pub mean_class_accuracy: Option<f64>,
    pub c: f64,
    pub config: String,
}

fn opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6}"))
}

impl ResultsRow {
    pub const HEADER: &'static str =
        "name\tmethod\tspool\taug\ttrain_fusion\ttest_fusion\tdim\tdim_label\tmap\taccuracy\ttop_k\ttop_k_error\tmean_class_accuracy\tc\tconfig";

    pub fn to_tsv(&self) -> String {
        let (k, e) = self.top_k_error.map_or(("-".into(), "-".into()), |(k, e)| (k.to_string(), format!("{e:.6}")));
        [
            self.name.clone(),
            self.method.clone(),
            self.spool.clone(),
            self.aug.clone(),
            self.train_fusion.clone(),
            self.test_fusion.clone(),
            self.dim.to_string(),
            dim_label(self.dim),
            opt(self.map),
            opt(self.accuracy),
            k,
            e,
            opt(self.mean_class_accuracy),
            self.c.to_string(),
            self.config.clone(),
        ]
        .join("\t")
    }
}

fn fusion_tag(f: Fusion) -> &'static str {
    match f {
        Fusion::Samples => "f",
        Fusion::Sum => "s",
        Fusion::Max => "m",
        Fusion::Stack => "t",
    }
}

/// Short method name in the style of the reference table, e.g. `FK IN 512`
/// or `FK+CNN M 2048`.
pub fn method_tag(cfg: &ExperimentConfig, name: &str) -> String {
    match cfg.get(name) {
        Ok(Representation::Ifv(s)) => {
            let mut t = String::from("FK");
            if s.normalisation == dvk_core::fisher::Normalisation::IntraNormSingleSqrt {
                t.push_str(" IN");
            }
            if s.descriptor == DescriptorKind::Lcs {
                t.push_str(" COL");
            }
            if s.k != 256 {
                t.push_str(&format!(" {}", s.k));
            }
            t
        }
        Ok(Representation::Cnn(c)) => match c.arch {
            Some(a) => a.as_str().replace('-', " "),
            None => "CNN".into(),
        },
        Ok(Representation::Stack(parts)) => parts.iter().map(|p| method_tag(cfg, p)).collect::<Vec<_>>().join("+"),
        Err(_) => name.into(),
    }
}

fn spool_tag(cfg: &ExperimentConfig, name: &str) -> Option<&'static str> {
    match cfg.get(name).ok()? {
        Representation::Ifv(s) => match s.spatial {
            SpatialScheme::None => None,
            SpatialScheme::Pyramid => Some("spm"),
            SpatialScheme::Extended => Some("(x,y)"),
        },
        Representation::Cnn(_) => None,
        Representation::Stack(parts) => parts.iter().find_map(|p| spool_tag(cfg, p)),
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub result: EvalResult,
    pub row: ResultsRow,
    pub model: LinearModel,
    /// `(C, validation metric)` for every grid point.
    pub selection: Vec<(f64, f64)>,
}

/// Mean of the raw sample features: scores of the mean equal the mean of
/// the sample scores for a linear model.
fn mean_features(per_image: &SampleFeatures) -> Vec<FeatureVector> {
    per_image
        .iter()
        .map(|s| {
            let mut v = vec![0.0; s[0].dim()];
            for f in s {
                v.iter_mut().zip(&f.values).for_each(|(a, b)| *a += b);
            }
            v.iter_mut().for_each(|a| *a /= s.len() as f64);
            FeatureVector::new(v, "mean")
        })
        .collect()
}

/// Runs the configured pipeline on `run`'s data and evaluates it on test.
pub fn evaluate_run(run: &Run) -> Result<ExperimentOutput> {
    let cfg = run.cfg;
    let aug = cfg.augment;
    let num_classes = run.classes.len();
    let opts = SvmOptions {
        tol: cfg.svm.tol,
        max_epochs: cfg.svm.max_epochs,
        seed: cfg.svm.seed,
    };
    let examples = |idx: &[usize], per_image: &SampleFeatures, fusion: Fusion| -> Result<(Vec<FeatureVector>, Vec<Vec<usize>>, Vec<Vec<usize>>, Vec<usize>)> {
        let (pos, diff) = run.labels(idx);
        if fusion == Fusion::Samples {
            let (x, owner) = fused_examples(per_image, fusion)?;
            let l = owner.iter().map(|&o| pos[o].clone()).collect();
            let d = owner.iter().map(|&o| diff[o].clone()).collect();
            Ok((x, l, d, owner))
        } else {
            let (x, owner) = fused_examples(per_image, fusion)?;
            Ok((x, pos, diff, owner))
        }
    };
    let eval_features = |per_image: &SampleFeatures| -> Result<Vec<FeatureVector>> {
        if aug.test_fusion == Fusion::Samples {
            Ok(mean_features(per_image))
        } else {
            Ok(fused_examples(per_image, aug.test_fusion)?.0)
        }
    };

    let train_f = run.features(&run.splits.train)?;
    let (xt, lt, dt, _) = examples(&run.splits.train, &train_f, aug.train_fusion)?;
    let (c, model, selection) = if run.splits.val.is_empty() || cfg.svm.c_grid.len() == 1 {
        let c = cfg.svm.c_grid[0];
        let model = svm::train_ovr(&TrainingSet { features: &xt, labels: &lt, ignore: Some(&dt) }, num_classes, c, &opts)?;
        (c, model, Vec::new())
    } else {
        let val_f = run.features(&run.splits.val)?;
        let xv = eval_features(&val_f)?;
        let (lv, _) = run.labels(&run.splits.val);
        let train_set = TrainingSet { features: &xt, labels: &lt, ignore: Some(&dt) };
        let (c, model, table) =
            svm::select_c(&train_set, &TrainingSet::new(&xv, &lv), num_classes, &cfg.svm.c_grid, cfg.svm.metric, &opts)?;
        let model = if cfg.retrain {
            let (xa, la, da, _) = examples(&run.splits.val, &val_f, aug.train_fusion)?;
            let mut x = xt.clone();
            x.extend(xa);
            let mut l = lt.clone();
            l.extend(la);
            let mut d = dt.clone();
            d.extend(da);
            svm::train_ovr(&TrainingSet { features: &x, labels: &l, ignore: Some(&d) }, num_classes, c, &opts)?
        } else {
            model
        };
        (c, model, table)
    };

    let test_f = run.features(&run.splits.test)?;
    let (test_pos, _) = run.labels(&run.splits.test);
    let score_rows = if aug.test_fusion == Fusion::Samples {
        let (x, owner) = fused_examples(&test_f, Fusion::Samples)?;
        svm::grouped_scores(&model, &x, &owner)?
    } else {
        svm::scores(&model, &eval_features(&test_f)?)?
    };
    let result = eval::evaluate(&score_rows, &test_pos, &run.classes, cfg.top_k, cfg.ap)?;
    let accuracy = if test_pos.iter().all(|l| !l.is_empty()) {
        let truth: Vec<usize> = test_pos.iter().map(|l| l[0]).collect();
        Some(1.0 - eval::top_k_error(&score_rows, &truth, 1)?)
    } else {
        None
    };

    let dim = if aug.test_fusion == Fusion::Stack {
        test_f[0][0].dim() * test_f[0].len()
    } else {
        test_f[0][0].dim()
    };
    let expected = output_dim(cfg)?;
    if dim != expected {
        return Err(Error::Format(format!("feature dimension {dim} disagrees with the configured {expected}")));
    }
    let aug_tag = match aug.kind {
        AugmentKind::None => "--",
        AugmentKind::Flip => "(F)",
        AugmentKind::CropFlip => "(C)",
    };
    let (trf, tef) = if aug.kind == AugmentKind::None {
        ("-", "-")
    } else {
        (fusion_tag(aug.train_fusion), fusion_tag(aug.test_fusion))
    };
    let row = ResultsRow {
        name: cfg.name.clone(),
        method: method_tag(cfg, &cfg.representation),
        spool: spool_tag(cfg, &cfg.representation).unwrap_or("--").into(),
        aug: aug_tag.into(),
        train_fusion: trf.into(),
        test_fusion: tef.into(),
        dim,
        map: result.map,
        accuracy,
        top_k_error: result.top_k_error,
        mean_class_accuracy: result.mean_class_accuracy,
        c,
        config: cfg.echo(),
    };
    Ok(ExperimentOutput { result, row, model, selection })
}

/// Prepares and runs an experiment.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentOutput> {
    let run = Run::prepare(cfg)?;
    evaluate_run(&run)
}

/// Appends `row` to a TSV results file, writing the header first if the
/// file is new.
pub fn append_row(path: &PathBuf, row: &ResultsRow) -> Result<()> {
    use std::io::Write;
    let new = !path.exists();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if new {
        text.push_str(ResultsRow::HEADER);
        text.push('\n');
    }
    text.push_str(&row.to_tsv());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
