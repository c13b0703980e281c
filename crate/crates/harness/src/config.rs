//! Experiment configuration: INI sections with `key = value` lines.
//!
//! ```ini
//! [experiment]
//! manifest = data/manifest.tsv
//! representation = fk
//! seed = 0
//!
//! [representation.fk]
//! kind = ifv
//! normalisation = intra
//! spatial = xy
//! k = 256
//!
//! [augment]
//! kind = crop_flip
//! train_fusion = samples
//! test_fusion = sum
//! ```
//!
//! Unknown sections and keys are rejected. Every resolved value, defaults
//! included, is echoed by [`ExperimentConfig::echo`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use dvk_cnn::ArchName;
use dvk_core::augment::{AugmentKind, AugmentStrategy, Fusion};
use dvk_core::descriptors::DenseSamplingParams;
use dvk_core::eval::ApVariant;
use dvk_core::fisher::{FisherConfig, Normalisation, PyramidNorm, SpatialScheme};
use dvk_core::svm::{SelectionMetric, DEFAULT_C_GRID};
use ini::Ini;

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DescriptorKind {
    Sift,
    Lcs,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IfvSpec {
    pub descriptor: DescriptorKind,
    pub normalisation: Normalisation,
    pub spatial: SpatialScheme,
    pub pyramid_norm: PyramidNorm,
    pub k: usize,
    pub pca_dim: usize,
    pub sampling: DenseSamplingParams,
    pub pca_samples: usize,
    pub gmm_samples: usize,
    pub gmm_iters: usize,
    pub gmm_tol: f64,
}

impl IfvSpec {
    pub fn raw_dim(&self) -> usize {
        match self.descriptor {
            DescriptorKind::Sift => dvk_core::descriptors::SIFT_DIM,
            DescriptorKind::Lcs => dvk_core::descriptors::LCS_DIM,
        }
    }

    pub fn fisher(&self) -> FisherConfig {
        let mut f = FisherConfig::new(self.normalisation, self.spatial, self.k, self.pca_dim);
        f.pyramid_norm = self.pyramid_norm;
        f
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnSpec {
    /// Model container with a trained network. Required to run; optional
    /// for the dimension calculator when `arch` is given.
    pub model: Option<PathBuf>,
    pub arch: Option<ArchName>,
    pub l2: bool,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Representation {
    Ifv(IfvSpec),
    Cnn(CnnSpec),
    /// Per-sample concatenation of earlier representations.
    Stack(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmSettings {
    pub c_grid: Vec<f64>,
    pub metric: SelectionMetric,
    pub tol: f64,
    pub max_epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub name: String,
    pub manifest: PathBuf,
    pub representation: String,
    /// In definition order.
    pub representations: Vec<(String, Representation)>,
    pub augment: AugmentStrategy,
    /// Crop side for shallow encodings; networks use their input side.
    pub crop: usize,
    pub svm: SvmSettings,
    pub ap: ApVariant,
    pub top_k: usize,
    pub seed: u64,
    /// Fraction of train held out for C selection when the manifest has no
    /// val split.
    pub val_fraction: f64,
    /// Retrain on train + val at the selected C.
    pub retrain: bool,
    pub cache_dir: Option<PathBuf>,
}

struct Section<'a> {
    name: String,
    props: &'a ini::Properties,
    used: Vec<&'static str>,
}

impl<'a> Section<'a> {
    fn get(&mut self, key: &'static str) -> Option<&'a str> {
        self.used.push(key);
        self.props.get(key).map(str::trim)
    }

    fn parse<T: FromStr>(&mut self, key: &'static str, default: T) -> Result<T> {
        match self.get(key) {
            None => Ok(default),
            Some(v) => v
                .parse()
                .map_err(|_| Error::Config(format!("[{}] {key}: cannot parse {v:?}", self.name))),
        }
    }

    fn require(&mut self, key: &'static str) -> Result<&'a str> {
        self.get(key)
            .ok_or_else(|| Error::Config(format!("[{}] missing required key {key:?}", self.name)))
    }

    fn finish(self) -> Result<()> {
        for (k, _) in self.props.iter() {
            if !self.used.contains(&k) {
                return Err(Error::Config(format!("[{}] unknown key {k:?}", self.name)));
            }
        }
        Ok(())
    }
}

fn choice<T: Copy>(section: &str, key: &str, value: &str, options: &[(&str, T)]) -> Result<T> {
    options.iter().find(|(n, _)| *n == value).map(|(_, v)| *v).ok_or_else(|| {
        let names: Vec<&str> = options.iter().map(|(n, _)| *n).collect();
        Error::Config(format!("[{section}] {key}: {value:?} is not one of {}", names.join(", ")))
    })
}

const FUSIONS: [(&str, Fusion); 4] = [
    ("samples", Fusion::Samples),
    ("sum", Fusion::Sum),
    ("max", Fusion::Max),
    ("stack", Fusion::Stack),
];

fn resolve(base: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn ifv(s: &mut Section) -> Result<IfvSpec> {
    let name = s.name.clone();
    let descriptor = choice(&name, "descriptor", s.get("descriptor").unwrap_or("sift"), &[
        ("sift", DescriptorKind::Sift),
        ("lcs", DescriptorKind::Lcs),
    ])?;
    let normalisation = choice(&name, "normalisation", s.get("normalisation").unwrap_or("intra"), &[
        ("classic", Normalisation::ClassicDoubleSqrt),
        ("intra", Normalisation::IntraNormSingleSqrt),
    ])?;
    let spatial = choice(&name, "spatial", s.get("spatial").unwrap_or("none"), &[
        ("none", SpatialScheme::None),
        ("spm", SpatialScheme::Pyramid),
        ("xy", SpatialScheme::Extended),
    ])?;
    let pyramid_norm = choice(&name, "pyramid_norm", s.get("pyramid_norm").unwrap_or("per_cell"), &[
        ("per_cell", PyramidNorm::PerCell),
        ("stack_only", PyramidNorm::StackOnly),
    ])?;
    let d = DenseSamplingParams::default();
    let sampling = DenseSamplingParams {
        stride: s.parse("stride", d.stride)?,
        num_scales: s.parse("scales", d.num_scales)?,
        scale_step: s.parse("scale_step", d.scale_step)?,
        upscale_factor: s.parse("upscale", d.upscale_factor)?,
        base_patch: s.parse("base_patch", d.base_patch)?,
    };
    sampling.validate()?;
    let spec = IfvSpec {
        descriptor,
        normalisation,
        spatial,
        pyramid_norm,
        k: s.parse("k", 256)?,
        pca_dim: s.parse("pca_dim", 80)?,
        sampling,
        pca_samples: s.parse("pca_samples", dvk_core::reduce::DEFAULT_PCA_SAMPLE_CAP)?,
        gmm_samples: s.parse("gmm_samples", 1_000_000)?,
        gmm_iters: s.parse("gmm_iters", 100)?,
        gmm_tol: s.parse("gmm_tol", 1e-5)?,
    };
    if spec.k == 0 || spec.pca_dim == 0 || spec.pca_dim > spec.raw_dim() {
        return Err(Error::Config(format!("[{name}] need k >= 1 and 1 <= pca_dim <= {}", spec.raw_dim())));
    }
    Ok(spec)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses config text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let ini = Ini::load_from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let empty = ini::Properties::new();
        let section = |name: &str| Section {
            name: name.to_string(),
            props: ini.section(Some(name)).unwrap_or(&empty),
            used: Vec::new(),
        };
        for (name, props) in ini.iter() {
            match name {
                None if props.is_empty() => {}
                None => return Err(Error::Config("keys outside any section".into())),
                Some("experiment" | "augment" | "svm" | "eval") => {}
                Some(n) if n.starts_with("representation.") => {}
                Some(n) => return Err(Error::Config(format!("unknown section [{n}]"))),
            }
        }

        let mut e = section("experiment");
        if ini.section(Some("experiment")).is_none() {
            return Err(Error::Config("missing [experiment] section".into()));
        }
        let name = e.get("name").unwrap_or("experiment").to_string();
        let manifest = resolve(base, e.get("manifest").unwrap_or("manifest.tsv"));
        let representation = e.require("representation")?.to_string();
        let seed: u64 = e.require("seed")?.parse().map_err(|_| Error::Config("[experiment] seed must be an integer".into()))?;
        let val_fraction: f64 = e.parse("val_fraction", 0.25)?;
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::Config("[experiment] val_fraction must be in [0, 1)".into()));
        }
        let retrain = e.parse("retrain", true)?;
        let cache_dir = e.get("cache_dir").map(|p| resolve(base, p));
        e.finish()?;

        let mut representations: Vec<(String, Representation)> = Vec::new();
        for (sec, _) in ini.iter() {
            let Some(full) = sec.and_then(|s| s.strip_prefix("representation.")).map(|n| (n, sec.unwrap())) else {
                continue;
            };
            let (rep_name, sec_name) = full;
            let mut s = section(sec_name);
            let kind = s.require("kind")?;
            let rep = match kind {
                "ifv" => Representation::Ifv(ifv(&mut s)?),
                "cnn" => {
                    let model = s.get("model").map(|p| resolve(base, p));
                    let arch = s
                        .get("arch")
                        .map(|a| a.parse::<ArchName>().map_err(|e| Error::Config(e.to_string())))
                        .transpose()?;
                    if model.is_none() && arch.is_none() {
                        return Err(Error::Config(format!("[{sec_name}] needs model or arch")));
                    }
                    Representation::Cnn(CnnSpec {
                        model,
                        arch,
                        l2: s.parse("l2", true)?,
                        batch: s.parse("batch", 32)?,
                    })
                }
                "stack" => {
                    let parts: Vec<String> = s
                        .require("parts")?
                        .split(',')
                        .map(|p| p.trim().to_string())
                        .filter(|p| !p.is_empty())
                        .collect();
                    if parts.len() < 2 {
                        return Err(Error::Config(format!("[{sec_name}] a stack needs at least two parts")));
                    }
                    for p in &parts {
                        if !representations.iter().any(|(n, _)| n == p) {
                            return Err(Error::Config(format!(
                                "[{sec_name}] part {p:?} is not a previously defined representation"
                            )));
                        }
                    }
                    Representation::Stack(parts)
                }
                other => return Err(Error::Config(format!("[{sec_name}] unknown kind {other:?}"))),
            };
            s.finish()?;
            if representations.iter().any(|(n, _)| n == rep_name) {
                return Err(Error::Config(format!("representation {rep_name:?} defined twice")));
            }
            representations.push((rep_name.to_string(), rep));
        }
        if !representations.iter().any(|(n, _)| *n == representation) {
            return Err(Error::Config(format!("[experiment] representation {representation:?} is not defined")));
        }

        let mut a = section("augment");
        let kind = choice("augment", "kind", a.get("kind").unwrap_or("none"), &[
            ("none", AugmentKind::None),
            ("flip", AugmentKind::Flip),
            ("crop_flip", AugmentKind::CropFlip),
        ])?;
        let augment = AugmentStrategy {
            kind,
            train_fusion: choice("augment", "train_fusion", a.get("train_fusion").unwrap_or("samples"), &FUSIONS)?,
            test_fusion: choice("augment", "test_fusion", a.get("test_fusion").unwrap_or("sum"), &FUSIONS)?,
        };
        let crop = a.parse("crop", 224)?;
        a.finish()?;
        if (augment.train_fusion == Fusion::Stack) != (augment.test_fusion == Fusion::Stack) {
            return Err(Error::Config("[augment] stack fusion must be used for both train and test".into()));
        }
        if crop < 2 {
            return Err(Error::Config("[augment] crop must be at least 2".into()));
        }

        let mut s = section("svm");
        let c_grid = match s.get("c_grid") {
            None => DEFAULT_C_GRID.to_vec(),
            Some(g) => g
                .split(',')
                .map(|v| v.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|_| Error::Config("[svm] c_grid must be comma-separated numbers".into()))?,
        };
        if c_grid.is_empty() || c_grid.iter().any(|&c| !(c > 0.0)) {
            return Err(Error::Config("[svm] c_grid values must be positive".into()));
        }
        let svm = SvmSettings {
            c_grid,
            metric: choice("svm", "metric", s.get("metric").unwrap_or("map"), &[
                ("map", SelectionMetric::MeanAp),
                ("accuracy", SelectionMetric::Accuracy),
            ])?,
            tol: s.parse("tol", 1e-4)?,
            max_epochs: s.parse("max_epochs", 2000)?,
            seed: s.parse("seed", seed)?,
        };
        s.finish()?;

        let mut v = section("eval");
        let ap = choice("eval", "ap", v.get("ap").unwrap_or("integral"), &[
            ("integral", ApVariant::Integral),
            ("eleven_point", ApVariant::ElevenPoint),
        ])?;
        let top_k = v.parse("top_k", 5)?;
        v.finish()?;

        Ok(Self {
            name,
            manifest,
            representation,
            representations,
            augment,
            crop,
            svm,
            ap,
            top_k,
            seed,
            val_fraction,
            retrain,
            cache_dir,
        })
    }

    pub fn get(&self, name: &str) -> Result<&Representation> {
        self.representations
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, r)| r)
            .ok_or_else(|| Error::Config(format!("representation {name:?} is not defined")))
    }

    pub fn main_representation(&self) -> &Representation {
        self.get(&self.representation).expect("checked at parse time")
    }

    /// Canonical `key=value` echo of a representation and everything it
    /// depends on.
    pub fn echo_representation(&self, name: &str) -> String {
        match self.get(name) {
            Ok(Representation::Ifv(s)) => format!(
                "{name}:ifv:{:?}:{:?}:{:?}:{:?}:k{}:pca{}:stride{}:scales{}:step{}:up{}:patch{}:pcas{}:gmms{}:iters{}:tol{}",
                s.descriptor,
                s.normalisation,
                s.spatial,
                s.pyramid_norm,
                s.k,
                s.pca_dim,
                s.sampling.stride,
                s.sampling.num_scales,
                s.sampling.scale_step,
                s.sampling.upscale_factor,
                s.sampling.base_patch,
                s.pca_samples,
                s.gmm_samples,
                s.gmm_iters,
                s.gmm_tol
            ),
            Ok(Representation::Cnn(c)) => format!(
                "{name}:cnn:model={}:arch={}:l2={}",
                c.model.as_ref().map_or("-".into(), |p| p.display().to_string()),
                c.arch.map_or("-", |a| a.as_str()),
                c.l2
            ),
            Ok(Representation::Stack(parts)) => {
                let inner: Vec<String> = parts.iter().map(|p| self.echo_representation(p)).collect();
                format!("{name}:stack[{}]", inner.join(","))
            }
            Err(_) => format!("{name}:undefined"),
        }
    }

    /// Every resolved setting that affects results, `;`-separated.
    pub fn echo(&self) -> String {
        let grid: Vec<String> = self.svm.c_grid.iter().map(|c| c.to_string()).collect();
        let fields = BTreeMap::from([
            ("aug", format!("{:?}/{:?}/{:?}", self.augment.kind, self.augment.train_fusion, self.augment.test_fusion)),
            ("crop", self.crop.to_string()),
            ("rep", self.echo_representation(&self.representation)),
            ("seed", self.seed.to_string()),
            ("val_fraction", self.val_fraction.to_string()),
            ("retrain", self.retrain.to_string()),
            ("c_grid", grid.join(",")),
            ("metric", format!("{:?}", self.svm.metric)),
            ("svm_tol", self.svm.tol.to_string()),
            ("svm_epochs", self.svm.max_epochs.to_string()),
            ("svm_seed", self.svm.seed.to_string()),
            ("ap", format!("{:?}", self.ap)),
            ("top_k", self.top_k.to_string()),
        ]);
        fields.iter().map(|(k, v)| format!("{k}={v}")).collect::<Vec<_>>().join(";")
    }
}
