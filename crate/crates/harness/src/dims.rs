//! Representation dimensions and the "Dim" column of the reference results table.

use dvk_core::augment::Fusion;
use dvk_core::fisher::fv_dimension;

use crate::config::{ExperimentConfig, Representation};
use crate::models::{self, Container};
use crate::Result;

/// Per-sample dimension of a named representation.
pub fn representation_dim(cfg: &ExperimentConfig, name: &str) -> Result<usize> {
    Ok(match cfg.get(name)? {
        Representation::Ifv(s) => fv_dimension(&s.fisher(), false),
        Representation::Cnn(c) => match (c.arch, &c.model) {
            (Some(a), _) => dvk_cnn::build_architecture(a).feature_dim()?,
            (None, Some(path)) => {
                let text = Container::load(path)?;
                let arch = std::str::from_utf8(text.get(models::CNN_ARCH)?)
                    .map_err(|_| crate::Error::Format("architecture is not UTF-8".into()))?
                    .to_string();
                models::arch_from_json(&arch)?.feature_dim()?
            }
            (None, None) => unreachable!("rejected at parse time"),
        },
        Representation::Stack(parts) => {
            let mut d = 0;
            for p in parts {
                d += representation_dim(cfg, p)?;
            }
            d
        }
    })
}

/// Dimension of the vectors the classifier sees for the main
/// representation: stack fusion concatenates every augmentation sample.
pub fn output_dim(cfg: &ExperimentConfig) -> Result<usize> {
    let d = representation_dim(cfg, &cfg.representation)?;
    Ok(match cfg.augment.test_fusion {
        Fusion::Stack => d * cfg.augment.kind.sample_count(),
        _ => d,
    })
}

/// Short form used in the table: values of 1000 and above are rounded to
/// the nearest thousand.
pub fn dim_label(d: usize) -> String {
    if d < 1000 {
        d.to_string()
    } else {
        format!("{}K", (d as f64 / 1000.0).round() as usize)
    }
}

#[derive(Debug, Clone)]
pub struct DimRow {
    pub method: &'static str,
    pub spool: &'static str,
    pub aug: &'static str,
    /// The value as printed in the reference table.
    pub printed: &'static str,
    pub config: String,
}

fn fk(norm: &str, spatial: &str, k: usize, descriptor: &str) -> String {
    format!("kind = ifv\nnormalisation = {norm}\nspatial = {spatial}\nk = {k}\npca_dim = 80\ndescriptor = {descriptor}\n")
}

fn experiment(main: &str, reps: &[(&str, String)], aug: &str) -> String {
    let mut s = format!("[experiment]\nrepresentation = {main}\nseed = 0\n\n[augment]\n{aug}\n");
    for (name, body) in reps {
        s.push_str(&format!("\n[representation.{name}]\n{body}"));
    }
    s
}

const CF_FS: &str = "kind = crop_flip\ntrain_fusion = samples\ntest_fusion = sum\n";
const CF_TT: &str = "kind = crop_flip\ntrain_fusion = stack\ntest_fusion = stack\n";
const NO_AUG: &str = "kind = none\n";

/// Configurations behind each "Dim" entry of the reference results table.
pub fn reference_rows() -> Vec<DimRow> {
    let cnn = |arch: &str| format!("kind = cnn\narch = {arch}\n");
    let row = |method, spool, aug, printed, config| DimRow { method, spool, aug, printed, config };
    vec![
        row("FK BL", "spm", "--", "327K", experiment("fk", &[("fk", fk("classic", "spm", 256, "sift"))], NO_AUG)),
        row("FK IN", "spm", "--", "327K", experiment("fk", &[("fk", fk("intra", "spm", 256, "sift"))], NO_AUG)),
        row("FK", "(x,y)", "--", "42K", experiment("fk", &[("fk", fk("classic", "xy", 256, "sift"))], NO_AUG)),
        row("FK IN", "(x,y)", "(C) f s", "42K", experiment("fk", &[("fk", fk("intra", "xy", 256, "sift"))], CF_FS)),
        row("FK IN 512", "(x,y)", "--", "84K", experiment("fk", &[("fk", fk("intra", "xy", 512, "sift"))], NO_AUG)),
        row("FK IN COL 512", "--", "--", "82K", experiment("col", &[("col", fk("intra", "none", 512, "lcs"))], NO_AUG)),
        row(
            "FK IN 512 COL+",
            "(x,y)",
            "--",
            "166K",
            experiment(
                "both",
                &[
                    ("fk", fk("intra", "xy", 512, "sift")),
                    ("col", fk("intra", "none", 512, "lcs")),
                    ("both", "kind = stack\nparts = fk, col\n".into()),
                ],
                NO_AUG,
            ),
        ),
        row("CNN F", "--", "(C) f s", "4K", experiment("cnn", &[("cnn", cnn("CNN-F"))], CF_FS)),
        row("CNN S", "--", "(C) f s", "4K", experiment("cnn", &[("cnn", cnn("CNN-S"))], CF_FS)),
        row("CNN M", "--", "--", "4K", experiment("cnn", &[("cnn", cnn("CNN-M"))], NO_AUG)),
        row("CNN M", "--", "(C) t t", "41K", experiment("cnn", &[("cnn", cnn("CNN-M"))], CF_TT)),
        row("CNN M 2048", "--", "(C) f s", "2K", experiment("cnn", &[("cnn", cnn("CNN-M-2048"))], CF_FS)),
        row("CNN M 1024", "--", "(C) f s", "1K", experiment("cnn", &[("cnn", cnn("CNN-M-1024"))], CF_FS)),
        row("CNN M 128", "--", "(C) f s", "128", experiment("cnn", &[("cnn", cnn("CNN-M-128"))], CF_FS)),
        row(
            "FK+CNN F",
            "(x,y)",
            "(C) f s",
            "88K",
            experiment(
                "both",
                &[
                    ("fk", fk("intra", "xy", 512, "sift")),
                    ("cnn", cnn("CNN-F")),
                    ("both", "kind = stack\nparts = fk, cnn\n".into()),
                ],
                CF_FS,
            ),
        ),
        row(
            "FK+CNN M 2048",
            "(x,y)",
            "(C) f s",
            "86K",
            experiment(
                "both",
                &[
                    ("fk", fk("intra", "xy", 512, "sift")),
                    ("cnn", cnn("CNN-M-2048")),
                    ("both", "kind = stack\nparts = fk, cnn\n".into()),
                ],
                CF_FS,
            ),
        ),
    ]
}

/// Computes every row: `(row, dimension)`.
pub fn reference_dims() -> Result<Vec<(DimRow, usize)>> {
    reference_rows()
        .into_iter()
        .map(|r| {
            let cfg = ExperimentConfig::parse(&r.config, std::path::Path::new("."))?;
            let d = output_dim(&cfg)?;
            Ok((r, d))
        })
        .collect()
}
