//! Rate-distortion measurement under clean and attacked conditions.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::attack::{measure_eval, run_attack, AttackConfig, AttackKind, Metrics};
use crate::data::DatasetHandle;
use crate::io::write_atomic;
use crate::train::{finetune, TrainConfig};
use crate::{Codec, Error, ImageBatch, Result};

/// Reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        10.0 * (1.0 / mse).log10()
    }
}

/// PSNR in dB of `x_hat` against `x` on the [0, 1] scale.
pub fn compute_psnr(x: &ImageBatch, x_hat: &ImageBatch) -> Result<f64> {
    if x.tensor().shape() != x_hat.tensor().shape() {
        return Err(Error::Shape(format!(
            "psnr of {:?} against {:?}",
            x_hat.tensor().shape(),
            x.tensor().shape()
        )));
    }
    let mse = x
        .tensor()
        .zip_map(x_hat.tensor(), |a, b| (a - b) * (a - b))
        .mean();
    Ok(psnr_from_mse(mse))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Condition {
    Clean,
    PsnrAttack,
    BppAttack,
}

impl Condition {
    pub const ALL: [Condition; 3] = [Condition::Clean, Condition::PsnrAttack, Condition::BppAttack];

    pub fn attack_kind(&self) -> Option<AttackKind> {
        match self {
            Condition::Clean => None,
            Condition::PsnrAttack => Some(AttackKind::Psnr),
            Condition::BppAttack => Some(AttackKind::Bpp),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Condition::Clean => "clean",
            Condition::PsnrAttack => "psnr_attack",
            Condition::BppAttack => "bpp_attack",
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Condition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Condition::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown condition `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RDPoint {
    pub model_tag: String,
    pub condition: Condition,
    pub lambda: f64,
    pub bpp: f64,
    pub psnr: f64,
    /// Digest of the attack config, or `none` for clean points.
    pub attack_digest: String,
}

impl RDPoint {
    pub fn validate(&self) -> Result<()> {
        if !(self.bpp > 0.0 && self.bpp.is_finite()) {
            return Err(Error::InvalidArgument(format!("point bpp {} must be positive", self.bpp)));
        }
        if !self.psnr.is_finite() {
            return Err(Error::InvalidArgument("point psnr must be finite".into()));
        }
        Ok(())
    }
}

/// Points of one model under one condition, sorted by bpp.
#[derive(Clone, Debug, PartialEq)]
pub struct RDCurve {
    points: Vec<RDPoint>,
}

impl RDCurve {
    pub fn new(mut points: Vec<RDPoint>) -> Result<Self> {
        let Some(first) = points.first() else {
            return Ok(Self { points });
        };
        let (tag, cond) = (first.model_tag.clone(), first.condition);
        for p in &points {
            p.validate()?;
            if p.model_tag != tag || p.condition != cond {
                return Err(Error::InvalidArgument(format!(
                    "curve mixes {tag}/{cond} with {}/{}",
                    p.model_tag, p.condition
                )));
            }
        }
        let mut lambdas: Vec<f64> = points.iter().map(|p| p.lambda).collect();
        lambdas.sort_by(f64::total_cmp);
        if lambdas.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!("duplicate lambda in curve {tag}/{cond}")));
        }
        points.sort_by(|a, b| a.bpp.total_cmp(&b.bpp));
        if points.windows(2).any(|w| w[0].bpp >= w[1].bpp) {
            return Err(Error::InvalidArgument(format!("repeated bpp in curve {tag}/{cond}")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[RDPoint] {
        &self.points
    }
}

/// Groups points into curves keyed by `(model_tag, condition)`.
pub fn curves(points: &[RDPoint]) -> Result<Vec<RDCurve>> {
    let mut keys: Vec<(String, Condition)> =
        points.iter().map(|p| (p.model_tag.clone(), p.condition)).collect();
    keys.sort();
    keys.dedup();
    keys.into_iter()
        .map(|(tag, cond)| {
            RDCurve::new(
                points
                    .iter()
                    .filter(|p| p.model_tag == tag && p.condition == cond)
                    .cloned()
                    .collect(),
            )
        })
        .collect()
}

pub fn rd_csv(points: &[RDPoint]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    if points.is_empty() {
        w.write_record(["model_tag", "condition", "lambda", "bpp", "psnr", "attack_digest"])
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    for p in points {
        w.serialize(p).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    }
    w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
}

pub fn write_rd_csv(path: &Path, points: &[RDPoint]) -> Result<()> {
    write_atomic(path, &rd_csv(points)?)
}

pub fn parse_rd_csv(bytes: &[u8]) -> Result<Vec<RDPoint>> {
    let mut r = csv::Reader::from_reader(bytes);
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Data(format!("rd csv: {e}"))))
        .collect()
}

pub fn read_rd_csv(path: &Path) -> Result<Vec<RDPoint>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_rd_csv(&bytes)
}

/// Per-image measurements: clean images as-is, attacked images after an
/// independent attack each (seeded `cfg.seed + index`). PSNR is always
/// taken against the clean image.
pub fn measure_images(
    codec: &Codec,
    images: &[ImageBatch],
    condition: Condition,
    attack: Option<&AttackConfig>,
) -> Result<Vec<Metrics>> {
    let cfg = match (condition.attack_kind(), attack) {
        (None, None) => None,
        (Some(kind), Some(cfg)) => {
            if cfg.kind != kind {
                return Err(Error::InvalidArgument(format!(
                    "{condition} needs a {kind} attack config, got {}",
                    cfg.kind
                )));
            }
            Some(cfg)
        }
        (None, Some(_)) => {
            return Err(Error::InvalidArgument("clean condition takes no attack config".into()))
        }
        (Some(_), None) => {
            return Err(Error::InvalidArgument(format!("{condition} needs an attack config")))
        }
    };
    images
        .iter()
        .enumerate()
        .map(|(i, x)| match cfg {
            None => measure_eval(codec, x, x),
            Some(cfg) => {
                let cfg = cfg.clone().with_seed(cfg.seed.wrapping_add(i as u64));
                Ok(run_attack(x, codec, &cfg)?.attacked)
            }
        })
        .collect()
}

/// Arithmetic-mean bpp and dB-mean PSNR over the image set.
pub fn measure_point(
    codec: &Codec,
    images: &[ImageBatch],
    condition: Condition,
    attack: Option<&AttackConfig>,
    model_tag: &str,
    lambda: f64,
) -> Result<RDPoint> {
    if images.is_empty() {
        return Err(Error::Data("no images to measure".into()));
    }
    let m = measure_images(codec, images, condition, attack)?;
    let n = m.len() as f64;
    let point = RDPoint {
        model_tag: model_tag.to_string(),
        condition,
        lambda,
        bpp: m.iter().map(|v| v.bpp).sum::<f64>() / n,
        psnr: m.iter().map(|v| v.psnr).sum::<f64>() / n,
        attack_digest: attack.map_or_else(|| "none".to_string(), |a| a.digest()),
    };
    point.validate()?;
    Ok(point)
}

/// One condition of a baseline/candidate comparison.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub condition: Condition,
    pub baseline_bpp: f64,
    pub baseline_psnr: f64,
    pub candidate_bpp: f64,
    pub candidate_psnr: f64,
    pub delta_psnr: f64,
    pub delta_bpp: f64,
    /// Relative to the baseline, in percent.
    pub delta_bpp_percent: f64,
    /// Candidate is less robust than the baseline under this attack.
    pub violation: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RobustnessReport {
    pub rows: Vec<ComparisonRow>,
    /// Points whose attacked value is better than their own clean value.
    pub incoherent: Vec<String>,
}

impl RobustnessReport {
    pub fn row(&self, condition: Condition) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.condition == condition)
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

/// Per-condition deltas of `candidate` against `baseline`. Both sides must
/// cover the same conditions.
pub fn robustness_report(baseline: &[RDPoint], candidate: &[RDPoint]) -> Result<RobustnessReport> {
    let mut rows = Vec::new();
    let mut incoherent = Vec::new();
    let mut conds: Vec<Condition> = baseline.iter().map(|p| p.condition).collect();
    conds.sort();
    conds.dedup();
    let mut cand_conds: Vec<Condition> = candidate.iter().map(|p| p.condition).collect();
    cand_conds.sort();
    cand_conds.dedup();
    if conds != cand_conds || conds.len() != baseline.len() || cand_conds.len() != candidate.len() {
        return Err(Error::InvalidArgument(
            "baseline and candidate must have one point per matching condition".into(),
        ));
    }
    for side in [baseline, candidate] {
        let clean = side.iter().find(|p| p.condition == Condition::Clean);
        if let Some(c) = clean {
            for p in side {
                let bad = match p.condition {
                    Condition::PsnrAttack => p.psnr > c.psnr,
                    Condition::BppAttack => p.bpp < c.bpp,
                    Condition::Clean => false,
                };
                if bad {
                    incoherent.push(format!("{}/{}", p.model_tag, p.condition));
                }
            }
        }
    }
    for cond in conds {
        let b = baseline.iter().find(|p| p.condition == cond).unwrap();
        let c = candidate.iter().find(|p| p.condition == cond).unwrap();
        let delta_psnr = c.psnr - b.psnr;
        let delta_bpp = c.bpp - b.bpp;
        rows.push(ComparisonRow {
            condition: cond,
            baseline_bpp: b.bpp,
            baseline_psnr: b.psnr,
            candidate_bpp: c.bpp,
            candidate_psnr: c.psnr,
            delta_psnr,
            delta_bpp,
            delta_bpp_percent: 100.0 * delta_bpp / b.bpp,
            violation: match cond {
                Condition::Clean => false,
                Condition::PsnrAttack => delta_psnr < 0.0,
                Condition::BppAttack => delta_bpp > 0.0,
            },
        });
    }
    Ok(RobustnessReport { rows, incoherent })
}

/// Published full-scale robustness results, verbatim.
pub const PUBLISHED_ROBUSTNESS: &str = "\
model_tag,condition,lambda,bpp,psnr,attack_digest
hyper,clean,0,0.4978,33,published
hyper,psnr_attack,0,0.498,22.3502,published
hyper,bpp_attack,0,0.9161,33.7702,published
ours_wo_stage2,clean,0,0.4322,32.2592,published
ours_wo_stage2,psnr_attack,0,0.4309,25.9039,published
ours_wo_stage2,bpp_attack,0,0.7225,33.1432,published
ours,clean,0,0.4323,32.0802,published
ours,psnr_attack,0,0.4286,28.4039,published
ours,bpp_attack,0,0.6822,32.9933,published
";

/// Published full-scale ablation results, verbatim.
pub const PUBLISHED_ABLATION: &str = "\
model_tag,condition,lambda,bpp,psnr,attack_digest
full,clean,0,0.4323,32.0802,published
full,psnr_attack,0,0.4273,28.6556,published
full,bpp_attack,0,0.6953,33.0194,published
no_smooth,clean,0,0.4358,32.1936,published
no_smooth,psnr_attack,0,0.4328,28.4497,published
no_smooth,bpp_attack,0,0.7214,33.0731,published
no_jacobian,clean,0,0.4355,32.1549,published
no_jacobian,psnr_attack,0,0.4301,28.5293,published
no_jacobian,bpp_attack,0,0.7075,33.031,published
no_bpp_grad,clean,0,0.4332,32.1463,published
no_bpp_grad,psnr_attack,0,0.4279,28.6224,published
no_bpp_grad,bpp_attack,0,0.7083,33.093,published
";

pub fn points_of<'a>(points: &'a [RDPoint], tag: &str) -> Vec<RDPoint> {
    points.iter().filter(|p| p.model_tag == tag).cloned().collect::<Vec<_>>()
}

/// Stage II variants that drop smooth-loss terms.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoSmooth,
    NoJacobian,
    NoBppGrad,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 4] = [
        AblationVariant::Full,
        AblationVariant::NoSmooth,
        AblationVariant::NoJacobian,
        AblationVariant::NoBppGrad,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoSmooth => "no_smooth",
            AblationVariant::NoJacobian => "no_jacobian",
            AblationVariant::NoBppGrad => "no_bpp_grad",
        }
    }

    pub fn apply(&self, cfg: &TrainConfig) -> TrainConfig {
        let mut cfg = cfg.clone();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoSmooth => {
                cfg.smooth_bpp = false;
                cfg.smooth_jacobian = false;
            }
            AblationVariant::NoJacobian => cfg.smooth_jacobian = false,
            AblationVariant::NoBppGrad => cfg.smooth_bpp = false,
        }
        cfg
    }
}

impl std::str::FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub clean: RDPoint,
    pub psnr_attack: RDPoint,
    pub bpp_attack: RDPoint,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn from_points(points: &[RDPoint]) -> Result<Self> {
        let mut tags: Vec<&str> = Vec::new();
        for p in points {
            if !tags.contains(&p.model_tag.as_str()) {
                tags.push(&p.model_tag);
            }
        }
        let rows = tags
            .into_iter()
            .map(|tag| {
                let get = |c: Condition| {
                    points
                        .iter()
                        .find(|p| p.model_tag == tag && p.condition == c)
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("ablation row {tag} lacks {c}")))
                };
                Ok(AblationRow {
                    variant: tag.to_string(),
                    clean: get(Condition::Clean)?,
                    psnr_attack: get(Condition::PsnrAttack)?,
                    bpp_attack: get(Condition::BppAttack)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { rows })
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn points(&self) -> Vec<RDPoint> {
        self.rows
            .iter()
            .flat_map(|r| [r.clean.clone(), r.psnr_attack.clone(), r.bpp_attack.clone()])
            .collect()
    }

    /// Variants whose psnr-attack PSNR beats the `reference` row by more
    /// than `tolerance` dB.
    pub fn ordering_violations(&self, reference: &str, tolerance: f64) -> Vec<String> {
        let Some(best) = self.row(reference) else {
            return vec![format!("missing {reference}")];
        };
        self.rows
            .iter()
            .filter(|r| r.variant != reference && best.psnr_attack.psnr < r.psnr_attack.psnr - tolerance)
            .map(|r| r.variant.clone())
            .collect()
    }

    /// Table layout: one line per variant, bpp/psnr per condition.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "variant",
            "clean_bpp",
            "clean_psnr",
            "psnr_attack_bpp",
            "psnr_attack_psnr",
            "bpp_attack_bpp",
            "bpp_attack_psnr",
        ])
        .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        for r in &self.rows {
            let cells = [
                r.variant.clone(),
                r.clean.bpp.to_string(),
                r.clean.psnr.to_string(),
                r.psnr_attack.bpp.to_string(),
                r.psnr_attack.psnr.to_string(),
                r.bpp_attack.bpp.to_string(),
                r.bpp_attack.psnr.to_string(),
            ];
            w.write_record(&cells).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        }
        w.into_inner().map_err(|e| Error::InvalidArgument(e.to_string()))
    }
}

/// Clean, psnr-attack and bpp-attack points of one codec.
pub fn measure_all(
    codec: &Codec,
    images: &[ImageBatch],
    psnr_attack: &AttackConfig,
    bpp_attack: &AttackConfig,
    model_tag: &str,
    lambda: f64,
) -> Result<[RDPoint; 3]> {
    Ok([
        measure_point(codec, images, Condition::Clean, None, model_tag, lambda)?,
        measure_point(codec, images, Condition::PsnrAttack, Some(psnr_attack), model_tag, lambda)?,
        measure_point(codec, images, Condition::BppAttack, Some(bpp_attack), model_tag, lambda)?,
    ])
}

/// Finetunes every variant from the same weights and seed, then measures it.
#[allow(clippy::too_many_arguments)]
pub fn run_ablation(
    pretrained: &Codec,
    teacher: &Codec,
    ds: &DatasetHandle,
    cfg: &TrainConfig,
    variants: &[AblationVariant],
    images: &[ImageBatch],
    psnr_attack: &AttackConfig,
    bpp_attack: &AttackConfig,
    seed: u64,
) -> Result<AblationTable> {
    let mut points = Vec::new();
    for v in variants {
        let (model, _) = finetune(pretrained, teacher, ds, &v.apply(cfg), seed, |_| {})?;
        points.extend(measure_all(&model, images, psnr_attack, bpp_attack, v.as_str(), cfg.lambda)?);
    }
    AblationTable::from_points(&points)
}
