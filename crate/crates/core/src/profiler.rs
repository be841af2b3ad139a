//! Per-image profiling signals and rule-based filtering.
//!
//! Everything here is a pure function of the media bytes except
//! [`profile_record`], which writes the resulting report and status back
//! through the store.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use image::{DynamicImage, GenericImageView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::record_store::{DataRecord, RecordPatch, RecordStore, Status};

const HASH_GRID: usize = 32;
const HASH_BLOCK: usize = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub width: u32,
    pub height: u32,
    pub file_size: u64,
    pub aspect_ratio: f64,
    #[serde(with = "hex_u64")]
    pub phash: u64,
    pub compression_ratio: f64,
    pub border_variance: f64,
    pub bpp: f64,
    #[serde(default)]
    pub external_scores: BTreeMap<String, f64>,
    #[serde(default)]
    pub flags: BTreeSet<String>,
}

mod hex_u64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &u64, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&format!("{v:016x}"))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<u64, D::Error> {
        let s = String::deserialize(d)?;
        u64::from_str_radix(&s, 16).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metadata {
    pub width: u32,
    pub height: u32,
    pub file_size: u64,
    pub aspect_ratio: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileConfig {
    #[serde(default = "default_border")]
    pub border_width: u32,
    #[serde(default = "default_quality")]
    pub bpp_quality: u8,
}

fn default_border() -> u32 {
    4
}

fn default_quality() -> u8 {
    75
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            border_width: default_border(),
            bpp_quality: default_quality(),
        }
    }
}

pub fn decode(media: &[u8]) -> Result<DynamicImage> {
    image::load_from_memory(media).map_err(|e| Error::Decode(e.to_string()))
}

pub fn extract_metadata(media: &[u8]) -> Result<Metadata> {
    let img = decode(media)?;
    Ok(metadata_of(&img, media.len() as u64))
}

fn metadata_of(img: &DynamicImage, file_size: u64) -> Metadata {
    let (width, height) = img.dimensions();
    Metadata {
        width,
        height,
        file_size,
        aspect_ratio: width as f64 / height as f64,
    }
}

/// Grayscale plane in [0, 1], row-major, using 0.299R + 0.587G + 0.114B.
pub fn luma_plane(img: &DynamicImage) -> (usize, usize, Vec<f64>) {
    let rgb = img.to_rgb8();
    let (w, h) = rgb.dimensions();
    let plane = rgb
        .pixels()
        .map(|p| (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 255.0)
        .collect();
    (w as usize, h as usize, plane)
}

/// Bilinear resampling with pixel-center alignment and edge clamping.
fn resize_bilinear(w: usize, h: usize, src: &[f64], out_w: usize, out_h: usize) -> Vec<f64> {
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let mut out = Vec::with_capacity(out_w * out_h);
    for oy in 0..out_h {
        let fy = ((oy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let ty = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = ((ox as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let tx = fx - x0 as f64;
            let top = src[y0 * w + x0] * (1.0 - tx) + src[y0 * w + x1] * tx;
            let bottom = src[y1 * w + x0] * (1.0 - tx) + src[y1 * w + x1] * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Unnormalized 2D DCT-II of an n×n block, returned row-major as
/// `coef[u * n + v]` with `u` the vertical and `v` the horizontal frequency.
fn dct2(n: usize, block: &[f64]) -> Vec<f64> {
    let basis: Vec<f64> = (0..n)
        .flat_map(|k| (0..n).map(move |i| (PI * (i as f64 + 0.5) * k as f64 / n as f64).cos()))
        .collect();
    let mut rows = vec![0.0; n * n];
    for y in 0..n {
        for v in 0..n {
            let mut acc = 0.0;
            for x in 0..n {
                acc += block[y * n + x] * basis[v * n + x];
            }
            rows[y * n + v] = acc;
        }
    }
    let mut out = vec![0.0; n * n];
    for u in 0..n {
        for v in 0..n {
            let mut acc = 0.0;
            for y in 0..n {
                acc += rows[y * n + v] * basis[u * n + y];
            }
            out[u * n + v] = acc;
        }
    }
    out
}

/// The 64 coefficients the hash thresholds: the low 8×8 block without DC,
/// plus (8, 0). Bit `i` of the hash (MSB first) corresponds to entry `i`.
fn hash_coefficients(coef: &[f64]) -> Vec<f64> {
    let mut picked = Vec::with_capacity(64);
    for u in 0..HASH_BLOCK {
        for v in 0..HASH_BLOCK {
            if (u, v) != (0, 0) {
                picked.push(coef[u * HASH_GRID + v]);
            }
        }
    }
    picked.push(coef[HASH_BLOCK * HASH_GRID]);
    picked
}

pub fn phash_image(img: &DynamicImage) -> u64 {
    let (w, h, plane) = luma_plane(img);
    let small = resize_bilinear(w, h, &plane, HASH_GRID, HASH_GRID);
    let coef = dct2(HASH_GRID, &small);
    let picked = hash_coefficients(&coef);
    let mut sorted = picked.clone();
    sorted.sort_by(f64::total_cmp);
    let median = (sorted[31] + sorted[32]) / 2.0;
    picked.iter().fold(0u64, |acc, &c| (acc << 1) | u64::from(c > median))
}

pub fn phash(media: &[u8]) -> Result<u64> {
    Ok(phash_image(&decode(media)?))
}

pub fn hamming(a: u64, b: u64) -> u32 {
    (a ^ b).count_ones()
}

/// Ideal uncompressed size over actual size.
pub fn compression_ratio(width: u32, height: u32, bit_depth: u32, channels: u32, file_size: u64) -> Result<f64> {
    if file_size == 0 {
        return Err(Error::InvalidArgument("file_size must be positive".into()));
    }
    if width == 0 || height == 0 || bit_depth == 0 || channels == 0 {
        return Err(Error::InvalidArgument(
            "dimensions, bit depth and channels must be positive".into(),
        ));
    }
    let ideal = width as f64 * height as f64 * channels as f64 * bit_depth as f64 / 8.0;
    Ok(ideal / file_size as f64)
}

fn color_layout(img: &DynamicImage) -> (u32, u32) {
    let color = img.color();
    let channels = color.channel_count() as u32;
    let depth = color.bits_per_pixel() as u32 / channels;
    (depth, channels)
}

pub fn border_variance_image(img: &DynamicImage, border: u32) -> Result<f64> {
    let (w, h) = img.dimensions();
    if border == 0 || w < 2 * border || h < 2 * border {
        return Err(Error::TooSmall {
            width: w,
            height: h,
            border,
        });
    }
    let (w, h, plane) = luma_plane(img);
    let b = border as usize;
    // Welford accumulation over the ring
    let (mut n, mut mean, mut m2) = (0u64, 0.0f64, 0.0f64);
    for y in 0..h {
        for x in 0..w {
            if x < b || x >= w - b || y < b || y >= h - b {
                let v = plane[y * w + x];
                n += 1;
                let d = v - mean;
                mean += d / n as f64;
                m2 += d * (v - mean);
            }
        }
    }
    Ok((m2 / n as f64).max(0.0))
}

pub fn border_variance(media: &[u8], border: u32) -> Result<f64> {
    border_variance_image(&decode(media)?, border)
}

fn check_quality(quality: u8) -> Result<()> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidArgument(format!(
            "jpeg quality {quality} outside 1..=100"
        )));
    }
    Ok(())
}

/// Size in bytes of a baseline JPEG re-encode of the RGB pixels.
pub fn jpeg_size(img: &DynamicImage, quality: u8) -> Result<usize> {
    check_quality(quality)?;
    let rgb = img.to_rgb8();
    let mut buf = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .map_err(|e| Error::Encode(e.to_string()))?;
    Ok(buf.len())
}

pub fn bpp_proxy_image(img: &DynamicImage, quality: u8) -> Result<f64> {
    let bytes = jpeg_size(img, quality)?;
    let (w, h) = img.dimensions();
    Ok(8.0 * bytes as f64 / (w as f64 * h as f64))
}

pub fn bpp_proxy(media: &[u8], quality: u8) -> Result<f64> {
    check_quality(quality)?;
    bpp_proxy_image(&decode(media)?, quality)
}

/// A learned quality model, reduced to its interface.
pub trait Scorer: Send + Sync {
    fn name(&self) -> &str;
    /// Score in [0, 1].
    fn score(&self, record: &DataRecord, image: &DynamicImage) -> f64;
}

/// Deterministic stand-in: a pseudo-score derived from the scorer name and
/// the record id.
#[derive(Debug, Clone)]
pub struct StubScorer {
    name: String,
}

impl StubScorer {
    pub fn new(name: impl Into<String>) -> Self {
        StubScorer { name: name.into() }
    }

    /// The four scorer slots the filtering rules expect.
    pub fn standard_set() -> Vec<Box<dyn Scorer>> {
        ["aesthetic", "nsfw", "aigc", "text_image_alignment"]
            .into_iter()
            .map(|n| Box::new(StubScorer::new(n)) as Box<dyn Scorer>)
            .collect()
    }
}

impl Scorer for StubScorer {
    fn name(&self) -> &str {
        &self.name
    }

    fn score(&self, record: &DataRecord, _image: &DynamicImage) -> f64 {
        let digest = Sha256::new()
            .chain_update(self.name.as_bytes())
            .chain_update(b":")
            .chain_update(record.id.as_bytes())
            .finalize();
        let word = u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"));
        (word >> 11) as f64 / (1u64 << 53) as f64
    }
}

/// Computes every intrinsic signal plus one entry per scorer.
pub fn profile(
    record: &DataRecord,
    media: &[u8],
    scorers: &[Box<dyn Scorer>],
    cfg: &ProfileConfig,
) -> Result<ProfileReport> {
    let img = decode(media)?;
    let meta = metadata_of(&img, media.len() as u64);
    let (depth, channels) = color_layout(&img);
    let border = cfg.border_width.min(meta.width / 2).min(meta.height / 2).max(1);
    let external_scores = scorers
        .iter()
        .map(|s| (s.name().to_string(), s.score(record, &img).clamp(0.0, 1.0)))
        .collect();
    Ok(ProfileReport {
        width: meta.width,
        height: meta.height,
        file_size: meta.file_size,
        aspect_ratio: meta.aspect_ratio,
        phash: phash_image(&img),
        compression_ratio: compression_ratio(meta.width, meta.height, depth, channels, meta.file_size)?,
        border_variance: border_variance_image(&img, border)?,
        bpp: bpp_proxy_image(&img, cfg.bpp_quality)?,
        external_scores,
        flags: BTreeSet::new(),
    })
}

/// Profiles a raw record in place. Decode failures drop the record with
/// reason `decode`; the new status is returned either way.
pub fn profile_record(
    store: &mut RecordStore,
    id: &str,
    scorers: &[Box<dyn Scorer>],
    cfg: &ProfileConfig,
) -> Result<Status> {
    let record = store.get_record(id)?;
    if record.status != Status::Raw {
        return Err(Error::BadTransition {
            from: record.status.to_string(),
            to: Status::Profiled.to_string(),
        });
    }
    let media = store.read_media(id)?;
    match profile(&record, &media, scorers, cfg) {
        Ok(report) => {
            let patch = RecordPatch {
                status: Some(Status::Profiled),
                profile: Some(report),
                ..Default::default()
            };
            Ok(store.update_record(id, patch)?.status)
        }
        Err(Error::Decode(_)) | Err(Error::TooSmall { .. }) => Ok(store
            .update_record(id, RecordPatch::status(Status::Dropped("decode".into())))?
            .status),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareOp {
    #[serde(rename = "<")]
    Lt,
    #[serde(rename = "<=", alias = "≤")]
    Le,
    #[serde(rename = ">")]
    Gt,
    #[serde(rename = ">=", alias = "≥")]
    Ge,
}

impl CompareOp {
    pub fn eval(self, lhs: f64, rhs: f64) -> bool {
        match self {
            CompareOp::Lt => lhs < rhs,
            CompareOp::Le => lhs <= rhs,
            CompareOp::Gt => lhs > rhs,
            CompareOp::Ge => lhs >= rhs,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RuleAction {
    Drop,
    Flag,
}

/// A rule fires when `field op threshold` holds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterRule {
    pub name: String,
    pub field: String,
    pub op: CompareOp,
    pub threshold: f64,
    pub action: RuleAction,
}

impl FilterRule {
    pub fn new(name: &str, field: &str, op: CompareOp, threshold: f64, action: RuleAction) -> Self {
        FilterRule {
            name: name.into(),
            field: field.into(),
            op,
            threshold,
            action,
        }
    }

    /// `None` when the report has no value for the field (e.g. a scorer
    /// that was not registered); such rules never fire.
    fn fires(&self, report: &ProfileReport) -> Option<bool> {
        let value = field_value(report, &self.field)?;
        Some(self.op.eval(value, self.threshold))
    }
}

pub fn field_value(report: &ProfileReport, field: &str) -> Option<f64> {
    Some(match field {
        "width" => report.width as f64,
        "height" => report.height as f64,
        "min_side" => report.width.min(report.height) as f64,
        "file_size" => report.file_size as f64,
        "aspect_ratio" => report.aspect_ratio,
        "compression_ratio" => report.compression_ratio,
        "border_variance" => report.border_variance,
        "bpp" => report.bpp,
        other => *report.external_scores.get(other)?,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterRuleSet {
    #[serde(default)]
    pub rules: Vec<FilterRule>,
}

impl FilterRuleSet {
    pub fn new(rules: Vec<FilterRule>) -> Result<Self> {
        let set = FilterRuleSet { rules };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for (i, rule) in self.rules.iter().enumerate() {
            if !seen.insert(rule.name.as_str()) {
                return Err(Error::Config {
                    path: format!("rules[{i}].name"),
                    message: format!("duplicate rule name {:?}", rule.name),
                });
            }
            if !rule.threshold.is_finite() {
                return Err(Error::Config {
                    path: format!("rules[{i}].threshold"),
                    message: "threshold must be finite".into(),
                });
            }
        }
        Ok(())
    }

    /// Shipped defaults: drop below 256 px on the short side, flag
    /// over-compression and low-entropy borders.
    pub fn defaults() -> Self {
        FilterRuleSet {
            rules: vec![
                FilterRule::new("min_resolution", "min_side", CompareOp::Lt, 256.0, RuleAction::Drop),
                FilterRule::new(
                    "over_compression",
                    "compression_ratio",
                    CompareOp::Gt,
                    120.0,
                    RuleAction::Flag,
                ),
                FilterRule::new("low_entropy", "border_variance", CompareOp::Lt, 1e-4, RuleAction::Flag),
            ],
        }
    }

    /// Loads `.json` or `.toml` (`[[rules]]` tables).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let set: FilterRuleSet = if path.extension().is_some_and(|e| e == "json") {
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?
        } else {
            let de = toml::Deserializer::new(&text);
            serde_path_to_error::deserialize(de).map_err(|e| Error::Config {
                path: e.path().to_string(),
                message: e.inner().to_string(),
            })?
        };
        set.validate()?;
        Ok(set)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Keep,
    Drop(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterOutcome {
    pub decision: Decision,
    pub flags: BTreeSet<String>,
}

/// Rules run in order: the first drop rule that fires names the reason,
/// every firing flag rule is collected.
pub fn apply_filters(report: &ProfileReport, rules: &FilterRuleSet) -> FilterOutcome {
    let mut decision = Decision::Keep;
    let mut flags = BTreeSet::new();
    for rule in &rules.rules {
        if rule.fires(report) != Some(true) {
            continue;
        }
        match rule.action {
            RuleAction::Flag => {
                flags.insert(rule.name.clone());
            }
            RuleAction::Drop => {
                if decision == Decision::Keep {
                    decision = Decision::Drop(rule.name.clone());
                }
            }
        }
    }
    FilterOutcome { decision, flags }
}
