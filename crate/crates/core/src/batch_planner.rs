//! Token estimates, resolution mapping and length-bucketed batch plans.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record_store::DataRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TokenConfig {
    pub spatial_factor: u32,
    pub text_token_estimate: u64,
    pub target_area: u64,
    pub granularity: u32,
}

impl Default for TokenConfig {
    fn default() -> Self {
        TokenConfig {
            spatial_factor: 16,
            text_token_estimate: 128,
            target_area: 1024 * 1024,
            granularity: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleShape {
    pub id: String,
    pub width: u32,
    pub height: u32,
    pub text_tokens: u64,
    pub image_tokens: u64,
    pub total_tokens: u64,
}

/// `ceil(w/f) * ceil(h/f)` image tokens plus the text estimate.
pub fn estimate_tokens(id: &str, width: u32, height: u32, spatial_factor: u32, text_tokens: u64) -> SampleShape {
    let f = spatial_factor.max(1);
    let image_tokens = width.div_ceil(f) as u64 * height.div_ceil(f) as u64;
    SampleShape {
        id: id.to_string(),
        width,
        height,
        text_tokens,
        image_tokens,
        total_tokens: image_tokens + text_tokens,
    }
}

/// Scales to roughly `target_area` pixels, snapping each side to a multiple
/// of `granularity` (at least one step).
pub fn map_resolution(width: u32, height: u32, target_area: u64, granularity: u32) -> (u32, u32) {
    let g = granularity.max(1) as f64;
    let s = (target_area as f64 / (width as f64 * height as f64)).sqrt();
    let snap = |side: u32| (((side as f64 * s / g).round()).max(1.0) * g) as u32;
    (snap(width), snap(height))
}

/// Text tokens for a record: about four bytes per token of its longest
/// caption, or the configured estimate when it has none.
pub fn text_tokens_for(record: &DataRecord, cfg: &TokenConfig) -> u64 {
    record
        .captions
        .values()
        .map(|c| c.len() as u64)
        .max()
        .map(|bytes| bytes.div_ceil(4))
        .unwrap_or(cfg.text_token_estimate)
}

/// Shape of a profiled record at its mapped training resolution.
pub fn shape_for_record(record: &DataRecord, cfg: &TokenConfig) -> Option<SampleShape> {
    let p = record.profile.as_ref()?;
    let (w, h) = map_resolution(p.width, p.height, cfg.target_area, cfg.granularity);
    Some(estimate_tokens(
        &record.id,
        w,
        h,
        cfg.spatial_factor,
        text_tokens_for(record, cfg),
    ))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub ids: Vec<String>,
    pub max_tokens: u64,
    /// Real token count per sample, parallel to `ids`.
    pub tokens: Vec<u64>,
}

impl Batch {
    pub fn padded_token_sum(&self) -> u64 {
        self.ids.len() as u64 * self.max_tokens
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Batch>,
    pub budget: u64,
}

impl BatchPlan {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Ascending greedy bucketing. A sample joins the open batch while the
/// padded sum stays within `budget`, the batch's max/min token ratio stays
/// within `rho`, and the batch is no larger than the one before it; that
/// last rule keeps batch size non-increasing in sequence length. Batch order
/// is then shuffled by `seed`.
pub fn plan_batches(shapes: &[SampleShape], budget: u64, rho: f64, seed: u64) -> Result<BatchPlan> {
    if !(rho >= 1.0) {
        return Err(Error::InvalidArgument(format!("bucket tolerance {rho} must be >= 1")));
    }
    if let Some(s) = shapes.iter().find(|s| s.total_tokens > budget) {
        return Err(Error::OverBudget {
            id: s.id.clone(),
            tokens: s.total_tokens,
            budget,
        });
    }
    let mut order: Vec<&SampleShape> = shapes.iter().collect();
    order.sort_by(|a, b| a.total_tokens.cmp(&b.total_tokens).then_with(|| a.id.cmp(&b.id)));

    let mut batches: Vec<Batch> = Vec::new();
    let mut open: Option<Batch> = None;
    let mut size_cap = usize::MAX;
    for s in order {
        let t = s.total_tokens;
        if let Some(b) = open.as_mut() {
            let min = b.tokens[0];
            let fits = (b.ids.len() as u64 + 1) * t.max(b.max_tokens) <= budget
                && t as f64 <= rho * min.max(1) as f64
                && b.ids.len() < size_cap;
            if fits {
                b.ids.push(s.id.clone());
                b.tokens.push(t);
                b.max_tokens = b.max_tokens.max(t);
                continue;
            }
            let done = open.take().expect("open batch");
            size_cap = done.ids.len();
            batches.push(done);
        }
        open = Some(Batch {
            ids: vec![s.id.clone()],
            max_tokens: t,
            tokens: vec![t],
        });
    }
    batches.extend(open);
    batches.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(BatchPlan { batches, budget })
}

/// Fraction of padded tokens that carry no data. Zero for an empty plan.
pub fn padding_waste(plan: &BatchPlan) -> f64 {
    let padded: u64 = plan.batches.iter().map(Batch::padded_token_sum).sum();
    if padded == 0 {
        return 0.0;
    }
    let real: u64 = plan.batches.iter().flat_map(|b| &b.tokens).sum();
    1.0 - real as f64 / padded as f64
}

/// Baseline: random order, fixed batch size, no budget.
pub fn fixed_size_plan(shapes: &[SampleShape], batch_size: usize, seed: u64) -> BatchPlan {
    let mut order: Vec<&SampleShape> = shapes.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let batches = order
        .chunks(batch_size.max(1))
        .map(|chunk| Batch {
            ids: chunk.iter().map(|s| s.id.clone()).collect(),
            max_tokens: chunk.iter().map(|s| s.total_tokens).max().unwrap_or(0),
            tokens: chunk.iter().map(|s| s.total_tokens).collect(),
        })
        .collect();
    BatchPlan { batches, budget: 0 }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn shape(id: &str, total: u64) -> SampleShape {
        SampleShape {
            id: id.into(),
            width: 0,
            height: 0,
            text_tokens: 0,
            image_tokens: total,
            total_tokens: total,
        }
    }

    #[test]
    fn token_arithmetic() {
        assert_eq!(estimate_tokens("a", 1024, 1024, 16, 0).total_tokens, 4096);
        assert_eq!(estimate_tokens("a", 512, 256, 16, 77).total_tokens, 589);
        assert_eq!(estimate_tokens("a", 1, 1, 16, 5).total_tokens, 6);
    }

    #[test]
    fn resolution_mapping() {
        assert_eq!(map_resolution(1024, 1024, 1024 * 1024, 32), (1024, 1024));
        assert_eq!(map_resolution(2000, 1000, 1024 * 1024, 32), (1440, 736));
        // 32 * 1.81 rounds to two steps; the floor only engages further out
        assert_eq!(map_resolution(10000, 32, 1024 * 1024, 32).1, 64);
        assert_eq!(map_resolution(1_000_000, 10, 1024 * 1024, 32).1, 32);
    }

    #[test]
    fn exact_fill_plan() {
        let mut shapes = Vec::new();
        for (n, t) in [(2, 4096), (4, 2048), (8, 1024)] {
            for i in 0..n {
                shapes.push(shape(&format!("{t}-{i}"), t));
            }
        }
        let plan = plan_batches(&shapes, 8192, 1.0, 0).unwrap();
        let mut sizes: Vec<usize> = plan.batches.iter().map(|b| b.ids.len()).collect();
        sizes.sort();
        assert_eq!(sizes, [2, 4, 8]);
        assert_eq!(padding_waste(&plan), 0.0);
    }

    #[test]
    fn budget_edges() {
        let plan = plan_batches(&[shape("a", 8192)], 8192, 1.25, 0).unwrap();
        assert_eq!(plan.batches.len(), 1);
        match plan_batches(&[shape("big", 9000)], 8192, 1.25, 0) {
            Err(Error::OverBudget { id, .. }) => assert_eq!(id, "big"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn waste_arithmetic() {
        let plan = BatchPlan {
            batches: vec![Batch {
                ids: vec!["a".into(), "b".into()],
                max_tokens: 100,
                tokens: vec![100, 50],
            }],
            budget: 200,
        };
        assert_eq!(padding_waste(&plan), 0.25);
    }

    #[test]
    fn seed_only_reorders_batches() {
        let shapes: Vec<SampleShape> = (0..40).map(|i| shape(&format!("s{i:02}"), 100 + i * 37)).collect();
        let a = plan_batches(&shapes, 4000, 1.25, 1).unwrap();
        let b = plan_batches(&shapes, 4000, 1.25, 2).unwrap();
        let mut x = a.batches.clone();
        let mut y = b.batches.clone();
        x.sort_by_key(|b| b.max_tokens);
        y.sort_by_key(|b| b.max_tokens);
        assert_eq!(x, y);
        assert_eq!(a, plan_batches(&shapes, 4000, 1.25, 1).unwrap());
    }
}
