//! Profiles a generated image and a few degenerate ones, then applies the
//! default filter rules.

use std::collections::BTreeMap;

use image::{Rgb, RgbImage};
use zcurate::fixture::{draw_scene, png_bytes};
use zcurate::profiler::{apply_filters, profile, FilterRuleSet, ProfileConfig, StubScorer};
use zcurate::record_store::{DataRecord, Status};

fn main() -> zcurate::Result<()> {
    let scorers = StubScorer::standard_set();
    let rules = FilterRuleSet::defaults();
    let noise = RgbImage::from_fn(300, 300, |x, y| {
        let v = ((x * 7919 + y * 104_729) % 251) as u8;
        Rgb([v, v.wrapping_mul(3), v.wrapping_add(91)])
    });
    let samples = [
        ("scene", draw_scene(3, 640, 480, [200, 120, 60])),
        ("flat", RgbImage::from_pixel(512, 512, Rgb([128, 128, 128]))),
        ("noise", noise),
        ("thumb", draw_scene(4, 128, 96, [40, 60, 200])),
    ];
    for (name, img) in samples {
        let record = DataRecord {
            id: name.into(),
            media_ref: String::new(),
            source: "t2i".into(),
            alt_text: None,
            captions: BTreeMap::new(),
            tags: Vec::new(),
            embeddings: BTreeMap::new(),
            profile: None,
            pair_role: None,
            status: Status::Raw,
        };
        let report = profile(&record, &png_bytes(&img), &scorers, &ProfileConfig::default())?;
        let outcome = apply_filters(&report, &rules);
        println!(
            "{name:6} {}x{} phash {:016x} cr {:7.2} border {:.5} bpp {:.3} -> {:?} {:?}",
            report.width,
            report.height,
            report.phash,
            report.compression_ratio,
            report.border_variance,
            report.bpp,
            outcome.decision,
            outcome.flags
        );
    }
    Ok(())
}
