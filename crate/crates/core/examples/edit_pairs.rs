//! Builds combinatorial edit pairs for one input with three edits, mines
//! frame pairs by embedding similarity and renders a text edit pair.

use zcurate::fixture::{draw_scene, png_bytes};
use zcurate::pair_builder::{combinatorial_pairs, frame_pairs, render_text_pair, TextOp, TextRenderSpec};
use zcurate::record_store::RecordStore;

fn main() -> zcurate::Result<()> {
    let edits = ["recolor", "add-hat", "remove-bg"].map(String::from);
    let pairs = combinatorial_pairs("photo", &edits, "demo")?;
    println!("{} pairs from 1 input + {} edits:", pairs.len(), edits.len());
    for p in &pairs {
        println!("  {:?} {} -> {}", p.relation, p.source, p.target);
    }

    let frames = vec![
        ("frame0".to_string(), vec![1.0, 0.0, 0.1]),
        ("frame1".to_string(), vec![0.95, 0.05, 0.12]),
        ("frame2".to_string(), vec![0.9, 0.2, 0.1]),
        ("frame3".to_string(), vec![0.0, 1.0, 0.0]),
    ];
    for (p, sim) in frame_pairs(&frames, 0.85, 20, "clip")? {
        println!("  frame {} -> {} ({sim:.3})", p.source, p.target);
    }

    let dir = tempfile::tempdir().expect("temp dir");
    let mut store = RecordStore::open(dir.path())?;
    let base = png_bytes(&draw_scene(9, 256, 128, [40, 150, 60]));
    let spec = TextRenderSpec {
        text: "OPEN".into(),
        bbox: (16, 16, 160, 48),
        font: "font8x8".into(),
        size: 24,
        color: [255, 255, 255],
        op: TextOp::Add,
        old: None,
        group: "text".into(),
    };
    let rendered = render_text_pair(&mut store, &base, &spec)?;
    println!(
        "rendered {} -> {}: {}",
        &rendered.before[..12],
        &rendered.after[..12],
        rendered.instruction
    );
    Ok(())
}
