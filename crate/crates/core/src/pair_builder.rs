//! Editing pairs: combinatorial composition of expert edits, frame pairs by
//! embedding similarity, and synthetic text-rendering pairs.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;

use font8x8::UnicodeFonts;
use image::{DynamicImage, GenericImage, GenericImageView, Rgba};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::record_store::{DataRecord, Modality, PairRoleKind, RecordStore};
use crate::vector_engine::cosine;

pub const FONT_ID: &str = "font8x8";
pub const DEFAULT_FRAME_TAU: f64 = 0.85;
pub const DEFAULT_MAX_FRAME_PAIRS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Relation {
    Expert,
    Composed,
    Inverse,
    Frame,
    TextRender,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditPair {
    pub source: String,
    pub target: String,
    pub relation: Relation,
    pub instruction: Option<String>,
    pub group: String,
}

impl EditPair {
    fn new(source: &str, target: &str, relation: Relation, instruction: Option<String>, group: &str) -> Self {
        EditPair {
            source: source.to_string(),
            target: target.to_string(),
            relation,
            instruction,
            group: group.to_string(),
        }
    }
}

/// One edited version of an input image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditInput {
    pub id: String,
    pub instruction: Option<String>,
}

pub fn inverse_instruction(instruction: &str) -> String {
    format!("Revert the edit: {instruction}")
}

pub fn combinatorial_pairs(input: &str, edits: &[String], group: &str) -> Result<Vec<EditPair>> {
    let edits: Vec<EditInput> = edits
        .iter()
        .map(|id| EditInput {
            id: id.clone(),
            instruction: None,
        })
        .collect();
    combinatorial_pairs_with(input, &edits, group)
}

/// All ordered pairs over the input and its edits: input->edit (expert),
/// edit->input (inverse) and edit->edit (composed). N edits give N(N+1)
/// pairs.
pub fn combinatorial_pairs_with(input: &str, edits: &[EditInput], group: &str) -> Result<Vec<EditPair>> {
    let mut seen = BTreeSet::from([input]);
    for e in edits {
        if !seen.insert(&e.id) {
            return Err(Error::DuplicateId(e.id.clone()));
        }
    }
    let mut out = Vec::with_capacity(edits.len() * (edits.len() + 1));
    for e in edits {
        out.push(EditPair::new(
            input,
            &e.id,
            Relation::Expert,
            e.instruction.clone(),
            group,
        ));
    }
    for e in edits {
        let inv = e.instruction.as_deref().map(inverse_instruction);
        out.push(EditPair::new(&e.id, input, Relation::Inverse, inv, group));
    }
    for a in edits {
        for b in edits {
            if a.id == b.id {
                continue;
            }
            let instruction = match (&a.instruction, &b.instruction) {
                (Some(x), Some(y)) => Some(format!("{}; then {}", inverse_instruction(x), y)),
                _ => None,
            };
            out.push(EditPair::new(&a.id, &b.id, Relation::Composed, instruction, group));
        }
    }
    Ok(out)
}

/// Unordered frame pairs with cosine >= `tau`, strongest first, each in
/// both orientations. `max_pairs` caps the number of unordered pairs.
pub fn frame_pairs(
    frames: &[(String, Vec<f64>)],
    tau: f64,
    max_pairs: usize,
    group: &str,
) -> Result<Vec<(EditPair, f64)>> {
    if !(-1.0..=1.0).contains(&tau) {
        return Err(Error::InvalidArgument(format!("tau {tau} outside [-1, 1]")));
    }
    let mut sorted: Vec<&(String, Vec<f64>)> = frames.iter().collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));
    for w in sorted.windows(2) {
        if w[0].0 == w[1].0 {
            return Err(Error::DuplicateId(w[0].0.clone()));
        }
    }
    let mut scored = Vec::new();
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            let sim = cosine(&sorted[i].1, &sorted[j].1)?;
            if sim >= tau {
                scored.push((sim, i, j));
            }
        }
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    scored.truncate(max_pairs);
    let mut out = Vec::with_capacity(scored.len() * 2);
    for (sim, i, j) in scored {
        let (a, b) = (&sorted[i].0, &sorted[j].0);
        out.push((EditPair::new(a, b, Relation::Frame, None, group), sim));
        out.push((EditPair::new(b, a, Relation::Frame, None, group), sim));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TextOp {
    Add,
    Remove,
    /// `old` is drawn into the before image, the spec text into the after.
    Replace,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextRenderSpec {
    pub text: String,
    #[serde(rename = "box")]
    pub bbox: (u32, u32, u32, u32),
    #[serde(default = "default_font")]
    pub font: String,
    /// Glyph height in pixels, rounded down to a multiple of 8 (minimum 8).
    #[serde(default = "default_size")]
    pub size: u32,
    #[serde(default)]
    pub color: [u8; 3],
    pub op: TextOp,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub old: Option<String>,
    #[serde(default = "default_group")]
    pub group: String,
}

fn default_font() -> String {
    FONT_ID.to_string()
}

fn default_size() -> u32 {
    16
}

fn default_group() -> String {
    "text".to_string()
}

impl TextRenderSpec {
    pub fn color_hex(&self) -> String {
        format!("#{:02x}{:02x}{:02x}", self.color[0], self.color[1], self.color[2])
    }

    pub fn validate(&self, width: u32, height: u32) -> Result<()> {
        let (x, y, w, h) = self.bbox;
        let fits = w > 0
            && h > 0
            && x.checked_add(w).is_some_and(|r| r <= width)
            && y.checked_add(h).is_some_and(|b| b <= height);
        if !fits {
            return Err(Error::BadBox(self.bbox));
        }
        if self.font != FONT_ID {
            return Err(Error::BadFont(self.font.clone()));
        }
        if self.text.is_empty() {
            return Err(Error::InvalidArgument("text must not be empty".into()));
        }
        if self.op == TextOp::Replace && self.old.as_deref().unwrap_or("").is_empty() {
            return Err(Error::InvalidArgument("replace needs a non-empty `old` text".into()));
        }
        Ok(())
    }

    pub fn instruction(&self) -> String {
        let (x, y, w, h) = self.bbox;
        let region = format!("({x},{y},{w},{h})");
        match &self.op {
            TextOp::Add => format!(
                "Add the text \"{}\" at region {region} in {}",
                self.text,
                self.color_hex()
            ),
            TextOp::Remove => format!("Remove the text \"{}\" from region {region}", self.text),
            TextOp::Replace => format!(
                "Replace the text \"{}\" with \"{}\" at region {region} in {}",
                self.old.as_deref().unwrap_or(""),
                self.text,
                self.color_hex()
            ),
        }
    }
}

/// Draws `text` left to right from the box corner, wrapping at the box
/// edge. Nothing outside the box is touched; unknown glyphs print as '?'.
pub fn draw_text(img: &mut DynamicImage, text: &str, bbox: (u32, u32, u32, u32), size: u32, color: [u8; 3]) {
    let scale = (size / 8).max(1);
    let cell = 8 * scale;
    let (bx, by, bw, bh) = bbox;
    let (mut cx, mut cy) = (0u32, 0u32);
    for ch in text.chars() {
        if ch == '\n' || (cx > 0 && cx + cell > bw) {
            cx = 0;
            cy += cell;
            if ch == '\n' {
                continue;
            }
        }
        if cy >= bh {
            break;
        }
        let glyph = font8x8::BASIC_FONTS
            .get(ch)
            .or_else(|| font8x8::BASIC_FONTS.get('?'))
            .unwrap_or([0; 8]);
        for (row, bits) in glyph.iter().enumerate() {
            for col in 0..8 {
                if bits & (1 << col) == 0 {
                    continue;
                }
                for dy in 0..scale {
                    for dx in 0..scale {
                        let px = cx + col * scale + dx;
                        let py = cy + row as u32 * scale + dy;
                        if px < bw && py < bh {
                            let alpha = img.get_pixel(bx + px, by + py).0[3];
                            img.put_pixel(bx + px, by + py, Rgba([color[0], color[1], color[2], alpha]));
                        }
                    }
                }
            }
        }
        cx += cell;
    }
}

fn encode_png(img: &DynamicImage) -> Result<Vec<u8>> {
    let normalized = if img.color().has_alpha() {
        DynamicImage::ImageRgba8(img.to_rgba8())
    } else {
        DynamicImage::ImageRgb8(img.to_rgb8())
    };
    let mut out = std::io::Cursor::new(Vec::new());
    normalized
        .write_to(&mut out, image::ImageFormat::Png)
        .map_err(|e| Error::Encode(e.to_string()))?;
    Ok(out.into_inner())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RenderedPair {
    pub before: String,
    pub after: String,
    pub instruction: String,
    pub pair: EditPair,
}

/// Renders the before/after images for `spec` over `base`, stores both and
/// returns their ids. For `remove` the after image is the base itself.
pub fn render_text_pair(store: &mut RecordStore, base: &[u8], spec: &TextRenderSpec) -> Result<RenderedPair> {
    let img = crate::profiler::decode(base)?;
    let (w, h) = img.dimensions();
    spec.validate(w, h)?;
    let with = |text: &str| -> Result<Vec<u8>> {
        let mut canvas = img.clone();
        draw_text(&mut canvas, text, spec.bbox, spec.size, spec.color);
        encode_png(&canvas)
    };
    let (before, after) = match &spec.op {
        TextOp::Add => (base.to_vec(), with(&spec.text)?),
        TextOp::Remove => (with(&spec.text)?, base.to_vec()),
        TextOp::Replace => (with(spec.old.as_deref().unwrap_or(""))?, with(&spec.text)?),
    };
    if before == after {
        return Err(Error::InvalidArgument("rendering changed no pixels".into()));
    }
    let before = store.put_media(&before)?;
    let after = store.put_media(&after)?;
    let instruction = spec.instruction();
    Ok(RenderedPair {
        pair: EditPair::new(
            &before,
            &after,
            Relation::TextRender,
            Some(instruction.clone()),
            &spec.group,
        ),
        before,
        after,
        instruction,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PairConfig {
    pub frame_tau: f64,
    pub max_frame_pairs: usize,
}

impl Default for PairConfig {
    fn default() -> Self {
        PairConfig {
            frame_tau: DEFAULT_FRAME_TAU,
            max_frame_pairs: DEFAULT_MAX_FRAME_PAIRS,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PairBuildSummary {
    pub groups: usize,
    pub pairs: usize,
    pub by_relation: BTreeMap<Relation, usize>,
    /// Groups skipped, with the reason.
    pub skipped: BTreeMap<String, String>,
}

/// Builds pairs from records carrying a pair role. Edit groups need exactly
/// one input; frame groups need image embeddings.
pub fn pairs_from_records<'a>(
    records: impl IntoIterator<Item = &'a DataRecord>,
    cfg: &PairConfig,
) -> (Vec<EditPair>, PairBuildSummary) {
    let mut groups: BTreeMap<&str, Vec<&DataRecord>> = BTreeMap::new();
    for r in records {
        if let Some(role) = &r.pair_role {
            groups.entry(&role.group).or_default().push(r);
        }
    }
    let mut pairs = Vec::new();
    let mut summary = PairBuildSummary::default();
    for (group, members) in groups {
        let role = |r: &DataRecord| r.pair_role.as_ref().map(|p| p.role);
        let frames: Vec<&DataRecord> = members
            .iter()
            .copied()
            .filter(|r| role(r) == Some(PairRoleKind::Frame))
            .collect();
        let inputs: Vec<&DataRecord> = members
            .iter()
            .copied()
            .filter(|r| role(r) == Some(PairRoleKind::Input))
            .collect();
        let edits: Vec<EditInput> = members
            .iter()
            .filter(|r| role(r) == Some(PairRoleKind::Edit))
            .map(|r| EditInput {
                id: r.id.clone(),
                instruction: r.pair_role.as_ref().and_then(|p| p.instruction.clone()),
            })
            .collect();
        let result = if !frames.is_empty() {
            let with_emb: Option<Vec<(String, Vec<f64>)>> = frames
                .iter()
                .map(|r| Some((r.id.clone(), r.embedding(Modality::Image)?.to_vec())))
                .collect();
            match with_emb {
                Some(f) => frame_pairs(&f, cfg.frame_tau, cfg.max_frame_pairs, group)
                    .map(|v| v.into_iter().map(|(p, _)| p).collect()),
                None => Err(Error::InvalidArgument("frame without image embedding".into())),
            }
        } else if inputs.len() == 1 {
            combinatorial_pairs_with(&inputs[0].id, &edits, group)
        } else {
            Err(Error::InvalidArgument(format!("{} inputs in group", inputs.len())))
        };
        match result {
            Ok(mut p) => {
                summary.groups += 1;
                for pair in &p {
                    *summary.by_relation.entry(pair.relation).or_default() += 1;
                }
                pairs.append(&mut p);
            }
            Err(e) => {
                summary.skipped.insert(group.to_string(), e.to_string());
            }
        }
    }
    summary.pairs = pairs.len();
    (pairs, summary)
}

pub fn write_pairs_jsonl(pairs: &[EditPair], out: &mut impl Write) -> std::io::Result<()> {
    for p in pairs {
        serde_json::to_writer(&mut *out, p)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::RgbImage;

    fn ids(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn pair_counts() {
        assert_eq!(combinatorial_pairs("i", &ids(&["a", "b", "c"]), "g").unwrap().len(), 12);
        assert!(combinatorial_pairs("i", &[], "g").unwrap().is_empty());
    }

    #[test]
    fn two_edits_enumerated() {
        let p = combinatorial_pairs("I", &ids(&["A", "B"]), "g").unwrap();
        let got: BTreeSet<(String, String, Relation)> =
            p.into_iter().map(|e| (e.source, e.target, e.relation)).collect();
        let want: BTreeSet<(String, String, Relation)> = [
            ("I", "A", Relation::Expert),
            ("I", "B", Relation::Expert),
            ("A", "I", Relation::Inverse),
            ("B", "I", Relation::Inverse),
            ("A", "B", Relation::Composed),
            ("B", "A", Relation::Composed),
        ]
        .into_iter()
        .map(|(a, b, r)| (a.to_string(), b.to_string(), r))
        .collect();
        assert_eq!(got, want);
    }

    #[test]
    fn duplicates_rejected() {
        assert!(matches!(
            combinatorial_pairs("i", &ids(&["a", "a"]), "g"),
            Err(Error::DuplicateId(_))
        ));
        assert!(matches!(
            combinatorial_pairs("i", &ids(&["i"]), "g"),
            Err(Error::DuplicateId(_))
        ));
    }

    #[test]
    fn composed_instruction_joins_constituents() {
        let edits = vec![
            EditInput {
                id: "a".into(),
                instruction: Some("make it red".into()),
            },
            EditInput {
                id: "b".into(),
                instruction: Some("add a hat".into()),
            },
        ];
        let p = combinatorial_pairs_with("i", &edits, "g").unwrap();
        let ab = p.iter().find(|e| e.source == "a" && e.target == "b").unwrap();
        assert_eq!(
            ab.instruction.as_deref(),
            Some("Revert the edit: make it red; then add a hat")
        );
    }

    #[test]
    fn frame_thresholds() {
        let same = vec![("a".to_string(), vec![1.0, 2.0]), ("b".to_string(), vec![1.0, 2.0])];
        let p = frame_pairs(&same, 0.9, 20, "g").unwrap();
        assert_eq!(p.len(), 2);
        assert!((p[0].1 - 1.0).abs() < 1e-12);
        let ortho = vec![("a".to_string(), vec![1.0, 0.0]), ("b".to_string(), vec![0.0, 1.0])];
        assert!(frame_pairs(&ortho, 0.5, 20, "g").unwrap().is_empty());
    }

    #[test]
    fn four_close_frames() {
        let f: Vec<(String, Vec<f64>)> = (0..4).map(|i| (format!("f{i}"), vec![1.0, 0.01 * i as f64])).collect();
        let p = frame_pairs(&f, 0.9, 20, "g").unwrap();
        assert_eq!(p.len(), 12);
        let mut rev = f.clone();
        rev.reverse();
        assert_eq!(frame_pairs(&rev, 0.9, 20, "g").unwrap(), p);
    }

    fn gray_png(w: u32, h: u32) -> Vec<u8> {
        let img = DynamicImage::ImageRgb8(RgbImage::from_pixel(w, h, image::Rgb([200, 200, 200])));
        encode_png(&img).unwrap()
    }

    fn spec(op: TextOp) -> TextRenderSpec {
        TextRenderSpec {
            text: "SALE".into(),
            bbox: (4, 4, 40, 20),
            font: FONT_ID.into(),
            size: 16,
            color: [255, 0, 0],
            op,
            old: None,
            group: "text".into(),
        }
    }

    #[test]
    fn render_deterministic_and_inverse() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RecordStore::open(dir.path()).unwrap();
        let base = gray_png(64, 32);
        let a = render_text_pair(&mut store, &base, &spec(TextOp::Add)).unwrap();
        let b = render_text_pair(&mut store, &base, &spec(TextOp::Add)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.instruction, "Add the text \"SALE\" at region (4,4,40,20) in #ff0000");
        let r = render_text_pair(&mut store, &base, &spec(TextOp::Remove)).unwrap();
        assert_eq!(r.after, a.before);
        assert_eq!(r.before, a.after);

        let before = crate::profiler::decode(&store.read_media(&a.before).unwrap())
            .unwrap()
            .to_rgba8();
        let after = crate::profiler::decode(&store.read_media(&a.after).unwrap())
            .unwrap()
            .to_rgba8();
        let mut changed = 0;
        for (x, y, p) in after.enumerate_pixels() {
            let inside = (4..44).contains(&x) && (4..24).contains(&y);
            if !inside {
                assert_eq!(p, before.get_pixel(x, y));
            } else if p != before.get_pixel(x, y) {
                changed += 1;
            }
        }
        assert!(changed > 0);
    }

    #[test]
    fn render_errors() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = RecordStore::open(dir.path()).unwrap();
        let base = gray_png(32, 32);
        let mut s = spec(TextOp::Add);
        assert!(matches!(render_text_pair(&mut store, &base, &s), Err(Error::BadBox(_))));
        s.bbox = (0, 0, 16, 16);
        s.font = "comic".into();
        assert!(matches!(
            render_text_pair(&mut store, &base, &s),
            Err(Error::BadFont(_))
        ));
        s.font = FONT_ID.into();
        s.text.clear();
        assert!(matches!(
            render_text_pair(&mut store, &base, &s),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn spec_json() {
        let s: TextRenderSpec =
            serde_json::from_str(r#"{"text":"new","box":[0,0,10,10],"op":"replace","old":"old","color":[0,0,255]}"#)
                .unwrap();
        assert_eq!((s.op, s.old.as_deref()), (TextOp::Replace, Some("old")));
        assert_eq!(s.size, 16);
        assert!(s.instruction().starts_with("Replace the text \"old\" with \"new\""));
    }
}
