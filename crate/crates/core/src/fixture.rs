//! Deterministic 50-image demo corpus.
//!
//! Layout by index:
//! - 0..30 distinct text-to-image records with a skewed concept mix
//! - 30..36 near-duplicates, two each of records 3, 7 and 11
//! - 36..38 thumbnails below the default minimum resolution
//! - 38..42 an edit group (one input, three edits)
//! - 42..46 a frame group of four similar frames
//! - 46..50 unpaired image-to-image records

use std::collections::BTreeMap;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageFormat, Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::error::{Error, Result};
use crate::record_store::{IngestLine, PairRole, PairRoleKind};

pub const FIXTURE_SIZE: usize = 50;
pub const EMBEDDING_DIM: usize = 16;

/// Concepts of the 30 distinct t2i records, most frequent first.
const T2I_CONCEPTS: [(&str, usize); 8] = [
    ("cat", 12),
    ("dog", 6),
    ("car", 4),
    ("tree", 3),
    ("flower", 2),
    ("boat", 1),
    ("bird", 1),
    ("house", 1),
];

const SIZES: [(u32, u32); 8] = [
    (512, 512),
    (640, 480),
    (480, 640),
    (768, 512),
    (512, 768),
    (320, 320),
    (960, 640),
    (256, 384),
];

const DUPLICATED: [usize; 3] = [3, 7, 11];

#[derive(Debug, Clone)]
pub struct FixturePaths {
    pub root: PathBuf,
    pub manifest: PathBuf,
    pub concepts: PathBuf,
    pub config: PathBuf,
    pub data_dir: PathBuf,
}

fn palette(concept: &str) -> [u8; 3] {
    match concept {
        "cat" => [200, 120, 60],
        "dog" => [150, 100, 50],
        "car" => [40, 60, 200],
        "tree" => [40, 150, 60],
        "flower" => [220, 80, 160],
        "boat" => [30, 110, 180],
        "bird" => [230, 200, 40],
        "house" => [160, 50, 40],
        _ => [120, 120, 120],
    }
}

/// Gradient background, a few filled shapes and light noise.
pub fn draw_scene(seed: u64, width: u32, height: u32, tint: [u8; 3]) -> RgbImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shift: [f64; 3] = [rng.random(), rng.random(), rng.random()];
    let mut img = RgbImage::from_fn(width, height, |x, y| {
        let fx = x as f64 / width as f64;
        let fy = y as f64 / height as f64;
        let c = |i: usize| {
            let base = tint[i] as f64 * (0.55 + 0.45 * fx);
            (base + 60.0 * (fy - shift[i])).clamp(0.0, 255.0) as u8
        };
        Rgb([c(0), c(1), c(2)])
    });
    let shapes = rng.random_range(3..7);
    for _ in 0..shapes {
        let cx = rng.random_range(0..width) as i64;
        let cy = rng.random_range(0..height) as i64;
        let r = rng.random_range(width.min(height) / 12..width.min(height) / 4) as i64;
        let color = Rgb([rng.random(), rng.random(), rng.random()]);
        let disc = rng.random_bool(0.5);
        for y in (cy - r).max(0)..(cy + r).min(height as i64) {
            for x in (cx - r).max(0)..(cx + r).min(width as i64) {
                let (dx, dy) = (x - cx, y - cy);
                if !disc || dx * dx + dy * dy <= r * r {
                    img.put_pixel(x as u32, y as u32, color);
                }
            }
        }
    }
    for p in img.pixels_mut() {
        let n: i16 = rng.random_range(-6..=6);
        for ch in p.0.iter_mut() {
            *ch = (*ch as i16 + n).clamp(0, 255) as u8;
        }
    }
    img
}

pub fn png_bytes(img: &RgbImage) -> Vec<u8> {
    let mut buf = Cursor::new(Vec::new());
    DynamicImage::ImageRgb8(img.clone())
        .write_to(&mut buf, ImageFormat::Png)
        .expect("png encoding to memory");
    buf.into_inner()
}

fn unit(v: Vec<f64>) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / n).collect()
}

fn random_unit(rng: &mut ChaCha8Rng) -> Vec<f64> {
    unit((0..EMBEDDING_DIM).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn blend(a: &[f64], wa: f64, b: &[f64], wb: f64) -> Vec<f64> {
    unit(a.iter().zip(b).map(|(x, y)| wa * x + wb * y).collect())
}

struct Item {
    name: String,
    image: RgbImage,
    line: IngestLine,
}

fn caption(concept: &str, i: usize) -> BTreeMap<String, String> {
    BTreeMap::from([
        (
            "long".to_string(),
            format!("A detailed photograph of a {concept}, scene number {i}, natural light."),
        ),
        ("short".to_string(), format!("a {concept}")),
    ])
}

fn line(source: &str, tags: &[&str], emb: Vec<f64>, captions: BTreeMap<String, String>) -> IngestLine {
    IngestLine {
        source: source.into(),
        captions,
        tags: tags.iter().map(|t| t.to_string()).collect(),
        embeddings: BTreeMap::from([("image".to_string(), emb)]),
        ..Default::default()
    }
}

fn items() -> Vec<Item> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let centroids: BTreeMap<&str, Vec<f64>> = T2I_CONCEPTS.iter().map(|(c, _)| (*c, random_unit(&mut rng))).collect();
    let mut out: Vec<Item> = Vec::with_capacity(FIXTURE_SIZE);

    let concepts: Vec<&str> = T2I_CONCEPTS
        .iter()
        .flat_map(|(c, n)| std::iter::repeat_n(*c, *n))
        .collect();
    for (i, concept) in concepts.iter().enumerate() {
        let (w, h) = SIZES[i % SIZES.len()];
        let emb = blend(&centroids[concept], 0.55, &random_unit(&mut rng), 0.45);
        let mut tags = vec![*concept];
        if i % 3 == 0 {
            tags.push("outdoor");
        }
        if i % 5 == 0 {
            tags.push("photo");
        }
        let mut l = line("t2i", &tags, emb, caption(concept, i));
        if i % 7 == 6 {
            l.captions.clear();
            l.alt_text = Some(format!("{concept} picture"));
        }
        out.push(Item {
            name: format!("t2i-{i:02}"),
            image: draw_scene(1000 + i as u64, w, h, palette(concept)),
            line: l,
        });
    }

    for (k, &src) in DUPLICATED.iter().enumerate() {
        for copy in 0..2 {
            let mut image = out[src].image.clone();
            let x0 = 8 + 8 * copy as u32;
            for y in 8..16 {
                for x in x0..x0 + 8 {
                    let p = image.get_pixel_mut(x, y);
                    p.0[0] = p.0[0].saturating_add(3);
                }
            }
            let jitter: Vec<f64> = (0..EMBEDDING_DIM).map(|_| rng.random_range(-0.01..0.01)).collect();
            let emb = blend(&out[src].line.embeddings["image"], 1.0, &jitter, 1.0);
            let mut l = out[src].line.clone();
            l.embeddings.insert("image".into(), emb);
            out.push(Item {
                name: format!("dup-{k}-{copy}"),
                image,
                line: l,
            });
        }
    }

    for t in 0..2 {
        let emb = random_unit(&mut rng);
        out.push(Item {
            name: format!("thumb-{t}"),
            image: draw_scene(2000 + t, 128, 96, palette("house")),
            line: line("t2i", &["house"], emb, caption("house", 100 + t as usize)),
        });
    }

    let base = draw_scene(3000, 512, 512, palette("car"));
    let input_emb = random_unit(&mut rng);
    let edits = [
        ("make the car red", [220, 30, 30]),
        ("turn it into a night scene", [20, 20, 60]),
        ("add snow on the ground", [240, 240, 250]),
    ];
    let mut l = line("i2i", &["car"], input_emb.clone(), caption("car", 200));
    l.pair = Some(PairRole {
        group: "edit-car".into(),
        role: PairRoleKind::Input,
        instruction: None,
    });
    out.push(Item {
        name: "edit-input".into(),
        image: base.clone(),
        line: l,
    });
    for (e, (instr, color)) in edits.iter().enumerate() {
        let mut img = base.clone();
        for y in 300..400 {
            for x in 100 + 40 * e as u32..300 + 40 * e as u32 {
                let p = img.get_pixel_mut(x, y);
                for (ch, c) in p.0.iter_mut().zip(color) {
                    *ch = ((*ch as u16 + *c as u16) / 2) as u8;
                }
            }
        }
        let emb = blend(&input_emb, 0.8, &random_unit(&mut rng), 0.2);
        let mut l = line("i2i", &["car"], emb, caption("car", 201 + e));
        l.pair = Some(PairRole {
            group: "edit-car".into(),
            role: PairRoleKind::Edit,
            instruction: Some(instr.to_string()),
        });
        out.push(Item {
            name: format!("edit-{e}"),
            image: img,
            line: l,
        });
    }

    let frame_emb = random_unit(&mut rng);
    for f in 0..4u64 {
        let emb = blend(&frame_emb, 1.0, &random_unit(&mut rng), 0.15);
        let mut l = line("i2i", &["bird"], emb, caption("bird", 300 + f as usize));
        l.pair = Some(PairRole {
            group: "frames-bird".into(),
            role: PairRoleKind::Frame,
            instruction: None,
        });
        out.push(Item {
            name: format!("frame-{f}"),
            image: draw_scene(4000 + f, 640, 360, palette("bird")),
            line: l,
        });
    }

    for (j, concept) in ["flower", "boat", "tree", "dog"].iter().enumerate() {
        let emb = blend(&centroids[concept], 0.55, &random_unit(&mut rng), 0.45);
        out.push(Item {
            name: format!("i2i-{j}"),
            image: draw_scene(5000 + j as u64, 448, 448, palette(concept)),
            line: line("i2i", &[concept], emb, caption(concept, 400 + j)),
        });
    }
    debug_assert_eq!(out.len(), FIXTURE_SIZE);
    out
}

/// Concept file: three category roots over the eight object concepts, a
/// hyperlink web between them and one isolated concept.
pub fn concepts_json() -> serde_json::Value {
    let concepts: Vec<_> = [
        "animal",
        "vehicle",
        "plant",
        "cat",
        "dog",
        "bird",
        "car",
        "boat",
        "tree",
        "flower",
        "house",
        "lighthouse",
    ]
    .iter()
    .map(|c| json!({"id": c, "name": c}))
    .collect();
    json!({
        "concepts": concepts,
        "hyperlinks": [
            ["cat", "animal"], ["dog", "animal"], ["bird", "animal"], ["animal", "cat"],
            ["car", "vehicle"], ["boat", "vehicle"], ["vehicle", "car"],
            ["tree", "plant"], ["flower", "plant"], ["plant", "tree"],
            ["house", "car"], ["dog", "cat"], ["cat", "dog"], ["bird", "tree"], ["boat", "house"],
            ["animal", "bird"], ["plant", "flower"], ["vehicle", "boat"]
        ],
        "taxonomy": [
            ["animal", "cat"], ["animal", "dog"], ["animal", "bird"],
            ["vehicle", "car"], ["vehicle", "boat"],
            ["plant", "tree"], ["plant", "flower"]
        ]
    })
}

pub const CONFIG_TOML: &str = r#"data_dir = "data"
jobs = 1

[ingest]
input = "manifest.jsonl"

[dedup]
k = 100
threshold = 0.9

[graph]
concepts = "concepts.json"
prune_quantile = 0.05

[graph.manual_weights]
house = 2.0

[sample]
n = 24
seed = 7

[sample.mix]
t2i = 0.8
i2i = 0.2

[plan]
budget = 65536
rho = 1.25
seed = 7
"#;

/// Writes images, `manifest.jsonl`, `concepts.json` and `zcurate.toml`
/// under `root`. Output bytes depend only on this crate's version.
pub fn write_fixture(root: impl AsRef<Path>) -> Result<FixturePaths> {
    let root = root.as_ref().to_path_buf();
    let images = root.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = String::new();
    for item in items() {
        let rel = format!("images/{}.png", item.name);
        let path = root.join(&rel);
        fs::write(&path, png_bytes(&item.image)).map_err(|e| Error::io(&path, e))?;
        let mut l = item.line;
        l.media_ref = Some(rel);
        manifest.push_str(&serde_json::to_string(&l)?);
        manifest.push('\n');
    }
    let paths = FixturePaths {
        manifest: root.join("manifest.jsonl"),
        concepts: root.join("concepts.json"),
        config: root.join("zcurate.toml"),
        data_dir: root.join("data"),
        root,
    };
    fs::write(&paths.manifest, manifest).map_err(|e| Error::io(&paths.manifest, e))?;
    let concepts = serde_json::to_string_pretty(&concepts_json())? + "\n";
    fs::write(&paths.concepts, concepts).map_err(|e| Error::io(&paths.concepts, e))?;
    fs::write(&paths.config, CONFIG_TOML).map_err(|e| Error::io(&paths.config, e))?;
    Ok(paths)
}
