//! Independent oracles shared by the integration and acceptance suites.
//! Nothing here calls into the engine code paths it checks.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Modularity by the double sum over node pairs of the dense adjacency.
pub fn dense_modularity(n: usize, edges: &[(usize, usize, f64)], labels: &[usize], gamma: f64) -> f64 {
    let mut a = vec![vec![0.0; n]; n];
    for &(i, j, w) in edges {
        let w = w.max(0.0);
        a[i][j] += w;
        a[j][i] += w;
    }
    let k: Vec<f64> = a.iter().map(|row| row.iter().sum()).collect();
    let two_m: f64 = k.iter().sum();
    if two_m == 0.0 {
        return 0.0;
    }
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if labels[i] == labels[j] {
                q += a[i][j] - gamma * k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Every set partition of `0..n` as a restricted growth string.
pub fn set_partitions(n: usize) -> Vec<Vec<usize>> {
    fn rec(i: usize, n: usize, cur: &mut Vec<usize>, max: usize, out: &mut Vec<Vec<usize>>) {
        if i == n {
            out.push(cur.clone());
            return;
        }
        for c in 0..=max + 1 {
            if i == 0 && c > 0 {
                break;
            }
            cur.push(c);
            rec(i + 1, n, cur, if i == 0 { 0 } else { max.max(c) }, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    if n == 0 {
        return vec![vec![]];
    }
    rec(0, n, &mut Vec::new(), 0, &mut out);
    out
}

pub fn brute_force_max_modularity(n: usize, edges: &[(usize, usize, f64)], gamma: f64) -> (f64, Vec<usize>) {
    let mut best = (f64::NEG_INFINITY, Vec::new());
    for p in set_partitions(n) {
        let q = dense_modularity(n, edges, &p, gamma);
        if q > best.0 {
            best = (q, p);
        }
    }
    best
}

/// Connected random graph: a random spanning tree plus extra edges.
pub fn random_connected_graph(seed: u64, n: usize) -> Vec<(usize, usize, f64)> {
    let mut r = rng(seed);
    let weighted = r.random_bool(0.5);
    let w = |r: &mut ChaCha8Rng| if weighted { r.random_range(0.1..1.0) } else { 1.0 };
    let mut edges = Vec::new();
    let mut have = std::collections::BTreeSet::new();
    for v in 1..n {
        let u = r.random_range(0..v);
        have.insert((u, v));
        let weight = w(&mut r);
        edges.push((u, v, weight));
    }
    let p = r.random_range(0.1..0.6);
    for i in 0..n {
        for j in i + 1..n {
            if !have.contains(&(i, j)) && r.random_bool(p) {
                let weight = w(&mut r);
                edges.push((i, j, weight));
            }
        }
    }
    edges
}

/// Top-k by full sort on independently normalized vectors.
pub fn brute_force_knn(ids: &[String], vectors: &[Vec<f64>], query: &[f64], k: usize) -> Vec<(String, f64)> {
    let unit = |v: &[f64]| {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| x / norm).collect::<Vec<f64>>()
    };
    let q = unit(query);
    let mut all: Vec<(String, f64)> = ids
        .iter()
        .zip(vectors)
        .map(|(id, v)| {
            let u = unit(v);
            (id.clone(), q.iter().zip(&u).map(|(a, b)| a * b).sum())
        })
        .collect();
    all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    all.truncate(k);
    all
}

/// PageRank by dense Google-matrix power iteration.
pub fn dense_pagerank(n: usize, edges: &[(usize, usize)], damping: f64) -> Vec<f64> {
    let mut m = vec![vec![0.0; n]; n];
    let mut out = vec![0usize; n];
    let mut seen = std::collections::BTreeSet::new();
    for &(s, d) in edges {
        if seen.insert((s, d)) {
            out[s] += 1;
        }
    }
    for &(s, d) in &seen {
        m[d][s] = 1.0 / out[s] as f64;
    }
    for s in 0..n {
        if out[s] == 0 {
            for row in m.iter_mut() {
                row[s] = 1.0 / n as f64;
            }
        }
    }
    let mut g = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            g[i][j] = damping * m[i][j] + (1.0 - damping) / n as f64;
        }
    }
    let mut x = vec![1.0 / n as f64; n];
    for _ in 0..10_000 {
        let y: Vec<f64> = (0..n).map(|i| (0..n).map(|j| g[i][j] * x[j]).sum()).collect();
        let delta: f64 = y.iter().zip(&x).map(|(a, b)| (a - b).abs()).sum();
        x = y;
        if delta < 1e-15 {
            break;
        }
    }
    x
}

/// BM25 term score written out directly.
pub fn bm25_formula(n_docs: f64, df: f64, tf: f64, doc_len: f64, avgdl: f64, k1: f64, b: f64) -> f64 {
    let idf = (1.0 + (n_docs - df + 0.5) / (df + 0.5)).ln();
    idf * (tf * (k1 + 1.0)) / (tf + k1 * (1.0 - b + b * doc_len / avgdl))
}

pub fn kl_to_uniform(counts: &[f64]) -> f64 {
    let total: f64 = counts.iter().sum();
    let u = 1.0 / counts.len() as f64;
    counts
        .iter()
        .filter(|&&c| c > 0.0)
        .map(|&c| {
            let p = c / total;
            p * (p / u).ln()
        })
        .sum()
}

/// Output files of a full pipeline run, relative to the data dir.
pub const PIPELINE_OUTPUTS: [&str; 10] = [
    "records.jsonl",
    "dedup.json",
    "index/communities.json",
    "index/knn_graph.edges",
    "graph/concepts.json",
    "graph/weights.json",
    "sample.json",
    "curated.jsonl",
    "pairs.jsonl",
    "plan.json",
];

pub const PIPELINE_STAGES: [&str; 7] = ["ingest", "profile", "dedup", "graph", "sample", "pairs", "plan"];

pub fn sha256_file(path: &std::path::Path) -> String {
    use sha2::{Digest, Sha256};
    let bytes = std::fs::read(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    hex::encode(Sha256::digest(bytes))
}

/// Writes the fixture under `root`, runs every stage through the binary and returns output hashes keyed by relative path.
pub fn run_fixture_pipeline(root: &std::path::Path) -> std::collections::BTreeMap<String, String> {
    let paths = zcurate::fixture::write_fixture(root).expect("fixture");
    let config = paths.config.to_str().unwrap().to_string();
    for stage in PIPELINE_STAGES {
        let out = std::process::Command::new(env!("CARGO_BIN_EXE_zcurate"))
            .args(["--config", &config, "--jobs", "1", stage])
            .output()
            .expect("spawn zcurate");
        assert!(
            out.status.success(),
            "stage {stage} failed: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    PIPELINE_OUTPUTS
        .iter()
        .map(|rel| (rel.to_string(), sha256_file(&paths.data_dir.join(rel))))
        .collect()
}

pub fn golden_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/pipeline.json")
}

/// Compares against the checked-in golden hashes. With ZCURATE_BLESS=1 the
/// golden file is rewritten instead.
pub fn check_golden(hashes: &std::collections::BTreeMap<String, String>) -> Result<(), String> {
    let path = golden_path();
    if std::env::var("ZCURATE_BLESS").is_ok_and(|v| v == "1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(hashes).unwrap() + "\n").unwrap();
        return Ok(());
    }
    let text = std::fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let golden: std::collections::BTreeMap<String, String> = serde_json::from_str(&text).unwrap();
    let diffs: Vec<&String> = golden
        .keys()
        .chain(hashes.keys())
        .filter(|k| golden.get(*k) != hashes.get(*k))
        .collect();
    if diffs.is_empty() {
        Ok(())
    } else {
        Err(format!("outputs differ from golden: {diffs:?}"))
    }
}

/// The fixture's PNG files, sorted by name.
pub fn fixture_images(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    zcurate::fixture::write_fixture(root).expect("fixture");
    let mut out: Vec<(String, Vec<u8>)> = std::fs::read_dir(root.join("images"))
        .unwrap()
        .map(|e| {
            let path = e.unwrap().path();
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            (name, std::fs::read(&path).unwrap())
        })
        .collect();
    out.sort();
    out
}

pub fn jpeg_bytes(media: &[u8], quality: u8) -> Vec<u8> {
    let rgb = image::load_from_memory(media).unwrap().to_rgb8();
    let mut buf = Vec::new();
    image::codecs::jpeg::JpegEncoder::new_with_quality(&mut buf, quality)
        .encode_image(&rgb)
        .unwrap();
    buf
}

pub fn negative_png(media: &[u8]) -> Vec<u8> {
    let mut rgb = image::load_from_memory(media).unwrap().to_rgb8();
    for p in rgb.pixels_mut() {
        for c in p.0.iter_mut() {
            *c = 255 - *c;
        }
    }
    zcurate::fixture::png_bytes(&rgb)
}

/// Reads a golden JSON map, or writes it when ZCURATE_BLESS=1.
pub fn golden_map<V>(
    name: &str,
    actual: &std::collections::BTreeMap<String, V>,
) -> std::collections::BTreeMap<String, V>
where
    V: serde::Serialize + serde::de::DeserializeOwned + Clone,
{
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name);
    if std::env::var("ZCURATE_BLESS").is_ok_and(|v| v == "1") {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        std::fs::write(&path, serde_json::to_string_pretty(actual).unwrap() + "\n").unwrap();
        return actual.clone();
    }
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    serde_json::from_str(&text).unwrap()
}

/// Largest pHash distance between a fixture image and its JPEG q90
/// re-encode, observed over the 50-image fixture corpus.
pub const PHASH_Q90_PINNED_MAX: u32 = 2;

pub fn uniform_png(w: u32, h: u32, rgb: [u8; 3]) -> Vec<u8> {
    zcurate::fixture::png_bytes(&image::RgbImage::from_pixel(w, h, image::Rgb(rgb)))
}

pub fn noise_png(seed: u64, w: u32, h: u32) -> Vec<u8> {
    let mut r = rng(seed);
    zcurate::fixture::png_bytes(&image::RgbImage::from_fn(w, h, |_, _| {
        image::Rgb([r.random(), r.random(), r.random()])
    }))
}

/// Checks fixture pHashes and bpp values against the goldens. Returns
/// a description of every mismatch.
pub fn profiler_golden_mismatches(images: &[(String, Vec<u8>)]) -> Vec<String> {
    let mut hashes = std::collections::BTreeMap::new();
    let mut bpp = std::collections::BTreeMap::new();
    for (name, bytes) in images {
        hashes.insert(
            name.clone(),
            format!("{:016x}", zcurate::profiler::phash(bytes).unwrap()),
        );
        bpp.insert(name.clone(), zcurate::profiler::bpp_proxy(bytes, 75).unwrap());
    }
    let mut bad = Vec::new();
    let golden_hashes = golden_map("phash.json", &hashes);
    if golden_hashes != hashes {
        bad.push("phash differs from golden".to_string());
    }
    let golden_bpp = golden_map("bpp.json", &bpp);
    // serde_json may read a float back one ulp off
    let close = golden_bpp.len() == bpp.len()
        && bpp
            .iter()
            .all(|(k, v)| golden_bpp.get(k).is_some_and(|g| (g - v).abs() <= 1e-12 * v.abs()));
    if !close {
        bad.push("bpp differs from golden".to_string());
    }
    bad
}
