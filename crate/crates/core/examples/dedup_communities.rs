//! Plants clusters of near-duplicate embeddings among distractors, builds
//! the similarity graph, detects communities and keeps one record each.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use zcurate::vector_engine::{
    build_knn_graph, deduplicate, detect_communities, modularity, DedupStrategy, EmbeddingIndex,
};

const DIM: usize = 64;

fn main() -> zcurate::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut index = EmbeddingIndex::new(DIM);
    for c in 0..5 {
        let centre: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        for m in 0..4 {
            let v: Vec<f64> = centre.iter().map(|x| x + rng.random_range(-0.02..0.02)).collect();
            index.insert(format!("cluster{c}-{m}"), &v)?;
        }
    }
    for d in 0..20 {
        let v: Vec<f64> = (0..DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        index.insert(format!("single{d:02}"), &v)?;
    }

    let graph = build_knn_graph(&index, 10, 0.9)?;
    let partition = detect_communities(&graph, 1.0, 0);
    println!(
        "{} nodes, {} edges, {} communities, modularity {:.4}",
        graph.node_count(),
        graph.edges.len(),
        partition.count,
        modularity(&graph, &partition, 1.0)
    );
    println!("community sizes: {:?}", partition.size_histogram());
    let result = deduplicate(&graph, &partition, &BTreeMap::new(), &DedupStrategy::LowestId);
    println!("kept {} of {}", result.representatives.len(), index.len());
    for (dropped, rep) in &result.dropped {
        println!("  {dropped} -> {rep}");
    }
    Ok(())
}
