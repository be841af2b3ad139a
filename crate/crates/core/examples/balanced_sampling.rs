//! Compares rarity-weighted and frequency sampling on a 900/100 skewed pool.

use std::collections::BTreeMap;

use zcurate::knowledge_graph::{weighted_sample, ConceptGraph, SampleItem, TagCorpusStats, WeightConfig, WeightModel};

fn main() -> zcurate::Result<()> {
    let docs: Vec<(String, Vec<String>)> = (0..1000)
        .map(|i| {
            (
                format!("r{i:04}"),
                vec![if i < 900 { "cat" } else { "dog" }.to_string()],
            )
        })
        .collect();
    let mut graph = ConceptGraph::new();
    graph.add_concept("c-cat", "cat", 1.0);
    graph.add_concept("c-dog", "dog", 1.0);
    graph.count_tags(docs.iter().map(|(_, t)| t));
    let stats = TagCorpusStats::from_docs(docs.iter().map(|(id, t)| (id, t)));
    let model = WeightModel::new(&graph, &stats, WeightConfig::default())?;
    println!("weight(cat) = {:.6}", model.weight(&["cat".into()]));
    println!("weight(dog) = {:.6}", model.weight(&["dog".into()]));

    for (label, rarity) in [("frequency", false), ("rarity", true)] {
        let items: Vec<SampleItem> = docs
            .iter()
            .map(|(id, tags)| SampleItem {
                id: id.clone(),
                source: "t2i".into(),
                weight: if rarity { model.weight(tags) } else { 1.0 },
            })
            .collect();
        let sample = weighted_sample(&items, 200, 7, &BTreeMap::new())?;
        let dogs = sample.ids.iter().filter(|id| id.as_str() >= "r0900").count();
        println!("{label:9}: {} cat / {dogs} dog", sample.ids.len() - dogs);
    }
    Ok(())
}
