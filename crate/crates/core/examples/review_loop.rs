//! Active review loop with a labeler that mislabels one concept. A simulated
//! reviewer rejects the bad labels and feedback raises that concept's weight.

use std::collections::BTreeMap;

use zcurate::curation_service::{HumanVerdict, Labeler, PseudoLabel, ReviewConfig, ReviewQueue};
use zcurate::knowledge_graph::{ConceptGraph, TagCorpusStats, WeightConfig, WeightModel};
use zcurate::record_store::{DataRecord, Status};

struct Mislabeler;

impl Labeler for Mislabeler {
    fn label(&self, record: &DataRecord) -> PseudoLabel {
        let tag = if record.tags[0] == "bird" {
            "cat"
        } else {
            record.tags[0].as_str()
        };
        PseudoLabel {
            caption: format!("a photo of a {tag}"),
            scores: BTreeMap::new(),
        }
    }
}

fn main() -> zcurate::Result<()> {
    let tags = ["cat", "dog", "bird", "fish"];
    let records: Vec<DataRecord> = (0..200)
        .map(|i| DataRecord {
            id: format!("r{i:03}"),
            media_ref: String::new(),
            source: "t2i".into(),
            alt_text: None,
            captions: BTreeMap::new(),
            tags: vec![tags[i % 4].into()],
            embeddings: BTreeMap::new(),
            profile: None,
            pair_role: None,
            status: Status::Kept,
        })
        .collect();
    let mut graph = ConceptGraph::new();
    for t in tags {
        graph.add_concept(&format!("c-{t}"), t, 1.0);
    }
    graph.count_tags(records.iter().map(|r| &r.tags));
    let stats = TagCorpusStats::from_docs(records.iter().map(|r| (&r.id, &r.tags)));
    let mut queue = ReviewQueue::new(ReviewConfig {
        thresholds: BTreeMap::new(),
        ..Default::default()
    });

    for round in 0..3u64 {
        let model = WeightModel::new(&graph, &stats, WeightConfig::default())?;
        println!(
            "round {round}: weight(bird) {:.5}, weight(cat) {:.5}",
            model.weight(&["bird".into()]),
            model.weight(&["cat".into()])
        );
        queue.propose_candidates(&records, &model, 30, round, &Mislabeler)?;
        queue.ai_verify_all()?;
        let (mut approved, mut rejected) = (0, 0);
        while let Some(task) = queue.lease_next("reviewer", 0)? {
            let truth = &records.iter().find(|r| r.id == task.record_id).expect("record").tags[0];
            let verdict = if task.pseudo_label.caption.ends_with(truth.as_str()) {
                approved += 1;
                HumanVerdict::Approve
            } else {
                rejected += 1;
                HumanVerdict::Reject
            };
            queue.submit_human_verdict(&task.task_id, "reviewer", verdict, None, 0)?;
        }
        let delta = queue.apply_feedback(&mut graph)?;
        println!(
            "  approved {approved}, rejected {rejected}, factors {:?}",
            delta.concept_factors
        );
    }
    let stats = queue.stats();
    println!(
        "approval rate {:.3}, rejection by concept {:?}",
        stats.approval_rate, stats.per_concept_rejection
    );
    Ok(())
}
