//! Ingests the demo manifest into a fresh store and runs a nearest-neighbour
//! query over the image embeddings.

use zcurate::record_store::{Modality, RecordStore};
use zcurate::vector_engine::build_index;

fn main() -> zcurate::Result<()> {
    let dir = tempfile::tempdir().expect("temp dir");
    let paths = zcurate::fixture::write_fixture(dir.path())?;
    let mut store = RecordStore::open(&paths.data_dir)?;
    let summary = store.ingest_jsonl(&paths.manifest)?;
    println!("ingested {} records, rejected {}", summary.added, summary.rejected);

    let index = build_index(store.records(), Modality::Image)?;
    let probe = store
        .records()
        .find(|r| r.tags.iter().any(|t| t == "car"))
        .expect("a car");
    println!("neighbours of {} ({:?}):", &probe.id[..12], probe.tags);
    for (id, sim) in index.knn(probe.embedding(Modality::Image).expect("embedded"), 5)? {
        let tags = &store.get_record(&id)?.tags;
        println!("  {sim:.4}  {}  {tags:?}", &id[..12]);
    }
    Ok(())
}
