//! Line-delimited dataset files: a manifest record followed by one record
//! per QA item, grouped by cluster with the base item first.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Cluster, Dataset, ItemKind, QAItem, Result, Splits, Vocab, WorldConfig, WorldError};

pub const FORMAT_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    seed: u64,
    config: WorldConfig,
    vocab: Vocab,
    splits: Splits,
    cluster_count: usize,
    item_count: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Record {
    Manifest(Manifest),
    Item(QAItem),
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    size: usize,
    tokens: Vec<String>,
}

/// Writes `dataset.jsonl` and `vocab.json` into `dir`.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let item_count = dataset.clusters.iter().map(|c| c.items().count()).sum();
    let manifest = Record::Manifest(Manifest {
        version: FORMAT_VERSION,
        seed: dataset.seed,
        config: dataset.config.clone(),
        vocab: dataset.vocab.clone(),
        splits: dataset.splits.clone(),
        cluster_count: dataset.clusters.len(),
        item_count,
    });
    let mut w = BufWriter::new(fs::File::create(dir.join(DATASET_FILE))?);
    let line = |w: &mut BufWriter<fs::File>, r: &Record| -> Result<()> {
        serde_json::to_writer(&mut *w, r).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
        Ok(())
    };
    line(&mut w, &manifest)?;
    for item in dataset.clusters.iter().flat_map(Cluster::items) {
        line(&mut w, &Record::Item(item.clone()))?;
    }
    w.flush()?;

    let vocab = VocabFile {
        size: dataset.vocab.size(),
        tokens: dataset.vocab.names(),
    };
    let mut bytes = serde_json::to_vec_pretty(&vocab).map_err(std::io::Error::from)?;
    bytes.push(b'\n');
    fs::write(dir.join(VOCAB_FILE), bytes)?;
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(DATASET_FILE);
    let shown = path.display().to_string();
    let parse_err = |line: usize, detail: String| WorldError::Parse {
        path: shown.clone(),
        line,
        detail,
    };
    let reader = BufReader::new(fs::File::open(&path)?);
    let mut manifest = None::<Manifest>;
    let mut clusters: Vec<Cluster> = Vec::new();
    let mut items = 0usize;
    for (i, line) in reader.lines().enumerate() {
        let n = i + 1;
        let line = line?;
        let record: Record =
            serde_json::from_str(&line).map_err(|e| parse_err(n, e.to_string()))?;
        match record {
            Record::Manifest(m) => {
                if n != 1 {
                    return Err(parse_err(n, "manifest must be the first record".into()));
                }
                if m.version != FORMAT_VERSION {
                    return Err(WorldError::Manifest(format!(
                        "{shown}: format version {} is not supported (expected {FORMAT_VERSION})",
                        m.version
                    )));
                }
                manifest = Some(m);
            }
            Record::Item(item) => {
                if manifest.is_none() {
                    return Err(parse_err(n, "item before manifest".into()));
                }
                items += 1;
                if item.kind == ItemKind::Base {
                    clusters.push(Cluster {
                        id: item.cluster_id.clone(),
                        base: item,
                        paraphrases: Vec::new(),
                        multihops: Vec::new(),
                        same_answers: Vec::new(),
                    });
                    continue;
                }
                let cluster = match clusters.last_mut() {
                    Some(c) if c.id == item.cluster_id => c,
                    _ => {
                        return Err(parse_err(
                            n,
                            format!("item {} is not preceded by its base item", item.id),
                        ))
                    }
                };
                match item.kind {
                    ItemKind::Paraphrased => cluster.paraphrases.push(item),
                    ItemKind::Multihop => cluster.multihops.push(item),
                    ItemKind::SameAnswer => cluster.same_answers.push(item),
                    ItemKind::Base => unreachable!("handled above"),
                }
            }
        }
    }
    let m = manifest.ok_or_else(|| parse_err(1, "missing manifest".into()))?;
    if m.cluster_count != clusters.len() || m.item_count != items {
        return Err(WorldError::Manifest(format!(
            "{shown}: manifest promises {} clusters / {} items, file holds {} / {}",
            m.cluster_count,
            m.item_count,
            clusters.len(),
            items
        )));
    }

    let vocab_path = dir.join(VOCAB_FILE);
    let vocab_file: VocabFile = serde_json::from_slice(&fs::read(&vocab_path)?)
        .map_err(|e| WorldError::Manifest(format!("{}: {e}", vocab_path.display())))?;
    if vocab_file.size != m.vocab.size() || vocab_file.tokens != m.vocab.names() {
        return Err(WorldError::Manifest(format!(
            "{} does not match the dataset manifest",
            vocab_path.display()
        )));
    }
    Ok(Dataset {
        seed: m.seed,
        config: m.config,
        vocab: m.vocab,
        clusters,
        splits: m.splits,
    })
}
