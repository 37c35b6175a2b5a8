use retrack::data::{generate, generate_dataset, load_dataset, GeneratorConfig};
use retrack::geometry::{similarity, SimilarityConfig};

fn small() -> GeneratorConfig {
    GeneratorConfig {
        train: 64,
        val: 64,
        test: 128,
        seed: 9,
        ..GeneratorConfig::default()
    }
}

#[test]
fn hard_negatives_sit_closer_to_the_reference() {
    let ds = generate(&small()).unwrap();
    let cfg = SimilarityConfig::default();
    let test = &ds.test;
    let mut harder = 0;
    for (i, s) in test.samples.iter().enumerate() {
        let hard = test.hard_negatives[i]
            .iter()
            .map(|n| similarity(&s.f_r, n, &cfg).unwrap())
            .sum::<f64>()
            / test.hard_negatives[i].len() as f64;
        let global = test
            .samples
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(_, o)| similarity(&s.f_r, &o.f_t, &cfg).unwrap())
            .sum::<f64>()
            / (test.len() - 1) as f64;
        if hard > global {
            harder += 1;
        }
    }
    assert_eq!(harder, test.len(), "{harder}/{} queries", test.len());
}

#[test]
fn written_dataset_reloads_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (ds, manifest) = generate_dataset(&small(), dir.path()).unwrap();
    let back = load_dataset(dir.path()).unwrap();
    assert_eq!(back.manifest, manifest);
    assert_eq!(back.content_hash(), ds.content_hash());
    assert_eq!(back.test.hard_negatives, ds.test.hard_negatives);
}

#[test]
fn corrupted_data_file_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    generate_dataset(&small(), dir.path()).unwrap();
    let path = dir.path().join(retrack::data::DATA_FILE);
    let mut bytes = std::fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x40;
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(load_dataset(dir.path()), Err(retrack::Error::Corrupt { .. })));
}
