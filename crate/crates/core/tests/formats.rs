//! Property tests for the two binary file formats: arbitrary valid contents
//! must round-trip exactly, and corrupted prefixes must fail cleanly.

use cdtm_core::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError};
use cdtm_core::data::Dataset;
use cdtm_core::dataset_io::{read_dataset, write_dataset, DatasetIoError};
use cdtm_core::model::{init_params, ModelConfig};
use cdtm_core::schema::{build_schema, DomainConfig, GlobalFieldConfig, GlobalSchema, SchemaConfig};
use proptest::prelude::*;

fn schema_with(vocab: usize, specific: usize, n_rows: usize) -> GlobalSchema {
    build_schema(&SchemaConfig {
        global_fields: vec![GlobalFieldConfig { id: 0, vocab_size: vocab }],
        domains: (0..2)
            .map(|id| DomainConfig {
                id,
                name: format!("d{id}"),
                transferable: vec![0],
                specific_vocab_sizes: vec![specific],
                n_rows,
                base_ctr: 0.3,
                alpha: 1.0,
            })
            .collect(),
    })
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn dataset_round_trips_exactly(
        vocab in 2usize..40,
        specific in 1usize..12,
        rows in proptest::collection::vec((0u32..1000, 0u32..1000, 0u8..2), 1..60),
    ) {
        let schema = schema_with(vocab, specific, rows.len());
        let dataset = Dataset {
            domain_id: 1,
            field_count: 2,
            values: rows
                .iter()
                .flat_map(|&(a, b, _)| [a % vocab as u32, b % specific as u32])
                .collect(),
            labels: rows.iter().map(|&(_, _, l)| l).collect(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cdtmds");
        write_dataset(&schema, &dataset, &path).unwrap();
        let (schema_back, back) = read_dataset(&path).unwrap();
        prop_assert_eq!(back, dataset);
        prop_assert_eq!(schema_back.fingerprint(), schema.fingerprint());
    }

    #[test]
    fn truncated_dataset_never_panics(
        cut in 1usize..200,
    ) {
        let schema = schema_with(8, 4, 20);
        let dataset = Dataset {
            domain_id: 0,
            field_count: 2,
            values: (0..40).map(|i| (i % 4) as u32).collect(),
            labels: vec![0; 20],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.cdtmds");
        write_dataset(&schema, &dataset, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        std::fs::write(&path, &bytes[..keep]).unwrap();
        match read_dataset(&path) {
            Ok((_, back)) => prop_assert_eq!(back, dataset), // cut hit trailing slack only
            Err(DatasetIoError::Truncated { .. })
            | Err(DatasetIoError::BadMagic)
            | Err(DatasetIoError::MalformedHeader(_)) => {}
            Err(other) => prop_assert!(false, "unexpected error {other:?}"),
        }
    }

    #[test]
    fn checkpoint_round_trips_for_any_seed_and_dims(
        seed in 0u64..1000,
        k in 2usize..10,
        dh in 2usize..6,
    ) {
        let schema = schema_with(9, 3, 10);
        let config = ModelConfig {
            embedding_dim: k,
            attention_hidden: dh,
            ..ModelConfig::default()
        };
        let params = init_params(&schema, &config, seed, &[0, 1]).unwrap();
        let ckpt = Checkpoint {
            schema_fingerprint: schema.fingerprint(),
            model: config,
            params,
            train_state: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cdtmck");
        save_checkpoint(&ckpt, &path).unwrap();
        let back = load_checkpoint(&path, Some(&ckpt.schema_fingerprint)).unwrap();
        prop_assert_eq!(back, ckpt);
    }

    #[test]
    fn truncated_checkpoint_never_panics(cut in 1usize..4000) {
        let schema = schema_with(9, 3, 10);
        let config = ModelConfig {
            embedding_dim: 4,
            attention_hidden: 3,
            ..ModelConfig::default()
        };
        let params = init_params(&schema, &config, 1, &[0]).unwrap();
        let ckpt = Checkpoint {
            schema_fingerprint: schema.fingerprint(),
            model: config,
            params,
            train_state: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.cdtmck");
        save_checkpoint(&ckpt, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let keep = bytes.len().saturating_sub(cut);
        std::fs::write(&path, &bytes[..keep]).unwrap();
        match load_checkpoint(&path, None) {
            Ok(back) => prop_assert_eq!(back, ckpt),
            Err(CheckpointError::Truncated { .. })
            | Err(CheckpointError::BadMagic)
            | Err(CheckpointError::MalformedHeader(_)) => {}
            Err(other) => prop_assert!(false, "unexpected error {other:?}"),
        }
    }
}
